import sys
import time
import torch
from vischain.config import parse_config_text
from vischain.training import build_model, encoder_warmup, train_step, evaluate
from vischain.decoder import AdamW

BASE = """
encoder.experts = 8:32:1:4,4:16:1:2
encoder.grid = 8
encoder.projector_hidden = 64
decoder.dim = 48
decoder.n_layers = 2
decoder.n_heads = 4
decoder.mlp_hidden = 96
decoder.max_seq_len = 200
task.templates = color-at-relative-location
task.shapes = square,circle,triangle,cross
task.decoy_fraction = 1.0
task.distractor_range = 3,5
task.snap_px = 16
task.target_area_range = 0.0156,0.0157
train.batch_size = 16
train.steps = 1000
train.lr = 0.0015
train.encoder_warmup_steps = 400
train.dataset_size = 20000
seed = 1
"""

variants = sys.argv[1:] or ["roi-reencode:0.2", "roi-reencode:0.8", "roi-resample:0.8"]
for spec in variants:
    kind, ratio = spec.split(":")
    cfg = parse_config_text(
        BASE + f"strategy.kind = {kind}\nstrategy.expansion_ratio = {ratio}\n"
    )
    model, vocab = build_model(cfg)
    t0 = time.monotonic()
    encoder_warmup(model, cfg)
    opt = AdamW(sorted(model.named_parameters()))
    strat = cfg.strategy.build()
    for step in range(cfg.train.steps):
        loss, lr, _ = train_step(model, opt, cfg, vocab, strat, step)
        if step % 400 == 399 or step == cfg.train.steps - 1:
            rep = evaluate(model, cfg, vocab, strat, n_samples=60)
            print(
                f"{spec} step {step} loss {loss:.4f} acc {rep.answer_acc:.2f} "
                f"acc@.5 {rep.acc_at_0_5:.2f} fail {rep.grounding_failures} "
                f"[{time.monotonic()-t0:.0f}s]",
                flush=True,
            )
