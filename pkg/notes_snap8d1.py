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
task.snap_px = 8
task.target_area_range = 0.0156,0.0157
train.batch_size = 16
train.steps = 5000
train.lr = 0.0015
train.encoder_warmup_steps = 400
train.dataset_size = 20000
seed = 1
"""

kinds = sys.argv[1:] or ["roi-resample", "implicit-attention", "box-guidance"]
for kind in kinds:
    cfg = parse_config_text(BASE + f"strategy.kind = {kind}\n")
    model, vocab = build_model(cfg)
    t0 = time.monotonic()
    encoder_warmup(model, cfg)
    print(f"{kind} warmup done [{time.monotonic()-t0:.0f}s]", flush=True)
    opt = AdamW(sorted(model.named_parameters()))
    strat = cfg.strategy.build()
    for step in range(cfg.train.steps):
        loss, lr, _ = train_step(model, opt, cfg, vocab, strat, step)
        if step % 500 == 499 or step == cfg.train.steps - 1:
            rep = evaluate(model, cfg, vocab, strat, n_samples=60)
            print(
                f"{kind} step {step} loss {loss:.4f} acc {rep.answer_acc:.2f} "
                f"acc@.5 {rep.acc_at_0_5:.2f} miou {rep.mean_iou:.2f} "
                f"fail {rep.grounding_failures} [{time.monotonic()-t0:.0f}s]",
                flush=True,
            )
