import time
from dataclasses import replace

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
task.decoy_fraction = 0.5
task.distractor_range = 3,5
task.snap_px = 16
task.target_area_range = 0.0156,0.0157
strategy.kind = roi-resample
train.batch_size = 16
train.steps = 800
train.lr = 0.0015
train.encoder_warmup_steps = 200
train.dataset_size = 128
seed = 1
"""

cfg = parse_config_text(BASE)
model, vocab = build_model(cfg)
t0 = time.monotonic()
encoder_warmup(model, cfg)
opt = AdamW(sorted(model.named_parameters()))
strat = cfg.strategy.build()
eval_cfg = replace(cfg, train=replace(cfg.train, eval_seed_offset=0))
for step in range(cfg.train.steps):
    loss, lr, _ = train_step(model, opt, cfg, vocab, strat, step)
    if step % 200 == 199:
        rep = evaluate(model, eval_cfg, vocab, strat, n_samples=cfg.train.dataset_size)
        print(
            f"overfit step {step} loss {loss:.4f} acc {rep.answer_acc:.3f} "
            f"acc@.5 {rep.acc_at_0_5:.3f} fail {rep.grounding_failures} "
            f"[{time.monotonic()-t0:.0f}s]",
            flush=True,
        )
