import time

from vischain.config import parse_config_text
from vischain.training import ablate, mean_by_label

PROFILE = """
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
train.steps = 5000
train.lr = 0.0015
train.encoder_warmup_steps = 400
train.dataset_size = 20000
"""

cfg = parse_config_text(PROFILE)
variants = [
    ("roi-resample", {"strategy.kind": "roi-resample"}),
    ("box-guidance", {"strategy.kind": "box-guidance"}),
    ("implicit-attention", {"strategy.kind": "implicit-attention"}),
]
t0 = time.monotonic()
rows = ablate(cfg, "/tmp/ablate6", variants, seeds=[1, 2, 3], log=None)
for row in rows:
    print(
        f"{row['label']} seed {row['seed']} acc {row['answer_acc']:.3f} "
        f"acc@.5 {row['acc_at_0_5']:.3f}",
        flush=True,
    )
means = mean_by_label(rows, "answer_acc")
print("means:", {k: round(v, 4) for k, v in means.items()})
print(f"wall {time.monotonic()-t0:.0f}s")
