"""Training and evaluation loops over the synthetic grounding task.

Everything is deterministic given the config: sample seeds derive from
(dataset_seed, index), batches walk indices in step order, weight init
is seeded, and the optimizer keeps explicit state. Resuming from a
checkpoint therefore reproduces the straight-through run bit for bit.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass

import torch

from .boxes import BBox, acc_at_iou, mean_iou, parse_box, serialize_box
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, dump_config, parse_config_text
from .decoder import AdamW, init_parameters, lr_schedule, masked_next_token_loss
from .errors import TrainingError
from .model import MultimodalModel
from .protocol import (
    DONE,
    FAILED_GROUNDING,
    assemble_training_sequence,
    batch_generate,
    collate_layouts,
)
from .reengage import Strategy, resample_cells
from .synth import SampleRecord, derive_sample_seed, generate_sample, small_glyph_boxes
from .vocab import Vocab


def build_model(cfg: RunConfig) -> tuple[MultimodalModel, Vocab]:
    vocab = cfg.vocab()
    model = MultimodalModel(cfg.encoder, cfg.decoder_config())
    model.init_weights(cfg.seed)
    return model, vocab


def dataset_sample(cfg: RunConfig, index: int):
    seed = derive_sample_seed(cfg.train.dataset_seed, index)
    return generate_sample(seed, cfg.task)


def gen_dataset(cfg: RunConfig, path: str, count: int | None = None) -> int:
    """Materialize dataset rows as JSONL for inspection; returns row count.

    Training itself regenerates samples from seeds, so this file is a
    human-readable view, not a required input.
    """
    n = cfg.train.dataset_size if count is None else count
    chash = config_hash(cfg)
    with open(path, "w", encoding="utf-8") as fh:
        for index in range(n):
            seed = derive_sample_seed(cfg.train.dataset_seed, index)
            _, record = generate_sample(seed, cfg.task)
            row = {
                "seed": seed,
                "cfg_hash": chash,
                "question_text": record.question_text,
                "gt_boxes": [serialize_box(b) for b in record.gt_boxes],
                "answer_text": record.answer_text,
            }
            fh.write(json.dumps(row) + "\n")
    return n


def encoder_warmup(model: MultimodalModel, cfg: RunConfig, log=None) -> None:
    """Pre-alignment pass: train the vision stack alone before the
    conversation loss ever runs.

    A throwaway linear head reads each projected grid token and predicts
    whether any small glyph overlaps that cell (binary cross-entropy,
    multi-hot over the G*G cells). The head never meets the language
    model and is dropped afterwards; what remains is a visual token
    stream in which small-glyph cells are linearly separable, which the
    conversation loss alone does not reach from random init at these
    model sizes (its localization gradient arrives through near-uniform
    attention over all cells and stalls flat). The labels are a scene
    property, not an answer key: they flag every small glyph, and for
    relational questions the image alone cannot say which one the
    question will single out.

    Runs only at step 0 of a fresh run; resumed runs inherit its effect
    through the checkpoint. Flat learning rate, same batch walk as the
    main loop, fully deterministic.
    """
    t = cfg.train
    if t.encoder_warmup_steps == 0:
        return
    grid = cfg.encoder.grid
    head = torch.nn.Linear(cfg.decoder.dim, 1)
    init_parameters(head, cfg.seed + 1)
    params = [("head.weight", head.weight), ("head.bias", head.bias)]
    params += [(n, p) for n, p in model.named_parameters() if n.startswith("vision.")]
    optimizer = AdamW(sorted(params), weight_decay=t.weight_decay)
    for step in range(t.encoder_warmup_steps):
        indices = [(step * t.batch_size + k) % t.dataset_size for k in range(t.batch_size)]
        images = []
        labels = []
        for index in indices:
            pixels, record = dataset_sample(cfg, index)
            images.append(torch.from_numpy(pixels))
            hot = torch.zeros(grid * grid)
            for box in small_glyph_boxes(record, cfg.task):
                for i, j in resample_cells(box, grid):
                    hot[i * grid + j] = 1.0
            labels.append(hot)
        _, projected = model.encode_batch(torch.stack(images))
        logits = head(projected).squeeze(-1)
        loss = torch.nn.functional.binary_cross_entropy_with_logits(
            logits, torch.stack(labels)
        )
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite warmup loss at step {step}", step=step)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step(t.lr)
        if log is not None and (step % t.log_every == 0 or step == t.encoder_warmup_steps - 1):
            log(f"warmup {step}/{t.encoder_warmup_steps} loss {float(loss):.4f}")


def _teacher_context(model, strategy, record: SampleRecord, cache, image):
    """Context tokens for the ground-truth box, as used when training."""
    if not strategy.uses_context:
        return None
    # Training supervises the wire-format box, so the context must come
    # from the same rounded values the model is taught to emit.
    box = parse_box(serialize_box(record.gt_boxes[0]))
    return model.context_for(strategy, box, cache, image, crop_id=0)


def training_batch(
    model: MultimodalModel,
    cfg: RunConfig,
    vocab: Vocab,
    strategy: Strategy,
    indices: list[int],
):
    """Assemble one teacher-forced batch; returns (ids, mask, slots, n_tokens)."""
    grid = cfg.encoder.grid
    images = []
    records = []
    for index in indices:
        pixels, record = dataset_sample(cfg, index)
        images.append(torch.from_numpy(pixels))
        records.append(record)
    image_batch = torch.stack(images)
    fused, projected = model.encode_batch(image_batch)
    layouts = []
    values = []
    for row, record in enumerate(records):
        question_ids = vocab.encode_words(record.question_text)
        answer_ids = vocab.encode_words(record.answer_text)
        box_texts = (
            [serialize_box(b) for b in record.gt_boxes] if strategy.uses_box else []
        )
        context = None
        if strategy.uses_context:
            cache = model.cache_for(fused, projected, row)
            context = _teacher_context(model, strategy, record, cache, image_batch[row])
        layout = assemble_training_sequence(
            vocab, grid, question_ids, box_texts, context, answer_ids
        )
        slot_values = projected[row]
        if context is not None and len(context) > 0:
            slot_values = torch.cat([slot_values, context.tokens], dim=0)
        layouts.append(layout)
        values.append(slot_values)
    ids, mask, slots = collate_layouts(layouts, values, vocab, grid)
    n_tokens = sum(len(l) for l in layouts)
    return ids, mask, slots, n_tokens


def train_step(
    model: MultimodalModel,
    optimizer: AdamW,
    cfg: RunConfig,
    vocab: Vocab,
    strategy: Strategy,
    step: int,
) -> tuple[float, float, int]:
    """One optimization step; returns (loss, lr, tokens)."""
    t = cfg.train
    indices = [(step * t.batch_size + k) % t.dataset_size for k in range(t.batch_size)]
    ids, mask, slots, n_tokens = training_batch(model, cfg, vocab, strategy, indices)
    logits = model.logits(ids, slots)
    loss = masked_next_token_loss(logits, ids, mask)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {step}", step=step)
    optimizer.zero_grad()
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in {name} at step {step}", step=step)
    lr = lr_schedule(step, t.steps, t.lr, t.warmup_ratio)
    optimizer.step(lr)
    return float(loss.detach()), lr, n_tokens


@dataclass
class EvalReport:
    strategy_kind: str
    n_samples: int
    answer_acc: float
    acc_at_0_5: float
    mean_iou: float
    tokens_per_sample: float
    grounding_failures: int
    truncations: int

    def as_row(self, step: int) -> dict:
        return {
            "step": step,
            "strategy": self.strategy_kind,
            "eval_samples": self.n_samples,
            "answer_acc": round(self.answer_acc, 6),
            "acc_at_0_5": round(self.acc_at_0_5, 6),
            "mean_iou": round(self.mean_iou, 6),
            "tokens_per_sample": round(self.tokens_per_sample, 3),
            "grounding_failures": self.grounding_failures,
            "truncations": self.truncations,
        }


def evaluate(
    model: MultimodalModel,
    cfg: RunConfig,
    vocab: Vocab,
    strategy: Strategy,
    n_samples: int | None = None,
) -> EvalReport:
    """Greedy decoding over held-out seeds; failures score zero.

    Eval indices live past ``eval_seed_offset`` so their sample seeds are
    disjoint from every training index.
    """
    t = cfg.train
    n = t.eval_samples if n_samples is None else n_samples
    grid = cfg.encoder.grid
    max_len = cfg.decoder.max_seq_len
    correct = 0
    failures = 0
    truncations = 0
    total_tokens = 0
    predictions: list[BBox | None] = []
    gts: list[BBox] = []
    done = 0
    while done < n:
        chunk = min(t.eval_batch, n - done)
        images = []
        records = []
        for k in range(chunk):
            index = t.eval_seed_offset + done + k
            seed = derive_sample_seed(t.dataset_seed, index)
            pixels, record = generate_sample(seed, cfg.task)
            images.append(torch.from_numpy(pixels))
            records.append(record)
        questions = [vocab.encode_words(r.question_text) for r in records]
        results = batch_generate(
            model, torch.stack(images), questions, strategy, vocab, grid, max_len
        )
        for record, result in zip(records, results):
            gts.append(record.gt_boxes[0])
            predictions.append(result.predicted_box)
            total_tokens += len(result.ids)
            if result.status == DONE:
                if result.answer_text == record.answer_text:
                    correct += 1
            elif result.status == FAILED_GROUNDING:
                failures += 1
            else:
                truncations += 1
        done += chunk
    return EvalReport(
        strategy_kind=strategy.kind,
        n_samples=n,
        answer_acc=correct / n,
        acc_at_0_5=acc_at_iou(predictions, gts, 0.5),
        mean_iou=mean_iou(predictions, gts),
        tokens_per_sample=total_tokens / n,
        grounding_failures=failures,
        truncations=truncations,
    )


@dataclass
class TrainArtifacts:
    steps_run: int
    final_loss: float
    checkpoint_path: str
    metrics_path: str
    report: EvalReport | None


def train(
    cfg: RunConfig,
    out_dir: str,
    resume_from: str | None = None,
    stop_at: int | None = None,
    eval_at_end: bool = True,
    log=None,
) -> TrainArtifacts:
    """Run (part of) a training job and checkpoint the end state.

    ``stop_at`` ends the loop early (for later resumption); the schedule
    still spans the full configured step count.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    model, vocab = build_model(cfg)
    optimizer = AdamW(
        sorted(model.named_parameters()), weight_decay=cfg.train.weight_decay
    )
    start = 0
    if resume_from is not None:
        start = load_checkpoint(resume_from, model, optimizer, cfg)
    else:
        encoder_warmup(model, cfg, log=log)
    strategy = cfg.strategy.build()
    total = cfg.train.steps
    end = total if stop_at is None else min(stop_at, total)
    if start > end:
        raise TrainingError(f"checkpoint is at step {start}, past stop_at={end}")
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    mode = "a" if (resume_from is not None and os.path.exists(metrics_path)) else "w"
    loss = math.nan
    t0 = time.monotonic()
    with open(metrics_path, mode, encoding="utf-8") as fh:
        if mode == "w":
            header = {
                "cfg_hash": config_hash(cfg),
                "strategy": strategy.kind,
                "total_steps": total,
            }
            fh.write(json.dumps(header) + "\n")
        for step in range(start, end):
            loss, lr, n_tokens = train_step(model, optimizer, cfg, vocab, strategy, step)
            if step % cfg.train.log_every == 0 or step == end - 1:
                row = {
                    "step": step,
                    "loss": round(loss, 6),
                    "lr": lr,
                    "tokens_per_sample": n_tokens / cfg.train.batch_size,
                    "elapsed_s": round(time.monotonic() - t0, 3),
                }
                fh.write(json.dumps(row) + "\n")
                fh.flush()
                if log is not None:
                    log(
                        f"step {step}/{total} loss {loss:.4f} lr {lr:.2e} "
                        f"({row['elapsed_s']}s)"
                    )
        report = None
        if eval_at_end and end == total:
            report = evaluate(model, cfg, vocab, strategy)
            fh.write(json.dumps(report.as_row(end)) + "\n")
            if log is not None:
                log(
                    f"eval[{report.strategy_kind}] answer_acc {report.answer_acc:.3f} "
                    f"acc@0.5 {report.acc_at_0_5:.3f} mean_iou {report.mean_iou:.3f}"
                )
    checkpoint_path = os.path.join(out_dir, "checkpoint")
    save_checkpoint(checkpoint_path, model, optimizer, end, cfg)
    return TrainArtifacts(
        steps_run=end - start,
        final_loss=loss,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        report=report,
    )


def ablate(
    cfg: RunConfig,
    out_dir: str,
    variants: list[tuple[str, dict[str, str]]],
    seeds: list[int],
    log=None,
) -> list[dict]:
    """Train every (variant, seed) pair and collect end-of-run eval rows.

    Variants are config overrides on top of ``cfg``; each run lands in
    its own subdirectory and a combined ablation.jsonl accumulates rows.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    summary_path = os.path.join(out_dir, "ablation.jsonl")
    with open(summary_path, "w", encoding="utf-8") as fh:
        for label, overrides in variants:
            for seed in seeds:
                merged = dict(overrides)
                merged["seed"] = str(seed)
                run_cfg = parse_config_text(dump_config(cfg), merged)
                run_dir = os.path.join(out_dir, f"{label}-seed{seed}")
                if log is not None:
                    log(f"--- {label} seed={seed}")
                artifacts = train(run_cfg, run_dir, log=log)
                row = {"label": label, "seed": seed, "cfg_hash": config_hash(run_cfg)}
                row.update(artifacts.report.as_row(run_cfg.train.steps))
                rows.append(row)
                fh.write(json.dumps(row) + "\n")
                fh.flush()
    return rows


def mean_by_label(rows: list[dict], metric: str) -> dict[str, float]:
    sums: dict[str, list[float]] = {}
    for row in rows:
        sums.setdefault(row["label"], []).append(row[metric])
    return {label: sum(vals) / len(vals) for label, vals in sums.items()}
