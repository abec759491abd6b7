"""Run configuration: flat text format, typed assembly, content hash.

Config files are plain ``key = value`` lines with dotted section keys
(``train.steps = 5000``). Blank lines and ``#`` comments are ignored.
Every run artifact carries the first 12 hex chars of the sha256 of the
canonical dump, so configs can be matched to outputs after the fact.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

from .decoder import DecoderConfig
from .encoder import EncoderConfig, ExpertSpec
from .errors import ConfigError
from .reengage import DEFAULT_EXPANSION, Strategy, make_strategy
from .synth import SynthTaskConfig
from .vocab import Vocab


@dataclass(frozen=True)
class DecoderParams:
    dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_hidden: int = 256
    max_seq_len: int = 256


@dataclass(frozen=True)
class StrategyParams:
    kind: str = "roi-resample"
    expansion_ratio: float | None = None  # None picks the per-strategy default
    squarify: str = "pad-crop"
    projector: str = "shared"
    fallback_implicit: bool = False

    def build(self) -> Strategy:
        return make_strategy(
            self.kind,
            expansion_ratio=self.expansion_ratio,
            squarify=self.squarify,
            projector=self.projector,
            fallback_implicit=self.fallback_implicit,
        )


@dataclass(frozen=True)
class TrainParams:
    steps: int = 5000
    batch_size: int = 8
    lr: float = 3e-4
    warmup_ratio: float = 0.03
    weight_decay: float = 0.0
    encoder_warmup_steps: int = 0
    dataset_size: int = 20000
    dataset_seed: int = 0
    eval_samples: int = 200
    eval_batch: int = 25
    eval_seed_offset: int = 1_000_000
    log_every: int = 100


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    task: SynthTaskConfig = SynthTaskConfig()
    encoder: EncoderConfig = EncoderConfig()
    decoder: DecoderParams = DecoderParams()
    strategy: StrategyParams = StrategyParams()
    train: TrainParams = TrainParams()

    def validate(self) -> None:
        self.task.validate()
        self.encoder.validate()
        if self.task.image_px != self.encoder.image_px:
            raise ConfigError(
                f"task renders {self.task.image_px}px but encoder expects "
                f"{self.encoder.image_px}px"
            )
        self.strategy.build()
        self.decoder_config().validate()
        if self.decoder.max_seq_len < self.encoder.grid**2 + 16:
            raise ConfigError(
                f"max_seq_len={self.decoder.max_seq_len} leaves no room after "
                f"{self.encoder.grid**2} image slots"
            )
        t = self.train
        for field in ("steps", "batch_size", "dataset_size", "eval_samples",
                      "eval_batch", "log_every"):
            if getattr(t, field) < 1:
                raise ConfigError(f"train.{field} must be positive")
        if t.lr <= 0:
            raise ConfigError(f"train.lr must be positive: {t.lr}")
        if not 0.0 < t.warmup_ratio < 1.0:
            raise ConfigError(f"train.warmup_ratio out of (0, 1): {t.warmup_ratio}")
        if t.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0: {t.weight_decay}")
        if t.encoder_warmup_steps < 0:
            raise ConfigError(
                f"train.encoder_warmup_steps must be >= 0: {t.encoder_warmup_steps}"
            )
        if t.eval_seed_offset < t.dataset_size:
            raise ConfigError(
                "eval_seed_offset must clear the training index range "
                f"({t.eval_seed_offset} < {t.dataset_size})"
            )

    def vocab(self) -> Vocab:
        return Vocab.build(colors=self.task.colors, shapes=self.task.shapes)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            vocab_size=len(self.vocab()),
            dim=self.decoder.dim,
            n_layers=self.decoder.n_layers,
            n_heads=self.decoder.n_heads,
            mlp_hidden=self.decoder.mlp_hidden,
            max_seq_len=self.decoder.max_seq_len,
            grid_slots=self.encoder.grid**2,
        )


# --- wire format ------------------------------------------------------------


def _parse_int(s: str) -> int:
    try:
        return int(s, 10)
    except ValueError:
        raise ConfigError(f"expected integer, got {s!r}") from None


def _parse_float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"expected number, got {s!r}") from None


def _parse_bool(s: str) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise ConfigError(f"expected true/false, got {s!r}")


def _parse_words(s: str) -> tuple[str, ...]:
    items = tuple(w.strip() for w in s.split(",") if w.strip())
    if not items:
        raise ConfigError(f"expected comma-separated names, got {s!r}")
    return items


def _parse_float_pair(s: str) -> tuple[float, float]:
    parts = s.split(",")
    if len(parts) != 2:
        raise ConfigError(f"expected two comma-separated numbers, got {s!r}")
    return _parse_float(parts[0].strip()), _parse_float(parts[1].strip())


def _parse_int_pair(s: str) -> tuple[int, int]:
    parts = s.split(",")
    if len(parts) != 2:
        raise ConfigError(f"expected two comma-separated integers, got {s!r}")
    return _parse_int(parts[0].strip()), _parse_int(parts[1].strip())


def _parse_experts(s: str) -> tuple[ExpertSpec, ...]:
    """``patch:dim:depth:heads`` entries joined by commas."""
    specs = []
    for entry in s.split(","):
        fields = entry.strip().split(":")
        if len(fields) != 4:
            raise ConfigError(f"expert spec needs patch:dim:depth:heads, got {entry!r}")
        specs.append(ExpertSpec(*(_parse_int(f) for f in fields)))
    if not specs:
        raise ConfigError("need at least one expert spec")
    return tuple(specs)


def _parse_expansion(s: str) -> float | None:
    if s == "default":
        return None
    return _parse_float(s)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], ExpertSpec):
            return ",".join(f"{e.patch_px}:{e.dim}:{e.depth}:{e.n_heads}" for e in value)
        return ",".join(_fmt(v) for v in value)
    if value is None:
        return "default"
    return str(value)


# key -> (section attr or "" for top level, field name, parser)
_SCHEMA: dict[str, tuple[str, str, object]] = {
    "seed": ("", "seed", _parse_int),
    "task.image_px": ("task", "image_px", _parse_int),
    "task.layout_cells": ("task", "layout_cells", _parse_int),
    "task.colors": ("task", "colors", _parse_words),
    "task.shapes": ("task", "shapes", _parse_words),
    "task.target_area_range": ("task", "target_area_range", _parse_float_pair),
    "task.distractor_range": ("task", "distractor_range", _parse_int_pair),
    "task.decoy_fraction": ("task", "decoy_fraction", _parse_float),
    "task.templates": ("task", "templates", _parse_words),
    "task.snap_px": ("task", "snap_px", _parse_int),
    "encoder.experts": ("encoder", "experts", _parse_experts),
    "encoder.grid": ("encoder", "grid", _parse_int),
    "encoder.projector_hidden": ("encoder", "projector_hidden", _parse_int),
    "decoder.dim": ("decoder", "dim", _parse_int),
    "decoder.n_layers": ("decoder", "n_layers", _parse_int),
    "decoder.n_heads": ("decoder", "n_heads", _parse_int),
    "decoder.mlp_hidden": ("decoder", "mlp_hidden", _parse_int),
    "decoder.max_seq_len": ("decoder", "max_seq_len", _parse_int),
    "strategy.kind": ("strategy", "kind", str),
    "strategy.expansion_ratio": ("strategy", "expansion_ratio", _parse_expansion),
    "strategy.squarify": ("strategy", "squarify", str),
    "strategy.projector": ("strategy", "projector", str),
    "strategy.fallback_implicit": ("strategy", "fallback_implicit", _parse_bool),
    "train.steps": ("train", "steps", _parse_int),
    "train.batch_size": ("train", "batch_size", _parse_int),
    "train.lr": ("train", "lr", _parse_float),
    "train.warmup_ratio": ("train", "warmup_ratio", _parse_float),
    "train.weight_decay": ("train", "weight_decay", _parse_float),
    "train.encoder_warmup_steps": ("train", "encoder_warmup_steps", _parse_int),
    "train.dataset_size": ("train", "dataset_size", _parse_int),
    "train.dataset_seed": ("train", "dataset_seed", _parse_int),
    "train.eval_samples": ("train", "eval_samples", _parse_int),
    "train.eval_batch": ("train", "eval_batch", _parse_int),
    "train.eval_seed_offset": ("train", "eval_seed_offset", _parse_int),
    "train.log_every": ("train", "log_every", _parse_int),
}


def parse_config_lines(text: str) -> dict[str, str]:
    """Raw ``key = value`` pairs; rejects malformed lines and duplicates."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def assemble_config(raw: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    for key, text in raw.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        section, field, parse = _SCHEMA[key]
        try:
            value = parse(text)
        except ConfigError as err:
            raise ConfigError(f"{key}: {err}") from None
        if section == "":
            cfg = replace(cfg, **{field: value})
        else:
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), **{field: value})})
    # The encoder consumes what the task renders; keep one source of truth.
    cfg = replace(cfg, encoder=replace(cfg.encoder, image_px=cfg.task.image_px))
    cfg.validate()
    return cfg


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    raw = parse_config_lines(text)
    for key, value in (overrides or {}).items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        raw[key] = value
    return assemble_config(raw)


def load_config(path: str, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config_text(text, overrides)


def dump_config(cfg: RunConfig) -> str:
    """Canonical dump: every key, sorted, one per line."""
    lines = []
    for key in sorted(_SCHEMA):
        section, field, _ = _SCHEMA[key]
        obj = cfg if section == "" else getattr(cfg, section)
        lines.append(f"{key} = {_fmt(getattr(obj, field))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:12]


def effective_expansion(cfg: RunConfig) -> float:
    if cfg.strategy.expansion_ratio is not None:
        return cfg.strategy.expansion_ratio
    return DEFAULT_EXPANSION[cfg.strategy.kind]
