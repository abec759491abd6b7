"""Visual re-engagement: turning an emitted RoI box back into visual tokens.

Four strategies:

- ``implicit-attention``: no box, no injected context; the decoder must
  find the evidence through ordinary attention over the image tokens.
- ``box-guidance``: the box is emitted as text and stays text; nothing
  visual is injected.
- ``roi-reencode``: crop the (expanded, squared) region, resize it to
  the encoder's input resolution, and run a fresh encoder pass, treating
  the crop as a new image. Injects a full grid of crop tokens.
- ``roi-resample``: retrieve the cached fusion-grid tokens whose cells
  positively overlap the (expanded) box, keeping their original grid
  provenance and row-major order. No second encoder pass.

Also home to the analytic MAC cost model for comparing strategies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .boxes import BBox, PaddingPlan, expand_box, serialize_box, squarify_box
from .encoder import (
    CropProvenance,
    EncoderConfig,
    ExpertSpec,
    GridProvenance,
    MLPProjector,
    VisionEncoder,
    VisualTokens,
)
from .errors import ConfigError

IMPLICIT = "implicit-attention"
BOX_GUIDANCE = "box-guidance"
REENCODE = "roi-reencode"
RESAMPLE = "roi-resample"

STRATEGY_KINDS = (IMPLICIT, BOX_GUIDANCE, REENCODE, RESAMPLE)

DEFAULT_EXPANSION = {IMPLICIT: 0.0, BOX_GUIDANCE: 0.0, REENCODE: 0.2, RESAMPLE: 0.0}


@dataclass(frozen=True)
class Strategy:
    """How the harness reacts to an emitted RoI box."""

    kind: str
    expansion_ratio: float = 0.0
    squarify: str = "pad-crop"
    projector: str = "shared"
    fallback_implicit: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy kind: {self.kind!r}")
        if self.projector not in ("shared", "dedicated"):
            raise ConfigError(f"unknown projector choice: {self.projector!r}")
        if self.squarify not in ("pad-crop", "square-context"):
            raise ConfigError(f"unknown squarify mode: {self.squarify!r}")
        if self.projector == "dedicated" and not self.uses_context:
            raise ConfigError(
                f"dedicated projector requires a context strategy, not {self.kind}"
            )
        if self.expansion_ratio != 0.0 and not self.uses_context:
            raise ConfigError(f"expansion ratio is meaningless for {self.kind}")
        if self.expansion_ratio < 0.0:
            raise ConfigError(f"negative expansion ratio: {self.expansion_ratio}")

    @property
    def uses_box(self) -> bool:
        return self.kind != IMPLICIT

    @property
    def uses_context(self) -> bool:
        return self.kind in (REENCODE, RESAMPLE)


def make_strategy(kind: str, expansion_ratio: float | None = None, **kwargs) -> Strategy:
    """Build a strategy with the kind's default expansion when unspecified."""
    if kind not in STRATEGY_KINDS:
        raise ConfigError(f"unknown strategy kind: {kind!r}")
    if expansion_ratio is None:
        expansion_ratio = DEFAULT_EXPANSION[kind]
    return Strategy(kind=kind, expansion_ratio=expansion_ratio, **kwargs)


@dataclass(frozen=True)
class TokenCache:
    """Per-image memory bank filled during the initial encoder pass.

    ``fused`` is the pre-projection fusion grid (G, G, C); ``projected``
    holds the shared-projector output for every cell, flattened row-major
    to (G*G, d). Treated as immutable once built.
    """

    fused: torch.Tensor
    projected: torch.Tensor

    def __post_init__(self):
        if self.fused.ndim != 3 or self.fused.shape[0] != self.fused.shape[1]:
            raise ConfigError(f"fused grid must be (G, G, C), got {tuple(self.fused.shape)}")
        g = self.fused.shape[0]
        if self.projected.shape[0] != g * g:
            raise ConfigError(
                f"projected tokens {tuple(self.projected.shape)} do not cover {g}x{g} grid"
            )

    @property
    def grid_side(self) -> int:
        return self.fused.shape[0]


def resample_cells(box: BBox, grid_side: int) -> list[tuple[int, int]]:
    """Row-major (i, j) cells whose open rectangles positively overlap the box.

    Touching a cell boundary does not count: a box edge exactly on a
    grid line excludes the cell beyond it.
    """
    if grid_side < 1:
        raise ConfigError(f"grid side must be positive: {grid_side}")
    edges = np.arange(grid_side + 1) / grid_side
    # Strictly positive segment overlap per axis; degenerate boxes select
    # nothing and an edge exactly on a grid line excludes the cell beyond.
    x_ok = np.nonzero(np.maximum(edges[:-1], box.x_min) < np.minimum(edges[1:], box.x_max))[0]
    y_ok = np.nonzero(np.maximum(edges[:-1], box.y_min) < np.minimum(edges[1:], box.y_max))[0]
    return [(int(i), int(j)) for i in y_ok for j in x_ok]


def resample_tokens(cache: TokenCache, box: BBox) -> VisualTokens:
    """Fetch cached shared-projection tokens for every overlapped cell."""
    g = cache.grid_side
    cells = resample_cells(box, g)
    flat = [i * g + j for i, j in cells]
    tokens = cache.projected[flat] if flat else cache.projected[:0]
    return VisualTokens(tokens=tokens, provenance=tuple(GridProvenance(i, j) for i, j in cells))


def crop_resize(image: torch.Tensor, region: BBox | PaddingPlan, out_px: int) -> torch.Tensor:
    """Crop a normalized region and resize it to (out_px, out_px, 3).

    Bilinear sampling with the half-pixel convention and border clamp.
    A :class:`PaddingPlan` maps the output square onto a zero-padded
    canvas with the cropped content centered; pad pixels are exactly 0.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigError(f"image must be (H, W, 3), got {tuple(image.shape)}")
    if out_px < 1:
        raise ConfigError(f"output side must be positive: {out_px}")
    h_px, w_px = image.shape[0], image.shape[1]
    dtype, device = image.dtype, image.device

    if isinstance(region, PaddingPlan):
        box = region.box
        u = (torch.arange(out_px, device=device, dtype=dtype) + 0.5) / out_px
        cu = u * region.side - region.pad_left
        cv = u * region.side - region.pad_top
        inside_x = (cu >= 0) & (cu <= box.width)
        inside_y = (cv >= 0) & (cv <= box.height)
        x_img = box.x_min + cu
        y_img = box.y_min + cv
    else:
        box = region
        u = (torch.arange(out_px, device=device, dtype=dtype) + 0.5) / out_px
        x_img = box.x_min + u * box.width
        y_img = box.y_min + u * box.height
        inside_x = torch.ones(out_px, dtype=torch.bool, device=device)
        inside_y = inside_x

    sx = (x_img * w_px - 0.5).clamp(0.0, w_px - 1.0)
    sy = (y_img * h_px - 0.5).clamp(0.0, h_px - 1.0)
    x0 = sx.floor().long()
    y0 = sy.floor().long()
    x1 = torch.minimum(x0 + 1, torch.full_like(x0, w_px - 1))
    y1 = torch.minimum(y0 + 1, torch.full_like(y0, h_px - 1))
    wx = (sx - x0.to(dtype)).view(1, -1, 1)
    wy = (sy - y0.to(dtype)).view(-1, 1, 1)

    rows0, rows1 = image[y0], image[y1]
    rows = rows0 + wy * (rows1 - rows0)
    out = rows[:, x0] + wx * (rows[:, x1] - rows[:, x0])
    mask = (inside_y.view(-1, 1) & inside_x.view(1, -1)).to(dtype).unsqueeze(-1)
    return out * mask


def reencode_tokens(
    image: torch.Tensor,
    box: BBox,
    strategy: Strategy,
    encoder: VisionEncoder,
    projector: MLPProjector,
    crop_id: int = 0,
) -> VisualTokens:
    """Expand, square, crop, resize, and run a fresh encoder pass.

    The crop is encoded exactly like a new image: full expert stack,
    fusion, projection, fresh grid positions. Provenance is crop-local.
    """
    expanded = expand_box(box, strategy.expansion_ratio)
    region = squarify_box(expanded, strategy.squarify)
    crop = crop_resize(image, region, encoder.cfg.image_px)
    fused = encoder.encode_fused(crop.unsqueeze(0))
    g = fused.side
    tokens = projector(fused.data.reshape(1, g * g, fused.channels))[0]
    return VisualTokens(
        tokens=tokens, provenance=tuple(CropProvenance(crop_id, k) for k in range(g * g))
    )


def select_context(
    strategy: Strategy,
    box: BBox,
    cache: TokenCache | None = None,
    image: torch.Tensor | None = None,
    encoder: VisionEncoder | None = None,
    dedicated_projector: MLPProjector | None = None,
    crop_id: int = 0,
) -> VisualTokens | None:
    """Produce the context tokens a strategy injects for one box (or None)."""
    if not strategy.uses_context:
        return None
    expanded = expand_box(box, strategy.expansion_ratio)
    if strategy.kind == RESAMPLE:
        if cache is None:
            raise ConfigError("roi-resample needs the token cache")
        if strategy.projector == "dedicated":
            if dedicated_projector is None:
                raise ConfigError("dedicated projector requested but not provided")
            g = cache.grid_side
            cells = resample_cells(expanded, g)
            if cells:
                fused_rows = cache.fused.reshape(g * g, -1)[[i * g + j for i, j in cells]]
                tokens = dedicated_projector(fused_rows)
            else:
                tokens = cache.projected[:0]
            return VisualTokens(
                tokens=tokens,
                provenance=tuple(GridProvenance(i, j) for i, j in cells),
            )
        return resample_tokens(cache, expanded)
    # roi-reencode
    if image is None or encoder is None:
        raise ConfigError("roi-reencode needs the original image and the encoder")
    if strategy.projector == "dedicated":
        if dedicated_projector is None:
            raise ConfigError("dedicated projector requested but not provided")
        projector = dedicated_projector
    else:
        projector = encoder.shared_projector
    # Expansion is already applied here; pass a zero-expansion twin so the
    # re-encode pipeline does not expand twice.
    once = Strategy(
        kind=strategy.kind,
        expansion_ratio=0.0,
        squarify=strategy.squarify,
        projector=strategy.projector,
        fallback_implicit=strategy.fallback_implicit,
    )
    return reencode_tokens(image, expanded, once, encoder, projector, crop_id=crop_id)


@dataclass(frozen=True)
class RoiContext:
    """Context tokens for one or more boxes under one strategy.

    For ``roi-reencode``, ``boxes[c]`` is the source box of crop id ``c``
    and tokens are grouped by crop in provenance order.
    """

    kind: str
    boxes: tuple[BBox, ...]
    tokens: torch.Tensor
    provenance: tuple[GridProvenance | CropProvenance, ...]


def merge_contexts(contexts: Sequence[RoiContext]) -> RoiContext:
    """Union-merge contexts from multiple boxes into one canonical block.

    Resampled cells are deduplicated and ordered row-major; re-encoded
    crops are deduplicated by their source box (wire-format identity)
    and ordered by the box's wire string, with crop ids renumbered.
    Merging is commutative, associative, and idempotent.
    """
    if not contexts:
        raise ConfigError("nothing to merge")
    kind = contexts[0].kind
    if any(c.kind != kind for c in contexts):
        raise ConfigError(f"cannot merge mixed strategies: {[c.kind for c in contexts]}")
    if kind == RESAMPLE:
        by_cell: dict[tuple[int, int], torch.Tensor] = {}
        boxes: dict[str, BBox] = {}
        for ctx in contexts:
            for b in ctx.boxes:
                boxes.setdefault(serialize_box(b), b)
            for prov, row in zip(ctx.provenance, ctx.tokens):
                by_cell.setdefault((prov.i, prov.j), row)
        cells = sorted(by_cell)
        tokens = (
            torch.stack([by_cell[c] for c in cells])
            if cells
            else contexts[0].tokens[:0]
        )
        return RoiContext(
            kind=kind,
            boxes=tuple(boxes[k] for k in sorted(boxes)),
            tokens=tokens,
            provenance=tuple(GridProvenance(i, j) for i, j in cells),
        )
    if kind == REENCODE:
        blocks: dict[str, tuple[BBox, torch.Tensor]] = {}
        for ctx in contexts:
            for crop_id, box in enumerate(ctx.boxes):
                rows = [k for k, p in enumerate(ctx.provenance) if p.crop_id == crop_id]
                blocks.setdefault(serialize_box(box), (box, ctx.tokens[rows]))
        ordered = [blocks[k] for k in sorted(blocks)]
        tokens = torch.cat([t for _, t in ordered]) if ordered else contexts[0].tokens[:0]
        provenance = tuple(
            CropProvenance(c, k)
            for c, (_, t) in enumerate(ordered)
            for k in range(t.shape[0])
        )
        return RoiContext(
            kind=kind,
            boxes=tuple(b for b, _ in ordered),
            tokens=tokens,
            provenance=provenance,
        )
    raise ConfigError(f"strategy {kind} has no context to merge")


# --- analytic cost model ----------------------------------------------------


def expert_pass_macs(spec: ExpertSpec, image_px: int) -> int:
    """Matmul MACs for one image through one expert (embed, attention, MLP)."""
    n = (image_px // spec.patch_px) ** 2
    d, h = spec.dim, spec.mlp_hidden
    embed = n * (spec.patch_px**2 * 3) * d
    attn = 3 * n * d * d + 2 * n * n * d + n * d * d
    mlp = 2 * n * d * h
    return embed + spec.depth * (attn + mlp)


def projector_macs(in_channels: int, hidden: int, out_dim: int, n_cells: int) -> int:
    return n_cells * (in_channels * hidden + hidden * out_dim)


def encoder_pass_macs(cfg: EncoderConfig, decoder_dim: int) -> int:
    """One full image: all experts plus shared projection of every fused cell."""
    total = sum(expert_pass_macs(e, cfg.image_px) for e in cfg.experts)
    total += projector_macs(cfg.fused_channels, cfg.projector_hidden, decoder_dim, cfg.grid**2)
    return total


@dataclass(frozen=True)
class CostReport:
    strategy_kind: str
    encoder_passes: int
    macs: int
    extra_context_tokens: float


def cost_report(
    strategy: Strategy,
    encoder_cfg: EncoderConfig,
    decoder_dim: int,
    observed_boxes: Sequence[BBox] = (),
) -> CostReport:
    """Encoder-side cost of answering one question under a strategy.

    Re-encoding pays a second full pass and a full grid of extra tokens;
    re-sampling reuses the cache, so its extra tokens are the mean cell
    count its boxes actually overlap (expansion included).
    """
    one_pass = encoder_pass_macs(encoder_cfg, decoder_dim)
    if strategy.kind == REENCODE:
        return CostReport(strategy.kind, 2, 2 * one_pass, float(encoder_cfg.grid**2))
    if strategy.kind == RESAMPLE:
        if not observed_boxes:
            raise ConfigError("resample cost needs observed boxes to average over")
        counts = [
            len(resample_cells(expand_box(b, strategy.expansion_ratio), encoder_cfg.grid))
            for b in observed_boxes
        ]
        return CostReport(strategy.kind, 1, one_pass, sum(counts) / len(counts))
    return CostReport(strategy.kind, 1, one_pass, 0.0)
