"""Mixture-of-patch-experts vision encoder.

Each expert is a small ViT over its own patch size, producing a native
token grid. Expert grids are bilinearly interpolated to one shared
fusion grid, concatenated along channels, and projected by an MLP into
the decoder's embedding width. The fused pre-projection grid is kept
around so re-engagement can re-project cached cells through a dedicated
projector without re-running the experts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .boxes import BBox
from .errors import ConfigError


class GridProvenance(NamedTuple):
    """Fusion-grid cell (row, col) a token was produced from."""

    i: int
    j: int


class CropProvenance(NamedTuple):
    """Position ``k`` inside re-encoded crop number ``crop_id``."""

    crop_id: int
    k: int


@dataclass(frozen=True)
class VisualTokens:
    """A run of visual embeddings with per-token provenance."""

    tokens: torch.Tensor  # (n, d)
    provenance: tuple[GridProvenance | CropProvenance, ...]

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != len(self.provenance):
            raise ConfigError(
                f"tokens {tuple(self.tokens.shape)} do not match "
                f"{len(self.provenance)} provenance entries"
            )

    def __len__(self) -> int:
        return len(self.provenance)


@dataclass(frozen=True)
class ExpertSpec:
    patch_px: int
    dim: int
    depth: int
    n_heads: int = 4

    @property
    def mlp_hidden(self) -> int:
        return 2 * self.dim


@dataclass(frozen=True)
class EncoderConfig:
    image_px: int = 64
    experts: tuple[ExpertSpec, ...] = (ExpertSpec(8, 48, 2), ExpertSpec(4, 32, 2))
    grid: int = 8
    projector_hidden: int = 128

    @property
    def fused_channels(self) -> int:
        return sum(e.dim for e in self.experts)

    def validate(self) -> None:
        if not self.experts:
            raise ConfigError("need at least one vision expert")
        if self.grid < 1:
            raise ConfigError(f"fusion grid must be positive: {self.grid}")
        for e in self.experts:
            if self.image_px % e.patch_px != 0:
                raise ConfigError(
                    f"image_px={self.image_px} not divisible by patch_px={e.patch_px}"
                )
            if e.dim % e.n_heads != 0:
                raise ConfigError(f"expert dim {e.dim} not divisible by {e.n_heads} heads")
            if e.depth < 1:
                raise ConfigError(f"expert depth must be positive: {e.depth}")
        if self.projector_hidden < 1:
            raise ConfigError(f"projector_hidden must be positive: {self.projector_hidden}")


@dataclass(frozen=True)
class PatchGrid:
    """Batched square grid of feature vectors: data is (B, g, g, C)."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[1] != self.data.shape[2]:
            raise ConfigError(f"grid data must be (B, g, g, C), got {tuple(self.data.shape)}")

    @property
    def side(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def cell_rect(self, i: int, j: int) -> BBox:
        g = self.side
        if not (0 <= i < g and 0 <= j < g):
            raise ConfigError(f"cell ({i}, {j}) outside {g}x{g} grid")
        return BBox(j / g, i / g, (j + 1) / g, (i + 1) / g)


class SelfAttention(nn.Module):
    """Bidirectional multi-head attention, written out explicitly."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_hidden: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_hidden), nn.GELU(), nn.Linear(mlp_hidden, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class PatchExpert(nn.Module):
    """One ViT expert at a fixed patch size."""

    def __init__(self, spec: ExpertSpec, image_px: int):
        super().__init__()
        if image_px % spec.patch_px != 0:
            raise ConfigError(f"image_px={image_px} not divisible by {spec.patch_px}")
        self.spec = spec
        self.image_px = image_px
        self.native_side = image_px // spec.patch_px
        n = self.native_side**2
        self.embed = nn.Linear(spec.patch_px**2 * 3, spec.dim)
        self.pos = nn.Parameter(torch.zeros(n, spec.dim))
        self.blocks = nn.ModuleList(
            EncoderBlock(spec.dim, spec.n_heads, spec.mlp_hidden) for _ in range(spec.depth)
        )
        self.ln_out = nn.LayerNorm(spec.dim)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        b, h, w, c = images.shape
        if h != self.image_px or w != self.image_px or c != 3:
            raise ConfigError(
                f"expected (B, {self.image_px}, {self.image_px}, 3) images, got {tuple(images.shape)}"
            )
        p, g = self.spec.patch_px, self.native_side
        x = images.reshape(b, g, p, g, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, p * p * c)

    def forward(self, images: torch.Tensor) -> PatchGrid:
        x = self.embed(self.patchify(images)) + self.pos
        for block in self.blocks:
            x = block(x)
        x = self.ln_out(x)
        g = self.native_side
        return PatchGrid(x.reshape(x.shape[0], g, g, self.spec.dim))


def _lerp_axis_weights(src: int, dst: int, device, dtype):
    """Half-pixel sample positions of ``dst`` cells inside ``src`` cells."""
    pos = (torch.arange(dst, device=device, dtype=dtype) + 0.5) * (src / dst) - 0.5
    pos = pos.clamp(0.0, src - 1.0)
    i0 = pos.floor().long()
    i1 = torch.minimum(i0 + 1, torch.full_like(i0, src - 1))
    w = pos - i0.to(dtype)
    return i0, i1, w


def interpolate_grid(grid: PatchGrid, side: int) -> PatchGrid:
    """Bilinearly resample a grid to ``side`` x ``side``.

    Uses the half-pixel convention with border clamp. The lerp form
    ``a + w*(b - a)`` keeps constant inputs bit-exact for any weight,
    and the map is linear in the input. Identity when sizes match.
    """
    if side < 1:
        raise ConfigError(f"target side must be positive: {side}")
    if side == grid.side:
        return grid
    x = grid.data
    i0, i1, w = _lerp_axis_weights(grid.side, side, x.device, x.dtype)
    rows0, rows1 = x[:, i0], x[:, i1]
    x = rows0 + w.view(1, -1, 1, 1) * (rows1 - rows0)
    cols0, cols1 = x[:, :, i0], x[:, :, i1]
    x = cols0 + w.view(1, 1, -1, 1) * (cols1 - cols0)
    return PatchGrid(x)


def fuse_experts(grids: list[PatchGrid]) -> PatchGrid:
    """Concatenate same-shape grids along the channel axis."""
    if not grids:
        raise ConfigError("nothing to fuse")
    side = grids[0].side
    batch = grids[0].data.shape[0]
    for g in grids:
        if g.side != side or g.data.shape[0] != batch:
            raise ConfigError(
                f"grid shape mismatch in fusion: {[tuple(g.data.shape) for g in grids]}"
            )
    return PatchGrid(torch.cat([g.data for g in grids], dim=-1))


class MLPProjector(nn.Module):
    """Two-layer projection from fused channels into decoder width."""

    def __init__(self, in_channels: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_channels, hidden), nn.GELU(), nn.Linear(hidden, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def grid_provenance(side: int) -> tuple[GridProvenance, ...]:
    """Row-major (i, j) provenance for a full grid."""
    return tuple(GridProvenance(i, j) for i in range(side) for j in range(side))


def project_grid(grid: PatchGrid, projector: MLPProjector) -> torch.Tensor:
    """Project every cell; returns (B, side*side, d) in row-major cell order."""
    b, g = grid.data.shape[0], grid.side
    return projector(grid.data.reshape(b, g * g, grid.channels))


class VisionEncoder(nn.Module):
    """Experts + fusion + the shared projector into decoder width."""

    def __init__(self, cfg: EncoderConfig, decoder_dim: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.decoder_dim = decoder_dim
        self.experts = nn.ModuleList(PatchExpert(e, cfg.image_px) for e in cfg.experts)
        self.shared_projector = MLPProjector(
            cfg.fused_channels, cfg.projector_hidden, decoder_dim
        )

    def encode_fused(self, images: torch.Tensor) -> PatchGrid:
        """Run all experts and fuse onto the common grid (pre-projection)."""
        grids = [interpolate_grid(expert(images), self.cfg.grid) for expert in self.experts]
        return fuse_experts(grids)

    def forward(self, images: torch.Tensor) -> tuple[PatchGrid, torch.Tensor]:
        """Returns (fused pre-projection grid, projected tokens (B, G*G, d))."""
        fused = self.encode_fused(images)
        return fused, project_grid(fused, self.shared_projector)
