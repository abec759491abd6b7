"""Causal decoder with visual-slot substitution, plus its optimizer.

The decoder is a small pre-norm transformer over a closed vocabulary.
Visual information enters by replacement: slot positions hold a
placeholder token id, and before the first block their embeddings are
overwritten with projected visual vectors, then tagged with a learned
provenance embedding (fusion-grid cell or crop-local index) on top of
the ordinary absolute position embedding.

Attention is written out explicitly (matmul, mask, softmax) so the
causal structure and attention rows stay inspectable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ProtocolError


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_hidden: int = 256
    max_seq_len: int = 256
    grid_slots: int = 64

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"vocab too small: {self.vocab_size}")
        if self.dim % self.n_heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by {self.n_heads} heads")
        for field in ("dim", "n_layers", "n_heads", "mlp_hidden", "max_seq_len", "grid_slots"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive")


@dataclass
class SlotBinding:
    """Visual embeddings to splice into a batch of token sequences.

    Parallel arrays: entry ``k`` writes ``values[k]`` at
    ``(batch_index[k], position[k])`` and adds the provenance embedding
    for ``grid_index[k]`` there. Positions must be unique per sample.
    """

    batch_index: torch.Tensor
    position: torch.Tensor
    values: torch.Tensor
    grid_index: torch.Tensor

    def __post_init__(self):
        n = self.values.shape[0]
        if not (self.batch_index.shape == (n,) and self.position.shape == (n,) and self.grid_index.shape == (n,)):
            raise ProtocolError("slot binding arrays disagree on length")
        pairs = set(zip(self.batch_index.tolist(), self.position.tolist()))
        if len(pairs) != n:
            raise ProtocolError("duplicate slot positions in binding")

    def __len__(self) -> int:
        return self.values.shape[0]


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        scores = scores.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out), attn


class DecoderBlock(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.attn = CausalSelfAttention(cfg.dim, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.dim, cfg.mlp_hidden), nn.GELU(), nn.Linear(cfg.mlp_hidden, cfg.dim)
        )

    def forward(self, x: torch.Tensor, mask: torch.Tensor):
        attn_out, attn = self.attn(self.ln1(x), mask)
        x = x + attn_out
        return x + self.mlp(self.ln2(x)), attn


class CausalDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_seq_len, cfg.dim))
        self.grid_emb = nn.Embedding(cfg.grid_slots, cfg.dim)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)

    def forward(
        self,
        ids: torch.Tensor,
        slots: SlotBinding | None = None,
        return_attention: bool = False,
    ):
        """Next-token logits (B, T, V); optionally per-layer attention maps."""
        b, t = ids.shape
        if t > self.cfg.max_seq_len:
            raise ProtocolError(f"sequence length {t} exceeds budget {self.cfg.max_seq_len}")
        x = self.tok_emb(ids)
        if slots is not None and len(slots) > 0:
            if int(slots.position.max()) >= t:
                raise ProtocolError("slot position outside sequence")
            # Replace placeholder embeddings with visual vectors...
            x = x.index_put((slots.batch_index, slots.position), slots.values)
        x = x + self.pos_emb[:t]
        if slots is not None and len(slots) > 0:
            # ...then add provenance on top of the absolute position.
            x = x.index_put(
                (slots.batch_index, slots.position),
                self.grid_emb(slots.grid_index),
                accumulate=True,
            )
        mask = torch.tril(torch.ones(t, t, dtype=torch.bool, device=ids.device))
        attention = []
        for block in self.blocks:
            x, attn = block(x, mask)
            if return_attention:
                attention.append(attn)
        logits = self.head(self.ln_f(x))
        if return_attention:
            return logits, attention
        return logits


def masked_next_token_loss(
    logits: torch.Tensor, ids: torch.Tensor, loss_mask: torch.Tensor
) -> torch.Tensor:
    """Mean cross-entropy over positions whose mask is set.

    ``loss_mask[b, t]`` marks token ``ids[b, t]`` as a prediction target,
    scored from the logits at ``t - 1``. Position 0 can never be a target.
    """
    if logits.shape[:2] != ids.shape or ids.shape != loss_mask.shape:
        raise ProtocolError(
            f"shape mismatch: logits {tuple(logits.shape)}, ids {tuple(ids.shape)}, "
            f"mask {tuple(loss_mask.shape)}"
        )
    if bool(loss_mask[:, 0].any()):
        raise ProtocolError("position 0 has no predecessor to predict it from")
    if not bool(loss_mask.any()):
        raise ProtocolError("empty loss mask")
    pred = logits[:, :-1]
    target = ids[:, 1:]
    m = loss_mask[:, 1:]
    return nn.functional.cross_entropy(pred[m], target[m])


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic re-init: one seeded generator, parameters in name order.

    Matrices (and embeddings) draw N(0, 1/fan_in) where fan_in is the
    trailing dimension; biases start at zero; one-dimensional weights
    (LayerNorm gains) start at one. Fan-in scaling keeps attention
    logits and residual magnitudes O(1) at every width; a fixed small
    std leaves attention near-uniform at the widths used here and
    content-addressed heads never break symmetry.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters()):
            if p.ndim >= 2:
                p.normal_(0.0, p.shape[-1] ** -0.5, generator=gen)
            elif name.endswith(".bias"):
                p.zero_()
            else:
                p.fill_(1.0)


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_ratio: float = 0.03) -> float:
    """Linear warmup to ``base_lr`` over the first ``warmup_ratio`` of steps,
    then cosine decay reaching exactly zero at ``total_steps``."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be positive: {total_steps}")
    if not 0.0 <= warmup_ratio < 1.0:
        raise ConfigError(f"warmup_ratio must be in [0, 1): {warmup_ratio}")
    warmup = max(1, round(total_steps * warmup_ratio))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    Hand-rolled so optimizer state is plain named float32 tensors plus an
    integer step count, which makes checkpoint round-trips bit-exact.
    Updates walk parameters in name order; all math is elementwise.
    """

    def __init__(
        self,
        named_params: list[tuple[str, torch.Tensor]],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.named_params = sorted(named_params, key=lambda kv: kv[0])
        if len({n for n, _ in self.named_params}) != len(self.named_params):
            raise ConfigError("duplicate parameter names")
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = {n: torch.zeros_like(p) for n, p in self.named_params}
        self.exp_avg_sq = {n: torch.zeros_like(p) for n, p in self.named_params}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            if self.weight_decay != 0.0:
                p.mul_(1.0 - lr * self.weight_decay)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)

    @torch.no_grad()
    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        for name, _ in self.named_params:
            out[f"opt.{name}.exp_avg"] = self.exp_avg[name]
            out[f"opt.{name}.exp_avg_sq"] = self.exp_avg_sq[name]
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], step_count: int) -> None:
        for name, p in self.named_params:
            for store, suffix in ((self.exp_avg, "exp_avg"), (self.exp_avg_sq, "exp_avg_sq")):
                key = f"opt.{name}.{suffix}"
                if key not in tensors:
                    raise ConfigError(f"missing optimizer state: {key}")
                if tensors[key].shape != p.shape:
                    raise ConfigError(f"optimizer state shape mismatch for {key}")
                store[name].copy_(tensors[key])
        self.step_count = step_count
