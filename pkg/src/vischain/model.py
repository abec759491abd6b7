"""The full multimodal bundle: vision experts, projectors, decoder."""

from __future__ import annotations

import torch
from torch import nn

from .decoder import CausalDecoder, DecoderConfig, SlotBinding, init_parameters
from .encoder import EncoderConfig, MLPProjector, VisionEncoder
from .errors import ConfigError
from .reengage import Strategy, TokenCache, select_context


class MultimodalModel(nn.Module):
    """Everything trainable, end to end.

    The dedicated projector exists regardless of strategy so parameter
    shapes (and checkpoints) are strategy-independent; it only receives
    gradient when a strategy routes re-engaged context through it.
    """

    def __init__(self, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig):
        super().__init__()
        encoder_cfg.validate()
        decoder_cfg.validate()
        if decoder_cfg.grid_slots < encoder_cfg.grid**2:
            raise ConfigError(
                f"grid_slots={decoder_cfg.grid_slots} cannot index a "
                f"{encoder_cfg.grid}x{encoder_cfg.grid} fusion grid"
            )
        self.encoder_cfg = encoder_cfg
        self.decoder_cfg = decoder_cfg
        self.vision = VisionEncoder(encoder_cfg, decoder_cfg.dim)
        self.dedicated_projector = MLPProjector(
            encoder_cfg.fused_channels, encoder_cfg.projector_hidden, decoder_cfg.dim
        )
        self.decoder = CausalDecoder(decoder_cfg)

    def init_weights(self, seed: int) -> None:
        init_parameters(self, seed)

    def encode_batch(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Initial pass: (fused (B, G, G, C), projected (B, G*G, d))."""
        fused, projected = self.vision(images)
        return fused.data, projected

    def cache_for(self, fused: torch.Tensor, projected: torch.Tensor, index: int) -> TokenCache:
        """Per-sample view of a batched encoding."""
        return TokenCache(fused=fused[index], projected=projected[index])

    def context_for(self, strategy: Strategy, box, cache: TokenCache, image: torch.Tensor, crop_id: int = 0):
        """Context tokens for one emitted box (or None for text-only strategies)."""
        return select_context(
            strategy,
            box,
            cache=cache,
            image=image,
            encoder=self.vision,
            dedicated_projector=self.dedicated_projector,
            crop_id=crop_id,
        )

    def logits(
        self,
        ids: torch.Tensor,
        slots: SlotBinding | None = None,
        return_attention: bool = False,
    ):
        return self.decoder(ids, slots, return_attention=return_attention)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
