"""
Miniature diffusion transformer: a single token stream of noisy-image, text and reference tokens
processed by blocks with 2D rotary positions, the selective attention mask and segment-gated LoRA.
"""
import logging
from typing import Callable, Optional, Sequence

import torch
from einops import rearrange
from torch import nn

from align_gen_app.schemas import DitConfig
from align_gen_app.services import attnlayout, diffcore
from align_gen_app.services.encoders import encode_reference, patchify, unpatchify
from align_gen_app.services.errors import NonFiniteError, ShapeError
from align_gen_app.services.lora import LoraLinear, SegmentGate

logger = logging.getLogger(__name__)

ROPE_THETA = 10000.0


def rope_rotate(x: torch.Tensor, positions: torch.Tensor, theta: float = ROPE_THETA) -> torch.Tensor:
    """
    The rope_rotate function rotates query or key vectors by their 2D position.

    The head dimension is split in two halves, rotated by the row and the column index respectively;
    position (0, 0) is the identity.

    :param x: Tensor: ``(..., T, head_dim)`` queries or keys
    :param positions: Tensor: ``(T, 2)`` integer ``(row, col)`` indices
    :param theta: float: Frequency base
    :return: Rotated tensor of the same shape
    """
    head_dim = x.shape[-1]
    if head_dim % 4:
        raise ShapeError("rope_rotate", x.shape, detail="head dim must be divisible by 4")
    if positions.shape != (x.shape[-2], 2):
        raise ShapeError("rope_rotate", x.shape, positions.shape)
    half = head_dim // 2
    quarter = half // 2
    freqs = theta ** (-torch.arange(quarter, dtype=x.dtype) / quarter)
    rotated = []
    for axis, chunk in enumerate(torch.split(x, half, dim=-1)):
        angles = positions[:, axis].to(x.dtype)[:, None] * freqs[None, :]
        cos, sin = torch.cos(angles), torch.sin(angles)
        x1, x2 = chunk[..., :quarter], chunk[..., quarter:]
        rotated.append(torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1))
    return torch.cat(rotated, dim=-1)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale[:, None, :]) + shift[:, None, :]


class MMABlock(nn.Module):
    def __init__(self, cfg: DitConfig):
        super().__init__()
        d, rank, std = cfg.d, cfg.lora.rank, cfg.lora.init_std
        self.heads = cfg.heads
        self.modulation = nn.Linear(d, 4 * d)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)
        self.q = LoraLinear(d, d, rank, std)
        self.k = LoraLinear(d, d, rank, std)
        self.v = LoraLinear(d, d, rank, std)
        self.out = LoraLinear(d, d, rank, std)
        self.fc1 = LoraLinear(d, cfg.mlp_ratio * d, rank, std)
        self.fc2 = LoraLinear(cfg.mlp_ratio * d, d, rank, std)

    def forward(self, x: torch.Tensor, c: torch.Tensor, mask: torch.Tensor, positions: torch.Tensor,
                gate: Optional[torch.Tensor] = None, return_weights: bool = False):
        shift1, scale1, shift2, scale2 = self.modulation(c).chunk(4, dim=-1)
        h = modulate(diffcore.rms_norm(x), shift1, scale1)
        split = "b t (h e) -> b h t e"
        q = rope_rotate(rearrange(self.q(h, gate), split, h=self.heads), positions)
        k = rope_rotate(rearrange(self.k(h, gate), split, h=self.heads), positions)
        v = rearrange(self.v(h, gate), split, h=self.heads)
        attended, weights = diffcore.attention(q, k, v, mask[:, None], return_weights=True)
        x = x + self.out(rearrange(attended, "b h t e -> b t (h e)"), gate)
        h = modulate(diffcore.rms_norm(x), shift2, scale2)
        x = x + self.fc2(diffcore.gelu(self.fc1(h, gate)), gate)
        if return_weights:
            return x, weights
        return x


def mma_block(layout: attnlayout.SequenceLayout, mask: torch.Tensor, positions: torch.Tensor, t_embed: torch.Tensor,
              block: MMABlock, gate: SegmentGate, index: int = 0) -> torch.Tensor:
    """One block over an assembled layout; raises with the block index when activations go non-finite."""
    scales = gate.scales(layout.segments, dtype=layout.tokens.dtype)
    out = block(layout.tokens, t_embed, mask, positions, scales)
    if not torch.isfinite(out).all():
        raise NonFiniteError(f"mma block {index}: non-finite activations")
    return out


class DiT(nn.Module):
    def __init__(self, cfg: DitConfig):
        super().__init__()
        self.cfg = cfg
        d, p = cfg.d, cfg.patch
        self.image_embedder = LoraLinear(p * p * 3, d, cfg.lora.rank, cfg.lora.init_std)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(MMABlock(cfg) for _ in range(cfg.blocks))
        self.final_modulation = nn.Linear(d, 2 * d)
        nn.init.zeros_(self.final_modulation.weight)
        nn.init.zeros_(self.final_modulation.bias)
        self.head = nn.Linear(d, p * p * 3)
        self.mask_hooks: list[Callable[[torch.Tensor], None]] = []

    @property
    def grid(self) -> tuple[int, int]:
        return self.cfg.grid, self.cfg.grid

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(diffcore.timestep_embedding(t, self.cfg.d))

    def embed_refs(self, ref_images: Sequence[torch.Tensor], gate: SegmentGate) -> list[torch.Tensor]:
        return [encode_reference(image, self.image_embedder, self.cfg.patch, self.grid,
                                 gate.scale(attnlayout.ref_tag(k)))
                for k, image in enumerate(ref_images, start=1)]

    def forward_tokens(self, noisy: torch.Tensor, t: torch.Tensor, text_tokens: torch.Tensor, relevance: torch.Tensor,
                       ref_tokens: Sequence[torch.Tensor], gate: SegmentGate, use_mask: bool = True) -> torch.Tensor:
        if noisy.shape[-3:] != (self.cfg.image_side, self.cfg.image_side, 3):
            raise ShapeError("forward_velocity", noisy.shape, (self.cfg.image_side, self.cfg.image_side, 3))
        x_tokens = self.image_embedder(patchify(noisy, self.cfg.patch), 0.0)
        layout = attnlayout.assemble(x_tokens, text_tokens, ref_tokens, relevance, self.grid)
        positions = attnlayout.rope_indices(layout, self.cfg.ref_offset)
        mask = attnlayout.build_mask(layout, symmetric=self.cfg.symmetric_mask, enabled=use_mask)
        for hook in self.mask_hooks:
            hook(mask)
        c = self.embed_time(t)
        for index, block in enumerate(self.blocks):
            layout.tokens = mma_block(layout, mask, positions, c, block, gate, index)
        noisy_rows = layout.tokens[:, layout.segment_slice(attnlayout.NOISY)]
        shift, scale = self.final_modulation(c).chunk(2, dim=-1)
        patches = self.head(modulate(diffcore.rms_norm(noisy_rows), shift, scale))
        return unpatchify(patches, self.cfg.patch, self.grid)


def forward_velocity(dit: DiT, noisy: torch.Tensor, t: torch.Tensor, text_tokens: torch.Tensor,
                     relevance: torch.Tensor, ref_images: Sequence[torch.Tensor], gate: SegmentGate,
                     use_mask: bool = True) -> torch.Tensor:
    """
    The forward_velocity function predicts the rectified-flow velocity for a batch of noisy images.

    :param dit: DiT: Backbone
    :param noisy: Tensor: ``(B, H, W, 3)`` interpolants
    :param t: Tensor: ``(B,)`` timesteps in [0, 1]
    :param text_tokens: Tensor: ``(B, M, d)`` text tokens (after the learnable-token update)
    :param relevance: Tensor: ``(B, M)`` concept-span flags
    :param ref_images: Sequence[Tensor]: Reference images, each ``(B, H, W, 3)``
    :param gate: SegmentGate: LoRA scale per segment
    :param use_mask: bool: Apply the selective cross-modal mask (all-zero mask otherwise)
    :return: Velocity field shaped like ``noisy``
    """
    if (t < 0).any() or (t > 1).any():
        raise ValueError("timesteps must lie in [0, 1]")
    ref_tokens = dit.embed_refs(ref_images, gate)
    return dit.forward_tokens(noisy, t, text_tokens, relevance, ref_tokens, gate, use_mask)
