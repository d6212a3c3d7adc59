"""The three conditioning streams: text tokens, redux tokens (DEM input only) and reference tokens."""
import math

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from align_gen_app.services import diffcore
from align_gen_app.services.errors import ShapeError
from align_gen_app.services.lora import LoraLinear


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """``(B, H, W, 3)`` images to ``(B, (H/p)(W/p), p*p*3)`` raster-ordered patches."""
    h, w = images.shape[-3], images.shape[-2]
    if h % patch or w % patch:
        raise ShapeError("patchify", images.shape, (patch,), detail="H and W must be divisible by patch size")
    return rearrange(images, "... (h p1) (w p2) c -> ... (h w) (p1 p2 c)", p1=patch, p2=patch)


def unpatchify(patches: torch.Tensor, patch: int, grid: tuple[int, int]) -> torch.Tensor:
    return rearrange(patches, "... (h w) (p1 p2 c) -> ... (h p1) (w p2) c", h=grid[0], w=grid[1],
                     p1=patch, p2=patch, c=3)


def black_reference(height: int, width: int, batch: int | None = None) -> torch.Tensor:
    shape = (height, width, 3) if batch is None else (batch, height, width, 3)
    return torch.zeros(shape)


class SelfAttentionBlock(nn.Module):
    """Pre-norm transformer encoder block with full attention."""

    def __init__(self, d: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.Parameter(torch.ones(d))
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.norm2 = nn.Parameter(torch.ones(d))
        self.fc1 = nn.Linear(d, mlp_ratio * d)
        self.fc2 = nn.Linear(mlp_ratio * d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = diffcore.rms_norm(x, self.norm1)
        q, k, v = rearrange(self.qkv(h), "b t (three h e) -> three b h t e", three=3, h=self.heads)
        attended = rearrange(diffcore.attention(q, k, v), "b h t e -> b t (h e)")
        x = x + self.out(attended)
        h = diffcore.rms_norm(x, self.norm2)
        return x + self.fc2(diffcore.gelu(self.fc1(h)))


class TextEncoder(nn.Module):
    """Embedding lookup followed by one self-attention block; the learnable-token row is supplied by the caller."""

    def __init__(self, vocab_size: int, d: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.table = nn.Parameter(torch.randn(vocab_size, d) * 0.5)
        self.block = SelfAttentionBlock(d, heads, mlp_ratio)

    def forward(self, ids: torch.Tensor, s_star: torch.Tensor | None = None, s_star_id: int = 1) -> torch.Tensor:
        tokens = diffcore.embedding(ids, self.table)
        if s_star is not None:
            tokens = torch.where((ids == s_star_id)[..., None], s_star.expand_as(tokens), tokens)
        return self.block(tokens)


class ReduxEncoder(nn.Module):
    """Patch embedding, mean-pooling to a fixed token count, then a projection into the text space."""

    def __init__(self, d: int, patch: int, tokens: int, normalize: bool = False):
        super().__init__()
        self.patch = patch
        self.tokens = tokens
        self.normalize = normalize
        self.embed = nn.Linear(patch * patch * 3, d)
        self.proj = nn.Linear(d, d)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        patches = self.embed(patchify(images, self.patch))
        n = patches.shape[-2]
        if n % self.tokens:
            raise ShapeError("encode_redux", patches.shape, (self.tokens,),
                             detail="patch count must be a multiple of the redux token count")
        pooled = F.avg_pool1d(patches.transpose(-2, -1), kernel_size=n // self.tokens).transpose(-2, -1)
        out = self.proj(pooled)
        if self.normalize:
            out = F.normalize(out, dim=-1) * math.sqrt(out.shape[-1])
        return out


def encode_text(ids: torch.Tensor, encoder: TextEncoder, s_star: torch.Tensor | None,
                s_star_id: int = 1) -> torch.Tensor:
    """
    The encode_text function maps ``(B, M)`` token ids to ``(B, M, d)`` text tokens.

    :param ids: Tensor: Token ids, all below the vocabulary size
    :param encoder: TextEncoder: Embedding table and encoder block
    :param s_star: Tensor | None: Learnable token embedding substituted at ``s_star_id`` positions
    :param s_star_id: int: Reserved vocabulary id of the learnable token
    :return: Text token matrix
    """
    return encoder(ids, s_star, s_star_id)


def encode_redux(images: torch.Tensor, encoder: ReduxEncoder) -> torch.Tensor:
    return encoder(images)


def encode_reference(images: torch.Tensor, embedder: LoraLinear, patch: int, grid: tuple[int, int],
                     lora_scale: float | torch.Tensor = 0.0) -> torch.Tensor:
    """
    Patchify reference images and project them with the shared image embedder plus its scaled LoRA delta.
    The patch grid must equal the noisy image grid.
    """
    h, w = images.shape[-3], images.shape[-2]
    if (h // patch, w // patch) != tuple(grid) or h % patch or w % patch:
        raise ShapeError("encode_reference", images.shape, grid, detail="reference grid differs from target grid")
    return embedder(patchify(images, patch), lora_scale)
