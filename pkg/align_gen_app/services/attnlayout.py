"""
Sequence assembly for multi-modal attention: ``[noisy(N); text(M); ref_1(N); ...; ref_K(N)]``,
2D position indices for rotary encoding, and the selective cross-modal attention mask.
"""
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from align_gen_app.services.diffcore import NEG, concat_tokens
from align_gen_app.services.errors import ShapeError

NOISY = "noisy"
TEXT = "text"


def ref_tag(k: int) -> str:
    return f"ref_{k}"


def is_ref(tag: str) -> bool:
    return tag.startswith("ref_")


@dataclass
class SequenceLayout:
    tokens: torch.Tensor
    segments: list[str]
    relevance: torch.Tensor
    grid: tuple[int, int]
    n_noisy: int
    n_text: int
    n_refs: int
    positions: Optional[torch.Tensor] = None

    @property
    def length(self) -> int:
        return len(self.segments)

    def segment_slice(self, tag: str) -> slice:
        if tag == NOISY:
            return slice(0, self.n_noisy)
        if tag == TEXT:
            return slice(self.n_noisy, self.n_noisy + self.n_text)
        k = int(tag.split("_")[1])
        start = self.n_noisy + self.n_text + (k - 1) * self.n_noisy
        return slice(start, start + self.n_noisy)


def segment_tags(n_noisy: int, n_text: int, n_refs: int) -> list[str]:
    tags = [NOISY] * n_noisy + [TEXT] * n_text
    for k in range(1, n_refs + 1):
        tags += [ref_tag(k)] * n_noisy
    return tags


def assemble(x_tokens: torch.Tensor, text_tokens: torch.Tensor, ref_tokens: Sequence[torch.Tensor],
             relevance: torch.Tensor, grid: tuple[int, int]) -> SequenceLayout:
    """
    The assemble function concatenates the noisy, text and reference streams in contract order.

    :param x_tokens: Tensor: Noisy image tokens ``(B, N, d)``
    :param text_tokens: Tensor: Text tokens after the learnable-token update ``(B, M, d)``
    :param ref_tokens: Sequence[Tensor]: Zero or more reference token matrices ``(B, N, d)``
    :param relevance: Tensor: Boolean ``(B, M)`` flags, true on concept spans
    :param grid: tuple[int, int]: Noisy patch grid ``(H', W')`` with ``H' * W' == N``
    :return: A SequenceLayout with segment tags attached
    """
    n = x_tokens.shape[-2]
    if grid[0] * grid[1] != n:
        raise ShapeError("assemble", x_tokens.shape, grid, detail="grid does not match noisy token count")
    for ref in ref_tokens:
        if ref.shape[-2] != n:
            raise ShapeError("assemble", x_tokens.shape, ref.shape, detail="reference token count differs")
    if relevance.shape[-1] != text_tokens.shape[-2]:
        raise ShapeError("assemble", text_tokens.shape, relevance.shape)
    tokens = concat_tokens([x_tokens, text_tokens, *ref_tokens])
    m = text_tokens.shape[-2]
    segments = segment_tags(n, m, len(ref_tokens))
    return SequenceLayout(tokens=tokens, segments=segments, relevance=relevance, grid=tuple(grid),
                          n_noisy=n, n_text=m, n_refs=len(ref_tokens))


def rope_indices(layout: SequenceLayout, offset: Optional[int] = None) -> torch.Tensor:
    """
    Per-token ``(row, col)`` indices: text at (0, 0), noisy token (i, j) at (i, j), and every
    reference's token (i, j) at (i, j + offset) where offset defaults to W'.
    """
    h, w = layout.grid
    offset = w if offset is None else offset
    if offset < w:
        raise ShapeError("rope_indices", (h, w), (offset,), detail="reference offset overlaps the noisy grid")
    rows = torch.arange(h).repeat_interleave(w)
    cols = torch.arange(w).repeat(h)
    grid_positions = torch.stack([rows, cols], dim=-1)
    ref_positions = torch.stack([rows, cols + offset], dim=-1)
    parts = [grid_positions, torch.zeros(layout.n_text, 2, dtype=torch.long)]
    parts += [ref_positions] * layout.n_refs
    positions = torch.cat(parts, dim=0)
    layout.positions = positions
    return positions


def build_mask(layout: SequenceLayout, symmetric: bool = False, enabled: bool = True) -> torch.Tensor:
    """
    The build_mask function returns the additive ``(B, T, T)`` attention bias.

    Concept-irrelevant text queries get :data:`NEG` on every reference key, and with two or more
    references each reference's queries get :data:`NEG` on the other references' keys. With
    ``symmetric`` reference queries are also blocked from irrelevant text keys. ``enabled=False``
    returns an all-zero mask of the same shape.

    :param layout: SequenceLayout: Assembled sequence with relevance flags
    :param symmetric: bool: Also block the reference-to-irrelevant-text direction
    :param enabled: bool: When false, no entry is masked
    :return: The additive mask tensor
    """
    batch = layout.relevance.shape[0]
    t = layout.length
    dtype = layout.tokens.dtype
    mask = torch.zeros(batch, t, t, dtype=dtype)
    if not enabled or layout.n_refs == 0:
        return mask
    text = layout.segment_slice(TEXT)
    irrelevant = ~layout.relevance.bool()
    ref_start = layout.n_noisy + layout.n_text
    ref_cols = torch.zeros(t, dtype=torch.bool)
    ref_cols[ref_start:] = True

    blocked = torch.zeros(batch, t, t, dtype=torch.bool)
    blocked[:, text, :] = irrelevant[:, :, None] & ref_cols[None, None, :]
    if symmetric:
        blocked[:, ref_start:, text] = irrelevant[:, None, :].expand(batch, t - ref_start, layout.n_text)
    for i in range(1, layout.n_refs + 1):
        for j in range(1, layout.n_refs + 1):
            if i != j:
                blocked[:, layout.segment_slice(ref_tag(i)), layout.segment_slice(ref_tag(j))] = True
    return mask.masked_fill(blocked, NEG)


def dump_mask(mask: torch.Tensor, segments: Sequence[str]) -> str:
    """Text grid of one ``(T, T)`` mask: ``X`` for blocked, ``.`` for open, with a segment legend."""
    lines = []
    for row, tag in zip(mask.tolist(), segments):
        cells = "".join("X" if value <= NEG / 2 else "." for value in row)
        lines.append(f"{tag:>6} {cells}")
    return "\n".join(lines)
