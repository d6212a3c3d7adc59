"""
Deviation Extraction Module: updates the learnable token from the concept tokens and the reference's
redux tokens with a residual self-attention, a residual cross-attention and a residual MLP.
"""
from typing import Sequence

import torch
from einops import rearrange
from torch import nn

from align_gen_app.schemas import ConceptSpan, PromptBundle, SpliceMode
from align_gen_app.services import diffcore
from align_gen_app.services.errors import ShapeError


class _Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        split = "... t (h e) -> ... h t e"
        q = rearrange(self.q(query), split, h=self.heads)
        k = rearrange(self.k(context), split, h=self.heads)
        v = rearrange(self.v(context), split, h=self.heads)
        return self.out(rearrange(diffcore.attention(q, k, v), "... h t e -> ... t (h e)"))


class DemModule(nn.Module):
    def __init__(self, d: int, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.d = d
        self.sa = _Attention(d, heads)
        self.ca = _Attention(d, heads)
        self.fc1 = nn.Linear(d, mlp_ratio * d)
        self.fc2 = nn.Linear(mlp_ratio * d, d)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, c_concept: torch.Tensor, c_redux: torch.Tensor) -> torch.Tensor:
        return dem_forward(c_concept, c_redux, self)

    def is_identity(self) -> bool:
        return all(not torch.any(p) for p in (self.sa.out.weight, self.sa.out.bias, self.ca.out.weight,
                                               self.ca.out.bias, self.fc2.weight, self.fc2.bias))


def extract_concept_tokens(text_tokens: torch.Tensor, span: ConceptSpan) -> torch.Tensor:
    """Rows ``[start, end)`` of a ``(M, d)`` text matrix; row 0 of the result is the learnable token."""
    m = text_tokens.shape[-2]
    if not 0 <= span.start < span.end <= m:
        raise ShapeError("extract_concept_tokens", text_tokens.shape, (span.start, span.end),
                         detail="span outside the prompt")
    return text_tokens[..., span.start:span.end, :]


def dem_forward(c_concept: torch.Tensor, c_redux: torch.Tensor, dem: DemModule) -> torch.Tensor:
    """
    The dem_forward function applies the three residual stages to ``(1+l, d)`` concept tokens.

    :param c_concept: Tensor: Learnable token followed by the concept-name tokens
    :param c_redux: Tensor: ``(R, d)`` redux tokens, used as keys and values of the cross-attention
    :param dem: DemModule: Module weights
    :return: Updated concept tokens, same shape as ``c_concept``
    """
    if c_concept.shape[-1] != c_redux.shape[-1] or c_concept.shape[-1] != dem.d:
        raise ShapeError("dem_forward", c_concept.shape, c_redux.shape, detail=f"module width {dem.d}")
    c = c_concept + dem.sa(c_concept, c_concept)
    c = c + dem.ca(c, c_redux)
    return diffcore.check_finite("dem_forward", c + dem.fc2(diffcore.gelu(dem.fc1(c))))


def splice_token(text_tokens: torch.Tensor, span: ConceptSpan, updated: torch.Tensor,
                 mode: SpliceMode = "first_only") -> torch.Tensor:
    """
    Writes the DEM output back into a ``(M, d)`` text matrix: only the learnable-token row for
    ``first_only``, the whole span for ``all``. Every other row is passed through untouched.
    """
    if updated.shape[-1] != text_tokens.shape[-1] or updated.shape[-2] != span.length:
        raise ShapeError("splice_token", text_tokens.shape, updated.shape, (span.start, span.end))
    if mode == "first_only":
        middle, resume = updated[..., :1, :], span.start + 1
    elif mode == "all":
        middle, resume = updated, span.end
    else:
        raise ValueError(f"unknown splice mode {mode!r}")
    return torch.cat([text_tokens[..., :span.start, :], middle, text_tokens[..., resume:, :]], dim=-2)


def apply_dem(text_tokens: torch.Tensor, bundles: Sequence[PromptBundle], redux: Sequence[Sequence[torch.Tensor]],
              dem: DemModule, mode: SpliceMode = "first_only") -> torch.Tensor:
    """
    Runs the DEM independently on every concept span of every batch element.

    :param text_tokens: Tensor: ``(B, M, d)`` encoded prompts
    :param bundles: Sequence[PromptBundle]: One bundle per batch element
    :param redux: Sequence[Sequence[Tensor]]: Per element, one ``(R, d)`` redux matrix per span
    :param dem: DemModule: Shared module weights
    :param mode: SpliceMode: Which rows of the update are written back
    :return: ``(B, M, d)`` text tokens with the learnable token replaced
    """
    rows = []
    for element, bundle, element_redux in zip(text_tokens, bundles, redux):
        if len(element_redux) < len(bundle.spans):
            raise ShapeError("apply_dem", (len(bundle.spans),), (len(element_redux),),
                             detail="one redux matrix per concept span is required")
        for span, c_redux in zip(bundle.spans, element_redux):
            updated = dem_forward(extract_concept_tokens(element, span), c_redux, dem)
            element = splice_token(element, span, updated, mode)
        rows.append(element)
    return torch.stack(rows)
