"""Low-rank adapters with a per-token scale, so one linear layer serves both adapted and frozen segments."""
from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import nn

from align_gen_app.services.attnlayout import NOISY, TEXT, is_ref


class LoraLinear(nn.Module):
    """
    ``y = x W^T + b + scale * (x A) B`` with ``A`` Gaussian-initialised and ``B`` zero-initialised.

    ``scale`` may be a float or a tensor broadcastable against the output's token axis, e.g. ``(T, 1)``.
    """

    def __init__(self, in_features: int, out_features: int, rank: int = 16, init_std: float = 0.1,
                 bias: bool = True):
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=bias)
        self.lora_a = nn.Parameter(torch.randn(in_features, rank) * init_std)
        self.lora_b = nn.Parameter(torch.zeros(rank, out_features))

    @property
    def in_features(self) -> int:
        return self.base.in_features

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return (x @ self.lora_a) @ self.lora_b

    def forward(self, x: torch.Tensor, scale: torch.Tensor | float | None = None) -> torch.Tensor:
        y = self.base(x)
        if scale is None:
            return y
        if isinstance(scale, torch.Tensor):
            if not torch.any(scale):
                return y
        elif scale == 0:
            return y
        return y + scale * self.delta(x)


@dataclass
class SegmentGate:
    """LoRA scale per segment tag; noisy and text tokens are always unadapted."""

    ref_scale: float = 1.0
    overrides: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for tag in (NOISY, TEXT):
            if self.overrides.get(tag, 0.0) != 0.0:
                raise ValueError(f"LoRA scale for {tag} segments must stay 0")

    def scale(self, tag: str) -> float:
        if tag in self.overrides:
            return self.overrides[tag]
        return self.ref_scale if is_ref(tag) else 0.0

    def scales(self, segments: Sequence[str], dtype: torch.dtype | None = None) -> torch.Tensor:
        """Column of per-token scales, shape ``(T, 1)``."""
        return torch.tensor([self.scale(tag) for tag in segments], dtype=dtype)[:, None]


def off() -> SegmentGate:
    return SegmentGate(ref_scale=0.0)
