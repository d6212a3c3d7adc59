"""
Gradient-check suites for every trainable block, run in float64 on tiny shapes. Zero-initialised
projections are re-randomised first so every gradient path carries signal.
"""
import logging
from typing import Callable, Optional, Sequence

import torch
from torch import nn

from align_gen_app.schemas import DemConfig, DitConfig, GradReport, LoraConfig
from align_gen_app.services import attnlayout, diffcore
from align_gen_app.services.dem import DemModule, dem_forward
from align_gen_app.services.ditnet import rope_rotate
from align_gen_app.services.errors import UsageError
from align_gen_app.services.lora import LoraLinear, SegmentGate
from align_gen_app.services.model import AlignGenModel
from align_gen_app.services.promptkit import PAD, S_STAR, Vocabulary, build_prompt
from align_gen_app.services.synthdata import make_concept

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-4


def _randomize(module: nn.Module, generator: torch.Generator, std: float = 0.3) -> None:
    with torch.no_grad():
        for param in module.parameters():
            param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * std)


def _params(module: nn.Module) -> dict[str, torch.Tensor]:
    return dict(module.named_parameters())


def primitives_suite(generator: torch.Generator) -> GradReport:
    """matmul, add, scale, rms_norm, gelu and masked softmax chained into one scalar."""
    a = torch.randn(3, 4, generator=generator)
    b = torch.randn(4, 5, generator=generator)
    bias = torch.randn(5, generator=generator)
    weight = torch.randn(5, generator=generator)
    mask = torch.zeros(3, 5)
    mask[0, 1] = diffcore.NEG

    def forward() -> torch.Tensor:
        h = diffcore.add(diffcore.matmul(a, b), bias)
        h = diffcore.gelu(diffcore.rms_norm(h, weight))
        return (diffcore.masked_softmax(diffcore.scale(h, 1.7), mask) * h).sum()

    return diffcore.gradcheck(forward, {"a": a, "b": b, "bias": bias, "weight": weight}, op_name="primitives")


def attention_suite(generator: torch.Generator) -> GradReport:
    """Masked attention with 2D rotary positions over an assembled noisy/text/reference layout."""
    d, grid = 8, (2, 2)
    x_tokens = torch.randn(1, 4, d, generator=generator)
    text = torch.randn(1, 3, d, generator=generator)
    ref = torch.randn(1, 4, d, generator=generator)
    relevance = torch.tensor([[False, True, False]])
    layout = attnlayout.assemble(x_tokens, text, [ref], relevance, grid)
    positions = attnlayout.rope_indices(layout)
    mask = attnlayout.build_mask(layout)
    wq, wk, wv = (torch.randn(d, d, generator=generator) * 0.5 for _ in range(3))
    tokens = layout.tokens.clone()

    def forward() -> torch.Tensor:
        q = rope_rotate(tokens @ wq, positions)
        k = rope_rotate(tokens @ wk, positions)
        return (diffcore.attention(q, k, tokens @ wv, mask) ** 2).sum()

    return diffcore.gradcheck(forward, {"tokens": tokens, "wq": wq, "wk": wk, "wv": wv}, op_name="attention")


def dem_suite(generator: torch.Generator) -> GradReport:
    dem = DemModule(8, heads=2, mlp_ratio=2)
    _randomize(dem, generator)
    concept = torch.randn(3, 8, generator=generator)
    redux = torch.randn(4, 8, generator=generator)
    params = {"c_concept": concept, "c_redux": redux, **_params(dem)}
    return diffcore.gradcheck(lambda: (dem_forward(concept, redux, dem) ** 2).sum(), params, op_name="dem")


def lora_suite(generator: torch.Generator) -> GradReport:
    """A LoRA linear gated per token: text rows at scale 0, reference rows at scale 1."""
    layer = LoraLinear(6, 5, rank=3)
    _randomize(layer, generator)
    x = torch.randn(1, 7, 6, generator=generator)
    segments = [attnlayout.NOISY] * 2 + [attnlayout.TEXT] * 2 + [attnlayout.ref_tag(1)] * 3
    scales = SegmentGate(ref_scale=1.0).scales(segments, dtype=x.dtype)
    params = {"x": x, **_params(layer)}
    return diffcore.gradcheck(lambda: (layer(x, scales) ** 2).sum(), params, op_name="lora")


def tiny_model_config() -> DitConfig:
    """One block, d=8, a 2x2 patch grid and four text tokens."""
    return DitConfig(d=8, blocks=1, heads=2, patch=2, image_side=4, mlp_ratio=2, max_text_len=4,
                     redux_tokens=2, redux_patch=2, lora=LoraConfig(rank=2), dem=DemConfig(heads=2, mlp_ratio=2))


def tiny_vocabulary() -> Vocabulary:
    return Vocabulary([PAD, S_STAR, "a", "boxy", "square", "on", "white", "background", "round", "circle"])


def model_suite(generator: torch.Generator) -> GradReport:
    """The whole composed model: text encoder, DEM splice, gated reference embedding and one MMA block."""
    vocab = tiny_vocabulary()
    model = AlignGenModel(tiny_model_config(), vocab)
    _randomize(model, generator)
    bundle = build_prompt("a {C}", make_concept("square", "red", "plain"), "surface", vocab, max_len=4)
    x_t = torch.randn(1, 4, 4, 3, generator=generator)
    ref = torch.rand(1, 4, 4, 3, generator=generator)
    t = torch.tensor([0.4])

    def forward() -> torch.Tensor:
        cond = model.prepare([bundle], [ref])
        return (model.velocity(x_t, t, cond) ** 2).sum()

    return diffcore.gradcheck(forward, _params(model), op_name="model")


SUITES: dict[str, Callable[[torch.Generator], GradReport]] = {
    "primitives": primitives_suite,
    "attention": attention_suite,
    "dem": dem_suite,
    "lora": lora_suite,
    "model": model_suite,
}


def run_suites(names: Optional[Sequence[str]] = None, seed: int = 0, tol: float = DEFAULT_TOL) -> list[GradReport]:
    """
    The run_suites function runs the named gradient checks (all of them by default) in float64.

    :param names: Sequence[str] | None: Suite names from :data:`SUITES`
    :param seed: int: Seed of the random inputs and weights
    :param tol: float: Relative error a report must stay below
    :return: One GradReport per suite, in request order
    """
    names = list(SUITES) if not names else list(names)
    unknown = [name for name in names if name not in SUITES]
    if unknown:
        raise UsageError(f"unknown gradcheck module(s): {', '.join(unknown)}; choose from {', '.join(SUITES)}")
    reports = []
    with diffcore.float64_mode():
        for name in names:
            generator = torch.Generator().manual_seed(seed)
            report = SUITES[name](generator)
            logger.info("gradcheck %s: max_rel_err %.3e (%s)", name, report.max_rel_err,
                        "ok" if report.passed(tol) else "FAILED")
            reports.append(report)
    return reports
