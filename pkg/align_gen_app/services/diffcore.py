"""
Dense-tensor primitives shared by every model component, plus a central-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects and gradients come from ``torch.autograd``; the functions
here add the shape and finiteness contract the rest of the package relies on.
"""
import contextlib
import logging
import math
from typing import Callable, Iterator, Mapping, Sequence

import torch
import torch.nn.functional as F

from align_gen_app.schemas import GradReport
from align_gen_app.services.errors import NonFiniteError, NondeterministicError, ShapeError

logger = logging.getLogger(__name__)

NEG = -1e9


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Switches torch's default dtype to float64 for the duration of the block."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def check_finite(op: str, tensor: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"{op}: non-finite values in output of shape {tuple(tensor.shape)}")
    return tensor


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return check_finite("matmul", a @ b)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as err:
        raise ShapeError("add", a.shape, b.shape) from err
    return check_finite("add", a + b)


def scale(a: torch.Tensor, alpha: float) -> torch.Tensor:
    return check_finite("scale", a * alpha)


def transpose(a: torch.Tensor) -> torch.Tensor:
    return a.transpose(-2, -1)


def concat_tokens(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    """Concatenates token matrices along the token axis (second to last)."""
    widths = {part.shape[-1] for part in parts}
    if len(widths) != 1:
        raise ShapeError("concat_tokens", *[part.shape for part in parts])
    return torch.cat(list(parts), dim=-2)


def split_tokens(a: torch.Tensor, sizes: Sequence[int]) -> list[torch.Tensor]:
    if sum(sizes) != a.shape[-2]:
        raise ShapeError("split_tokens", a.shape, tuple(sizes))
    return list(torch.split(a, list(sizes), dim=-2))


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """
    Softmax over the last axis after adding an additive mask of zeros and :data:`NEG` entries.
    Masked columns get weight that underflows to exactly zero.
    """
    if mask is not None:
        try:
            torch.broadcast_shapes(logits.shape, mask.shape)
        except RuntimeError as err:
            raise ShapeError("masked_softmax", logits.shape, mask.shape) from err
        logits = logits + mask
    return check_finite("masked_softmax", torch.softmax(logits, dim=-1))


def rms_norm(x: torch.Tensor, weight: torch.Tensor | None = None, eps: float = 1e-6) -> torch.Tensor:
    """RMS normalisation over the last axis; ``weight`` is an optional scale (no bias)."""
    if weight is not None and weight.shape[-1] != x.shape[-1]:
        raise ShapeError("rms_norm", x.shape, weight.shape)
    out = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    if weight is not None:
        out = out * weight
    return check_finite("rms_norm", out)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="tanh")


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError("embedding", ids.shape, table.shape, detail=f"id out of range [0, {table.shape[0]})")
    return F.embedding(ids, table)


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    return check_finite("mse", F.mse_loss(pred, target))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of timesteps ``t`` (shape ``(B,)``) into ``(B, dim)``."""
    if dim % 2:
        raise ShapeError("timestep_embedding", t.shape, (dim,), detail="dim must be even")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    # t lives in [0, 1]; scale up so low frequencies still move
    args = 1000.0 * t[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None = None,
              return_weights: bool = False):
    """Scaled dot-product attention over ``(..., T, head_dim)`` inputs."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    logits = matmul(q, transpose(k)) / math.sqrt(q.shape[-1])
    weights = masked_softmax(logits, mask)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def gradcheck(module_forward: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
              eps: float = 1e-6, tol: float | None = None, op_name: str = "forward") -> GradReport:
    """
    The gradcheck function compares analytic gradients of a scalar forward against central differences.

    Every scalar of every tensor in ``params`` is perturbed by ``±eps`` and
    ``rel_err = |a - n| / max(1, |a|, |n|)`` is recorded per parameter.

    :param module_forward: Callable[[], Tensor]: Closure recomputing the forward from ``params``
    :param params: Mapping[str, Tensor]: Leaf tensors (float64) to check, modified in place and restored
    :param eps: float: Finite-difference step, in [1e-6, 1e-3]
    :param tol: float | None: If given, a warning is logged when the report fails it
    :param op_name: str: Name recorded on the report
    :return: A GradReport with the worst relative error overall and per parameter
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-6, 1e-3]")
    for name, tensor in params.items():
        if tensor.dtype != torch.float64:
            raise ValueError(f"gradcheck needs float64 parameters, {name} is {tensor.dtype}")

    def scalar_forward() -> torch.Tensor:
        out = module_forward()
        return out.sum() if out.dim() else out

    with torch.no_grad():
        first, second = scalar_forward(), scalar_forward()
    if not torch.equal(first, second):
        raise NondeterministicError(f"{op_name}: two evaluations disagree ({first.item()} vs {second.item()})")

    leaves = list(params.values())
    for leaf in leaves:
        leaf.requires_grad_(True)
    analytic = torch.autograd.grad(scalar_forward(), leaves, allow_unused=True)

    per_parameter = {}
    with torch.no_grad():
        for (name, leaf), grad in zip(params.items(), analytic):
            grad = torch.zeros_like(leaf) if grad is None else grad
            flat, flat_grad = leaf.view(-1), grad.reshape(-1)
            worst = 0.0
            for index in range(flat.numel()):
                original = flat[index].item()
                flat[index] = original + eps
                plus = scalar_forward().item()
                flat[index] = original - eps
                minus = scalar_forward().item()
                flat[index] = original
                numeric = (plus - minus) / (2 * eps)
                a = flat_grad[index].item()
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
            per_parameter[name] = worst

    report = GradReport(op_name=op_name, max_rel_err=max(per_parameter.values(), default=0.0),
                        per_parameter=per_parameter)
    if tol is not None and not report.passed(tol):
        logger.warning("gradcheck %s failed: max_rel_err=%.3e (tol %.1e)", op_name, report.max_rel_err, tol)
    return report
