"""Rectified-flow objective and the Euler sampler with classifier-free guidance."""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

from align_gen_app.schemas import PromptBundle, SampleConfig, SpliceMode
from align_gen_app.services import diffcore
from align_gen_app.services.errors import NumericError

logger = logging.getLogger(__name__)

VelocityFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class FlowSample:
    x_data: torch.Tensor
    noise: torch.Tensor
    t: torch.Tensor
    x_t: torch.Tensor
    v_target: torch.Tensor


def uniform_t(batch: int, generator: torch.Generator) -> torch.Tensor:
    return torch.rand(batch, generator=generator)


def make_flow_sample(x_data: torch.Tensor, generator: torch.Generator,
                     t_sampler: Callable[[int, torch.Generator], torch.Tensor] = uniform_t,
                     t: Optional[torch.Tensor] = None) -> FlowSample:
    """
    The make_flow_sample function draws noise and a timestep per element and builds the interpolant
    ``x_t = (1 - t) x_data + t noise`` with target velocity ``noise - x_data``.

    :param x_data: Tensor: ``(B, H, W, 3)`` clean images
    :param generator: torch.Generator: Source of noise and timesteps
    :param t_sampler: Callable: Timestep distribution, uniform on [0, 1] by default
    :param t: Tensor | None: Fixed timesteps overriding the sampler
    :return: A FlowSample
    """
    noise = torch.randn(x_data.shape, generator=generator, dtype=x_data.dtype)
    if t is None:
        t = t_sampler(x_data.shape[0], generator).to(x_data.dtype)
    if (t < 0).any() or (t > 1).any():
        raise ValueError("timesteps must lie in [0, 1]")
    tt = t.view(-1, *([1] * (x_data.dim() - 1)))
    return FlowSample(x_data=x_data, noise=noise, t=t, x_t=(1 - tt) * x_data + tt * noise, v_target=noise - x_data)


def loss(sample: FlowSample, velocity_fn: VelocityFn) -> torch.Tensor:
    """Mean squared velocity error over batch and pixels."""
    v_pred = velocity_fn(sample.x_t, sample.t)
    try:
        return diffcore.mse(v_pred, sample.v_target)
    except NumericError as err:
        raise NumericError(f"non-finite flow loss (t range [{sample.t.min().item():.3f}, "
                           f"{sample.t.max().item():.3f}], |v_pred| max {v_pred.abs().max().item():.3e})") from err


def guided(cond_fn: VelocityFn, uncond_fn: Optional[VelocityFn], guidance: float) -> VelocityFn:
    """``v_u + g (v_c - v_u)``; g == 1 evaluates only the conditional branch and g == 0 only the unconditional."""
    if guidance == 1.0 or uncond_fn is None:
        return cond_fn
    if guidance == 0.0:
        return uncond_fn

    def velocity(x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        v_c = cond_fn(x, t)
        v_u = uncond_fn(x, t)
        return v_u + guidance * (v_c - v_u)

    return velocity


def euler_integrate(velocity_fn: VelocityFn, noise: torch.Tensor, steps: int,
                    telemetry: Optional[list[dict]] = None) -> torch.Tensor:
    """
    Integrates from t=1 down to t=0 on a uniform grid: ``x <- x - (1/steps) v(x, t)``.
    No clamping is applied here.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = 1.0 / steps
    x = noise
    for step in range(steps, 0, -1):
        t = torch.full((x.shape[0],), step * dt, dtype=x.dtype)
        v = velocity_fn(x, t)
        if telemetry is not None:
            telemetry.append({"step": steps - step, "t": step * dt, "v_norm": v.norm().item()})
        x = x - dt * v
    return x


def initial_noise(shape: Sequence[int], seed: int, dtype: torch.dtype | None = None) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(tuple(shape), generator=generator, dtype=dtype)


@torch.no_grad()
def sample(model, bundles: Sequence[PromptBundle], ref_images: Sequence[torch.Tensor], cfg: SampleConfig,
           redux_images: Optional[Sequence[torch.Tensor]] = None, ref_scale: float = 1.0, use_dem: bool = True,
           use_mask: bool = True, splice_mode: SpliceMode = "first_only",
           telemetry: Optional[list[dict]] = None) -> torch.Tensor:
    """
    The sample function generates images for a batch of prompts and references.

    The conditioning (including the learnable-token update) is computed once and reused at every step.
    The unconditional branch is the empty prompt with black references.

    :param model: AlignGenModel: Frozen model
    :param bundles: Sequence[PromptBundle]: One prompt per image
    :param ref_images: Sequence[Tensor]: K reference batches ``(B, H, W, 3)``
    :param cfg: SampleConfig: Steps, guidance and seed
    :param redux_images: Sequence[Tensor] | None: DEM inputs, defaults to ``ref_images``
    :param ref_scale: float: LoRA scale on reference segments
    :param use_dem: bool: Update the learnable token
    :param use_mask: bool: Apply the selective attention mask
    :param splice_mode: SpliceMode: Rows written back by the DEM
    :param telemetry: list | None: Receives one ``step, t, v_norm`` dict per step
    :return: ``(B, H, W, 3)`` images, clamped to [0, 1] when ``cfg.clamp``
    """
    batch = len(bundles)
    cond = model.prepare(bundles, ref_images, redux_images, ref_scale, use_dem, use_mask, splice_mode)
    uncond = model.prepare_unconditional(batch, len(ref_images), ref_scale, use_mask) if cfg.guidance != 1.0 else None
    return _integrate(model, cond, uncond, batch, cfg, telemetry)


@torch.no_grad()
def sample_variation(model, images: torch.Tensor, cfg: SampleConfig,
                     telemetry: Optional[list[dict]] = None) -> torch.Tensor:
    """Image variation from redux tokens alone, guided against the empty prompt."""
    batch = images.shape[0]
    cond = model.prepare_variation(images)
    uncond = model.prepare_unconditional(batch, 1, ref_scale=0.0)
    return _integrate(model, cond, uncond, batch, cfg, telemetry)


def _integrate(model, cond, uncond, batch: int, cfg: SampleConfig, telemetry) -> torch.Tensor:
    noise = initial_noise((batch, *model.image_shape), cfg.seed)
    cond_fn = lambda x, t: model.velocity(x, t, cond)
    uncond_fn = None if uncond is None else (lambda x, t: model.velocity(x, t, uncond))
    x = euler_integrate(guided(cond_fn, uncond_fn, cfg.guidance), noise, cfg.steps, telemetry)
    if not torch.isfinite(x).all():
        raise NumericError("sampler produced non-finite pixels")
    return x.clamp(0.0, 1.0) if cfg.clamp else x
