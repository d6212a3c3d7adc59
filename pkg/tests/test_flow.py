import math

import pytest
import torch

from align_gen_app.schemas import SampleConfig
from align_gen_app.services import flow
from align_gen_app.services.errors import NumericError
from align_gen_app.services.promptkit import build_multi_prompt, build_prompt
from align_gen_app.services.synthdata import make_concept


def test_flow_sample_interpolant():
    x = torch.rand(3, 4, 4, 3)
    sample = flow.make_flow_sample(x, torch.Generator().manual_seed(0), t=torch.tensor([0.0, 0.5, 1.0]))
    assert torch.equal(sample.x_t[0], x[0])
    assert torch.allclose(sample.x_t[2], sample.noise[2])
    assert torch.allclose(sample.x_t[1], 0.5 * (x[1] + sample.noise[1]))
    assert torch.equal(sample.v_target, sample.noise - x)
    with pytest.raises(ValueError):
        flow.make_flow_sample(x, torch.Generator(), t=torch.tensor([0.0, 1.5, 0.2]))


def test_loss_zero_for_exact_velocity():
    sample = flow.make_flow_sample(torch.rand(2, 4, 4, 3), torch.Generator().manual_seed(1))
    assert flow.loss(sample, lambda x_t, t: sample.v_target).item() == 0.0


def test_loss_non_finite_raises():
    sample = flow.make_flow_sample(torch.rand(1, 2, 2, 3), torch.Generator().manual_seed(1))
    with pytest.raises(NumericError):
        flow.loss(sample, lambda x_t, t: torch.full_like(x_t, float("nan")))


def test_euler_constant_field_is_exact():
    noise = torch.randn(2, 4, 4, 3)
    c = torch.full_like(noise, 0.25)
    out = flow.euler_integrate(lambda x, t: c, noise, steps=7)
    assert torch.allclose(out, noise - c, atol=1e-6)


def test_euler_linear_field_matches_product():
    # v = x gives x0 = x1 * (1 - 1/steps) ** steps
    noise = torch.randn(1, 2, 2, 3, dtype=torch.float64)
    out = flow.euler_integrate(lambda x, t: x, noise, steps=10)
    assert torch.allclose(out, noise * 0.9 ** 10)
    assert 0.9 ** 10 == pytest.approx(math.exp(-1), abs=0.05)


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_euler_linear_fields_at_default_steps(sign):
    noise = torch.randn(2, 4, 4, 3, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    out = flow.euler_integrate(lambda x, t: sign * x, noise, steps=28)
    expected = noise * (1 - sign / 28) ** 28
    assert (out - expected).abs().max().item() < 1e-6


def test_doubling_steps_halves_endpoint_error():
    noise = torch.ones(1, dtype=torch.float64)
    exact = math.exp(-1)
    errors = [abs(flow.euler_integrate(lambda x, t: x, noise, steps=n).item() - exact) for n in (7, 14, 28, 56)]
    for coarse, fine in zip(errors, errors[1:]):
        assert fine < coarse
        assert 0.4 < fine / coarse < 0.6


def test_loss_of_constant_offset_is_its_square():
    sample = flow.make_flow_sample(torch.rand(2, 4, 4, 3, dtype=torch.float64), torch.Generator().manual_seed(2))
    assert flow.loss(sample, lambda x_t, t: sample.v_target + 0.3).item() == pytest.approx(0.09)
    v_pred = torch.randn(2, 4, 4, 3, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    scripted = sum((a - b) ** 2 for a, b in zip(v_pred.flatten().tolist(), sample.v_target.flatten().tolist()))
    assert flow.loss(sample, lambda x_t, t: v_pred).item() == pytest.approx(scripted / v_pred.numel())


def test_euler_telemetry():
    telemetry = []
    flow.euler_integrate(lambda x, t: torch.ones_like(x), torch.zeros(1, 2, 2, 3), steps=4, telemetry=telemetry)
    assert [row["step"] for row in telemetry] == [0, 1, 2, 3]
    assert [row["t"] for row in telemetry] == pytest.approx([1.0, 0.75, 0.5, 0.25])
    with pytest.raises(ValueError):
        flow.euler_integrate(lambda x, t: x, torch.zeros(1), steps=0)


def test_guided_branch_selection():
    calls = []

    def cond(x, t):
        calls.append("c")
        return torch.ones_like(x)

    def uncond(x, t):
        calls.append("u")
        return torch.zeros_like(x)

    x, t = torch.zeros(2), torch.zeros(1)
    assert torch.equal(flow.guided(cond, uncond, 1.0)(x, t), torch.ones(2))
    assert calls == ["c"]
    assert torch.equal(flow.guided(cond, uncond, 0.0)(x, t), torch.zeros(2))
    assert torch.equal(flow.guided(cond, uncond, 3.0)(x, t), torch.full((2,), 3.0))


def test_sample_is_deterministic_per_seed(model, vocab, red_square):
    bundle = build_prompt("a {C} on white background", red_square, "surface", vocab)
    ref = torch.rand(1, 16, 16, 3)
    cfg = SampleConfig(steps=3, guidance=2.0, seed=11)
    first = flow.sample(model, [bundle], [ref], cfg)
    second = flow.sample(model, [bundle], [ref], cfg)
    other = flow.sample(model, [bundle], [ref], cfg.model_copy(update={"seed": 12}))
    assert first.shape == (1, 16, 16, 3)
    assert torch.equal(first, second)
    assert not torch.equal(first, other)
    assert first.min() >= 0.0 and first.max() <= 1.0


def test_sample_variation_shape(model, fast_sampling):
    out = flow.sample_variation(model, torch.rand(2, 16, 16, 3), fast_sampling)
    assert out.shape == (2, 16, 16, 3)


def test_zero_guidance_follows_the_unconditional_trajectory(model, vocab, red_square):
    bundle = build_prompt("a {C} on white background", red_square, "surface", vocab)
    ref = torch.rand(1, 16, 16, 3)
    cfg = SampleConfig(steps=3, guidance=0.0, seed=8)
    guided_out = flow.sample(model, [bundle], [ref], cfg)
    with torch.no_grad():
        uncond = model.prepare_unconditional(1, 1)
        noise = flow.initial_noise((1, *model.image_shape), cfg.seed)
        expected = flow.euler_integrate(lambda x, t: model.velocity(x, t, uncond), noise, cfg.steps)
    assert torch.equal(guided_out, expected.clamp(0.0, 1.0))


def test_sample_with_two_references(model, vocab, red_square):
    circle = make_concept("circle", "yellow", "striped")
    bundle = build_multi_prompt("a {C} and a {C} on white background", [red_square, circle], vocab)
    refs = [torch.rand(1, 16, 16, 3), torch.rand(1, 16, 16, 3)]
    out = flow.sample(model, [bundle], refs, SampleConfig(steps=2, guidance=2.0, seed=1))
    assert out.shape == (1, 16, 16, 3)
    assert torch.isfinite(out).all()
