import dataclasses
import math

import pytest
import torch
from pydantic import ValidationError

from align_gen_app.schemas import DemConfig, DitConfig, LoraConfig
from align_gen_app.services import attnlayout, diffcore
from align_gen_app.services.ditnet import MMABlock, rope_rotate
from align_gen_app.services.encoders import black_reference
from align_gen_app.services.errors import ShapeError
from align_gen_app.services.lora import LoraLinear, SegmentGate, off
from align_gen_app.services.model import AlignGenModel, ParamStore, group_of
from align_gen_app.services.promptkit import build_prompt


def test_rope_identity_at_origin_and_norm_preserving():
    x = torch.randn(3, 8)
    assert torch.equal(rope_rotate(x, torch.zeros(3, 2, dtype=torch.long)), x)
    positions = torch.tensor([[1, 2], [3, 0], [2, 5]])
    rotated = rope_rotate(x, positions)
    assert torch.allclose(rotated.norm(dim=-1), x.norm(dim=-1), atol=1e-5)
    with pytest.raises(ShapeError):
        rope_rotate(torch.randn(3, 6), torch.zeros(3, 2, dtype=torch.long))


def test_lora_scale_zero_is_bitwise_base():
    layer = LoraLinear(4, 3, rank=2)
    with torch.no_grad():
        layer.lora_b.normal_()
    x = torch.randn(5, 4)
    assert torch.equal(layer(x, 0.0), layer.base(x))
    assert torch.equal(layer(x, torch.zeros(5, 1)), layer.base(x))
    assert not torch.equal(layer(x, 1.0), layer.base(x))


def test_segment_gate_scales():
    gate = SegmentGate(ref_scale=0.7)
    segments = attnlayout.segment_tags(2, 1, 2)
    assert gate.scales(segments).view(-1).tolist() == pytest.approx([0, 0, 0, 0.7, 0.7, 0.7, 0.7])
    assert off().scale("ref_1") == 0.0
    with pytest.raises(ValueError):
        SegmentGate(overrides={"text": 1.0})


def test_parameter_groups(model):
    groups = {group_of(name) for name, _ in model.named_parameters()}
    assert groups == {"base", "lora", "dem", "s_star"}
    assert group_of("dit.blocks.0.q.lora_a") == "lora"
    assert group_of("dit.blocks.0.q.base.weight") == "base"
    assert group_of("dem.sa.q.weight") == "dem"


def test_set_phase_flags(model):
    store = ParamStore(model)
    store.set_phase("pretrain")
    assert {store.group(name) for name in store.trainable()} == {"base"}
    store.set_phase("adapt")
    assert {store.group(name) for name in store.trainable()} == {"lora", "dem", "s_star"}


def test_velocity_shape(model, vocab, red_square):
    bundle = build_prompt("a {C} on white background", red_square, "surface", vocab)
    ref = torch.rand(1, 16, 16, 3)
    cond = model.prepare([bundle], [ref])
    v = model.velocity(torch.randn(1, 16, 16, 3), torch.tensor([0.5]), cond)
    assert v.shape == (1, 16, 16, 3)
    with pytest.raises(ShapeError):
        model.velocity(torch.randn(1, 8, 8, 3), torch.tensor([0.5]), cond)


def test_untrained_adapters_reduce_to_base_model(model, vocab, red_square):
    bundle = build_prompt("a {C} on white background", red_square, "surface", vocab)
    ref = torch.rand(1, 16, 16, 3)
    x, t = torch.randn(1, 16, 16, 3), torch.tensor([0.3])
    with torch.no_grad():
        adapted = model.velocity(x, t, model.prepare([bundle], [ref], ref_scale=1.0))
        gated = model.velocity(x, t, model.prepare([bundle], [ref], ref_scale=0.0))
    assert torch.equal(adapted, gated)


def test_disabled_mask_changes_output(small_config, vocab, red_square):
    torch.manual_seed(0)
    model = AlignGenModel(small_config.model_copy(update={"blocks": 2}), vocab)
    bundle = build_prompt("a {C} on white background", red_square, "surface", vocab)
    ref = torch.rand(1, 16, 16, 3)
    x, t = torch.randn(1, 16, 16, 3), torch.tensor([0.3])
    with torch.no_grad():
        masked = model.velocity(x, t, model.prepare([bundle], [ref]))
        open_ = model.velocity(x, t, model.prepare([bundle], [ref], use_mask=False))
    assert not torch.equal(masked, open_)


def test_mask_hooks_receive_the_mask(model, vocab, red_square):
    seen = []
    model.dit.mask_hooks.append(seen.append)
    bundle = build_prompt("a {C}", red_square, "surface", vocab)
    side = model.cfg.image_side
    with torch.no_grad():
        model.velocity(torch.randn(1, side, side, 3), torch.tensor([0.5]),
                       model.prepare([bundle], [black_reference(side, side, 1)]))
    n = model.cfg.n_tokens
    assert seen[0].shape == (1, 2 * n + model.cfg.max_text_len, 2 * n + model.cfg.max_text_len)


def test_rope_preserves_inner_products_of_colocated_tokens():
    generator = torch.Generator().manual_seed(0)
    q = torch.randn(5, 8, generator=generator, dtype=torch.float64)
    k = torch.randn(5, 8, generator=generator, dtype=torch.float64)
    positions = torch.randint(0, 9, (5, 2), generator=generator)
    rotated = (rope_rotate(q, positions) * rope_rotate(k, positions)).sum(dim=-1)
    assert torch.allclose(rotated, (q * k).sum(dim=-1), atol=1e-12)


@pytest.mark.parametrize("shift", [(1, 0), (0, 3), (2, 5), (7, 1)])
def test_rope_scores_depend_only_on_relative_position(shift):
    generator = torch.Generator().manual_seed(1)
    q = torch.randn(1, 8, generator=generator, dtype=torch.float64)
    k = torch.randn(1, 8, generator=generator, dtype=torch.float64)
    first, second = torch.tensor([[1, 2]]), torch.tensor([[3, 0]])
    moved = torch.tensor([shift])
    score = (rope_rotate(q, first) * rope_rotate(k, second)).sum()
    shifted = (rope_rotate(q, first + moved) * rope_rotate(k, second + moved)).sum()
    assert shifted.item() == pytest.approx(score.item(), abs=1e-10)


def _rotate(vector, position):
    row, col = position
    out = []
    for (a, b), angle in zip((vector[:2], vector[2:]), (row, col)):
        out += [a * math.cos(angle) - b * math.sin(angle), a * math.sin(angle) + b * math.cos(angle)]
    return out


def _scripted_weights(tokens, wq, wk, positions, blocked=()):
    normed = []
    for row in tokens:
        rms = math.sqrt(sum(value * value for value in row) / len(row) + 1e-6)
        normed.append([value / rms for value in row])
    project = lambda w, h: [sum(w[i][j] * h[j] for j in range(4)) for i in range(4)]
    queries = [_rotate(project(wq, h), p) for h, p in zip(normed, positions)]
    keys = [_rotate(project(wk, h), p) for h, p in zip(normed, positions)]
    weights = []
    for i, q in enumerate(queries):
        logits = [sum(a * b for a, b in zip(q, k)) / 2.0 + (-1e9 if (i, j) in blocked else 0.0)
                  for j, k in enumerate(keys)]
        top = max(logits)
        exps = [math.exp(value - top) for value in logits]
        weights.append([value / sum(exps) for value in exps])
    return weights


def _three_token_block():
    cfg = DitConfig(d=4, heads=1, patch=4, image_side=4, mlp_ratio=1, max_text_len=1, redux_tokens=1,
                    redux_patch=2, lora=LoraConfig(rank=1), dem=DemConfig(heads=1, mlp_ratio=1))
    block = MMABlock(cfg).double()
    wq = [[1.0, 0.0, 0.5, 0.0], [0.0, 1.0, 0.0, -0.5], [0.2, 0.0, 1.0, 0.0], [0.0, 0.3, 0.0, 1.0]]
    wk = [[0.5, 0.0, 0.0, 0.5], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.5, 0.0], [0.5, 0.0, 0.0, -0.5]]
    with torch.no_grad():
        block.q.base.weight.copy_(torch.tensor(wq))
        block.k.base.weight.copy_(torch.tensor(wk))
        block.q.base.bias.zero_()
        block.k.base.bias.zero_()
    return block, wq, wk


@pytest.mark.parametrize("relevant", [True, False])
def test_three_token_block_matches_scripted_softmax(relevant):
    block, wq, wk = _three_token_block()
    tokens = [[1.0, 0.0, 2.0, 0.0], [0.0, 1.0, 0.0, 1.0], [2.0, 1.0, 0.0, -1.0]]
    layout = attnlayout.assemble(torch.tensor([tokens[:1]], dtype=torch.float64),
                                 torch.tensor([tokens[1:2]], dtype=torch.float64),
                                 [torch.tensor([tokens[2:]], dtype=torch.float64)],
                                 torch.tensor([[relevant]]), (1, 1))
    positions = attnlayout.rope_indices(layout)
    mask = attnlayout.build_mask(layout).double()
    _, weights = block(layout.tokens, torch.zeros(1, 4, dtype=torch.float64), mask, positions,
                       return_weights=True)
    blocked = () if relevant else ((1, 2),)
    expected = torch.tensor(_scripted_weights(tokens, wq, wk, positions.tolist(), blocked), dtype=torch.float64)
    assert (weights[0, 0] - expected).abs().max().item() < 1e-6
    if not relevant:
        assert weights[0, 0, 1, 2].item() < 1e-30


def test_irrelevant_text_gives_references_no_weight_in_the_model(model, vocab, red_square, monkeypatch):
    captured = []
    original = diffcore.attention

    def recording(*args, **kwargs):
        out = original(*args, **kwargs)
        if kwargs.get("return_weights"):
            captured.append(out[1])
        return out

    monkeypatch.setattr(diffcore, "attention", recording)
    bundle = build_prompt("a {C} on white background", red_square, "surface", vocab)
    with torch.no_grad():
        model.velocity(torch.randn(1, 16, 16, 3), torch.tensor([0.5]), model.prepare([bundle], [torch.rand(1, 16, 16, 3)]))
    n, m = model.cfg.n_tokens, model.cfg.max_text_len
    irrelevant = torch.tensor([n + i for i, flag in enumerate(bundle.relevance) if not flag])
    assert len(captured) == model.cfg.blocks
    for weights in captured:
        assert weights[0][:, irrelevant][:, :, n + m:].max().item() < 1e-30


def test_mask_is_a_pure_restriction_for_an_all_relevant_prompt(model, vocab, red_square):
    bundle = build_prompt("a {C} on white background", red_square, "surface", vocab)
    x, t = torch.randn(1, 16, 16, 3), torch.tensor([0.4])
    with torch.no_grad():
        cond = model.prepare([bundle], [torch.rand(1, 16, 16, 3)])
        cond.relevance = torch.ones_like(cond.relevance)
        masked = model.velocity(x, t, cond)
        open_ = model.velocity(x, t, dataclasses.replace(cond, use_mask=False))
    assert torch.equal(masked, open_)


def test_reference_order_does_not_matter(model, vocab, red_square):
    bundle = build_prompt("a {C} on white background", red_square, "surface", vocab)
    first, second = torch.rand(1, 16, 16, 3), torch.rand(1, 16, 16, 3)
    x, t = torch.randn(1, 16, 16, 3), torch.tensor([0.6])
    with torch.no_grad():
        forward = model.velocity(x, t, model.prepare([bundle], [first, second], use_dem=False))
        backward = model.velocity(x, t, model.prepare([bundle], [second, first], use_dem=False))
    assert torch.allclose(forward, backward, atol=1e-5)


def test_reference_offset_inside_the_grid_is_rejected():
    with pytest.raises(ValidationError):
        DitConfig(ref_offset=1)
    assert DitConfig(ref_offset=4).ref_offset == 4
