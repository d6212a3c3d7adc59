import numpy as np
import pytest

from align_gen_app.schemas import EvalReport, Scene, TrainConfig
from align_gen_app.services import evalkit
from align_gen_app.services.errors import DataError, UsageError
from align_gen_app.services.promptkit import PALETTE
from align_gen_app.services.synthdata import make_concept, render


def _glyph(shape, color="red", pattern="plain", background="white", position=(2, 2), scale=12):
    scene = Scene(concept=make_concept(shape, color, pattern), position=position, scale=scale, background=background)
    return render(scene, canvas=16)[0]


@pytest.mark.parametrize("shape", ["square", "circle", "triangle"])
def test_classify_rendered_shapes(shape):
    reading = evalkit.classify_glyph(_glyph(shape))
    assert reading.shape_class == shape
    assert reading.color_name == "red"
    assert reading.pattern == "plain"
    assert reading.background == "white"


def test_classify_small_triangle_and_stripes():
    reading = evalkit.classify_glyph(_glyph("triangle", "blue", "striped", "cyan", position=(5, 5), scale=6))
    assert reading.shape_class == "triangle"
    assert reading.pattern == "striped"
    assert reading.color_name == "blue"


def test_cp_proxy_weights():
    image = _glyph("square", "red", "striped")
    assert evalkit.cp_proxy(image, make_concept("square", "red", "striped")) == pytest.approx(1.0)
    assert evalkit.cp_proxy(image, make_concept("square", "green", "striped")) == pytest.approx(0.5)
    assert evalkit.cp_proxy(image, make_concept("circle", "red", "plain")) == pytest.approx(0.5)
    assert evalkit.cp_proxy(image, make_concept("triangle", "blue", "striped")) == pytest.approx(0.2)


def test_cp_proxy_without_glyph_is_zero():
    blank = np.ones((16, 16, 3))
    assert evalkit.cp_proxy(blank, make_concept("square", "red", "plain")) == 0.0


def test_pf_proxy():
    image = np.empty((16, 16, 3))
    image[:8] = PALETTE["white"]
    image[8:] = PALETTE["cyan"]
    assert evalkit.pf_proxy(image, "a {C} on white background") == pytest.approx(0.5)
    assert evalkit.pf_proxy(_glyph("circle", background="magenta"), "a {C} on magenta background") == 1.0
    with pytest.raises(DataError):
        evalkit.pf_proxy(image, "a {C} somewhere")


def test_build_cases_uses_held_out_concepts(pairs):
    cases = evalkit.build_cases(pairs, per_concept=2)
    test_concepts = {record.concept_id for record, _, _ in pairs if record.split == "test"}
    assert {case.concept.concept_id for case in cases} == test_concepts
    assert len(cases) == 2 * len(test_concepts)


def test_split_hash_ignores_order():
    assert evalkit.split_hash(["b", "a"]) == evalkit.split_hash(["a", "b"])
    assert evalkit.split_hash(["a"]) != evalkit.split_hash(["a", "b"])


def test_parse_variants():
    assert evalkit.parse_variant("full").overrides == {}
    assert evalkit.parse_variant("NO_LT").use_s_star is False
    assert evalkit.parse_variant("no_mask").use_mask is False
    assert evalkit.parse_variant("replace_all").splice_mode == "all"
    drop = evalkit.parse_variant("drop_0.3")
    assert drop.name == "drop_0.3" and drop.overrides == {"drop_ratio": 0.3}
    no_ts = evalkit.parse_variant("no_ts").apply(TrainConfig(phase="adapt"))
    assert no_ts.drop_ratio == 0.0 and no_ts.name_level_probs == (1.0, 0.0, 0.0)
    with pytest.raises(UsageError):
        evalkit.parse_variant("drop_1.5")
    with pytest.raises(UsageError):
        evalkit.parse_variant("no_everything")


def test_evaluate_report(model, pairs, fast_sampling):
    cases = evalkit.build_cases(pairs, per_concept=1)
    sink = []
    report = evalkit.evaluate(model, cases, [0, 1], fast_sampling, sink=sink)
    assert len(report.rows) == 2 * len(cases)
    assert report.cp_pf == pytest.approx(report.cp * report.pf)
    assert report.mask_all_zero is False
    assert len(sink) == len(report.rows)
    again = evalkit.evaluate(model, cases, [0, 1], fast_sampling)
    assert again.fingerprint == report.fingerprint and again.split_hash == report.split_hash
    assert [row.cp for row in again.rows] == [row.cp for row in report.rows]
    assert not model.dit.mask_hooks


def test_evaluate_no_mask_variant_records_zero_mask(model, pairs, fast_sampling):
    cases = evalkit.build_cases(pairs, per_concept=1)
    report = evalkit.evaluate(model, cases, [0], fast_sampling, evalkit.parse_variant("no_mask"))
    assert report.mask_all_zero is True
    assert report.variant == "no_mask"


def test_evaluate_input_errors(model, pairs, fast_sampling):
    with pytest.raises(DataError):
        evalkit.evaluate(model, [], [0], fast_sampling)
    with pytest.raises(UsageError):
        evalkit.evaluate(model, evalkit.build_cases(pairs, per_concept=1), [], fast_sampling)


def test_probe_requires_enough_seeds(model, fast_sampling):
    concept = make_concept("square", "red", "plain")
    with pytest.raises(UsageError):
        evalkit.misalignment_probe(model, [concept], [_glyph("square")], list(range(5)), fast_sampling)


def test_probe_report_shape(model, fast_sampling):
    concept = make_concept("circle", "yellow", "plain")
    report = evalkit.misalignment_probe(model, [concept], [_glyph("circle", "yellow", background="gray")],
                                        [0, 1], fast_sampling, min_seeds=2)
    assert report.concept_ids == ["circle-yellow-plain"]
    assert report.delta == pytest.approx(report.cp_with_ref - report.cp_black_ref)
    assert report.prompt.startswith("a <s*> round circle")


def test_prior_rate_bounds(model, fast_sampling):
    rate = evalkit.prior_rate(model, "square", [0, 1, 2], fast_sampling)
    assert 0.0 <= rate <= 1.0


def _report(variant, cp, pf):
    return EvalReport(variant=variant, cp=cp, pf=pf, cp_pf=cp * pf, fingerprint="f", split_hash="s")


def test_ablation_findings_accept_expected_ordering():
    reports = [_report("full", 0.8, 0.9), _report("no_lt", 0.6, 0.9), _report("no_dem", 0.7, 0.9),
               _report("no_mask", 0.65, 0.9), _report("no_ts", 0.5, 0.9), _report("replace_all", 0.7, 0.9)]
    assert evalkit.ablation_findings(reports) == []


def test_ablation_findings_flag_regressions():
    reports = [_report("full", 0.6, 0.9), _report("no_dem", 0.8, 0.9), _report("replace_all", 0.7, 0.8)]
    findings = evalkit.ablation_findings(reports)
    assert any(finding.startswith("no_dem") for finding in findings)
    assert any(finding.startswith("replace_all") for finding in findings)
    assert any(finding.startswith("pf varies") for finding in findings)


def test_ablation_findings_drop_ratio_order():
    reports = [_report("drop_0.5", 0.6, 1.0), _report("drop_0.9", 0.7, 1.0)]
    assert evalkit.ablation_findings(reports) == ["drop_0.9 is not strictly the worst drop ratio"]


def test_pf_proxy_counts_stray_glyph_colours_outside_the_glyph():
    image = _glyph("square", position=(2, 2), scale=8)
    assert evalkit.pf_proxy(image, "a {C} on white background") == 1.0
    image[13:15, 13:15] = PALETTE["green"]
    pf = evalkit.pf_proxy(image, "a {C} on white background")
    assert pf < 1.0
    assert pf == pytest.approx(1 - 4 / (16 * 16 - 8 * 8))
    assert evalkit.classify_glyph(image).color_name == "red"
