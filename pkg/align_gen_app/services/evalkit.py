"""
Closed-form evaluation over the synthetic corpus: concept-preservation (CP) and prompt-following (PF)
pixel proxies, the reference/black-reference probe, the textual-prior rate and the ablation harness.
"""
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy import ndimage

from align_gen_app.schemas import (
    ConceptRecord,
    EvalReport,
    EvalRow,
    PairRecord,
    ProbeReport,
    SampleConfig,
    SpliceMode,
    TrainConfig,
)
from align_gen_app.services import flow
from align_gen_app.services.encoders import black_reference
from align_gen_app.services.errors import DataError, UsageError
from align_gen_app.services.model import AlignGenModel
from align_gen_app.services.promptkit import CAPTION_TEMPLATES, GLYPH_COLORS, PALETTE, build_prompt, \
    caption_background, fill_background
from align_gen_app.services.synthdata import DOMINANT_COLORS, STRIPE_COLOR, bare_class_prompt, make_concept, \
    record_template
from align_gen_app.services.trainer import adapt

logger = logging.getLogger(__name__)

COLOR_WEIGHT = 0.5
SHAPE_WEIGHT = 0.3
PATTERN_WEIGHT = 0.2
TRIANGLE_OFFSET = 0.06
SQUARE_FILL = 0.95
STRIPE_FRACTION = 0.2
DROP_RATIOS = (0.1, 0.3, 0.5, 0.7, 0.9)
CORE_ABLATIONS = ("no_lt", "no_dem", "no_mask", "no_ts")

_NAMES = tuple(PALETTE)
_RGB = np.array([PALETTE[name] for name in _NAMES])
_STRIPE = _NAMES.index(STRIPE_COLOR)
_GLYPH_LIKE = [_NAMES.index(name) for name in (*GLYPH_COLORS, STRIPE_COLOR)]
_GLYPH_RGB = np.array([PALETTE[name] for name in GLYPH_COLORS])


def palette_labels(image: np.ndarray) -> np.ndarray:
    """Index into the palette of the nearest colour, per pixel."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return ((image[..., None, :] - _RGB) ** 2).sum(axis=-1).argmin(axis=-1)


@dataclass
class GlyphReading:
    color_name: str
    shape_class: str
    pattern: str
    pixels: int
    background: str


def glyph_component(labels: np.ndarray) -> tuple[Optional[np.ndarray], int]:
    """The largest connected glyph-coloured component of a label map, with the background label."""
    background = int(np.bincount(labels.ravel(), minlength=len(_NAMES)).argmax())
    foreground = np.isin(labels, _GLYPH_LIKE) & (labels != background)
    components, count = ndimage.label(foreground)
    if count == 0:
        return None, background
    sizes = np.bincount(components.ravel())[1:]
    return components == int(sizes.argmax()) + 1, background


def classify_glyph(image: np.ndarray) -> Optional[GlyphReading]:
    """
    The classify_glyph function reads the attributes of the largest glyph-coloured component.

    The background is the most frequent palette label; glyph pixels are glyph or stripe colours
    other than the background. Shape comes from the component's moments: a centroid clearly below
    the bounding-box centre is a triangle, a near-full box a square, anything else a circle.

    :param image: ndarray: ``(H, W, 3)`` image in [0, 1]
    :return: The reading, or None when no glyph pixel exists
    """
    labels = palette_labels(image)
    largest, background = glyph_component(labels)
    if largest is None:
        return None
    rows, cols = np.nonzero(largest)
    height = rows.max() - rows.min() + 1
    width = cols.max() - cols.min() + 1
    fill = largest.sum() / (height * width)
    offset = ((rows + 0.5).mean() - (rows.min() + height / 2)) / height
    if offset > TRIANGLE_OFFSET:
        shape = "triangle"
    elif fill >= SQUARE_FILL:
        shape = "square"
    else:
        shape = "circle"
    stripes = labels[largest] == _STRIPE
    pattern = "striped" if stripes.mean() >= STRIPE_FRACTION else "plain"
    body = np.asarray(image, dtype=np.float64)[largest & (labels != _STRIPE)]
    if len(body):
        color = GLYPH_COLORS[int(((body.mean(axis=0) - _GLYPH_RGB) ** 2).sum(axis=-1).argmin())]
    else:
        color = STRIPE_COLOR
    return GlyphReading(color_name=color, shape_class=shape, pattern=pattern, pixels=int(largest.sum()),
                        background=_NAMES[background])


def cp_proxy(generated: np.ndarray, concept: ConceptRecord) -> float:
    """``0.5 colour + 0.3 shape + 0.2 pattern`` agreement with the concept, 0 when no glyph is found."""
    reading = classify_glyph(generated)
    if reading is None:
        return 0.0
    attrs = concept.visual_attrs
    return (COLOR_WEIGHT * (reading.color_name == attrs.color_name)
            + SHAPE_WEIGHT * (reading.shape_class == attrs.shape_class)
            + PATTERN_WEIGHT * (reading.pattern == attrs.pattern))


def pf_proxy(generated: np.ndarray, caption: str) -> float:
    """
    The pf_proxy function scores background agreement with a caption.

    :param generated: ndarray: ``(H, W, 3)`` image in [0, 1]
    :param caption: str: Caption naming a palette background (``... on white background``)
    :return: Fraction of pixels outside the located glyph whose nearest palette colour is the captioned background
    """
    background = caption_background(caption)
    if background is None:
        raise DataError(f"caption names no palette background: {caption!r}")
    labels = palette_labels(generated)
    glyph, _ = glyph_component(labels)
    scenery = labels.ravel() if glyph is None else labels[~glyph]
    if scenery.size == 0:
        return 0.0
    return float((scenery == _NAMES.index(background)).mean())


@dataclass
class EvalCase:
    case_id: str
    concept: ConceptRecord
    template: str
    reference: np.ndarray


def build_cases(pairs: Sequence[tuple[PairRecord, np.ndarray, np.ndarray]], split: str = "test",
                per_concept: int = 2) -> list[EvalCase]:
    """The first ``per_concept`` records of every concept in ``split``, in dataset order."""
    seen: dict[str, int] = {}
    cases = []
    for record, reference, _ in pairs:
        if record.split != split or seen.get(record.concept_id, 0) >= per_concept:
            continue
        seen[record.concept_id] = seen.get(record.concept_id, 0) + 1
        concept = make_concept(record.attrs.shape_class, record.attrs.color_name, record.attrs.pattern)
        cases.append(EvalCase(case_id=record.record_id, concept=concept, template=record_template(record),
                              reference=reference))
    return cases


def split_hash(case_ids: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(sorted(case_ids)).encode("utf-8")).hexdigest()


def fingerprint(**payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Variant:
    """One ablation arm: training overrides plus the matching inference flags."""

    name: str
    overrides: dict = field(default_factory=dict)

    @property
    def use_s_star(self) -> bool:
        return self.overrides.get("use_s_star", True)

    @property
    def use_dem(self) -> bool:
        return self.overrides.get("use_dem", True)

    @property
    def use_mask(self) -> bool:
        return self.overrides.get("use_mask", True)

    @property
    def splice_mode(self) -> SpliceMode:
        return self.overrides.get("splice_mode", "first_only")

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        return TrainConfig.model_validate({**cfg.model_dump(), **self.overrides})


_VARIANTS = {
    "full": {},
    "no_lt": {"use_s_star": False},
    "no_dem": {"use_dem": False},
    "no_mask": {"use_mask": False},
    "no_ts": {"drop_ratio": 0.0, "name_level_probs": (1.0, 0.0, 0.0)},
    "replace_all": {"splice_mode": "all"},
}


def parse_variant(name: str) -> Variant:
    """``full``, ``no_lt``, ``no_dem``, ``no_mask``, ``no_ts``, ``replace_all`` or ``drop_R`` (case-insensitive)."""
    key = name.strip().lower()
    if key in _VARIANTS:
        return Variant(key, dict(_VARIANTS[key]))
    match = re.fullmatch(r"drop[_=]?(\d*\.?\d+)", key)
    if match and 0.0 <= float(match.group(1)) <= 1.0:
        ratio = float(match.group(1))
        return Variant(f"drop_{ratio:g}", {"drop_ratio": ratio})
    raise UsageError(f"unknown ablation variant {name!r}")


class MaskRecorder:
    """Mask hook remembering the largest absolute mask entry the backbone was given."""

    def __init__(self):
        self.calls = 0
        self.max_abs = 0.0

    def __call__(self, mask: torch.Tensor) -> None:
        self.calls += 1
        self.max_abs = max(self.max_abs, mask.abs().max().item() if mask.numel() else 0.0)

    @property
    def all_zero(self) -> bool:
        return self.calls > 0 and self.max_abs == 0.0


def evaluate(model: AlignGenModel, cases: Sequence[EvalCase], seeds: Sequence[int], cfg: SampleConfig,
             variant: Optional[Variant] = None, sink: Optional[list] = None) -> EvalReport:
    """
    The evaluate function samples every case once per seed and scores the outputs.

    :param model: AlignGenModel: Frozen model
    :param cases: Sequence[EvalCase]: Held-out cases
    :param seeds: Sequence[int]: Sampling seeds; all cases of one seed share a batch
    :param cfg: SampleConfig: Steps and guidance (the seed field is replaced per run)
    :param variant: Variant | None: Inference flags, ``full`` by default
    :param sink: list | None: Receives ``(reference, generated)`` image pairs for contact sheets
    :return: An EvalReport with one row per (case, seed)
    """
    if not cases:
        raise DataError("no evaluation cases in the requested split")
    if not seeds:
        raise UsageError("at least one seed is required")
    variant = variant or parse_variant("full")
    vocab, max_len = model.vocab, model.cfg.max_text_len
    bundles = [build_prompt(case.template, case.concept, "surface", vocab, max_len, use_s_star=variant.use_s_star)
               for case in cases]
    refs = torch.from_numpy(np.stack([case.reference for case in cases])).float()
    recorder = MaskRecorder()
    model.dit.mask_hooks.append(recorder)
    rows = []
    try:
        for seed in seeds:
            images = flow.sample(model, bundles, [refs], cfg.model_copy(update={"seed": seed}),
                                 use_dem=variant.use_dem, use_mask=variant.use_mask,
                                 splice_mode=variant.splice_mode).numpy()
            for case, bundle, image in zip(cases, bundles, images):
                cp, pf = cp_proxy(image, case.concept), pf_proxy(image, case.template)
                rows.append(EvalRow(case_id=case.case_id, seed=seed, prompt=bundle.text,
                                    concept_ids=[case.concept.concept_id], cp=cp, pf=pf, cp_pf=cp * pf))
                if sink is not None:
                    sink.append((case.reference, image))
    finally:
        model.dit.mask_hooks.remove(recorder)
    cp = float(np.mean([row.cp for row in rows]))
    pf = float(np.mean([row.pf for row in rows]))
    report = EvalReport(variant=variant.name, cp=cp, pf=pf, cp_pf=cp * pf, rows=rows,
                        fingerprint=fingerprint(model=model.cfg.model_dump(), sample=cfg.model_dump(exclude={"seed"}),
                                                variant=variant.name, seeds=list(seeds)),
                        split_hash=split_hash([case.case_id for case in cases]), mask_all_zero=recorder.all_zero)
    logger.info("eval %s: cp %.4f pf %.4f cp*pf %.4f over %d rows", report.variant, cp, pf, report.cp_pf, len(rows))
    return report


def misalignment_probe(model: AlignGenModel, concepts: Sequence[ConceptRecord], references: Sequence[np.ndarray],
                       seeds: Sequence[int], cfg: SampleConfig, template: Optional[str] = None,
                       min_seeds: int = 20) -> ProbeReport:
    """
    The misalignment_probe function measures how much the reference image moves generations away from the textual prior.

    Every (concept, seed) is sampled twice with the same prompt and initial noise: once with the
    true reference and once with a black image in both the attention stream and the DEM.

    :param model: AlignGenModel: Adapted model
    :param concepts: Sequence[ConceptRecord]: Probed concepts
    :param references: Sequence[ndarray]: One reference image per concept
    :param seeds: Sequence[int]: At least ``min_seeds`` seeds
    :param cfg: SampleConfig: Steps and guidance
    :param template: str | None: Prompt template, ``a {C} on white background`` by default
    :param min_seeds: int: Smallest accepted seed count
    :return: A ProbeReport with the mean CP of each arm and their difference
    """
    if len(seeds) < min_seeds:
        raise UsageError(f"probe needs at least {min_seeds} seeds, got {len(seeds)}")
    if len(concepts) != len(references) or not concepts:
        raise DataError("probe needs one reference per concept")
    template = template or fill_background(CAPTION_TEMPLATES[0], "white")
    side = model.cfg.image_side
    blank = black_reference(side, side, 1)
    with_ref, black_ref, prompt = [], [], ""
    for concept, reference in zip(concepts, references):
        bundle = build_prompt(template, concept, "surface", model.vocab, model.cfg.max_text_len)
        prompt = prompt or bundle.text
        ref = torch.from_numpy(np.asarray(reference)[None]).float()
        for seed in seeds:
            run = cfg.model_copy(update={"seed": seed})
            with_ref.append(cp_proxy(flow.sample(model, [bundle], [ref], run)[0].numpy(), concept))
            black_ref.append(cp_proxy(flow.sample(model, [bundle], [blank], run)[0].numpy(), concept))
    cp_with, cp_black = float(np.mean(with_ref)), float(np.mean(black_ref))
    logger.info("probe: cp with ref %.4f, black ref %.4f, delta %.4f", cp_with, cp_black, cp_with - cp_black)
    return ProbeReport(concept_ids=[concept.concept_id for concept in concepts], prompt=prompt, seeds=list(seeds),
                       cp_with_ref=cp_with, cp_black_ref=cp_black, delta=cp_with - cp_black)


def prior_rate(model: AlignGenModel, shape: str, seeds: Sequence[int], cfg: SampleConfig,
               background: str = "white") -> float:
    """Fraction of seeds whose bare-class prompt yields the shape's dominant pretraining colour."""
    concept = make_concept(shape, DOMINANT_COLORS[shape], "plain")
    bundle = build_prompt(bare_class_prompt(background), concept, "parent", model.vocab, model.cfg.max_text_len,
                          use_s_star=False)
    side = model.cfg.image_side
    hits = 0
    for seed in seeds:
        image = flow.sample(model, [bundle], [black_reference(side, side, 1)], cfg.model_copy(update={"seed": seed}),
                            ref_scale=0.0, use_dem=False)[0].numpy()
        reading = classify_glyph(image)
        hits += reading is not None and reading.color_name == DOMINANT_COLORS[shape]
    return hits / len(seeds)


def ablation_run(pairs: Sequence[tuple[PairRecord, np.ndarray, np.ndarray]], load_base: Callable[[], AlignGenModel],
                 variants: Sequence[str], train_cfg: TrainConfig, sample_cfg: SampleConfig, seeds: Sequence[int],
                 catalog: Optional[Sequence[ConceptRecord]] = None, per_concept: int = 2,
                 progress: bool = False) -> list[EvalReport]:
    """
    The ablation_run function adapts a fresh copy of the base model per variant and evaluates it.

    All variants start from the same base weights and seed and are scored on the same held-out cases.

    :param pairs: Sequence: Pair dataset with train and test splits
    :param load_base: Callable[[], AlignGenModel]: Returns a new model holding the pretrained weights
    :param variants: Sequence[str]: Variant names, see :func:`parse_variant`
    :param train_cfg: TrainConfig: Adaptation settings shared by every variant
    :param sample_cfg: SampleConfig: Sampler settings
    :param seeds: Sequence[int]: Evaluation seeds
    :param catalog: Sequence[ConceptRecord] | None: Used to initialise the learnable token
    :param per_concept: int: Evaluation cases per held-out concept
    :param progress: bool: Show training progress bars
    :return: One EvalReport per requested variant, in request order
    """
    parsed = [parse_variant(name) for name in variants]
    cases = build_cases(pairs, per_concept=per_concept)
    reports = []
    for variant in parsed:
        logger.info("ablation variant %s", variant.name)
        model = load_base()
        adapt(pairs, model, variant.apply(train_cfg), catalog, progress)
        reports.append(evaluate(model, cases, seeds, sample_cfg, variant))
    return reports


def ablation_findings(reports: Sequence[EvalReport], tie: float = 0.01) -> list[str]:
    """Directional checks over an ablation table; an empty list means every applicable ordering holds."""
    by_name = {report.variant: report for report in reports}
    findings = []
    full = by_name.get("full")
    if full is not None:
        core = [by_name[name] for name in CORE_ABLATIONS if name in by_name]
        for report in core:
            if report.cp_pf > full.cp_pf + tie:
                findings.append(f"{report.variant} cp*pf {report.cp_pf:.4f} beats full {full.cp_pf:.4f}")
            elif report.cp_pf > full.cp_pf:
                logger.warning("tie: %s within %.2f of full", report.variant, tie)
        if core and full.cp_pf - min(report.cp_pf for report in core) < 0.03:
            findings.append("full is less than 0.03 cp*pf above the worst core ablation")
        if "replace_all" in by_name and by_name["replace_all"].cp > full.cp:
            findings.append(f"replace_all cp {by_name['replace_all'].cp:.4f} above first_only {full.cp:.4f}")
    pfs = [report.pf for report in reports]
    if len(pfs) > 1 and max(pfs) - min(pfs) >= 0.05:
        findings.append(f"pf varies by {max(pfs) - min(pfs):.4f} across variants")
    drops = {name: report for name, report in by_name.items() if name.startswith("drop_")}
    if "drop_0.9" in drops and len(drops) > 1:
        worst = drops["drop_0.9"].cp_pf
        if any(report.cp_pf <= worst for name, report in drops.items() if name != "drop_0.9"):
            findings.append("drop_0.9 is not strictly the worst drop ratio")
    return findings
