"""
Procedural glyph corpus. Pretraining captions name only the shape while glyph colours follow a skewed
per-shape distribution (the textual prior); paired data uses the other colours so every adaptation
example conflicts with that prior.
"""
import itertools
import logging
from typing import Optional

import numpy as np

from align_gen_app.schemas import (
    CaptionRecord,
    ConceptRecord,
    CorpusSpec,
    PairRecord,
    Scene,
    VisualAttrs,
)
from align_gen_app.services.errors import DataError
from align_gen_app.services.promptkit import (
    BACKGROUNDS,
    BROADER_NAME,
    CAPTION_TEMPLATES,
    GLYPH_COLORS,
    PALETTE,
    PATTERN_WORDS,
    PLACEHOLDER,
    SHAPE_QUALIFIERS,
    SHAPES,
    fill_background,
)

logger = logging.getLogger(__name__)

DOMINANT_COLORS = {"square": "green", "circle": "red", "triangle": "blue"}
STRIPE_COLOR = "black"
REFERENCE_BACKGROUND = "gray"
MIN_SCALE = 6


def concept_id(shape: str, color: str, pattern: str) -> str:
    return f"{shape}-{color}-{pattern}"


def make_concept(shape: str, color: str, pattern: str) -> ConceptRecord:
    return ConceptRecord(concept_id=concept_id(shape, color, pattern),
                         surface_name=[SHAPE_QUALIFIERS[shape], shape], parent_name=[shape],
                         broader_name=[BROADER_NAME],
                         visual_attrs=VisualAttrs(shape_class=shape, color_name=color, fill_color=PALETTE[color],
                                                  pattern=pattern))


def concept_from_id(value: str) -> ConceptRecord:
    """Parses ``shape-colour-pattern`` ids such as ``square-red-striped``."""
    parts = value.strip().split("-")
    if len(parts) != 3 or parts[0] not in SHAPES or parts[1] not in GLYPH_COLORS or parts[2] not in PATTERN_WORDS:
        raise DataError(f"not a concept id: {value!r}")
    return make_concept(*parts)


def gen_catalog(n: int, rng: np.random.Generator) -> list[ConceptRecord]:
    """
    The gen_catalog function draws ``n`` distinct (shape, colour, pattern) concepts.

    :param n: int: Number of concepts, at least 2 and at most the size of the combination space
    :param rng: np.random.Generator: Seeded generator
    :return: A list of ConceptRecord sorted by concept id
    """
    combos = list(itertools.product(SHAPES, GLYPH_COLORS, PATTERN_WORDS))
    if n < 2 or n > len(combos):
        raise DataError(f"catalog size {n} outside [2, {len(combos)}]")
    picked = sorted(rng.choice(len(combos), size=n, replace=False).tolist())
    return [make_concept(*combos[i]) for i in picked]


def default_skew(dominant: float = 0.9) -> dict[str, dict[str, float]]:
    skew = {}
    for shape, favourite in DOMINANT_COLORS.items():
        rest = (1.0 - dominant) / (len(GLYPH_COLORS) - 1)
        skew[shape] = {color: dominant if color == favourite else rest for color in GLYPH_COLORS}
    return skew


def is_anti_skew(concept: ConceptRecord) -> bool:
    return concept.visual_attrs.color_name != DOMINANT_COLORS[concept.visual_attrs.shape_class]


def glyph_mask(shape: str, position: tuple[int, int], scale: int, canvas: int) -> np.ndarray:
    """Boolean ``(canvas, canvas)`` mask of glyph pixels, sampled at pixel centres."""
    rows, cols = np.mgrid[0:canvas, 0:canvas] + 0.5
    top, left = position
    y = (rows - top) / scale
    x = (cols - left) / scale
    inside_box = (y >= 0) & (y < 1) & (x >= 0) & (x < 1)
    if shape == "square":
        return inside_box
    if shape == "circle":
        return (y - 0.5) ** 2 + (x - 0.5) ** 2 <= 0.25
    if shape == "triangle":
        return inside_box & (np.abs(x - 0.5) <= y / 2)
    raise DataError(f"unknown shape class {shape!r}")


def render(scene: Scene, canvas: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """
    Rasterises a scene without anti-aliasing.

    :param scene: Scene: Concept, placement and background
    :param canvas: int: Image side in pixels
    :return: ``(canvas, canvas, 3)`` float image in [0, 1] and the boolean glyph mask
    """
    top, left = scene.position
    if top < 0 or left < 0 or top + scene.scale > canvas or left + scene.scale > canvas:
        raise DataError(f"glyph at {scene.position} with scale {scene.scale} leaves the {canvas}px canvas")
    attrs = scene.concept.visual_attrs
    image = np.empty((canvas, canvas, 3), dtype=np.float32)
    image[:] = PALETTE[scene.background]
    mask = glyph_mask(attrs.shape_class, scene.position, scene.scale, canvas)
    image[mask] = attrs.fill_color
    if attrs.pattern == "striped":
        stripes = mask & ((np.arange(canvas)[:, None] - top) % 2 == 1)
        image[stripes] = PALETTE[STRIPE_COLOR]
    return image, mask


def random_scene(concept: ConceptRecord, rng: np.random.Generator, canvas: int, background: Optional[str] = None,
                 template: Optional[int] = None) -> Scene:
    scale = int(rng.integers(MIN_SCALE, canvas - canvas // 4 + 1))
    position = (int(rng.integers(0, canvas - scale + 1)), int(rng.integers(0, canvas - scale + 1)))
    if background is None:
        background = str(rng.choice(BACKGROUNDS))
    if template is None:
        template = int(rng.integers(len(CAPTION_TEMPLATES)))
    return Scene(concept=concept, position=position, scale=scale, background=background, caption_template=template)


def reference_scene(concept: ConceptRecord, canvas: int) -> Scene:
    scale = canvas - canvas // 4
    offset = (canvas - scale) // 2
    return Scene(concept=concept, position=(offset, offset), scale=scale, background=REFERENCE_BACKGROUND)


def make_pretrain_corpus(spec: CorpusSpec, rng: np.random.Generator,
                         canvas: int = 16) -> list[tuple[CaptionRecord, np.ndarray]]:
    """
    The make_pretrain_corpus function renders captioned glyphs whose colours follow ``spec.prior_skew``.

    Captions name the shape (surface or parent name) and the background, never the glyph's colour or pattern.

    :param spec: CorpusSpec: Corpus size and per-shape colour distribution
    :param rng: np.random.Generator: Seeded generator
    :param canvas: int: Image side
    :return: A list of (CaptionRecord, image) pairs
    """
    total = spec.n_concepts * spec.images_per_concept
    width = len(str(total))
    records = []
    for i in range(total):
        shape = str(rng.choice(SHAPES))
        distribution = spec.prior_skew[shape]
        colors = list(distribution)
        color = colors[int(rng.choice(len(colors), p=np.array([distribution[c] for c in colors])))]
        pattern = str(rng.choice(PATTERN_WORDS))
        concept = make_concept(shape, color, pattern)
        scene = random_scene(concept, rng, canvas)
        level = "surface" if rng.random() < 0.5 else "parent"
        template = fill_background(CAPTION_TEMPLATES[scene.caption_template], scene.background)
        name = concept.name_tokens(level)
        image, _ = render(scene, canvas)
        record = CaptionRecord(record_id=f"pre-{i:0{width}d}", image_file=f"pre-{i:0{width}d}.ppm",
                               caption=template.replace(PLACEHOLDER, " ".join(name)), template=scene.caption_template,
                               name_level=level, shape_class=shape, color_name=color, pattern=pattern,
                               background=scene.background)
        records.append((record, image))
    logger.info("rendered %d pretraining images", len(records))
    return records


def make_pair_dataset(catalog: list[ConceptRecord], rng: np.random.Generator, pairs_per_concept: int = 40,
                      canvas: int = 16, test_fraction: float = 0.25) -> list[tuple[PairRecord, np.ndarray, np.ndarray]]:
    """
    Builds (reference, target) pairs for the anti-skewed concepts of a catalog.

    The reference is the centred glyph on neutral gray; the target keeps the attributes and varies
    position, scale and background. Whole concepts are assigned to the held-out ``test`` split.
    """
    concepts = [concept for concept in catalog if is_anti_skew(concept)]
    if not concepts:
        raise DataError("catalog has no concepts that conflict with the pretraining prior")
    n_test = max(1, int(round(len(concepts) * test_fraction))) if len(concepts) > 1 else 0
    test_ids = {concepts[i].concept_id for i in rng.choice(len(concepts), size=n_test, replace=False).tolist()}
    pairs = []
    for concept in concepts:
        reference, _ = render(reference_scene(concept, canvas), canvas)
        split = "test" if concept.concept_id in test_ids else "train"
        for j in range(pairs_per_concept):
            scene = random_scene(concept, rng, canvas)
            target, _ = render(scene, canvas)
            record_id = f"{concept.concept_id}-{j:03d}"
            template = fill_background(CAPTION_TEMPLATES[scene.caption_template], scene.background)
            record = PairRecord(record_id=record_id, reference_file=f"{concept.concept_id}-ref.ppm",
                                target_file=f"{record_id}.ppm", concept_id=concept.concept_id,
                                template=scene.caption_template, caption_tokens=template.split(),
                                background=scene.background, position=scene.position, scale=scene.scale,
                                attrs=concept.visual_attrs, split=split)
            pairs.append((record, reference, target))
    logger.info("rendered %d pairs (%d held-out concepts)", len(pairs), len(test_ids))
    return pairs


def caption_concept(record: CaptionRecord) -> ConceptRecord:
    return make_concept(record.shape_class, record.color_name, record.pattern)


def record_template(record: CaptionRecord | PairRecord) -> str:
    """Caption text with the background filled in and ``{C}`` left for the concept name."""
    if isinstance(record, PairRecord):
        return " ".join(record.caption_tokens)
    return fill_background(CAPTION_TEMPLATES[record.template], record.background)


def bare_class_prompt(background: str = "white") -> str:
    """``a {C} on white background``, the prompt of the prior-manufacture check."""
    return fill_background(CAPTION_TEMPLATES[0], background)
