import logging
import re
from typing import Sequence

import numpy as np

from align_gen_app.schemas import NAME_LEVELS, ConceptRecord, ConceptSpan, NameLevel, PromptBundle
from align_gen_app.services.errors import DataError, UsageError

logger = logging.getLogger(__name__)

PAD = "<pad>"
S_STAR = "<s*>"
PLACEHOLDER = "{C}"

SHAPES = ("square", "circle", "triangle")
SHAPE_QUALIFIERS = {"square": "boxy", "circle": "round", "triangle": "pointy"}
BROADER_NAME = "shape"
GLYPH_COLORS = ("red", "green", "blue", "yellow")
BACKGROUNDS = ("white", "cyan", "magenta", "gray")
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
}
PATTERN_WORDS = ("plain", "striped")

CAPTION_TEMPLATES = (
    "a {C} on {B} background",
    "the {C} over a {B} background",
    "a photo of a {C} in front of a {B} background",
    "{B} background with a {C} in the middle",
)

_FILLER = """
a an the of on in at over under with without and or in front behind near beside inside outside middle
center centered left right top bottom corner edge background foreground scene photo picture image
drawing icon sticker painting render sketch poster card canvas wall floor table sky room light shadow
small large tiny big huge bright dark simple clean flat solid soft sharp pale deep vivid plain striped
dotted one two three single pair some many every this that there here is are was be being seen shown
placed standing lying floating resting sitting drawn painted printed made toy object thing item
figure glyph mark sign symbol logo badge tile block disc ring wedge arrow star heart cross box ball
cone pyramid cube sphere robot guitar cup mug can bottle camera teddy bear balloon ufo car house tree
flower cat dog bird fish boat plane train clock lamp chair book hat shoe bag ocean forest desert
city street beach mountain snow rain sunset night day morning evening style color colour pattern
""".split()


class Vocabulary:
    """Closed word-level vocabulary; id is the position in ``tokens``."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(tokens) < 2 or tokens[0] != PAD or tokens[1] != S_STAR:
            raise DataError(f"vocabulary must start with {PAD!r} and {S_STAR!r}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {token: i for i, token in enumerate(tokens)}

    pad_id = 0
    s_star_id = 1

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.index[word] for word in words]
        except KeyError as err:
            raise DataError(f"out-of-vocabulary token {err.args[0]!r}") from err

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for token_id in ids:
            if not 0 <= token_id < len(self.tokens):
                raise DataError(f"token id {token_id} outside vocabulary of size {len(self.tokens)}")
            if token_id != self.pad_id:
                out.append(self.tokens[token_id])
        return out


def default_vocabulary() -> Vocabulary:
    words = [PAD, S_STAR]
    for word in (*SHAPES, *SHAPE_QUALIFIERS.values(), BROADER_NAME, *PALETTE, *PATTERN_WORDS, *_FILLER):
        if word not in words:
            words.append(word)
    return Vocabulary(words)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(text.split())


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.decode(ids))


def _pad(ids: list[int], vocab: Vocabulary, max_len: int, template: str) -> list[int]:
    if len(ids) > max_len:
        raise DataError(f"prompt from {template!r} has {len(ids)} tokens, max is {max_len}")
    return ids + [vocab.pad_id] * (max_len - len(ids))


def _expand(template: str, concepts: Sequence[ConceptRecord], levels: Sequence[NameLevel],
            vocab: Vocabulary, max_len: int, use_s_star: bool) -> PromptBundle:
    pieces = template.split(PLACEHOLDER)
    ids, spans = [], []
    for i, piece in enumerate(pieces):
        ids.extend(tokenize(piece, vocab))
        if i == len(pieces) - 1:
            break
        concept = concepts[i]
        start = len(ids)
        if use_s_star:
            ids.append(vocab.s_star_id)
        ids.extend(vocab.encode(concept.name_tokens(levels[i])))
        spans.append(ConceptSpan(start=start, end=len(ids), concept_id=concept.concept_id))
    token_ids = _pad(ids, vocab, max_len, template)
    relevance = [False] * max_len
    for span in spans:
        relevance[span.start:span.end] = [True] * span.length
    return PromptBundle(token_ids=token_ids, spans=spans, s_star_id=vocab.s_star_id if use_s_star else None,
                        relevance=relevance, raw_template=template, text=detokenize(ids, vocab))


def build_prompt(template: str, concept: ConceptRecord, name_level: NameLevel, vocab: Vocabulary,
                 max_len: int = 16, use_s_star: bool = True) -> PromptBundle:
    """
    The build_prompt function expands the single ``{C}`` placeholder of a template into the learnable
    token followed by the concept name at the requested level.

    :param template: str: Prompt text with exactly one ``{C}``
    :param concept: ConceptRecord: Concept whose name is inserted
    :param name_level: NameLevel: One of surface, parent, broader
    :param vocab: Vocabulary: Closed vocabulary used for tokenisation
    :param max_len: int: Padded prompt length M
    :param use_s_star: bool: Insert the learnable token before the name (off for plain captions)
    :return: A PromptBundle with one concept span
    """
    if name_level not in NAME_LEVELS:
        raise UsageError(f"unknown name level {name_level!r}")
    count = template.count(PLACEHOLDER)
    if count != 1:
        raise DataError(f"template {template!r} has {count} concept placeholders, expected 1")
    return _expand(template, [concept], [name_level], vocab, max_len, use_s_star)


def build_multi_prompt(template: str, concepts: Sequence[ConceptRecord], vocab: Vocabulary, max_len: int = 16,
                       name_level: NameLevel = "surface") -> PromptBundle:
    """Multi-concept variant: every placeholder gets the same learnable token id."""
    count = template.count(PLACEHOLDER)
    if len(concepts) < 2:
        raise DataError("build_multi_prompt needs at least two concepts; use build_prompt")
    if count != len(concepts):
        raise DataError(f"template has {count} placeholders for {len(concepts)} concepts")
    return _expand(template, concepts, [name_level] * len(concepts), vocab, max_len, True)


def build_plain_prompt(text: str, vocab: Vocabulary, max_len: int = 16) -> PromptBundle:
    """A prompt without concept spans or learnable token."""
    if PLACEHOLDER in text:
        raise DataError(f"plain prompt {text!r} contains a concept placeholder")
    return _expand(text, [], [], vocab, max_len, use_s_star=False)


def empty_prompt(vocab: Vocabulary, max_len: int = 16) -> PromptBundle:
    """All-padding prompt used as the unconditional branch."""
    return PromptBundle(token_ids=[vocab.pad_id] * max_len, spans=[], s_star_id=None,
                        relevance=[False] * max_len, raw_template="", text="")


def sample_name_level(rng: np.random.Generator, probs: Sequence[float]) -> NameLevel:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (3,) or (probs < 0).any():
        raise UsageError(f"name level probabilities must be three non-negative numbers, got {probs.tolist()}")
    if abs(probs.sum() - 1.0) > 1e-6:
        raise UsageError(f"name level probabilities must sum to 1, got {probs.sum():.6f}")
    return NAME_LEVELS[int(rng.choice(3, p=probs / probs.sum()))]


def fill_background(template: str, background: str) -> str:
    return template.replace("{B}", background)


def caption_background(caption: str) -> str | None:
    """Returns the palette colour named right before ``background`` in a caption."""
    match = re.search(r"(\w+) background", caption)
    if match and match.group(1) in PALETTE:
        return match.group(1)
    return None
