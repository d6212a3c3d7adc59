from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

NameLevel = Literal["surface", "parent", "broader"]
SpliceMode = Literal["first_only", "all"]
Phase = Literal["pretrain", "adapt"]
ShapeClass = Literal["square", "circle", "triangle"]
Pattern = Literal["plain", "striped"]
Split = Literal["train", "test"]

NAME_LEVELS: tuple[NameLevel, ...] = ("surface", "parent", "broader")


class VisualAttrs(BaseModel):
    shape_class: ShapeClass
    color_name: str
    fill_color: tuple[float, float, float]
    pattern: Pattern


class ConceptRecord(BaseModel):
    concept_id: str
    surface_name: list[str] = Field(min_length=1)
    parent_name: list[str] = Field(min_length=1)
    broader_name: list[str] = Field(min_length=1)
    visual_attrs: VisualAttrs

    def name_tokens(self, level: NameLevel) -> list[str]:
        return {"surface": self.surface_name, "parent": self.parent_name, "broader": self.broader_name}[level]


class ConceptSpan(BaseModel):
    start: int = Field(ge=0)
    end: int
    concept_id: Optional[str] = None

    @model_validator(mode="after")
    def _non_empty(self):
        if self.end <= self.start:
            raise ValueError(f"empty concept span [{self.start}, {self.end})")
        return self

    @property
    def length(self) -> int:
        return self.end - self.start


class PromptBundle(BaseModel):
    token_ids: list[int]
    spans: list[ConceptSpan] = []
    s_star_id: Optional[int] = None
    relevance: list[bool]
    raw_template: str
    text: str = ""

    @model_validator(mode="after")
    def _check_invariants(self):
        if len(self.relevance) != len(self.token_ids):
            raise ValueError("relevance and token_ids differ in length")
        expected = [False] * len(self.token_ids)
        previous_end = 0
        for span in self.spans:
            if span.start < previous_end or span.end > len(self.token_ids):
                raise ValueError(f"span [{span.start}, {span.end}) overlaps or leaves the prompt")
            if self.s_star_id is not None and self.token_ids[span.start] != self.s_star_id:
                raise ValueError(f"span [{span.start}, {span.end}) does not start with the learnable token")
            for index in range(span.start, span.end):
                expected[index] = True
            previous_end = span.end
        if expected != self.relevance:
            raise ValueError("relevance must be true exactly on concept spans")
        return self

    @property
    def concept_span(self) -> ConceptSpan:
        return self.spans[0]

    @property
    def s_star_index(self) -> Optional[int]:
        if self.s_star_id is None or not self.spans:
            return None
        return self.spans[0].start


class Scene(BaseModel):
    concept: ConceptRecord
    position: tuple[int, int]
    scale: int = Field(ge=2)
    background: str
    caption_template: int = 0


class CorpusSpec(BaseModel):
    n_concepts: int = Field(ge=2)
    images_per_concept: int = Field(ge=1)
    prior_skew: dict[str, dict[str, float]]

    @model_validator(mode="after")
    def _skew_sums_to_one(self):
        for name, distribution in self.prior_skew.items():
            if any(p < 0 for p in distribution.values()) or abs(sum(distribution.values()) - 1.0) > 1e-9:
                raise ValueError(f"prior skew for {name!r} must be a probability distribution")
        return self


class CaptionRecord(BaseModel):
    kind: Literal["caption"] = "caption"
    record_id: str
    image_file: str
    caption: str
    template: int
    name_level: NameLevel
    shape_class: ShapeClass
    color_name: str
    pattern: Pattern
    background: str
    split: Split = "train"


class PairRecord(BaseModel):
    kind: Literal["pair"] = "pair"
    record_id: str
    reference_file: str
    target_file: str
    concept_id: str
    template: int
    caption_tokens: list[str]
    background: str
    position: tuple[int, int]
    scale: int
    attrs: VisualAttrs
    split: Split


class LoraConfig(BaseModel):
    rank: int = Field(default=16, ge=1)
    init_std: float = 0.1


class DemConfig(BaseModel):
    heads: int = Field(default=4, ge=1)
    mlp_ratio: int = Field(default=4, ge=1)


class DitConfig(BaseModel):
    d: int = 64
    blocks: int = Field(default=4, ge=1)
    heads: int = 4
    patch: int = 4
    image_side: int = 16
    mlp_ratio: int = 4
    max_text_len: int = 16
    vocab_size: int = 0
    redux_tokens: int = 16
    redux_patch: int = 2
    ref_offset: Optional[int] = None
    symmetric_mask: bool = False
    normalize_redux: bool = False
    lora: LoraConfig = LoraConfig()
    dem: DemConfig = DemConfig()

    @model_validator(mode="after")
    def _check_dims(self):
        if self.d % self.heads or (self.d // self.heads) % 4:
            raise ValueError(f"d={self.d} must split into {self.heads} heads with head dim divisible by 4")
        if self.d % self.dem.heads:
            raise ValueError(f"d={self.d} not divisible by dem heads {self.dem.heads}")
        if self.image_side % self.patch or self.image_side % self.redux_patch:
            raise ValueError(f"image side {self.image_side} not divisible by patch sizes")
        grid = self.image_side // self.patch
        if self.ref_offset is not None and self.ref_offset < grid:
            raise ValueError(f"ref_offset {self.ref_offset} is below the grid width {grid}")
        return self

    @property
    def grid(self) -> int:
        return self.image_side // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


class TrainConfig(BaseModel):
    phase: Phase
    batch_size: int = Field(default=16, ge=1)
    iterations: int = Field(default=1000, ge=0)
    lr: float = Field(default=1e-3, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    drop_ratio: float = Field(default=0.5, ge=0, le=1)
    name_level_probs: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 42
    uncond_prob: float = Field(default=0.1, ge=0, le=1)
    redux_aux_weight: float = Field(default=0.5, ge=0)
    use_s_star: bool = True
    use_dem: bool = True
    use_mask: bool = True
    splice_mode: SpliceMode = "first_only"
    log_every: int = 100
    max_skipped_steps: int = 50
    divergence_factor: float = 10.0
    divergence_patience: int = 200


class SampleConfig(BaseModel):
    steps: int = Field(default=28, ge=1)
    guidance: float = 3.5
    seed: int = 42
    clamp: bool = True


class GradReport(BaseModel):
    op_name: str
    max_rel_err: float = Field(ge=0)
    per_parameter: dict[str, float] = {}

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


class EvalRow(BaseModel):
    case_id: str
    seed: int
    prompt: str
    concept_ids: list[str]
    cp: float
    pf: float
    cp_pf: float


class EvalReport(BaseModel):
    variant: str = "full"
    cp: float = Field(ge=0, le=1)
    pf: float = Field(ge=0, le=1)
    cp_pf: float
    rows: list[EvalRow] = []
    fingerprint: str
    split_hash: str
    mask_all_zero: Optional[bool] = None

    @model_validator(mode="after")
    def _product(self):
        if abs(self.cp_pf - self.cp * self.pf) > 1e-12:
            raise ValueError("cp_pf must equal cp * pf")
        return self


class ProbeReport(BaseModel):
    concept_ids: list[str]
    prompt: str
    seeds: list[int]
    cp_with_ref: float
    cp_black_ref: float
    delta: float


class RunConfig(BaseModel):
    command: str
    settings: dict
    paths: dict[str, str] = {}
    seed: int
