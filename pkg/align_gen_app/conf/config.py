from pathlib import Path
from typing import Optional

from pydantic import ConfigDict, ValidationError, field_validator
from pydantic_settings import BaseSettings

from align_gen_app.schemas import (
    DitConfig,
    SampleConfig,
    TrainConfig,
)
from align_gen_app.services.errors import UsageError


class Settings(BaseSettings):
    # text side
    max_text_len: int = 16
    vocab_path: Optional[Path] = None

    # backbone
    d: int = 64
    blocks: int = 4
    heads: int = 4
    patch: int = 4
    image_side: int = 16
    mlp_ratio: int = 4
    ref_offset: Optional[int] = None
    symmetric_mask: bool = False

    # redux / dem
    redux_tokens: int = 16
    redux_patch: int = 2
    normalize_redux: bool = False
    dem_heads: int = 4
    dem_mlp_ratio: int = 4

    # lora
    lora_rank: int = 16
    lora_init_std: float = 0.1

    # sampler
    steps: int = 28
    guidance: float = 3.5
    seed: int = 42

    # trainer
    batch_size: int = 16
    pretrain_iterations: int = 20_000
    adapt_iterations: int = 5_000
    pretrain_lr: float = 1e-3
    adapt_lr: float = 3e-4
    weight_decay: float = 0.01
    drop_ratio: float = 0.5
    name_level_probs: tuple[float, float, float] = (0.6, 0.2, 0.2)
    uncond_prob: float = 0.1
    redux_aux_weight: float = 0.5
    log_every: int = 100

    # synthetic corpus
    n_concepts: int = 24
    images_per_concept: int = 40
    prior_skew: float = 0.9
    test_fraction: float = 0.25

    log_level: str = "INFO"

    model_config = ConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="ALIGNGEN_",
        extra='ignore'
    )

    @field_validator("name_level_probs", mode="before")
    @classmethod
    def _split_probs(cls, value):
        if isinstance(value, str):
            return tuple(float(part) for part in value.split(","))
        return value

    def dit_config(self) -> DitConfig:
        return _typed(DitConfig, d=self.d, blocks=self.blocks, heads=self.heads, patch=self.patch,
                      image_side=self.image_side, mlp_ratio=self.mlp_ratio, max_text_len=self.max_text_len,
                      redux_tokens=self.redux_tokens, redux_patch=self.redux_patch,
                      ref_offset=self.ref_offset, symmetric_mask=self.symmetric_mask,
                      normalize_redux=self.normalize_redux,
                      lora=dict(rank=self.lora_rank, init_std=self.lora_init_std),
                      dem=dict(heads=self.dem_heads, mlp_ratio=self.dem_mlp_ratio))

    def train_config(self, phase: str, **overrides) -> TrainConfig:
        pretrain = phase == "pretrain"
        values = dict(phase=phase, batch_size=self.batch_size,
                      iterations=self.pretrain_iterations if pretrain else self.adapt_iterations,
                      lr=self.pretrain_lr if pretrain else self.adapt_lr,
                      weight_decay=self.weight_decay, drop_ratio=self.drop_ratio,
                      name_level_probs=self.name_level_probs, seed=self.seed,
                      uncond_prob=self.uncond_prob, redux_aux_weight=self.redux_aux_weight,
                      log_every=self.log_every)
        values.update({key: value for key, value in overrides.items() if value is not None})
        return _typed(TrainConfig, **values)

    def sample_config(self, **overrides) -> SampleConfig:
        values = dict(steps=self.steps, guidance=self.guidance, seed=self.seed)
        values.update({key: value for key, value in overrides.items() if value is not None})
        return _typed(SampleConfig, **values)


def _usage_message(err: ValidationError) -> str:
    first = err.errors()[0]
    return f"invalid configuration: {first['loc']}: {first['msg']}"


def _typed(model, **values):
    """Builds a typed sub-config; out-of-range values are usage errors."""
    try:
        return model(**values)
    except ValidationError as err:
        raise UsageError(_usage_message(err)) from err


def parse_config_file(path: Path) -> dict[str, str]:
    """
    The parse_config_file function reads a flat ``key = value`` file.
    Blank lines and ``#`` comments are skipped; later keys win.

    :param path: Path: The config file to read
    :return: A dict of raw string overrides keyed by settings field name
    """
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    overrides = {}
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in Settings.model_fields:
            raise UsageError(f"{path}:{number}: unknown config key {key!r}")
        overrides[key] = value
    return overrides


def load_settings(config_file: Optional[Path] = None, **flags) -> Settings:
    """
    Resolves settings from environment, an optional config file and flag overrides (highest priority).
    """
    values = settings.model_dump()
    if config_file is not None:
        values.update(parse_config_file(config_file))
    values.update({key: value for key, value in flags.items() if value is not None})
    try:
        return Settings.model_validate(values)
    except ValidationError as err:
        raise UsageError(_usage_message(err)) from err


settings = Settings()
