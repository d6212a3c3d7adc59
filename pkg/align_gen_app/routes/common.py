"""Helpers shared by the subcommand modules: config resolution, run records and seed lists."""
import argparse
import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from align_gen_app.conf.config import Settings, load_settings, settings
from align_gen_app.repository.datasets import RUN_CONFIG, read_ppm, write_run_config
from align_gen_app.schemas import RunConfig
from align_gen_app.services.errors import DataError, UsageError


def default_help(text: str, field: str) -> str:
    return f"{text} (default: {getattr(settings, field)})"


def add_config_flag(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="flat 'key = value' config file; flags override it")


def resolve(args: argparse.Namespace, **overrides) -> Settings:
    """Settings from environment, ``--config`` and the non-empty flag overrides, in increasing priority."""
    return load_settings(getattr(args, "config", None), **overrides)


def record_run(path: Path, command: str, resolved: Settings, paths: dict, seed: Optional[int] = None) -> Path:
    run = RunConfig(command=command, settings=json.loads(resolved.model_dump_json()),
                    paths={key: str(value) for key, value in paths.items()},
                    seed=resolved.seed if seed is None else seed)
    return write_run_config(path, run)


def run_config_path(output: Path) -> Path:
    """``DIR/run_config.json`` for directory outputs, ``FILE.run_config.json`` for files."""
    output = Path(output)
    if output.suffix:
        return output.with_name(f"{output.name}.{RUN_CONFIG}")
    return output / RUN_CONFIG


def seed_list(count: int, base: int) -> list[int]:
    if count < 1:
        raise UsageError(f"--seeds must be positive, got {count}")
    return list(range(base, base + count))


def load_image(path: str | Path, side: int) -> torch.Tensor:
    """One ``(1, side, side, 3)`` image batch from a PPM file."""
    image = read_ppm(Path(path))
    if image.shape != (side, side, 3):
        raise DataError(f"{path}: expected a {side}x{side} image, got {image.shape[1]}x{image.shape[0]}")
    return torch.from_numpy(np.ascontiguousarray(image))[None]


def probabilities(value: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(part) for part in value.split(","))
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {value!r}") from err
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {value!r}")
    return parts
