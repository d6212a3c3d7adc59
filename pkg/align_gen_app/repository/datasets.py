"""
Dataset directories: ``images/*.ppm``, ``manifest.jsonl`` (one caption or pair record per line) and
``catalog.json``. Images are stored as 8-bit binary PPM.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import Field, TypeAdapter, ValidationError

from align_gen_app.schemas import CaptionRecord, ConceptRecord, PairRecord, RunConfig
from align_gen_app.services.errors import DataError

logger = logging.getLogger(__name__)

IMAGES_DIR = "images"
MANIFEST = "manifest.jsonl"
CATALOG = "catalog.json"
RUN_CONFIG = "run_config.json"

ManifestRecord = Annotated[Union[CaptionRecord, PairRecord], Field(discriminator="kind")]
_record_adapter = TypeAdapter(ManifestRecord)
_catalog_adapter = TypeAdapter(list[ConceptRecord])


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def write_ppm(path: Path, image: np.ndarray) -> None:
    """Writes a ``(H, W, 3)`` float image in [0, 1] as binary PPM."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(image)).save(path, format="PPM")


def read_ppm(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError as err:
        raise DataError(f"image not found: {path}") from err
    except UnidentifiedImageError as err:
        raise DataError(f"not a readable image: {path}") from err


def write_manifest(path: Path, records: Sequence[CaptionRecord | PairRecord]) -> None:
    lines = [record.model_dump_json() for record in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_manifest(path: Path) -> list[CaptionRecord | PairRecord]:
    """
    The read_manifest function parses a JSON-lines manifest.

    :param path: Path: ``manifest.jsonl`` file
    :return: Records in file order
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(_record_adapter.validate_json(line))
        except ValidationError as err:
            raise DataError(f"{path}:{number}: malformed record ({err.errors()[0]['msg']})") from err
    return records


def manifest_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_catalog(path: Path, catalog: Sequence[ConceptRecord]) -> None:
    Path(path).write_bytes(_catalog_adapter.dump_json(list(catalog), indent=2))


def read_catalog(path: Path) -> list[ConceptRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"catalog not found: {path}")
    try:
        return _catalog_adapter.validate_json(path.read_bytes())
    except ValidationError as err:
        raise DataError(f"{path}: malformed catalog ({err.errors()[0]['msg']})") from err


@dataclass
class Dataset:
    root: Path
    catalog: list[ConceptRecord]
    captions: list[tuple[CaptionRecord, np.ndarray]] = field(default_factory=list)
    pairs: list[tuple[PairRecord, np.ndarray, np.ndarray]] = field(default_factory=list)
    manifest_hash: str = ""

    def split(self, name: str) -> list[tuple[PairRecord, np.ndarray, np.ndarray]]:
        return [pair for pair in self.pairs if pair[0].split == name]


def write_dataset(root: Path, catalog: Sequence[ConceptRecord], captions: Sequence[tuple[CaptionRecord, np.ndarray]],
                  pairs: Sequence[tuple[PairRecord, np.ndarray, np.ndarray]]) -> str:
    """
    The write_dataset function lays out a dataset directory and returns its manifest hash.

    Reference images shared by several pairs are written once.
    """
    root = Path(root)
    images = root / IMAGES_DIR
    images.mkdir(parents=True, exist_ok=True)
    for record, image in captions:
        write_ppm(images / record.image_file, image)
    written = set()
    for record, reference, target in pairs:
        if record.reference_file not in written:
            write_ppm(images / record.reference_file, reference)
            written.add(record.reference_file)
        write_ppm(images / record.target_file, target)
    write_manifest(root / MANIFEST, [record for record, _ in captions] + [pair[0] for pair in pairs])
    write_catalog(root / CATALOG, catalog)
    digest = manifest_hash(root / MANIFEST)
    logger.info("wrote %d caption and %d pair records to %s (manifest %s)", len(captions), len(pairs), root,
                digest[:12])
    return digest


def read_dataset(root: Path) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    images = root / IMAGES_DIR
    dataset = Dataset(root=root, catalog=read_catalog(root / CATALOG), manifest_hash=manifest_hash(root / MANIFEST))
    references: dict[str, np.ndarray] = {}
    for record in read_manifest(root / MANIFEST):
        if isinstance(record, CaptionRecord):
            dataset.captions.append((record, read_ppm(images / record.image_file)))
            continue
        if record.reference_file not in references:
            references[record.reference_file] = read_ppm(images / record.reference_file)
        dataset.pairs.append((record, references[record.reference_file], read_ppm(images / record.target_file)))
    return dataset


def contact_sheet(rows: Sequence[Sequence[np.ndarray]], border: int = 1) -> np.ndarray:
    """Tiles equally sized images row by row on a white grid."""
    if not rows or not rows[0]:
        raise DataError("contact sheet needs at least one image")
    h, w, _ = np.asarray(rows[0][0]).shape
    columns = max(len(row) for row in rows)
    sheet = np.ones((len(rows) * (h + border) + border, columns * (w + border) + border, 3))
    for r, row in enumerate(rows):
        for c, image in enumerate(row):
            top, left = border + r * (h + border), border + c * (w + border)
            sheet[top:top + h, left:left + w] = np.clip(image, 0.0, 1.0)
    return sheet


def write_run_config(path: Path, run: RunConfig) -> Path:
    """Stores the fully resolved configuration of a command next to its outputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(run.model_dump_json(indent=2), encoding="utf-8")
    return path
