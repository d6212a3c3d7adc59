"""
AGCK checkpoint files (little-endian): ``b"AGCK"``, u32 version, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 group code, u8 dtype code, u8 rank, u64 dims and the raw scalars.
A JSON sidecar ``<file>.json`` carries the model config and the vocabulary.
"""
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from align_gen_app.schemas import DitConfig
from align_gen_app.services.errors import DataError, ShapeError
from align_gen_app.services.model import GROUP_CODES, GROUPS, AlignGenModel, group_of
from align_gen_app.services.promptkit import Vocabulary

logger = logging.getLogger(__name__)

MAGIC = b"AGCK"
VERSION = 1
DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}
DTYPE_CODES = {torch_dtype: code for code, (torch_dtype, _) in DTYPES.items()}


@dataclass
class StoredTensor:
    name: str
    group: str
    value: torch.Tensor


def encode_tensors(tensors: list[StoredTensor]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for item in tensors:
        name = item.name.encode("utf-8")
        value = item.value.detach().cpu().contiguous()
        if value.dtype not in DTYPE_CODES:
            raise DataError(f"{item.name}: unsupported dtype {value.dtype}")
        code = DTYPE_CODES[value.dtype]
        chunks.append(struct.pack("<H", len(name)) + name)
        chunks.append(struct.pack("<BBB", GROUP_CODES[item.group], code, value.dim()))
        chunks.append(struct.pack(f"<{value.dim()}Q", *value.shape))
        chunks.append(value.numpy().astype(DTYPES[code][1]).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise DataError(f"{self.source}: truncated checkpoint at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(data: bytes, source: str = "checkpoint") -> list[StoredTensor]:
    """
    The decode_tensors function parses a complete AGCK byte string.

    :param data: bytes: File contents
    :param source: str: Name used in error messages
    :return: The stored tensors in file order
    """
    reader = _Reader(data, source)
    if reader.take(4) != MAGIC:
        raise DataError(f"{source}: bad magic, not an AGCK checkpoint")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    tensors = []
    for _ in range(count):
        (length,) = reader.unpack("<H")
        name = reader.take(length).decode("utf-8")
        group_code, dtype_code, rank = reader.unpack("<BBB")
        if group_code >= len(GROUPS) or dtype_code not in DTYPES:
            raise DataError(f"{source}: {name}: bad group or dtype code")
        dims = reader.unpack(f"<{rank}Q")
        torch_dtype, numpy_dtype = DTYPES[dtype_code]
        size = int(np.prod(dims, dtype=np.int64)) * np.dtype(numpy_dtype).itemsize
        array = np.frombuffer(reader.take(size), dtype=numpy_dtype).reshape(dims)
        tensors.append(StoredTensor(name=name, group=GROUPS[group_code],
                                    value=torch.from_numpy(array.copy()).to(torch_dtype)))
    if reader.offset != len(data):
        raise DataError(f"{source}: {len(data) - reader.offset} trailing bytes after the last tensor")
    return tensors


def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(model: AlignGenModel, path: Path) -> Path:
    """Writes every named parameter of ``model`` and the sidecar; returns the checkpoint path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = [StoredTensor(name=name, group=group_of(name), value=param) for name, param in model.named_parameters()]
    path.write_bytes(encode_tensors(tensors))
    sidecar = {"dit_config": model.cfg.model_dump(mode="json"), "vocab": model.vocab.tokens}
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("saved %d tensors to %s", len(tensors), path)
    return path


def read_checkpoint(path: Path) -> list[StoredTensor]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return decode_tensors(path.read_bytes(), str(path))


def load_into(model: AlignGenModel, path: Path, strict: bool = True) -> AlignGenModel:
    """
    The load_into function copies checkpoint tensors into an existing model.

    Everything is validated before the first copy, so a failed load leaves the model untouched.

    :param model: AlignGenModel: Target model
    :param path: Path: AGCK file
    :param strict: bool: Reject unknown tensor names and require every model tensor
    :return: The same model
    """
    stored = read_checkpoint(path)
    params = dict(model.named_parameters())
    known = []
    for item in stored:
        if item.name not in params:
            if strict:
                raise DataError(f"{path}: unknown tensor {item.name!r}")
            continue
        if tuple(item.value.shape) != tuple(params[item.name].shape):
            raise ShapeError(item.name, params[item.name].shape, item.value.shape, detail=f"loading {path}")
        known.append(item)
    if strict:
        missing = sorted(set(params) - {item.name for item in known})
        if missing:
            raise DataError(f"{path}: missing tensors {', '.join(missing[:5])}")
    with torch.no_grad():
        for item in known:
            params[item.name].copy_(item.value.to(params[item.name].dtype))
    return model


def read_sidecar(path: Path) -> tuple[DitConfig, Vocabulary]:
    sidecar = sidecar_path(path)
    if not sidecar.is_file():
        raise DataError(f"checkpoint sidecar not found: {sidecar}")
    try:
        payload = json.loads(sidecar.read_text(encoding="utf-8"))
        return DitConfig.model_validate(payload["dit_config"]), Vocabulary(payload["vocab"])
    except (KeyError, ValueError) as err:
        raise DataError(f"{sidecar}: malformed sidecar ({err})") from err


def load_checkpoint(path: Path) -> AlignGenModel:
    """Builds the model described by the sidecar and fills it from the checkpoint."""
    cfg, vocab = read_sidecar(path)
    model = AlignGenModel(cfg, vocab)
    return load_into(model, path)
