"""Vocabulary files: one token per line, ``<pad>`` and ``<s*>`` first."""
from pathlib import Path

from align_gen_app.services.errors import DataError
from align_gen_app.services.promptkit import Vocabulary, default_vocabulary


def save_vocabulary(path: Path, vocab: Vocabulary) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def load_vocabulary(path: Path) -> Vocabulary:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"vocabulary file not found: {path}")
    return Vocabulary([line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()])


def resolve_vocabulary(path: Path | None) -> Vocabulary:
    """The vocabulary at ``path``, or the built-in one when no path is configured."""
    return default_vocabulary() if path is None else load_vocabulary(path)
