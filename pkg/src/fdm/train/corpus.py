"""Byte-level corpora for desk-scale language modelling."""

from __future__ import annotations

import hashlib
import re
import sysconfig
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BYTE_VOCAB = 256
BOS = 256
EOS = 257
VOCAB_SIZE = 258

MAX_DOC_BYTES = 4096


def encode(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode(ids) -> str:
    return bytes(int(i) for i in ids if 0 <= int(i) < BYTE_VOCAB).decode("utf-8", errors="replace")


@dataclass
class Corpus:
    train: np.ndarray
    val: np.ndarray

    @property
    def val_fraction(self) -> float:
        return len(self.val) / (len(self.train) + len(self.val))


def split_documents(raw: bytes) -> list[bytes]:
    """Blank-line separated documents, long ones cut into MAX_DOC_BYTES pieces."""
    docs = []
    for part in re.split(rb"(?<=\n\n)", raw):
        for s in range(0, len(part), MAX_DOC_BYTES):
            if part[s:s + MAX_DOC_BYTES]:
                docs.append(part[s:s + MAX_DOC_BYTES])
    return docs


def load_corpus(path, val_fraction: float = 0.1) -> Corpus:
    """Tokenize a file byte-wise and split documents by content hash.

    Documents are ranked by SHA-1 of their bytes; the lowest-ranked ones go to
    validation until ``val_fraction`` of the bytes is reached.  Both streams
    keep original document order.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus not found: {path}")
    raw = path.read_bytes()
    if not raw:
        raise ValueError(f"empty corpus: {path}")
    docs = split_documents(raw)
    order = sorted(range(len(docs)), key=lambda i: (hashlib.sha1(docs[i]).digest(), i))
    target = val_fraction * len(raw)
    val_ids, acc = set(), 0
    for i in order:
        if acc >= target:
            break
        if acc + len(docs[i]) > target and abs(acc + len(docs[i]) - target) > abs(acc - target):
            continue
        val_ids.add(i)
        acc += len(docs[i])
    train = b"".join(d for i, d in enumerate(docs) if i not in val_ids)
    val = b"".join(d for i, d in enumerate(docs) if i in val_ids)
    return Corpus(encode(train), encode(val))


def desk_corpus_text(min_bytes: int = 1_200_000) -> bytes:
    """A deterministic >= ``min_bytes`` text built from the Python stdlib.

    Starts with the pydoc topic help (English prose) and appends stdlib
    modules in sorted order.
    """
    lib = Path(sysconfig.get_paths()["stdlib"])
    parts = []
    topics = lib / "pydoc_data" / "topics.py"
    if topics.exists():
        parts.append(topics.read_bytes())
    for f in sorted(lib.glob("*.py")):
        if sum(map(len, parts)) >= min_bytes:
            break
        parts.append(f.read_bytes())
    data = b"\n\n".join(parts)
    if len(data) < min_bytes:
        raise RuntimeError(f"stdlib text only has {len(data)} bytes")
    return data


def write_desk_corpus(path, min_bytes: int = 1_200_000) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(desk_corpus_text(min_bytes))
    return path


def sample_windows(stream: np.ndarray, batch: int, length: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random (inputs, targets) windows of ``length`` tokens."""
    if len(stream) <= length + 1:
        raise ValueError("stream shorter than one training window")
    starts = rng.integers(0, len(stream) - length - 1, batch)
    idx = starts[:, None] + np.arange(length + 1)
    win = stream[idx]
    return win[:, :-1], win[:, 1:]


def fixed_windows(stream: np.ndarray, n: int, length: int, seed: int = 1234) -> tuple[np.ndarray, np.ndarray]:
    return sample_windows(stream, n, length, np.random.default_rng(seed))


if __name__ == "__main__":
    import sys

    if len(sys.argv) != 2:
        sys.exit("usage: python -m fdm.train.corpus OUTPUT_PATH")
    out = write_desk_corpus(sys.argv[1])
    print(f"wrote {out.stat().st_size} bytes to {out}")
