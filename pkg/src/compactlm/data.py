"""Byte-level text ingestion, held-out split and seeded batching."""

from __future__ import annotations

import ast
import hashlib
import json
import os
import sysconfig
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


class IngestionError(ConfigError):
    pass


@dataclass
class Corpus:
    vocab: bytes  # sorted distinct bytes; token id i is byte vocab[i]
    ids: np.ndarray

    @property
    def vocab_size(self):
        return len(self.vocab)

    def encode(self, raw: bytes):
        table = np.full(256, -1, dtype=np.int64)
        table[np.frombuffer(self.vocab, dtype=np.uint8)] = np.arange(len(self.vocab))
        out = table[np.frombuffer(raw, dtype=np.uint8)]
        if (out < 0).any():
            raise IngestionError("text contains bytes outside the vocabulary")
        return out

    def decode(self, ids):
        v = np.frombuffer(self.vocab, dtype=np.uint8)
        return v[np.asarray(ids)].tobytes()

    def save_vocab(self, path):
        Path(path).write_text(json.dumps({"type": "byte", "vocab": list(self.vocab)}))

    @staticmethod
    def load_vocab(path):
        return bytes(json.loads(Path(path).read_text())["vocab"])


def ingest_text(path) -> Corpus:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}") from None
    if not raw:
        raise IngestionError(f"{path} is empty")
    try:
        raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise IngestionError(f"{path} is not UTF-8: {e}") from None
    arr = np.frombuffer(raw, dtype=np.uint8)
    vocab = bytes(np.unique(arr).tolist())
    corpus = Corpus(vocab, np.empty(0, dtype=np.int64))
    corpus.ids = corpus.encode(raw)
    return corpus


def chunk(ids, l):
    """Non-overlapping length-l windows with next-token targets.

    The target of a window's last position is the first token of the next
    window; the stream wraps around at the very end.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n = len(ids) // l
    if n == 0:
        raise IngestionError(f"corpus of {len(ids)} tokens is shorter than one sequence (l={l})")
    x = ids[: n * l].reshape(n, l)
    y = np.roll(ids, -1)[: n * l].reshape(n, l)
    return x, y


def split_holdout(count, fraction=0.05, seed=0):
    """Seeded index split; returns (train, held_out)."""
    if not 0 <= fraction < 1:
        raise ConfigError("holdout fraction must be in [0, 1)")
    perm = np.random.default_rng([seed, 0x5E11]).permutation(count)
    k = int(round(fraction * count))
    if fraction > 0 and count > 1:
        k = max(k, 1)
    return np.sort(perm[k:]), np.sort(perm[:k])


class BatchStream:
    """Infinite (b, l) batches: every chunk once per epoch, reshuffled each epoch."""

    def __init__(self, x, y, b, seed=0, indices=None):
        self.x, self.y, self.b, self.seed = x, y, b, seed
        self.indices = np.arange(len(x)) if indices is None else np.asarray(indices)
        if len(self.indices) < b:
            raise IngestionError(f"only {len(self.indices)} training sequences for batch size {b}")
        self.epoch = 0
        self._order = self._perm()
        self._pos = 0

    def _perm(self):
        rng = np.random.default_rng([self.seed, self.epoch])
        return self.indices[rng.permutation(len(self.indices))]

    def __iter__(self):
        return self

    def __next__(self):
        if self._pos + self.b > len(self._order):
            self.epoch += 1
            self._order = self._perm()
            self._pos = 0
        sel = self._order[self._pos:self._pos + self.b]
        self._pos += self.b
        return self.x[sel], self.y[sel]


def batch_digest(batches):
    h = hashlib.sha256()
    for x, y in batches:
        h.update(np.ascontiguousarray(x).tobytes())
        h.update(np.ascontiguousarray(y).tobytes())
    return h.hexdigest()


def _docstrings(path):
    try:
        tree = ast.parse(path.read_text(encoding="utf-8"))
    except (SyntaxError, UnicodeDecodeError, ValueError):
        return
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
            doc = ast.get_docstring(node, clean=True)
            if doc and len(doc) > 40:
                yield doc


def make_corpus(out_path, target_bytes=1 << 20, root=None):
    """Write a deterministic English-like corpus from the docstrings of the standard library."""
    root = Path(root or sysconfig.get_paths()["stdlib"])
    skip = {"test", "tests", "idlelib", "site-packages", "dist-packages", "lib2to3", "turtledemo"}
    files = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in skip and not d.startswith("."))
        files.extend(Path(dirpath) / f for f in sorted(filenames) if f.endswith(".py"))
    parts, size = [], 0
    for f in files:
        for doc in _docstrings(f):
            enc = (doc + "\n\n").encode("utf-8")
            parts.append(enc)
            size += len(enc)
        if size >= target_bytes:
            break
    data = b"".join(parts)
    if len(data) < target_bytes:
        raise IngestionError(f"only {len(data)} bytes of docstrings under {root}")
    data = data[:target_bytes].decode("utf-8", errors="ignore").encode("utf-8")
    Path(out_path).write_bytes(data)
    return len(data)
