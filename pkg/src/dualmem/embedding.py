"""Text embedders and cosine similarity.

The engine never bundles a neural model. Anything callable as
``embedder(text) -> np.ndarray`` works; two implementations are provided:

* :class:`HashEmbedder` -- deterministic bag-of-tokens vectors for tests
  and simulation. Each whitespace token hashes to a fixed pseudo-random
  unit vector; the text vector is their renormalized mean, so texts that
  share tokens point in similar directions.
* :class:`TableEmbedder` -- looks texts up in a precomputed
  :class:`EmbeddingTable` loaded from disk.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dualmem.errors import InvalidInputError, NotFoundError, ParseError

DEFAULT_DIM = 64


def as_vector(values, d: int | None = None) -> np.ndarray:
    """Coerce to a finite 1-D float64 array, optionally checking its length."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidInputError(f"embedding must be 1-D, got shape {v.shape}")
    if d is not None and v.shape[0] != d:
        raise InvalidInputError(f"embedding length {v.shape[0]} != {d}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("embedding contains non-finite entries")
    return v


def _token_vector(token: str, d: int, seed: int) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x1f{token}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def embed_text(text: str, d: int = DEFAULT_DIM, seed: int = 7) -> np.ndarray:
    if not isinstance(text, str) or not text.strip():
        raise InvalidInputError("cannot embed empty text")
    if d < 2:
        raise InvalidInputError(f"embedding dimension must be >= 2, got {d}")
    tokens = text.lower().split()
    acc = np.zeros(d)
    for tok in tokens:
        acc += _token_vector(tok, d, seed)
    acc /= len(tokens)
    norm = np.linalg.norm(acc)
    if norm == 0.0:
        # only reachable if token vectors cancel exactly
        raise InvalidInputError(f"text embeds to the zero vector: {text!r}")
    return acc / norm


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise InvalidInputError(f"cosine needs equal-length vectors, got {u.shape} and {v.shape}")
    nu = math.sqrt(float(np.dot(u, u)))
    nv = math.sqrt(float(np.dot(v, v)))
    if nu == 0.0 or nv == 0.0:
        raise InvalidInputError("cosine of a zero-norm vector is undefined")
    c = float(np.dot(u, v)) / (nu * nv)
    return min(1.0, max(-1.0, c))


def cosine_many(query, matrix) -> np.ndarray:
    """Cosine of ``query`` against each row of ``matrix`` (rows non-zero)."""
    q = np.asarray(query, dtype=np.float64)
    m = np.asarray(matrix, dtype=np.float64)
    if m.size == 0:
        return np.zeros(0)
    if m.ndim != 2 or m.shape[1] != q.shape[0]:
        raise InvalidInputError(f"dimension mismatch: query {q.shape}, matrix {m.shape}")
    nq = np.linalg.norm(q)
    nm = np.linalg.norm(m, axis=1)
    if nq == 0.0 or np.any(nm == 0.0):
        raise InvalidInputError("cosine of a zero-norm vector is undefined")
    return np.clip((m @ q) / (nm * nq), -1.0, 1.0)


class HashEmbedder:
    def __init__(self, d: int = DEFAULT_DIM, seed: int = 7):
        if d < 2:
            raise InvalidInputError(f"embedding dimension must be >= 2, got {d}")
        self.d = d
        self.seed = seed

    def __call__(self, text: str) -> np.ndarray:
        return embed_text(text, self.d, self.seed)


@dataclass
class EmbeddingTable:
    d: int
    entries: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def __getitem__(self, key) -> np.ndarray:
        try:
            return self.entries[key]
        except KeyError:
            raise NotFoundError(f"no embedding for key {key!r}") from None

    def add(self, key: str, vector) -> None:
        if "\t" in key or "\n" in key:
            raise InvalidInputError("table keys may not contain tabs or newlines")
        if key in self.entries:
            raise InvalidInputError(f"duplicate key {key!r}")
        self.entries[key] = as_vector(vector, self.d)


class TableEmbedder:
    def __init__(self, table: EmbeddingTable):
        self.table = table
        self.d = table.d

    def __call__(self, text: str) -> np.ndarray:
        return self.table[text]


def load_embedding_table(path) -> EmbeddingTable:
    """Read ``key<TAB>v1,v2,...`` lines; ``#`` lines and blank lines are skipped."""
    path = Path(path)
    table = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, sep, rest = line.partition("\t")
            if not sep:
                raise ParseError("expected key<TAB>values", path, lineno)
            try:
                values = [float(x) for x in rest.split(",")]
            except ValueError:
                raise ParseError("non-numeric vector component", path, lineno) from None
            if not all(math.isfinite(x) for x in values):
                raise ParseError("non-finite vector component", path, lineno)
            if table is None:
                if len(values) < 1:
                    raise ParseError("empty vector", path, lineno)
                table = EmbeddingTable(d=len(values))
            if len(values) != table.d:
                raise ParseError(f"dimension {len(values)} != {table.d}", path, lineno)
            if key in table.entries:
                raise ParseError(f"duplicate key {key!r}", path, lineno)
            table.entries[key] = np.array(values, dtype=np.float64)
    if table is None:
        raise ParseError("no embedding rows", path)
    return table


def save_embedding_table(table: EmbeddingTable, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for key, vec in table.entries.items():
            fh.write(key + "\t" + ",".join(repr(float(x)) for x in vec) + "\n")
