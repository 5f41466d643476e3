"""Exact cosine index, reciprocal-rank fusion and the noise-document sampler."""

from __future__ import annotations

from fractions import Fraction
import random
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Document
from .errors import ArgumentError, IntegrityError, ProviderError

DEFAULT_RRF_K = 60
_CACHE_MAGIC = b"URGV"
_CACHE_VERSION = 1


@dataclass(frozen=True)
class Ranking:
    doc_ids: tuple[str, ...]
    query: str = ""
    scores: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "doc_ids", tuple(self.doc_ids))
        object.__setattr__(self, "scores", tuple(self.scores))
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise IntegrityError("duplicate ids within a ranking")

    def __len__(self) -> int:
        return len(self.doc_ids)

    def top(self, k: int) -> "Ranking":
        return Ranking(self.doc_ids[:k], self.query, self.scores[:k])


class VectorIndex:
    """Immutable in-memory matrix of unit vectors keyed by document id."""

    def __init__(self, ids: Sequence[str], vectors, corpus_ref: str = ""):
        ids = [str(i) for i in ids]
        if len(set(ids)) != len(ids):
            raise IntegrityError("duplicate document id in index")
        mat = np.asarray(vectors, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] != len(ids):
            raise ArgumentError(f"expected {len(ids)} vectors, got array of shape {mat.shape}")
        norms = np.linalg.norm(mat, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise IntegrityError("index vectors must be unit-norm")
        self.ids = tuple(ids)
        self.matrix = mat
        self.matrix.setflags(write=False)
        self.corpus_ref = corpus_ref
        self._id_array = np.array(self.ids, dtype=object)
        self._pos = {d: i for i, d in enumerate(self.ids)}

    @property
    def dimension(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._pos

    def vector(self, doc_id: str) -> np.ndarray:
        return self.matrix[self._pos[doc_id]]


def build_index(corpus: Sequence[Document], embedder, corpus_ref: str = "", batch_size: int = 64) -> VectorIndex:
    if not corpus:
        raise ArgumentError("cannot index an empty corpus")
    seen: set[str] = set()
    for doc in corpus:
        if doc.id in seen:
            raise IntegrityError(f"duplicate document id {doc.id!r}")
        seen.add(doc.id)
    vectors: list = []
    for start in range(0, len(corpus), batch_size):
        batch = corpus[start:start + batch_size]
        try:
            vectors.extend(embedder.embed([d.text for d in batch]))
        except ProviderError as exc:
            ids = ", ".join(d.id for d in batch)
            raise type(exc)(f"embedding failed for documents [{ids}]: {exc}", status=exc.status, body=exc.body) from exc
    return VectorIndex([d.id for d in corpus], vectors, corpus_ref)


def search(index: VectorIndex, query_vector, k: int, query: str = "") -> Ranking:
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    q = np.asarray(query_vector, dtype=np.float64)
    if q.shape != (index.dimension,):
        raise ArgumentError(f"query dimension {q.shape} does not match index dimension {index.dimension}")
    scores = index.matrix @ q
    order = np.lexsort((index._id_array, -scores))[: min(k, len(index))]
    return Ranking(tuple(index.ids[i] for i in order), query, tuple(float(scores[i]) for i in order))


def _exact_rrf(rankings: Sequence[Ranking], smoothing_k: int) -> dict[str, Fraction]:
    # exact sums: float addition can split true ties such as 1/20 + 1/30 == 1/12
    out: dict[str, Fraction] = {}
    for ranking in rankings:
        for rank, doc_id in enumerate(ranking.doc_ids):
            out[doc_id] = out.get(doc_id, Fraction(0)) + Fraction(1, smoothing_k + rank + 1)
    return out


def rrf_scores(rankings: Sequence[Ranking], smoothing_k: int = DEFAULT_RRF_K) -> dict[str, float]:
    return {d: float(v) for d, v in _exact_rrf(rankings, smoothing_k).items()}


def rrf_fuse(rankings: Sequence[Ranking], smoothing_k: int = DEFAULT_RRF_K) -> Ranking:
    """Merge rankings by summed reciprocal rank, 0-based ranks, ties by doc id."""
    if not rankings:
        raise ArgumentError("rrf_fuse needs at least one ranking")
    if smoothing_k < 0:
        raise ArgumentError("smoothing_k must be >= 0")
    exact = _exact_rrf(rankings, smoothing_k)
    ordered = sorted(exact, key=lambda d: (-exact[d], d))
    return Ranking(tuple(ordered), " | ".join(r.query for r in rankings), tuple(float(exact[d]) for d in ordered))


def sample_irrelevant(index: VectorIndex, exclude: Iterable[str], count: int, seed: int) -> list[str]:
    excluded = set(exclude)
    pool = sorted(d for d in index.ids if d not in excluded)
    if count < 0:
        raise ArgumentError("count must be >= 0")
    if count > len(pool):
        raise ArgumentError(f"need {count} irrelevant documents but only {len(pool)} remain (short by {count - len(pool)})")
    return random.Random(seed).sample(pool, count)


# ------------------------------------------------------------------ cache file


def save_index_cache(index: VectorIndex, path) -> None:
    """Little-endian: magic, version u32, dimension u32, count u32, then per
    entry u32 id length, UTF-8 id bytes, dimension float32 values."""
    with open(Path(path), "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<III", _CACHE_VERSION, index.dimension, len(index)))
        for doc_id, row in zip(index.ids, index.matrix):
            raw = doc_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(np.asarray(row, dtype="<f4").tobytes())


def load_index_cache(path, corpus_ref: str = "") -> VectorIndex:
    data = Path(path).read_bytes()
    if data[:4] != _CACHE_MAGIC:
        raise IntegrityError(f"{path}: not an index cache file")
    version, dim, count = struct.unpack_from("<III", data, 4)
    if version != _CACHE_VERSION:
        raise IntegrityError(f"{path}: unsupported cache version {version}")
    off = 16
    ids, rows = [], []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        ids.append(data[off:off + n].decode("utf-8"))
        off += n
        row = np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
        rows.append(row / np.linalg.norm(row))
    return VectorIndex(ids, np.vstack(rows) if rows else np.zeros((0, dim)), corpus_ref)
