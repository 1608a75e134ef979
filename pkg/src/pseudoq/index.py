"""Flat inner-product index over every document's centroids, plus retrieval.

``two_step`` retrieval first keeps the R documents whose best single centroid
has the largest inner product with the query (argmax in place of softmax),
then rescores only those with the full softmax aggregation. ``exact`` scores
every document with the aggregation and serves as the oracle.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from ._binio import Reader, Writer
from .cluster import PseudoQuerySet, _check_uniform_dim
from .errors import CorruptFileError, ValidationError
from .score import QueryEmbedding, softmax_scores

PQEI_MAGIC = b"PQEI"
DEFAULT_FINAL_K = 1000
R_PER_CLUSTER = 1000
_RESCORE_CHUNK = 4096


class Mode(str, Enum):
    TWO_STEP = "two_step"
    ARGMAX_ONLY = "argmax_only"
    EXACT = "exact"


def default_R(k: int) -> int:
    return R_PER_CLUSTER * k


@dataclass(frozen=True)
class RetrievalConfig:
    R: int
    final_k: int = DEFAULT_FINAL_K
    mode: Mode = Mode.TWO_STEP

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.R < 1 or self.final_k < 1:
            raise ValidationError("R and final_k must be positive")
        if self.mode is Mode.TWO_STEP and self.final_k > self.R:
            raise ValidationError(f"final_k={self.final_k} exceeds R={self.R} in two_step mode")

    @classmethod
    def for_k(cls, k: int, final_k: int = DEFAULT_FINAL_K, mode: Mode | str = Mode.TWO_STEP) -> "RetrievalConfig":
        """Config with R defaulted to 1000 candidates per cluster."""
        R = default_R(k)
        if Mode(mode) is Mode.TWO_STEP:
            final_k = min(final_k, R)
        return cls(R=R, final_k=final_k, mode=Mode(mode))


class RankedEntry(NamedTuple):
    doc_id: str
    score: float
    rank: int


@dataclass
class RankedList:
    qid: str
    entries: list[RankedEntry] = field(default_factory=list)

    @property
    def doc_ids(self) -> list[str]:
        return [e.doc_id for e in self.entries]


@dataclass(eq=False)
class CentroidIndex:
    rows: np.ndarray  # (N, dim) float32
    doc_ids: tuple[str, ...]
    doc_offsets: np.ndarray  # (D, 2) int64: start row, row count

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def num_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def num_rows(self) -> int:
        return self.rows.shape[0]

    @cached_property
    def row_to_doc(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_docs), self.doc_offsets[:, 1])

    @cached_property
    def rows64(self) -> np.ndarray:
        return self.rows.astype(np.float64)

    def doc_centroids(self, ordinal: int) -> np.ndarray:
        start, count = self.doc_offsets[ordinal]
        return self.rows64[start:start + count]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CentroidIndex):
            return NotImplemented
        return (
            self.doc_ids == other.doc_ids
            and np.array_equal(self.doc_offsets, other.doc_offsets)
            and self.rows.dtype == other.rows.dtype
            and np.array_equal(self.rows, other.rows)
        )


def build_index(pqs: Sequence[PseudoQuerySet]) -> CentroidIndex:
    """Lay out all centroids document-contiguously in input order (stored as float32)."""
    if not pqs:
        raise ValidationError("cannot index an empty corpus")
    dim = _check_uniform_dim(pq.dim for pq in pqs)
    seen: set[str] = set()
    for pq in pqs:
        if pq.doc_id in seen:
            raise ValidationError(f"duplicate doc_id {pq.doc_id!r}")
        seen.add(pq.doc_id)
    counts = np.array([pq.k_effective for pq in pqs], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rows = np.empty((int(counts.sum()), dim), dtype=np.float32)
    for pq, s, c in zip(pqs, starts, counts):
        rows[s:s + c] = pq.centroids
    return CentroidIndex(rows, tuple(pq.doc_id for pq in pqs), np.stack([starts, counts], axis=1))


def _query_vector(index: CentroidIndex, e_q: QueryEmbedding | np.ndarray) -> np.ndarray:
    q = e_q.vector if isinstance(e_q, QueryEmbedding) else np.asarray(e_q, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValidationError(f"dimension mismatch: query {q.shape}, index dim {index.dim}")
    if not np.isfinite(q).all():
        raise ValidationError("non-finite query vector")
    return q


def doc_maxima(index: CentroidIndex, e_q: QueryEmbedding | np.ndarray) -> np.ndarray:
    """Best-centroid inner product per document: one pass over every row."""
    q = _query_vector(index, e_q)
    row_scores = index.rows64 @ q
    return np.maximum.reduceat(row_scores, index.doc_offsets[:, 0])


def _rank(ordinals: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Sort by score descending, ties by ordinal ascending."""
    order = np.lexsort((ordinals, -scores))
    return ordinals[order], scores[order]


def _top(values: np.ndarray, n: int) -> np.ndarray:
    """Ordinals of the n largest values, ties at the cutoff to the lowest ordinal."""
    D = values.shape[0]
    if n >= D:
        return np.arange(D)
    threshold = np.partition(values, D - n)[D - n]
    above = np.flatnonzero(values > threshold)
    ties = np.flatnonzero(values == threshold)[: n - above.size]
    return np.concatenate([above, ties])


def candidate_search(
    index: CentroidIndex, e_q: QueryEmbedding | np.ndarray, R: int
) -> list[tuple[int, float]]:
    """Top-R documents by best single centroid, as (ordinal, max logit) pairs."""
    if R < 1:
        raise ValidationError(f"R must be >= 1, got {R}")
    maxima = doc_maxima(index, e_q)
    chosen = _top(maxima, R)
    ords, vals = _rank(chosen, maxima[chosen])
    return list(zip(ords.tolist(), vals.tolist()))


def rescore(index: CentroidIndex, e_q: QueryEmbedding | np.ndarray, ordinals: np.ndarray) -> np.ndarray:
    """Softmax-aggregation score for the given documents, in input order."""
    q = _query_vector(index, e_q)
    ordinals = np.asarray(ordinals, dtype=np.int64)
    out = np.empty(ordinals.shape[0])
    ks = index.doc_offsets[ordinals, 1]
    starts = index.doc_offsets[ordinals, 0]
    rows = index.rows64
    for k in np.unique(ks).tolist():
        where = np.flatnonzero(ks == k)
        for s in range(0, where.size, _RESCORE_CHUNK):
            part = where[s:s + _RESCORE_CHUNK]
            first = starts[part[0]]
            if np.array_equal(starts[part], first + k * np.arange(part.size)):
                block = rows[first:first + k * part.size].reshape(part.size, k, -1)  # contiguous: no copy
            else:
                block = rows[starts[part][:, None] + np.arange(k)]
            out[part] = softmax_scores(q, block)
    return out


def retrieve(index: CentroidIndex, e_q: QueryEmbedding | np.ndarray, config: RetrievalConfig) -> RankedList:
    qid = e_q.qid if isinstance(e_q, QueryEmbedding) else ""
    if config.mode is Mode.ARGMAX_ONLY:
        hits = candidate_search(index, e_q, config.final_k)
        ords = np.array([o for o, _ in hits], dtype=np.int64)
        scores = np.array([s for _, s in hits])
    else:
        if config.mode is Mode.TWO_STEP:
            cands = np.array(sorted(o for o, _ in candidate_search(index, e_q, config.R)), dtype=np.int64)
        else:
            cands = np.arange(index.num_docs)
        ords, scores = _rank(cands, rescore(index, e_q, cands))
    n = min(config.final_k, ords.size)
    entries = [
        RankedEntry(index.doc_ids[o], float(s), r)
        for r, (o, s) in enumerate(zip(ords[:n].tolist(), scores[:n].tolist()), start=1)
    ]
    return RankedList(qid, entries)


def retrieve_many(
    index: CentroidIndex,
    queries: Sequence[QueryEmbedding],
    config: RetrievalConfig,
    threads: int = 1,
) -> list[RankedList]:
    if threads > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda q: retrieve(index, q, config), queries))
    return [retrieve(index, q, config) for q in queries]


def save_index(index: CentroidIndex, path: str | Path) -> None:
    w = Writer()
    w.header(PQEI_MAGIC, index.dim)
    w.u64(index.num_docs)
    w.u64(index.num_rows)
    for doc_id, (_, count) in zip(index.doc_ids, index.doc_offsets.tolist()):
        w.text(doc_id)
        w.u32(count)
    w.floats(index.rows)
    w.save(path)


def load_index(path: str | Path) -> CentroidIndex:
    r = Reader.open(path)
    dim = r.header(PQEI_MAGIC)
    n_docs = r.u64()
    n_rows = r.u64()
    ids, counts = [], []
    for _ in range(n_docs):
        ids.append(r.text())
        counts.append(r.u32())
    if any(c < 1 for c in counts) or sum(counts) != n_rows:
        raise CorruptFileError("index doc table does not match row count")
    if len(set(ids)) != len(ids):
        raise CorruptFileError("duplicate doc_id in index")
    rows = r.floats(n_rows, dim)
    r.finish()
    counts_arr = np.array(counts, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts_arr)[:-1]]).astype(np.int64)
    return CentroidIndex(rows, tuple(ids), np.stack([starts, counts_arr], axis=1).reshape(-1, 2))
