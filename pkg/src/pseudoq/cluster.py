"""Per-document K-means producing pseudo query embeddings.

All Lloyd iterations run through one batched engine that operates on a stack
of equally-shaped documents. Every reduction is taken along a per-document
axis, so a document's result does not depend on which other documents share
its batch: ``cluster_document`` and ``cluster_corpus`` agree bit for bit.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._binio import Reader, Writer
from .embedstub import TokenEmbeddingMatrix, _check_uniform_dim
from .errors import CorruptFileError, PQError, ValidationError

logger = logging.getLogger(__name__)

PQEC_MAGIC = b"PQEC"
DEFAULT_K = 8
DEFAULT_MAX_ITERS = 20
DEFAULT_TOL = 1e-4


@dataclass(frozen=True)
class ClusterConfig:
    k: int = DEFAULT_K
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL
    include_cls: bool = False

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.max_iters < 1:
            raise ValidationError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.tol >= 0:
            raise ValidationError(f"tol must be >= 0, got {self.tol}")


@dataclass(frozen=True, eq=False)
class Assignment:
    """Cluster label per clustered row (the ``[CLS]`` row is skipped unless included)."""

    labels: np.ndarray
    row_offset: int = 0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Assignment):
            return NotImplemented
        return self.row_offset == other.row_offset and np.array_equal(self.labels, other.labels)


@dataclass(eq=False)
class PseudoQuerySet:
    doc_id: str
    centroids: np.ndarray  # (k_effective, dim) float64, or float32 once loaded from disk
    assignment: Assignment | None = None
    iterations_run: int = 0
    converged: bool = True

    @property
    def k_effective(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PseudoQuerySet):
            return NotImplemented
        return (
            self.doc_id == other.doc_id
            and self.iterations_run == other.iterations_run
            and self.converged == other.converged
            and self.centroids.dtype == other.centroids.dtype
            and np.array_equal(self.centroids, other.centroids)
            and self.assignment == other.assignment
        )


def _eligible(tokens: TokenEmbeddingMatrix, include_cls: bool) -> tuple[np.ndarray, int]:
    offset = 1 if (tokens.has_cls and not include_cls) else 0
    rows = np.asarray(tokens.rows[offset:], dtype=np.float64)
    if rows.shape[0] == 0:
        raise ValidationError(f"{tokens.doc_id}: no rows left to cluster after excluding [CLS]")
    return rows, offset


def _init_indices(m: int, k: int) -> np.ndarray:
    if m <= k:
        return np.arange(m)
    return (np.arange(k) * m) // k


def equal_interval_init(
    tokens: TokenEmbeddingMatrix | np.ndarray, k: int, include_cls: bool = False
) -> np.ndarray:
    """Seed centroids with rows at evenly spaced positions ``floor(j*m/k)``.

    When fewer than ``k`` rows are eligible every row becomes its own seed.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if isinstance(tokens, TokenEmbeddingMatrix):
        rows, _ = _eligible(tokens, include_cls)
    else:
        rows = np.asarray(tokens, dtype=np.float64)
    return rows[_init_indices(rows.shape[0], k)].copy()


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """(B, m, h) x (B, k, h) -> (B, m, k) squared Euclidean distances.

    Uses ``|x|^2 - 2 x.c + |c|^2`` with einsum (no BLAS), so each entry is
    computed the same way whatever the batch size.
    """
    xx = np.einsum("bmh,bmh->bm", X, X)
    cc = np.einsum("bkh,bkh->bk", C, C)
    xc = np.einsum("bmh,bkh->bmk", X, C)
    return np.maximum(xx[:, :, None] - 2.0 * xc + cc[:, None, :], 0.0)


def _assign(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # argmin returns the first minimum, so ties go to the lowest centroid index
    return np.argmin(_sq_dists(X, C), axis=-1)


def _update(X: np.ndarray, labels: np.ndarray, prev: np.ndarray) -> np.ndarray:
    k = prev.shape[1]
    onehot = (labels[:, :, None] == np.arange(k)).astype(X.dtype)  # (B, m, k)
    counts = onehot.sum(axis=1)
    sums = np.einsum("bmk,bmh->bkh", onehot, X)
    hit = counts > 0
    new = prev.copy()
    new[hit] = sums[hit] / counts[hit][:, None]
    return new


def _wcss(X: np.ndarray, C: np.ndarray, labels: np.ndarray) -> np.ndarray:
    picked = np.take_along_axis(C, labels[:, :, None], axis=1)
    diff = X - picked
    return np.einsum("bmh,bmh->b", diff, diff)


def assign_step(tokens: TokenEmbeddingMatrix | np.ndarray, centroids: np.ndarray) -> Assignment:
    """Label each row with its nearest centroid under squared Euclidean distance."""
    offset = 0
    if isinstance(tokens, TokenEmbeddingMatrix):
        rows, offset = _eligible(tokens, include_cls=False)
    else:
        rows = np.asarray(tokens, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] < 1:
        raise ValidationError("need at least one centroid")
    if C.shape[1] != rows.shape[1]:
        raise ValidationError(f"dimension mismatch: rows have {rows.shape[1]}, centroids {C.shape[1]}")
    return Assignment(_assign(rows[None], C[None])[0], offset)


def update_step(
    tokens: TokenEmbeddingMatrix | np.ndarray,
    assignment: Assignment | np.ndarray,
    previous: np.ndarray,
) -> np.ndarray:
    """Move each centroid to the mean of its members; empty clusters stay put."""
    labels = assignment.labels if isinstance(assignment, Assignment) else np.asarray(assignment)
    if isinstance(tokens, TokenEmbeddingMatrix):
        offset = assignment.row_offset if isinstance(assignment, Assignment) else 0
        rows = np.asarray(tokens.rows[offset:], dtype=np.float64)
    else:
        rows = np.asarray(tokens, dtype=np.float64)
    prev = np.asarray(previous, dtype=np.float64)
    if labels.shape != (rows.shape[0],):
        raise ValidationError("assignment length does not match row count")
    if labels.size and (labels.min() < 0 or labels.max() >= prev.shape[0]):
        raise ValidationError("assignment label out of range")
    return _update(rows[None], labels[None], prev[None])[0]


@dataclass
class _BatchResult:
    centroids: np.ndarray
    labels: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray


IterationHook = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]


def _lloyd(
    X: np.ndarray,
    C: np.ndarray,
    max_iters: int,
    tol: float,
    hook: IterationHook | None = None,
) -> _BatchResult:
    """Batched Lloyd iterations over documents of identical shape.

    ``hook(iteration, active_index, labels, centroids)`` fires after every
    assign/update pair for the documents still iterating.
    """
    B, m, _ = X.shape
    C = C.copy()
    labels = np.full((B, m), -1, dtype=np.int64)
    iterations = np.zeros(B, dtype=np.int64)
    converged = np.zeros(B, dtype=bool)
    active = np.arange(B)
    for it in range(1, max_iters + 1):
        if active.size == 0:
            break
        Xa, Ca = X[active], C[active]
        new_labels = _assign(Xa, Ca)
        iterations[active] = it
        unchanged = (new_labels == labels[active]).all(axis=1)
        labels[active] = new_labels
        if it > 1 and unchanged.any():
            converged[active[unchanged]] = True
        moving = ~unchanged if it > 1 else np.ones(active.size, dtype=bool)
        upd_idx = active[moving]
        if upd_idx.size:
            newC = _update(Xa[moving], new_labels[moving], Ca[moving])
            shift = np.sqrt(np.einsum("bkh,bkh->bk", newC - Ca[moving], newC - Ca[moving])).max(axis=1)
            C[upd_idx] = newC
            settled = shift <= tol
            converged[upd_idx[settled]] = True
            if hook is not None:
                hook(it, upd_idx, labels[upd_idx], C[upd_idx])
            active = upd_idx[~settled]
        else:
            active = upd_idx
    return _BatchResult(C, labels, iterations, converged)


def _run_group(
    mats: Sequence[TokenEmbeddingMatrix], config: ClusterConfig, hook: IterationHook | None = None
) -> list[PseudoQuerySet]:
    eligible = [_eligible(t, config.include_cls) for t in mats]
    X = np.stack([rows for rows, _ in eligible])
    idx = _init_indices(X.shape[1], config.k)
    res = _lloyd(X, X[:, idx].copy(), config.max_iters, config.tol, hook)
    return [
        PseudoQuerySet(
            doc_id=t.doc_id,
            centroids=res.centroids[b],
            assignment=Assignment(res.labels[b], eligible[b][1]),
            iterations_run=int(res.iterations[b]),
            converged=bool(res.converged[b]),
        )
        for b, t in enumerate(mats)
    ]


def cluster_document(
    tokens: TokenEmbeddingMatrix,
    config: ClusterConfig = ClusterConfig(),
    hook: IterationHook | None = None,
) -> PseudoQuerySet:
    """Cluster one document's token rows into at most ``config.k`` centroids."""
    return _run_group([tokens], config, hook)[0]


def cluster_corpus(
    corpus: Sequence[TokenEmbeddingMatrix],
    config: ClusterConfig = ClusterConfig(),
    threads: int = 1,
    batch_size: int = 4096,
) -> list[PseudoQuerySet]:
    """Cluster every document, batching documents that share a row count.

    Output order matches input order. A failure is re-raised naming the
    offending document.
    """
    _check_uniform_dim(doc.dim for doc in corpus)
    groups: dict[tuple[int, bool], list[int]] = defaultdict(list)
    for i, doc in enumerate(corpus):
        skip = doc.has_cls and not config.include_cls
        groups[(doc.m - int(skip), skip)].append(i)
    jobs = []
    for members in groups.values():
        for s in range(0, len(members), batch_size):
            jobs.append(members[s:s + batch_size])

    def run(members: list[int]) -> list[PseudoQuerySet]:
        try:
            return _run_group([corpus[i] for i in members], config)
        except PQError:
            # isolate the first failing document in input order
            for i in members:
                try:
                    cluster_document(corpus[i], config)
                except PQError as exc:
                    raise type(exc)(f"document {corpus[i].doc_id!r}: {exc}") from exc
            raise

    out: list[PseudoQuerySet | None] = [None] * len(corpus)
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    for members, pqs in zip(jobs, results):
        for i, pq in zip(members, pqs):
            out[i] = pq
    logger.debug("clustered %d documents in %d batches", len(corpus), len(jobs))
    return out  # type: ignore[return-value]


def within_cluster_ss(rows: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    """Sum of squared distances from each row to its assigned centroid."""
    X = np.asarray(rows, dtype=np.float64)[None]
    return float(_wcss(X, np.asarray(centroids, dtype=np.float64)[None], np.asarray(labels)[None])[0])


def write_centroids(pqs: Sequence[PseudoQuerySet], path: str | Path) -> None:
    dim = _check_uniform_dim(pq.dim for pq in pqs)
    w = Writer()
    w.header(PQEC_MAGIC, dim)
    w.u64(len(pqs))
    for pq in pqs:
        w.text(pq.doc_id)
        w.u32(pq.k_effective)
        w.u8(1 if pq.converged else 0)
        w.u32(pq.iterations_run)
        w.floats(pq.centroids)
    w.save(path)


def read_centroids(path: str | Path) -> list[PseudoQuerySet]:
    r = Reader.open(path)
    dim = r.header(PQEC_MAGIC)
    count = r.u64()
    out = []
    for _ in range(count):
        doc_id = r.text()
        k = r.u32()
        converged = r.u8()
        iters = r.u32()
        if k < 1 or converged > 1:
            raise CorruptFileError(f"{doc_id}: corrupt centroid record")
        out.append(PseudoQuerySet(doc_id, r.floats(k, dim), None, iters, bool(converged)))
    r.finish()
    return out
