"""Query pooling and the softmax-aggregation matching score.

A document with centroids ``c_1..c_k`` is scored against a query vector
``e_q`` by softmax-normalizing the logits ``e_q . c_j``, forming the weighted
centroid sum ``e_d`` and returning ``e_q . e_d``. Everything is computed in
float64; ``softmax_scores`` is the batched ranking kernel.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .embedstub import TokenEmbeddingMatrix
from .errors import ValidationError


class Pooling(str, Enum):
    FIRST_TOKEN = "first_token"
    MEAN = "mean"


@dataclass(frozen=True, eq=False)
class QueryEmbedding:
    qid: str
    vector: np.ndarray

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1 or not np.isfinite(vec).all():
            raise ValidationError(f"query {self.qid!r}: vector must be 1-D and finite")
        object.__setattr__(self, "vector", vec)


class ScoreBreakdown(NamedTuple):
    weights: np.ndarray
    aggregated: np.ndarray
    score: float


def pool_query(
    tokens: TokenEmbeddingMatrix, strategy: Pooling | str = Pooling.FIRST_TOKEN, qid: str | None = None
) -> QueryEmbedding:
    rows = np.asarray(tokens.rows, dtype=np.float64)
    strategy = Pooling(strategy)
    vec = rows[0].copy() if strategy is Pooling.FIRST_TOKEN else rows.mean(axis=0)
    return QueryEmbedding(tokens.doc_id if qid is None else qid, vec)


def _as_vector(e_q: QueryEmbedding | np.ndarray) -> np.ndarray:
    if isinstance(e_q, QueryEmbedding):
        return e_q.vector
    return np.asarray(e_q, dtype=np.float64)


def _as_centroids(centroids: np.ndarray, dim: int) -> np.ndarray:
    C = np.asarray(centroids, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] < 1:
        raise ValidationError("need a non-empty (k, h) centroid matrix")
    if C.shape[1] != dim:
        raise ValidationError(f"dimension mismatch: query has {dim}, centroids {C.shape[1]}")
    return C


def logits(e_q: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Per-centroid inner products for a (..., k, h) stack."""
    with np.errstate(over="ignore", invalid="ignore"):
        return (C * e_q).sum(axis=-1)  # overflow surfaces as a non-finite logit


def _softmax(z: np.ndarray) -> np.ndarray:
    if not np.isfinite(z).all():
        raise ValidationError("non-finite logit")
    ez = np.exp(z - z.max(axis=-1, keepdims=True))
    return ez / ez.sum(axis=-1, keepdims=True)


def attention_weights(e_q: QueryEmbedding | np.ndarray, centroids: np.ndarray) -> np.ndarray:
    q = _as_vector(e_q)
    return _softmax(logits(q, _as_centroids(centroids, q.shape[0])))


def aggregate(weights: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    a = np.asarray(weights, dtype=np.float64)
    C = np.asarray(centroids, dtype=np.float64)
    if C.ndim != 2 or a.shape != (C.shape[0],):
        raise ValidationError(f"{a.shape[0] if a.ndim else 0} weights for {C.shape[0]} centroids")
    return (a[:, None] * C).sum(axis=0)


def softmax_score(e_q: QueryEmbedding | np.ndarray, centroids: np.ndarray) -> ScoreBreakdown:
    q = _as_vector(e_q)
    C = _as_centroids(centroids, q.shape[0])
    a = _softmax(logits(q, C))
    e_d = aggregate(a, C)
    return ScoreBreakdown(a, e_d, float(e_d @ q))


def softmax_scores(e_q: QueryEmbedding | np.ndarray, stacked: np.ndarray) -> np.ndarray:
    """Scores for a (B, k, h) stack of documents sharing one centroid count.

    Uses the identity ``e_q . e_d = sum_j a_j z_j``, which skips building
    ``e_d``; values agree with ``softmax_score`` to rounding. Each document's
    value is independent of the rest of the stack.
    """
    q = _as_vector(e_q)
    C = np.asarray(stacked, dtype=np.float64)
    if C.ndim != 3 or C.shape[2] != q.shape[0]:
        raise ValidationError("stacked centroids must be (B, k, h) with h matching the query")
    return softmax_scores_from_logits(np.einsum("bkh,h->bk", C, q))


def softmax_scores_from_logits(z: np.ndarray) -> np.ndarray:
    """Aggregated score ``sum_j softmax(z)_j z_j`` for each row of a (B, k) logit array."""
    return (_softmax(z) * z).sum(axis=-1)


def argmax_score(e_q: QueryEmbedding | np.ndarray, centroids: np.ndarray) -> tuple[int, float]:
    """Best single centroid and its logit; ties go to the lowest index."""
    q = _as_vector(e_q)
    z = logits(q, _as_centroids(centroids, q.shape[0]))
    j = int(np.argmax(z))
    return j, float(z[j])
