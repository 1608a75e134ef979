"""Contrastive loss, per-centroid gradient weights and their diagnostics.

For a document scored by softmax aggregation, the gradient of the score with
respect to centroid j is ``r_j * e_q`` where

    r_j = a_j * (1 + sum_{j' != j} a_j' * (z_j - z_j'))

with ``z_j = e_q . c_j`` and ``a = softmax(z)``. The weights sum to one. The
loss gradient for the positive document carries the extra factor
``p_pos - 1``, where ``p_pos`` is the softmax probability of the positive
among the positive and its negatives.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cluster import ClusterConfig, PseudoQuerySet, _eligible, cluster_document
from .embedstub import TokenEmbeddingMatrix
from .errors import ValidationError
from .score import QueryEmbedding, attention_weights, logits, softmax_score

DIAGNOSTICS_COLUMNS = ("step", "loss", "max_r", "var_r", "strategy")


class Strategy(str, Enum):
    CENTROIDS = "centroids"
    FIRST_K = "first_k"
    RANDOM_K = "random_k"


@dataclass
class BatchInstance:
    query: QueryEmbedding
    positive: PseudoQuerySet
    negatives: list[PseudoQuerySet] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.negatives:
            raise ValidationError("a batch instance needs at least one negative")
        h = self.query.vector.shape[0]
        if any(doc.dim != h for doc in (self.positive, *self.negatives)):
            raise ValidationError("query and document dims differ")


@dataclass(frozen=True)
class DiagnosticsSample:
    step: int
    loss: float
    max_r: float
    var_r: float


def _vec(e_q: QueryEmbedding | np.ndarray) -> np.ndarray:
    return e_q.vector if isinstance(e_q, QueryEmbedding) else np.asarray(e_q, dtype=np.float64)


def _scores(instance: BatchInstance) -> np.ndarray:
    docs = (instance.positive, *instance.negatives)
    y = np.array([softmax_score(instance.query, d.centroids).score for d in docs])
    if not np.isfinite(y).all():
        raise ValidationError("non-finite document score")
    return y


def _log_softmax_first(y: np.ndarray) -> float:
    top = y.max()
    return float(y[0] - top - math.log(np.exp(y - top).sum()))


def batch_loss(instance: BatchInstance) -> float:
    """Negative log-likelihood of the positive among positive + negatives."""
    return -_log_softmax_first(_scores(instance))


def positive_probability(instance: BatchInstance) -> float:
    return math.exp(_log_softmax_first(_scores(instance)))


@dataclass(frozen=True, eq=False)
class RWeights:
    values: np.ndarray

    @property
    def max(self) -> float:
        return float(self.values.max())

    @property
    def var(self) -> float:
        return float(self.values.var())  # population variance


def r_weights(e_q: QueryEmbedding | np.ndarray, centroids: np.ndarray) -> RWeights:
    """Gradient contribution weight of each centroid, evaluated term by term."""
    q = _vec(e_q)
    a = attention_weights(q, centroids)
    z = logits(q, np.asarray(centroids, dtype=np.float64))
    k = z.shape[0]
    r = np.empty(k)
    for j in range(k):
        others = np.arange(k) != j
        r[j] = (1.0 + (a[others] * (z[j] - z[others])).sum()) * a[j]
    return RWeights(r)


def r_weights_simplified(e_q: QueryEmbedding | np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Closed form ``a_j * (1 + z_j - sum_i a_i z_i)``; used to cross-check ``r_weights``."""
    q = _vec(e_q)
    a = attention_weights(q, centroids)
    z = logits(q, np.asarray(centroids, dtype=np.float64))
    return a * (1.0 + z - (a * z).sum())


def grad_score_wrt_centroids(e_q: QueryEmbedding | np.ndarray, centroids: np.ndarray) -> np.ndarray:
    q = _vec(e_q)
    return np.outer(r_weights(q, centroids).values, q)


def grad_loss_wrt_positive_centroids(instance: BatchInstance) -> np.ndarray:
    p = positive_probability(instance)
    return (p - 1.0) * grad_score_wrt_centroids(instance.query, instance.positive.centroids)


_STENCILS = {
    2: ((1.0, 1), (-1.0, -1)),
    4: ((8.0, 1), (-8.0, -1), (-1.0, 2), (1.0, -2)),
}
_STENCIL_SCALE = {2: 2.0, 4: 12.0}


def central_differences(f, x: np.ndarray, epsilon: float, order: int = 2) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at every coordinate of ``x``.

    ``order=2`` is the usual two-point stencil; ``order=4`` uses four points
    and tolerates a larger step, which keeps float64 cancellation in check.
    """
    if order not in _STENCILS:
        raise ValidationError(f"stencil order must be 2 or 4, got {order}")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        acc = 0.0
        for weight, step in _STENCILS[order]:
            flat[i] = orig + step * epsilon
            acc += weight * f(x)
        flat[i] = orig
        gflat[i] = acc / (_STENCIL_SCALE[order] * epsilon)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float((np.abs(analytic - numeric) / denom).max())


def finite_difference_check(
    e_q: QueryEmbedding | np.ndarray,
    centroids: np.ndarray,
    epsilon: float = 1e-6,
    order: int = 2,
) -> float:
    """Max relative error between the analytic score gradient and central differences."""
    if not 0 < epsilon <= 1e-2:
        raise ValidationError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    q = _vec(e_q)
    C = np.asarray(centroids, dtype=np.float64)
    numeric = central_differences(lambda c: softmax_score(q, c).score, C, epsilon, order)
    return max_relative_error(grad_score_wrt_centroids(q, C), numeric)


def in_batch_negatives(batch: Sequence[tuple[QueryEmbedding, PseudoQuerySet]]) -> list[BatchInstance]:
    """Pair each query with its positive and every other positive in the batch."""
    if len(batch) < 2:
        raise ValidationError("in-batch negatives need a batch of at least 2")
    return [
        BatchInstance(q, pos, [p for j, (_, p) in enumerate(batch) if j != i])
        for i, (q, pos) in enumerate(batch)
    ]


def run_diagnostics(instances: Sequence[BatchInstance], steps: int | None = None) -> list[DiagnosticsSample]:
    """Loss, max r and population variance of r for the first ``steps`` instances."""
    if not instances:
        raise ValidationError("no instances to diagnose")
    n = len(instances) if steps is None else min(steps, len(instances))
    out = []
    for step, inst in enumerate(instances[:n]):
        r = r_weights(inst.query, inst.positive.centroids)
        out.append(DiagnosticsSample(step, batch_loss(inst), r.max, r.var))
    return out


def representation(
    tokens: TokenEmbeddingMatrix,
    strategy: Strategy | str,
    k: int,
    seed: int = 0,
    config: ClusterConfig | None = None,
) -> PseudoQuerySet:
    """k document vectors: cluster centroids, the first k token rows, or k random token rows."""
    strategy = Strategy(strategy)
    if strategy is Strategy.CENTROIDS:
        cfg = config or ClusterConfig(k=k)
        if cfg.k != k:
            cfg = ClusterConfig(k, cfg.max_iters, cfg.tol, cfg.include_cls)
        return cluster_document(tokens, cfg)
    rows, _ = _eligible(tokens, include_cls=False)
    n = min(k, rows.shape[0])
    if strategy is Strategy.FIRST_K:
        picked = np.arange(n)
    else:
        rng = np.random.default_rng([seed, _stable_hash(tokens.doc_id)])
        picked = np.sort(rng.choice(rows.shape[0], size=n, replace=False))
    return PseudoQuerySet(tokens.doc_id, rows[picked].copy())


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def diagnose_strategies(
    pairs: Sequence[tuple[QueryEmbedding, TokenEmbeddingMatrix]],
    strategies: Iterable[Strategy | str],
    k: int,
    batch_size: int = 16,
    seed: int = 0,
) -> dict[Strategy, list[DiagnosticsSample]]:
    """Run diagnostics for each representation strategy over (query, positive) pairs.

    Pairs are cut into consecutive batches for in-batch negatives; a trailing
    batch of one is merged into the previous batch.
    """
    if len(pairs) < 2:
        raise ValidationError("need at least two (query, positive) pairs")
    if batch_size < 2:
        raise ValidationError(f"batch_size must be >= 2, got {batch_size}")
    bounds = list(range(0, len(pairs), batch_size)) + [len(pairs)]
    if bounds[-1] - bounds[-2] < 2:
        bounds.pop(-2)
    result = {}
    for strategy in map(Strategy, strategies):
        reps = [(q, representation(doc, strategy, k, seed)) for q, doc in pairs]
        instances: list[BatchInstance] = []
        for lo, hi in zip(bounds, bounds[1:]):
            instances.extend(in_batch_negatives(reps[lo:hi]))
        result[strategy] = run_diagnostics(instances)
    return result


def write_diagnostics_csv(results: dict[Strategy, list[DiagnosticsSample]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(DIAGNOSTICS_COLUMNS)
        for strategy, samples in results.items():
            for s in samples:
                writer.writerow([s.step, repr(s.loss), repr(s.max_r), repr(s.var_r), Strategy(strategy).value])
