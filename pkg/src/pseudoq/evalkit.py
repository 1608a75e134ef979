"""Retrieval metrics (MRR, recall, NDCG, top-k accuracy) and TREC file I/O."""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ParseError, ValidationError
from .index import RankedEntry, RankedList


class JudgmentWarning(UserWarning):
    """A query lacks judgments (or relevant judgments) for a metric."""


class Qrels:
    """Graded relevance judgments keyed by (qid, doc_id)."""

    def __init__(self, judgments: Mapping[tuple[str, str], int] | None = None) -> None:
        self._by_query: dict[str, dict[str, int]] = defaultdict(dict)
        for (qid, doc_id), rel in (judgments or {}).items():
            self.add(qid, doc_id, rel)

    def add(self, qid: str, doc_id: str, rel: int) -> None:
        if rel < 0:
            raise ValidationError(f"negative relevance for ({qid}, {doc_id})")
        if doc_id in self._by_query.get(qid, {}):
            raise ValidationError(f"duplicate judgment for ({qid}, {doc_id})")
        self._by_query[qid][doc_id] = int(rel)

    def __contains__(self, qid: str) -> bool:
        return qid in self._by_query

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_query.values())

    def __getitem__(self, key: tuple[str, str]) -> int:
        qid, doc_id = key
        return self._by_query[qid][doc_id]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Qrels):
            return NotImplemented
        return dict(self.items()) == dict(other.items())

    def items(self) -> Iterable[tuple[tuple[str, str], int]]:
        for qid, docs in self._by_query.items():
            for doc_id, rel in docs.items():
                yield (qid, doc_id), rel

    @property
    def qids(self) -> list[str]:
        return list(self._by_query)

    def judged(self, qid: str) -> dict[str, int]:
        return self._by_query.get(qid, {})

    def relevant(self, qid: str) -> set[str]:
        return {d for d, r in self.judged(qid).items() if r >= 1}


def _check_k(k: int) -> None:
    if k < 1:
        raise ValidationError(f"cutoff k must be >= 1, got {k}")


def _warn(msg: str) -> None:
    warnings.warn(msg, JudgmentWarning, stacklevel=3)


def mrr_at_k(ranked: RankedList, qrels: Qrels, k: int) -> float:
    _check_k(k)
    if ranked.qid not in qrels:
        _warn(f"query {ranked.qid!r} has no judgments")
        return 0.0
    relevant = qrels.relevant(ranked.qid)
    for pos, entry in enumerate(ranked.entries[:k], start=1):
        if entry.doc_id in relevant:
            return 1.0 / pos
    return 0.0


def recall_at_k(ranked: RankedList, qrels: Qrels, k: int) -> float | None:
    """Fraction of relevant documents in the top k; ``None`` when nothing is relevant."""
    _check_k(k)
    relevant = qrels.relevant(ranked.qid)
    if not relevant:
        _warn(f"query {ranked.qid!r} has no relevant documents; recall undefined")
        return None
    hits = sum(1 for e in ranked.entries[:k] if e.doc_id in relevant)
    return hits / len(relevant)


def _dcg(gains: Iterable[int]) -> float:
    return sum((2.0**rel - 1.0) / math.log2(pos + 1) for pos, rel in enumerate(gains, start=1))


def ndcg_at_k(ranked: RankedList, qrels: Qrels, k: int) -> float:
    _check_k(k)
    judged = qrels.judged(ranked.qid)
    ideal = _dcg(sorted(judged.values(), reverse=True)[:k])
    if ideal == 0.0:
        _warn(f"query {ranked.qid!r} has no positive relevance; NDCG set to 0")
        return 0.0
    return _dcg(judged.get(e.doc_id, 0) for e in ranked.entries[:k]) / ideal


def topk_accuracy(ranked_lists: Sequence[RankedList], qrels: Qrels, k: int) -> float:
    """Fraction of queries with at least one relevant document in the top k."""
    _check_k(k)
    if not ranked_lists:
        raise ValidationError("top-k accuracy over an empty query set")
    hits = sum(
        1 for rl in ranked_lists if any(e.doc_id in qrels.relevant(rl.qid) for e in rl.entries[:k])
    )
    return hits / len(ranked_lists)


METRICS = {"mrr": mrr_at_k, "recall": recall_at_k, "ndcg": ndcg_at_k, "top": None}
DEFAULT_METRICS = ("mrr@10", "recall@1000", "ndcg@10", "top@20")


def parse_metric(name: str) -> tuple[str, int]:
    try:
        base, cut = name.strip().lower().split("@")
        k = int(cut)
    except ValueError:
        raise ValidationError(f"bad metric {name!r}; expected NAME@K") from None
    if base not in METRICS:
        raise ValidationError(f"unknown metric {base!r}; choose from {sorted(METRICS)}")
    _check_k(k)
    return base, k


@dataclass
class MetricReport:
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)
    evaluated: dict[str, int] = field(default_factory=dict)
    excluded: dict[str, int] = field(default_factory=dict)
    unjudged_queries: list[str] = field(default_factory=list)


def evaluate(
    ranked_lists: Sequence[RankedList], qrels: Qrels, metrics: Sequence[str] = DEFAULT_METRICS
) -> MetricReport:
    """Per-query values and means.

    Queries without relevant judgments are excluded from recall and NDCG
    means and counted in ``excluded``; MRR and top-k count them as misses.
    """
    report = MetricReport()
    report.unjudged_queries = [rl.qid for rl in ranked_lists if rl.qid not in qrels]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", JudgmentWarning)
        for name in metrics:
            base, k = parse_metric(name)
            key = f"{base}@{k}"
            values: list[float] = []
            skipped = 0
            for rl in ranked_lists:
                if base == "top":
                    v: float | None = topk_accuracy([rl], qrels, k)
                elif base in ("recall", "ndcg") and not qrels.relevant(rl.qid):
                    v = None
                else:
                    v = METRICS[base](rl, qrels, k)
                if v is None:
                    skipped += 1
                    continue
                report.per_query.setdefault(rl.qid, {})[key] = v
                values.append(v)
            report.means[key] = sum(values) / len(values) if values else 0.0
            report.evaluated[key] = len(values)
            report.excluded[key] = skipped
    return report


def read_qrels(path: str | Path) -> Qrels:
    """Parse ``qid 0 docid rel`` lines."""
    qrels = Qrels()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(str(path), lineno, f"expected 4 fields, got {len(parts)}")
            qid, _, doc_id, rel = parts
            try:
                qrels.add(qid, doc_id, int(rel))
            except ValueError as exc:
                raise ParseError(str(path), lineno, str(exc)) from None
    return qrels


def write_qrels(qrels: Qrels, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, doc_id), rel in qrels.items():
            fh.write(f"{qid} 0 {doc_id} {rel}\n")


def write_run(ranked_lists: Sequence[RankedList], path: str | Path, tag: str = "pseudoq") -> None:
    if not tag or any(c.isspace() for c in tag):
        raise ValidationError(f"run tag must be a non-empty token, got {tag!r}")
    with open(path, "w", encoding="utf-8") as fh:
        for rl in ranked_lists:
            for e in rl.entries:
                fh.write(f"{rl.qid} Q0 {e.doc_id} {e.rank} {e.score!r} {tag}\n")


def read_run(path: str | Path) -> list[RankedList]:
    """Parse ``qid Q0 docid rank score tag`` lines, grouping by qid in file order."""
    lists: dict[str, RankedList] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ParseError(str(path), lineno, f"expected 6 fields, got {len(parts)}")
            qid, _, doc_id, rank, score, _ = parts
            try:
                entry = RankedEntry(doc_id, float(score), int(rank))
            except ValueError as exc:
                raise ParseError(str(path), lineno, str(exc)) from None
            lists.setdefault(qid, RankedList(qid)).entries.append(entry)
    for rl in lists.values():
        rl.entries.sort(key=lambda e: e.rank)
    return list(lists.values())
