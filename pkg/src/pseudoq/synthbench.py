"""Synthetic multi-topic corpus and the benchmark harness.

Each document is a concatenation of topical segments. A topic is a word stem
plus suffix variants, so under the n-gram stub encoder words of one topic
embed close together. A query samples words from one segment of one
document, which is its only relevant document.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cluster import ClusterConfig, cluster_corpus
from .embedstub import embed_corpus
from .errors import ValidationError
from .evalkit import Qrels, evaluate
from .index import Mode, RetrievalConfig, build_index, default_R, retrieve_many
from .score import Pooling, pool_query

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
SYLLABLES = tuple(c + v for c in _CONSONANTS for v in _VOWELS)
STEM_SYLLABLES = 4
MAX_TOPICS = len(SYLLABLES) ** STEM_SYLLABLES
MAX_VOCAB_PER_TOPIC = len(SYLLABLES)

BENCH_METRICS = ("mrr@10", "recall@100", "top@20")


@dataclass(frozen=True)
class SynthSpec:
    num_docs: int = 2000
    topics_per_doc: int = 4
    tokens_per_topic: int = 32
    vocab_per_topic: int = 8
    num_queries: int = 500
    seed: int = 0
    query_tokens: int = 6

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if name != "seed" and value < 1:
                raise ValidationError(f"{name} must be positive, got {value}")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        if 1 + self.topics_per_doc * self.tokens_per_topic > 512:
            raise ValidationError("documents would exceed the 512-token limit")


@dataclass
class SynthCorpus:
    documents: list[tuple[str, str]]
    queries: list[tuple[str, str]]
    qrels: Qrels


def generate(spec: SynthSpec) -> SynthCorpus:
    n_topics = spec.num_docs * spec.topics_per_doc
    if n_topics > MAX_TOPICS or spec.vocab_per_topic > MAX_VOCAB_PER_TOPIC:
        raise ValidationError(
            f"vocabulary exhausted: need {n_topics} topics x {spec.vocab_per_topic} words, "
            f"inventory holds {MAX_TOPICS} x {MAX_VOCAB_PER_TOPIC}"
        )
    rng = np.random.default_rng(spec.seed)
    n_syl = len(SYLLABLES)
    codes = rng.choice(MAX_TOPICS, size=n_topics, replace=False)
    stems = []
    for code in codes.tolist():
        parts = []
        for _ in range(STEM_SYLLABLES):
            code, rem = divmod(code, n_syl)
            parts.append(SYLLABLES[rem])
        stems.append("".join(parts))

    width = len(str(spec.num_docs - 1))
    documents = []
    segments = []  # per doc: list of word lists
    for d in range(spec.num_docs):
        doc_segments = []
        for t in range(spec.topics_per_doc):
            stem = stems[d * spec.topics_per_doc + t]
            suffixes = rng.choice(n_syl, size=spec.vocab_per_topic, replace=False)
            vocab = [stem + SYLLABLES[s] for s in suffixes.tolist()]
            picks = rng.integers(0, spec.vocab_per_topic, size=spec.tokens_per_topic)
            doc_segments.append([vocab[i] for i in picks.tolist()])
        segments.append(doc_segments)
        documents.append((f"D{d:0{width}d}", " ".join(w for seg in doc_segments for w in seg)))

    replace = spec.num_queries > spec.num_docs
    targets = rng.choice(spec.num_docs, size=spec.num_queries, replace=replace)
    qwidth = len(str(spec.num_queries - 1))
    queries = []
    qrels = Qrels()
    for i, d in enumerate(targets.tolist()):
        seg = segments[d][int(rng.integers(spec.topics_per_doc))]
        picks = rng.integers(0, len(seg), size=spec.query_tokens)
        qid = f"Q{i:0{qwidth}d}"
        queries.append((qid, " ".join(seg[j] for j in picks.tolist())))
        qrels.add(qid, documents[d][0], 1)
    return SynthCorpus(documents, queries, qrels)


@dataclass(frozen=True)
class BenchConfig:
    k: int
    mode: Mode = Mode.TWO_STEP
    R: int | None = None  # None -> 1000 * k

    @property
    def resolved_R(self) -> int:
        return default_R(self.k) if self.R is None else self.R


@dataclass
class BenchRow:
    k: int
    mode: str
    R: int
    topics_per_doc: int
    metrics: dict[str, float]
    timings: dict[str, float]


@dataclass
class BenchReport:
    spec: SynthSpec
    rows: list[BenchRow] = field(default_factory=list)
    threads: int = 1
    embed_seconds: float = 0.0

    def metric(self, name: str) -> list[float]:
        return [row.metrics[name] for row in self.rows]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["k", "mode", "R", "topics_per_doc", *BENCH_METRICS,
                 "embed_s", "cluster_s", "index_s", "search_s", "search_ms_per_query", "threads"]
            )
            for row in self.rows:
                w.writerow(
                    [row.k, row.mode, row.R, row.topics_per_doc]
                    + [f"{row.metrics[m]:.6f}" for m in BENCH_METRICS]
                    + [f"{self.embed_seconds:.6f}"]
                    + [f"{row.timings[p]:.6f}" for p in ("cluster", "index", "search")]
                    + [f"{1000 * row.timings['search'] / max(1, self.spec.num_queries):.4f}", self.threads]
                )


def _median_time(fn, repeats: int):
    times, result = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), result


def run_benchmark(
    spec: SynthSpec,
    configs: Sequence[BenchConfig],
    dim: int = 32,
    embed_seed: int = 0,
    repeats: int = 5,
    threads: int = 1,
    pooling: Pooling | str = Pooling.FIRST_TOKEN,
) -> BenchReport:
    """Embed, cluster, index and search the synthetic corpus once per config.

    Phase times are medians over ``repeats`` runs; the embedding is shared.
    """
    if not configs:
        raise ValidationError("no benchmark configs given")
    if repeats < 1:
        raise ValidationError("repeats must be >= 1")
    corpus = generate(spec)
    report = BenchReport(spec, threads=threads)
    t0 = time.perf_counter()
    mats = embed_corpus(corpus.documents, dim, embed_seed)
    report.embed_seconds = time.perf_counter() - t0
    qmats = embed_corpus(corpus.queries, dim, embed_seed)
    queries = [pool_query(m, pooling) for m in qmats]

    for cfg in configs:
        ccfg = ClusterConfig(k=cfg.k)
        t_cluster, pqs = _median_time(lambda: cluster_corpus(mats, ccfg, threads=threads), repeats)
        t_index, index = _median_time(lambda: build_index(pqs), repeats)
        rcfg = RetrievalConfig(R=cfg.resolved_R, final_k=min(1000, cfg.resolved_R), mode=cfg.mode)
        t_search, runs = _median_time(lambda: retrieve_many(index, queries, rcfg, threads), repeats)
        ev = evaluate(runs, corpus.qrels, BENCH_METRICS)
        report.rows.append(
            BenchRow(
                cfg.k, Mode(cfg.mode).value, cfg.resolved_R, spec.topics_per_doc,
                dict(ev.means), {"cluster": t_cluster, "index": t_index, "search": t_search},
            )
        )
    return report
