"""Command-line pipelines: embed -> cluster -> index -> search -> eval, plus diagnose and bench.

Stages talk only through files (PQEB, PQEC, PQEI, TREC runs/qrels, CSV), and
every output gets a ``<output>.manifest.json`` recording the fully resolved
configuration and the argv needed to replay it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .cluster import DEFAULT_K, DEFAULT_MAX_ITERS, DEFAULT_TOL, ClusterConfig, cluster_corpus, read_centroids, write_centroids
from .embedstub import DEFAULT_LIMIT, embed_corpus, read_embeddings, write_embeddings
from .errors import FormatError, PQError, ValidationError
from .evalkit import DEFAULT_METRICS, evaluate, read_qrels, read_run, write_qrels, write_run
from .graddiag import Strategy, diagnose_strategies, write_diagnostics_csv
from .index import DEFAULT_FINAL_K, Mode, RetrievalConfig, build_index, default_R, load_index, retrieve_many, save_index
from .score import Pooling, pool_query
from .synthbench import BenchConfig, SynthSpec, generate, run_benchmark

logger = logging.getLogger("pseudoq")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_FORMAT = 4

DEFAULT_DIM = 64
DEFAULT_BENCH_KS = (1, 4, 8, 16, 32)


def read_tsv(path: str | Path) -> list[tuple[str, str]]:
    """``id<TAB>text`` records; blank lines skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            ident, sep, text = line.partition("\t")
            if not sep or not ident:
                raise FormatError(f"{path}:{lineno}: expected 'id<TAB>text'")
            out.append((ident, text))
    return out


def write_tsv(records: Sequence[tuple[str, str]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ident, text in records:
            fh.write(f"{ident}\t{text}\n")


def write_manifest(out: str | Path, args: argparse.Namespace, config: dict, inputs: list, outputs: list) -> None:
    manifest = {
        "subcommand": args.command,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": config.get("seed"),
        "tool_version": __version__,
        "argv": args.argv,
    }
    with open(f"{out}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _synth_spec(args: argparse.Namespace) -> SynthSpec:
    return SynthSpec(
        num_docs=args.num_docs,
        topics_per_doc=args.topics_per_doc,
        tokens_per_topic=args.tokens_per_topic,
        vocab_per_topic=args.vocab_per_topic,
        num_queries=args.num_queries,
        seed=args.synth_seed,
        query_tokens=args.query_tokens,
    )


def cmd_embed(args: argparse.Namespace) -> None:
    config = {"dim": args.dim, "seed": args.seed, "limit": args.limit}
    inputs, outputs = [], [args.out]
    if args.synth:
        spec = _synth_spec(args)
        corpus = generate(spec)
        docs = corpus.documents
        config["synth"] = asdict(spec)
        if args.queries_out:
            write_tsv(corpus.queries, args.queries_out)
            outputs.append(args.queries_out)
        if args.qrels_out:
            write_qrels(corpus.qrels, args.qrels_out)
            outputs.append(args.qrels_out)
    else:
        if not args.input:
            raise ValidationError("embed needs --input or --synth")
        docs = read_tsv(args.input)
        inputs.append(args.input)
    mats = embed_corpus(docs, args.dim, args.seed, args.limit)
    write_embeddings(mats, args.out)
    write_manifest(args.out, args, config, inputs, outputs)
    logger.info("embedded %d documents -> %s", len(mats), args.out)


def cmd_cluster(args: argparse.Namespace) -> None:
    config = ClusterConfig(args.k, args.max_iters, args.tol, args.include_cls)
    pqs = cluster_corpus(read_embeddings(args.input), config, threads=args.threads)
    write_centroids(pqs, args.out)
    write_manifest(args.out, args, {**asdict(config), "threads": args.threads}, [args.input], [args.out])
    logger.info("clustered %d documents (k=%d) -> %s", len(pqs), args.k, args.out)


def cmd_index(args: argparse.Namespace) -> None:
    index = build_index(read_centroids(args.input))
    save_index(index, args.out)
    write_manifest(args.out, args, {"num_docs": index.num_docs, "num_rows": index.num_rows, "dim": index.dim}, [args.input], [args.out])


def cmd_search(args: argparse.Namespace) -> None:
    index = load_index(args.index)
    inputs = [args.index, args.queries]
    if args.centroids:
        pqs = read_centroids(args.centroids)
        if tuple(p.doc_id for p in pqs) != index.doc_ids or build_index(pqs) != index:
            raise ValidationError("centroid file does not match the index")
        inputs.append(args.centroids)
    k = args.k if args.k is not None else int(index.doc_offsets[:, 1].max())
    R = args.R if args.R is not None else default_R(k)
    config = RetrievalConfig(R=R, final_k=args.final_k, mode=args.mode)
    qmats = embed_corpus(read_tsv(args.queries), index.dim, args.seed, args.limit)
    queries = [pool_query(m, args.pooling) for m in qmats]
    runs = retrieve_many(index, queries, config, threads=args.threads)
    write_run(runs, args.out, args.tag)
    resolved = {
        "mode": config.mode.value, "R": config.R, "final_k": config.final_k, "k": k,
        "pooling": Pooling(args.pooling).value, "seed": args.seed, "limit": args.limit,
        "dim": index.dim, "tag": args.tag, "threads": args.threads,
    }
    write_manifest(args.out, args, resolved, inputs, [args.out])


def cmd_eval(args: argparse.Namespace) -> None:
    metrics = [m for m in args.metrics.split(",") if m]
    report = evaluate(read_run(args.run), read_qrels(args.qrels), metrics)
    payload = {
        "means": report.means,
        "evaluated": report.evaluated,
        "excluded": report.excluded,
        "unjudged_queries": report.unjudged_queries,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        write_manifest(args.out, args, {"metrics": metrics}, [args.run, args.qrels], [args.out])


def cmd_diagnose(args: argparse.Namespace) -> None:
    mats = {m.doc_id: m for m in read_embeddings(args.input)}
    if not mats:
        raise ValidationError("empty embedding file")
    dim = next(iter(mats.values())).dim
    qrels = read_qrels(args.qrels)
    qtexts = read_tsv(args.queries)
    qmats = embed_corpus(qtexts, dim, args.seed, args.limit)
    pairs = []
    for qm in qmats:
        positives = sorted(d for d in qrels.relevant(qm.doc_id) if d in mats)
        if positives:
            pairs.append((pool_query(qm, args.pooling), mats[positives[0]]))
    strategies = [Strategy(s) for s in args.strategies.split(",") if s]
    results = diagnose_strategies(pairs, strategies, args.k, args.batch_size, args.seed)
    write_diagnostics_csv(results, args.out)
    config = {"strategies": [s.value for s in strategies], "k": args.k, "batch_size": args.batch_size,
              "seed": args.seed, "pooling": Pooling(args.pooling).value, "limit": args.limit, "pairs": len(pairs)}
    write_manifest(args.out, args, config, [args.input, args.queries, args.qrels], [args.out])


def _parse_bench_config(text: str) -> BenchConfig:
    parts = text.split(":")
    if not 1 <= len(parts) <= 3:
        raise argparse.ArgumentTypeError(f"bad config {text!r}; expected K[:MODE[:R]]")
    try:
        k = int(parts[0])
        mode = Mode(parts[1]) if len(parts) > 1 and parts[1] else Mode.TWO_STEP
        R = int(parts[2]) if len(parts) > 2 and parts[2] not in ("", "auto") else None
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return BenchConfig(k, mode, R)


def cmd_bench(args: argparse.Namespace) -> None:
    spec = _synth_spec(args)
    configs = args.config or [BenchConfig(k) for k in DEFAULT_BENCH_KS]
    report = run_benchmark(spec, configs, dim=args.dim, embed_seed=args.seed, repeats=args.repeats, threads=args.threads)
    report.write_csv(args.out)
    config = {
        "synth": asdict(spec), "dim": args.dim, "seed": args.seed, "repeats": args.repeats, "threads": args.threads,
        "configs": [{"k": c.k, "mode": Mode(c.mode).value, "R": c.resolved_R} for c in configs],
    }
    write_manifest(args.out, args, config, [], [args.out])
    for row in report.rows:
        print(row.k, row.mode, row.R, " ".join(f"{m}={v:.4f}" for m, v in row.metrics.items()))


def cmd_replay(args: argparse.Namespace) -> int:
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    argv = manifest.get("argv")
    if not isinstance(argv, list) or not argv:
        raise FormatError(f"{args.manifest}: manifest has no argv to replay")
    return main(argv)


def _threads_default() -> int:
    env = os.environ.get("PQE_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _add_synth_flags(p: argparse.ArgumentParser) -> None:
    d = SynthSpec()
    g = p.add_argument_group("synthetic corpus")
    g.add_argument("--num-docs", type=int, default=d.num_docs, help="documents (default: %(default)s)")
    g.add_argument("--topics-per-doc", type=int, default=d.topics_per_doc, help="topical segments per document (default: %(default)s)")
    g.add_argument("--tokens-per-topic", type=int, default=d.tokens_per_topic, help="tokens per segment (default: %(default)s)")
    g.add_argument("--vocab-per-topic", type=int, default=d.vocab_per_topic, help="distinct words per topic (default: %(default)s)")
    g.add_argument("--num-queries", type=int, default=d.num_queries, help="queries (default: %(default)s)")
    g.add_argument("--query-tokens", type=int, default=d.query_tokens, help="tokens per query (default: %(default)s)")
    g.add_argument("--synth-seed", type=int, default=d.seed, help="generator seed (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pseudoq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=_threads_default(),
                        help="worker cap; falls back to $PQE_THREADS (default: %(default)s)")
    common.add_argument("--log-level", default="WARNING", help="logging level (default: %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help, description=help)
        p.set_defaults(func=fn)
        return p

    p = add("embed", cmd_embed, "Embed a TSV corpus (or a synthetic one) into a PQEB file.")
    p.add_argument("--input", help="documents TSV: doc_id<TAB>text (default: %(default)s)")
    p.add_argument("--synth", action="store_true", help="generate a synthetic corpus instead of --input (default: %(default)s)")
    p.add_argument("--out", required=True, help="output PQEB path")
    p.add_argument("--dim", type=int, default=DEFAULT_DIM, help="embedding dimension (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="hashing seed (default: %(default)s)")
    p.add_argument("--limit", type=int, default=DEFAULT_LIMIT, help="token limit incl. [CLS] (default: %(default)s)")
    p.add_argument("--queries-out", help="with --synth: write queries TSV here (default: %(default)s)")
    p.add_argument("--qrels-out", help="with --synth: write qrels here (default: %(default)s)")
    _add_synth_flags(p)

    p = add("cluster", cmd_cluster, "K-means each document of a PQEB file into a PQEC file.")
    p.add_argument("--input", required=True, help="input PQEB path")
    p.add_argument("--out", required=True, help="output PQEC path")
    p.add_argument("--k", type=int, default=DEFAULT_K, help="clusters per document (default: %(default)s)")
    p.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS, help="Lloyd iteration cap (default: %(default)s)")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL, help="centroid movement threshold (default: %(default)s)")
    p.add_argument("--include-cls", action="store_true", help="cluster the [CLS] row too (default: %(default)s)")

    p = add("index", cmd_index, "Build a flat inner-product index (PQEI) from a PQEC file.")
    p.add_argument("--input", required=True, help="input PQEC path")
    p.add_argument("--out", required=True, help="output PQEI path")

    p = add("search", cmd_search, "Retrieve for a TSV of queries and write a TREC run.")
    p.add_argument("--index", required=True, help="PQEI path")
    p.add_argument("--centroids", help="optional PQEC path, checked against the index (default: %(default)s)")
    p.add_argument("--queries", required=True, help="queries TSV: qid<TAB>text")
    p.add_argument("--out", required=True, help="output run file")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.TWO_STEP.value, help="retrieval mode (default: %(default)s)")
    p.add_argument("--R", type=int, default=None, help="candidate count (default: 1000 * k)")
    p.add_argument("--k", type=int, default=None, help="cluster count used for the R default (default: largest k_effective in the index)")
    p.add_argument("--final-k", type=int, default=DEFAULT_FINAL_K, help="results per query (default: %(default)s)")
    p.add_argument("--pooling", choices=[s.value for s in Pooling], default=Pooling.FIRST_TOKEN.value, help="query pooling (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="hashing seed; must match embed (default: %(default)s)")
    p.add_argument("--limit", type=int, default=DEFAULT_LIMIT, help="query token limit (default: %(default)s)")
    p.add_argument("--tag", default="pseudoq", help="run tag (default: %(default)s)")

    p = add("eval", cmd_eval, "Score a TREC run against qrels.")
    p.add_argument("--run", required=True, help="run file")
    p.add_argument("--qrels", required=True, help="qrels file")
    p.add_argument("--metrics", default=",".join(DEFAULT_METRICS), help="comma-separated NAME@K list (default: %(default)s)")
    p.add_argument("--out", help="also write the JSON report here (default: %(default)s)")

    p = add("diagnose", cmd_diagnose, "Loss / max r / var r diagnostics per representation strategy (CSV).")
    p.add_argument("--input", required=True, help="PQEB path")
    p.add_argument("--queries", required=True, help="queries TSV")
    p.add_argument("--qrels", required=True, help="qrels naming each query's positive document")
    p.add_argument("--strategies", default="centroids,first_k,random_k", help="comma-separated strategies (default: %(default)s)")
    p.add_argument("--k", type=int, default=4, help="vectors per document (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=16, help="in-batch negatives batch size (default: %(default)s)")
    p.add_argument("--pooling", choices=[s.value for s in Pooling], default=Pooling.FIRST_TOKEN.value, help="query pooling (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="hashing and random_k seed (default: %(default)s)")
    p.add_argument("--limit", type=int, default=DEFAULT_LIMIT, help="query token limit (default: %(default)s)")
    p.add_argument("--out", required=True, help="output CSV")

    p = add("bench", cmd_bench, "Synthetic benchmark over (k, mode, R) configs (CSV).")
    _add_synth_flags(p)
    p.add_argument("--config", type=_parse_bench_config, action="append",
                   help="K[:MODE[:R]], repeatable (default: k in 1,4,8,16,32, two_step, R=1000*k)")
    p.add_argument("--dim", type=int, default=32, help="embedding dimension (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="hashing seed (default: %(default)s)")
    p.add_argument("--repeats", type=int, default=5, help="timing repetitions (default: %(default)s)")
    p.add_argument("--out", required=True, help="output CSV")

    p = add("replay", cmd_replay, "Re-run the command recorded in a manifest.")
    p.add_argument("manifest", help="path to a *.manifest.json")
    return parser


def _fail(kind: str, code: int, message: str) -> int:
    print(f"pseudoq: error kind={kind} code={code} message={json.dumps(message)}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        return _fail("validation", EXIT_VALIDATION, "--threads must be >= 1")
    try:
        result = args.func(args)
    except (FormatError, UnicodeDecodeError) as exc:
        return _fail("format", EXIT_FORMAT, str(exc))
    except (ValidationError, PQError, ValueError) as exc:
        return _fail("validation", EXIT_VALIDATION, str(exc))
    except OSError as exc:
        return _fail("io", EXIT_IO, f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc))
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
