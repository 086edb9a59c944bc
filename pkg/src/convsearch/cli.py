"""Command-line interface: ingest, query, eval, optimize-weights, cluster, serve."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from .analysis import cluster_components
from .config import AppConfig
from .core import ComponentKind
from .embedding import EmbeddingCache
from .evaluation import WeightSearchConfig, load_corpus, load_queries, optimize_weights, run_benchmark
from .index import load as load_index
from .retrieval import UnknownCombinationError
from .service import breakdown_to_dict, build_scoring_config, execute_query, run_ingest


def _load_config(path: Optional[str]) -> AppConfig:
    return AppConfig.load(path) if path else AppConfig()


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a JSON configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convsearch", description="Conversational-data retrieval engine."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="extract, embed, and index a corpus")
    p_ingest.add_argument("--corpus", required=True)
    p_ingest.add_argument("--out", required=True)
    p_ingest.add_argument("--mode", choices=["two-step", "single-step"])
    p_ingest.add_argument("--context-k", type=int, dest="context_k")
    p_ingest.add_argument("--no-resume", action="store_true")
    _add_config_arg(p_ingest)

    p_query = sub.add_parser("query", help="rank conversations for one query")
    p_query.add_argument("--index", required=True)
    p_query.add_argument("--text", required=True)
    p_query.add_argument("--top-k", type=int, default=10)
    p_query.add_argument("--combination", default="sv_svo_svoa_conv_msg")
    p_query.add_argument("--bm25-weight", type=float, default=0.0)
    _add_config_arg(p_query)

    p_eval = sub.add_parser("eval", help="run the metric suite over a query file")
    p_eval.add_argument("--index", required=True)
    p_eval.add_argument("--queries", required=True)
    p_eval.add_argument("--combination", default="sv_svo_svoa_conv_msg")
    p_eval.add_argument("--bm25-weight", type=float, default=0.0)
    p_eval.add_argument("--json", action="store_true", help="emit the report as JSON")
    _add_config_arg(p_eval)

    p_opt = sub.add_parser("optimize-weights", help="random search over component weights")
    p_opt.add_argument("--index", required=True)
    p_opt.add_argument("--queries", required=True)
    p_opt.add_argument("--samples", type=int, default=1000)
    p_opt.add_argument("--seed", type=int, default=0)
    p_opt.add_argument("--objective", default="ndcg@20")
    _add_config_arg(p_opt)

    p_cluster = sub.add_parser("cluster", help="k-means over component instances")
    p_cluster.add_argument("--index", required=True)
    p_cluster.add_argument("--kind", choices=["sv", "svo", "svoa"], required=True)
    p_cluster.add_argument("--k", type=int, default=15)
    p_cluster.add_argument("--seed", type=int, default=0)
    p_cluster.add_argument("--json", action="store_true")
    _add_config_arg(p_cluster)

    p_serve = sub.add_parser("serve", help="read-mostly HTTP retrieval service")
    p_serve.add_argument("--index", required=True)
    p_serve.add_argument("--bind", default="127.0.0.1:8080")
    _add_config_arg(p_serve)

    return parser


def _cmd_ingest(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    if args.mode:
        config.extraction.mode = args.mode
    if args.context_k is not None:
        config.extraction.context_window_k = args.context_k
    try:
        report = run_ingest(args.corpus, args.out, config, resume=not args.no_resume)
    except Exception as exc:
        print(f"ingest failed: {exc}", file=sys.stderr)
        print("progress files kept; rerun to resume from completed conversations",
              file=sys.stderr)
        return 1
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _cmd_query(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    store = load_index(args.index)
    backend = config.build_embedding_backend()
    cache = EmbeddingCache(config.paths.cache) if config.paths.cache else None
    try:
        cfg = build_scoring_config(args.combination, bm25_weight=args.bm25_weight)
    except UnknownCombinationError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    results = execute_query(store, backend, args.text, args.top_k, cfg, cache)
    print(json.dumps([breakdown_to_dict(b) for b in results], indent=2))
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    store = load_index(args.index)
    queries = load_queries(args.queries, set(store.conv_ids()))
    backend = config.build_embedding_backend()
    cache = EmbeddingCache(config.paths.cache) if config.paths.cache else None
    try:
        cfg = build_scoring_config(args.combination, bm25_weight=args.bm25_weight)
    except UnknownCombinationError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    report = run_benchmark(store, queries, cfg, backend, cache)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(report.table())
    return 0


def _cmd_optimize_weights(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    store = load_index(args.index)
    queries = load_queries(args.queries, set(store.conv_ids()))
    backend = config.build_embedding_backend()
    cache = EmbeddingCache(config.paths.cache) if config.paths.cache else None
    search_cfg = WeightSearchConfig(
        sample_count=args.samples, objective=args.objective, seed=args.seed
    )
    result = optimize_weights(store, queries, search_cfg, backend=backend, cache=cache)
    print(
        json.dumps(
            {
                "weights": {k.value: w for k, w in result.weights.items()},
                "objective": args.objective,
                "objective_value": result.objective_value,
                "evaluated": result.evaluated,
            },
            indent=2,
        )
    )
    return 0


def _cmd_cluster(args: argparse.Namespace) -> int:
    store = load_index(args.index)
    report = cluster_components(store, ComponentKind(args.kind), args.k, args.seed)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(report.table())
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .server import create_app

    config = _load_config(args.config)
    host, _, port = args.bind.rpartition(":")
    app = create_app(args.index, config)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "query": _cmd_query,
    "eval": _cmd_eval,
    "optimize-weights": _cmd_optimize_weights,
    "cluster": _cmd_cluster,
    "serve": _cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
