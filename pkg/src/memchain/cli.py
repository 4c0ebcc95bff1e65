"""Command-line entry point: ``memchain {ingest,query,eval,stats,synth}``.

Exit codes: 0 success, 2 validation (bad input, config, conflicts),
3 embedding provider / transport failure, 4 empty store.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import evaluation
from .assembly import merge_chains
from .chain import evolve
from .embedding import (
    DeterministicTestEmbedder,
    HttpEmbeddingProvider,
    embed_text,
    provider_from_id,
)
from .model import (
    ChainConfig,
    ConflictError,
    EmptyMemoryError,
    MemchainError,
    ProviderError,
    Query,
    ValidationError,
    format_timestamp,
    validate_config,
)
from .store import MemoryStore, ingest_session, load_store, read_conversation, retrieve_top_k, save_store

logger = logging.getLogger("memchain")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PROVIDER = 3
EXIT_EMPTY = 4


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ProviderError):
        return EXIT_PROVIDER
    if isinstance(exc, EmptyMemoryError):
        return EXIT_EMPTY
    return EXIT_VALIDATION


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _build_provider(args, dimension: int):
    if args.embedder == "http":
        return HttpEmbeddingProvider.from_env(dimension)
    return DeterministicTestEmbedder(dimension, args.seed)


def _provider_for_store(args, store: MemoryStore):
    if getattr(args, "embedder", None) == "http":
        provider = HttpEmbeddingProvider.from_env(store.dimension)
    else:
        provider = provider_from_id(store.provider_id)
    if provider.provider_id != store.provider_id:
        raise ValidationError(
            f"embedder mismatch: store was built with {store.provider_id!r}, not {provider.provider_id!r}"
        )
    return provider


def _config_from_args(args) -> ChainConfig:
    return validate_config(ChainConfig(
        k=args.k, l=args.l, beta=args.beta, max_len=args.max_len, token_budget=args.budget,
    ))


def _load(path) -> MemoryStore:
    if not Path(path).exists():
        raise ValidationError(f"store {path} does not exist")
    return load_store(path)


def _reembed_chains(store, provider):
    def embed_members(members):
        return provider.embed(["\n".join(store[m].text for m in members)])[0]
    return embed_members


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    sessions = read_conversation(args.input)
    path = Path(args.store)
    if path.exists():
        store = load_store(path)
        dimension = store.dimension
    else:
        store, dimension = None, args.dim
    provider = evaluation.InstrumentedProvider(_build_provider(args, dimension))
    if store is None:
        store = MemoryStore(dimension, provider.provider_id)
    elif store.provider_id != provider.provider_id:
        raise ValidationError(
            f"embedder mismatch: store was built with {store.provider_id!r}, not {provider.provider_id!r}"
        )
    for session_id in sessions:
        if session_id in store.session_counts:
            raise ConflictError(f"session {session_id!r} already ingested")
    added = 0
    for session_id, turns in sessions.items():
        added += ingest_session(store, session_id, turns, provider)
    save_store(store, path)
    print(f"{added} nodes ingested")
    print(f"embed_calls={provider.embed_calls} embed_inputs={provider.embed_inputs} generator_calls=0")
    return EXIT_OK


def cmd_query(args) -> int:
    cfg = _config_from_args(args)
    if not args.question.strip():
        raise ValidationError("question is empty")
    store = _load(args.store)
    if not len(store):
        raise EmptyMemoryError("empty memory")
    provider = _provider_for_store(args, store)
    query = Query(args.question, embed_text(provider, args.question))

    t0 = time.perf_counter()
    pool = retrieve_top_k(store, query, cfg.k)
    t1 = time.perf_counter()
    chain_embedder = _reembed_chains(store, provider) if args.chain_embedding == "reembed" else None
    chains, trace = evolve(pool, query, cfg, chain_embedder=chain_embedder)
    t2 = time.perf_counter()
    ctx = merge_chains(chains, store, cfg.token_budget)
    retrieval_ms, chain_ms = (t1 - t0) * 1e3, (t2 - t1) * 1e3
    out = sys.stdout

    if args.format == "text":
        if ctx.rendered:
            out.write(ctx.rendered + "\n")
        print(f"tokens={ctx.token_count} retrieval_ms={retrieval_ms:.3f} chain_ms={chain_ms:.3f}", file=sys.stderr)
        if args.trace:
            sys.stderr.write(trace.to_jsonl() + "\n")
        return EXIT_OK

    scores = dict(zip(pool.node_ids, pool.scores))
    for nid in ctx.nodes:
        node = store[nid]
        out.write(json.dumps({
            "type": "node", "node_id": nid, "timestamp": format_timestamp(node.timestamp),
            "role": node.role.value, "text": node.text, "score": scores[nid],
        }, ensure_ascii=False) + "\n")
    for idx, chain in enumerate(chains):
        out.write(json.dumps({
            "type": "chain", "index": idx, "members": list(chain.members),
            "scores": list(chain.scores), "finalize_reason": chain.finalize_reason.value,
        }) + "\n")
    out.write(json.dumps({
        "type": "metrics", "tokens": ctx.token_count, "nodes": len(ctx.nodes),
        "dropped_for_budget": ctx.dropped_for_budget, "retrieval_ms": retrieval_ms, "chain_ms": chain_ms,
    }) + "\n")
    if args.trace:
        for rec in trace.records():
            out.write(json.dumps({"type": "trace", **rec}) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    store = _load(args.store)
    if not len(store):
        raise EmptyMemoryError("empty memory")
    cases = evaluation.load_cases(args.cases)
    evaluation.validate_cases(store, cases)
    provider = _provider_for_store(args, store)
    modes = ["chain", "naive-topk"] if args.mode == "both" else [args.mode]
    matched = not args.unmatched

    if args.sweep:
        grid = evaluation.parse_sweep(args.sweep)
        rows = []
        for mode in modes:
            rows += evaluation.sweep(store, cases, grid, provider, base=cfg, mode=mode, matched=matched)
        table = evaluation.sweep_table_jsonl(rows)
        sys.stdout.write(table)
        if args.sweep_out:
            Path(args.sweep_out).write_text(table, encoding="utf-8")
        return EXIT_OK

    reports = []
    for mode in modes:
        report = evaluation.run_eval(store, cases, cfg, mode, provider, matched=matched)
        reports.append(report)
        for category, recall in report.recall_by_category().items():
            print(f"mode={mode} category={category} recall={recall:.4f} cases={len(report.rows)} "
                  f"tokens={report.total_tokens}")
    if args.report:
        doc = {"reports": [r.to_dict() for r in reports]}
        Path(args.report).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_stats(args) -> int:
    store = _load(args.store)
    print(f"nodes={len(store)}")
    print(f"sessions={len(store.session_counts)}")
    print(f"dimension={store.dimension}")
    print(f"provider_id={store.provider_id}")
    return EXIT_OK


def cmd_synth(args) -> int:
    corpus = evaluation.generate_synthetic_corpus(
        args.seed, args.sessions, args.turns, args.hops,
        cases=args.cases, distractors=args.distractors, dimension=args.dim, embed_seed=args.embed_seed,
    )
    Path(args.out_conversation).write_text(corpus.conversation, encoding="utf-8")
    Path(args.out_cases).write_text(evaluation.cases_to_jsonl(corpus.cases), encoding="utf-8")
    print(f"{len(corpus.conversation.splitlines())} turns, {len(corpus.cases)} cases; "
          f"ingest with --embedder test --dim {args.dim} --seed {args.embed_seed}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_chain_flags(p: argparse.ArgumentParser) -> None:
    d = ChainConfig()
    p.add_argument("--k", type=int, default=d.k, help="candidate pool size (default: %(default)s)")
    p.add_argument("--l", type=int, default=d.l, help="number of anchors/chains (default: %(default)s)")
    p.add_argument("--beta", type=float, default=d.beta, help="truncation ratio in [0, 1] (default: %(default)s)")
    p.add_argument("--max-len", type=int, default=d.max_len, help="chain length cap (default: %(default)s)")
    p.add_argument("--budget", type=int, default=d.token_budget, help="context token budget (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memchain", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="add conversation sessions to a store")
    p.add_argument("--input", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--embedder", choices=("test", "http"), default="test")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="retrieve, chain and assemble context for a question")
    p.add_argument("--store", required=True)
    p.add_argument("--question", required=True)
    _add_chain_flags(p)
    p.add_argument("--format", choices=("text", "structured"), default="text")
    p.add_argument("--trace", action="store_true", help="also emit the evolution trace")
    p.add_argument("--embedder", choices=("test", "http"), default=None,
                   help="defaults to the embedder recorded in the store")
    p.add_argument("--chain-embedding", choices=("mean", "reembed"), default="mean")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="evidence recall over a case file")
    p.add_argument("--store", required=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--mode", choices=("naive-topk", "chain", "both"), default="both")
    p.add_argument("--sweep", help="grid such as 'k=1,5,10;beta=0,0.8'")
    p.add_argument("--sweep-out")
    p.add_argument("--report", help="write the full report (JSON) here")
    p.add_argument("--unmatched", action="store_true",
                   help="naive mode assembles the top-k pool instead of matching chain node counts")
    p.add_argument("--embedder", choices=("test", "http"), default=None)
    _add_chain_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="describe a store")
    p.add_argument("--store", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="write a synthetic corpus and case file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sessions", type=int, default=20)
    p.add_argument("--turns", type=int, default=20)
    p.add_argument("--hops", type=int, default=3)
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--distractors", type=int, default=14)
    p.add_argument("--dim", type=int, default=evaluation.SYNTHETIC_DIMENSION)
    p.add_argument("--embed-seed", type=int, default=0)
    p.add_argument("--out-conversation", required=True)
    p.add_argument("--out-cases", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MemchainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
