import json
from dataclasses import replace

import numpy as np
import pytest

from memchain.chain import gate_score
from memchain.embedding import cosine, embed_text
from memchain.evaluation import (
    SYNTHETIC_EVAL_CONFIG,
    EvalCase,
    InstrumentedProvider,
    build_store,
    cases_to_jsonl,
    evidence_recall,
    generate_synthetic_corpus,
    load_cases,
    parse_sweep,
    run_eval,
    sweep,
    validate_cases,
)
from memchain.model import AssembledContext, ValidationError


def ctx(*nodes):
    return AssembledContext(tuple(nodes), "", 0, 0)


def test_evidence_recall_examples():
    case = EvalCase("c", "q", ("a", "b"))
    assert evidence_recall(ctx("a", "b", "z"), case) == 1.0
    assert evidence_recall(ctx("a"), case) == 0.5
    assert evidence_recall(ctx(), case) == 0.0


def test_eval_case_validation():
    with pytest.raises(ValidationError):
        EvalCase("c", "q", ())
    with pytest.raises(ValidationError):
        EvalCase("c", "q", ("a",), "opinion")


@pytest.fixture(scope="module")
def hop3():
    corpus = generate_synthetic_corpus(11, sessions=10, turns_per_session=15, planted_hops=3, cases=6)
    return corpus, build_store(corpus.conversation, corpus.provider)


@pytest.fixture(scope="module")
def hop1():
    corpus = generate_synthetic_corpus(5, sessions=10, turns_per_session=10, planted_hops=1, cases=5)
    return corpus, build_store(corpus.conversation, corpus.provider)


def test_corpus_is_deterministic():
    a = generate_synthetic_corpus(3, sessions=5, turns_per_session=10, planted_hops=2, cases=2, distractors=6)
    b = generate_synthetic_corpus(3, sessions=5, turns_per_session=10, planted_hops=2, cases=2, distractors=6)
    assert a.conversation.encode() == b.conversation.encode()
    assert cases_to_jsonl(a.cases) == cases_to_jsonl(b.cases)
    c = generate_synthetic_corpus(4, sessions=5, turns_per_session=10, planted_hops=2, cases=2, distractors=6)
    assert c.conversation != a.conversation


def test_infeasible_corpus_rejected():
    with pytest.raises(ValidationError):
        generate_synthetic_corpus(0, sessions=1, turns_per_session=5, planted_hops=3)
    with pytest.raises(ValidationError):
        generate_synthetic_corpus(0, sessions=2, turns_per_session=20, planted_hops=3, cases=5)
    with pytest.raises(ValidationError):
        generate_synthetic_corpus(0, planted_hops=0)


def test_single_hop_evidence_is_top1(hop1):
    corpus, store = hop1
    from memchain.model import Query
    from memchain.store import retrieve_top_k
    for case in corpus.cases:
        assert len(case.evidence) == 1 and case.category == "single-hop"
        q = Query(case.question, embed_text(corpus.provider, case.question))
        assert retrieve_top_k(store, q, 1).node_ids == list(case.evidence)
        hop_text = store[case.evidence[0]].text.split()
        assert set(hop_text) & set(case.question.split())


def test_later_hops_are_query_dissimilar_but_chain_consistent(hop3):
    corpus, store = hop3
    p = corpus.provider
    for case in corpus.cases:
        q = embed_text(p, case.question)
        h = [store[nid].embedding for nid in case.evidence]
        qwords = set(case.question.split())
        for j in (1, 2):
            assert cosine(h[j], q) < 0.2
            assert not set(store[case.evidence[j]].text.split()) & qwords
            assert set(store[case.evidence[j]].text.split()) & set(store[case.evidence[j - 1]].text.split())
            assert cosine(h[j], h[j - 1]) > 0.4


def test_hops_rank_below_distractors_but_win_the_gate(hop3):
    """Exhaustive check over every turn of the corpus for each case."""
    corpus, store = hop3
    nodes = store.nodes()
    for case in corpus.cases:
        q = embed_text(corpus.provider, case.question)
        qwords = set(case.question.split())
        h = [store[nid] for nid in case.evidence]
        distractors = [n for n in nodes if n.node_id not in case.evidence and set(n.text.split()) & qwords]
        assert distractors
        for j in (1, 2):
            assert all(cosine(d.embedding, q) > cosine(h[j].embedding, q) for d in distractors)
            mean = np.mean([x.embedding.astype(np.float64) for x in h[:j]], axis=0)
            chain_vec = mean / np.linalg.norm(mean)
            best = gate_score(h[j].embedding, q, chain_vec)
            for n in nodes:
                if n.node_id not in case.evidence[: j + 1]:
                    assert gate_score(n.embedding, q, chain_vec) < best


def test_single_hop_both_modes_full_recall(hop1):
    corpus, store = hop1
    for mode in ("chain", "naive-topk"):
        report = run_eval(store, corpus.cases, SYNTHETIC_EVAL_CONFIG, mode, corpus.provider)
        assert report.mean_recall == 1.0


def test_chain_beats_naive_at_matched_budget(hop3):
    corpus, store = hop3
    chain = run_eval(store, corpus.cases, SYNTHETIC_EVAL_CONFIG, "chain", corpus.provider)
    naive = run_eval(store, corpus.cases, SYNTHETIC_EVAL_CONFIG, "naive-topk", corpus.provider)
    assert [r.context_nodes for r in chain.rows] == [r.context_nodes for r in naive.rows]
    assert chain.mean_recall > naive.mean_recall
    for c_row, n_row in zip(chain.rows, naive.rows):
        assert c_row.evidence_recall >= n_row.evidence_recall


def test_naive_recall_non_decreasing_in_k(hop3):
    corpus, store = hop3
    recalls = []
    for k in (1, 5, 10, 20, 50):
        cfg = replace(SYNTHETIC_EVAL_CONFIG, k=k, l=min(3, k))
        recalls.append(run_eval(store, corpus.cases, cfg, "naive-topk", corpus.provider, matched=False).mean_recall)
    assert recalls == sorted(recalls)


def test_sweep_shapes(hop3):
    corpus, store = hop3
    cfg = SYNTHETIC_EVAL_CONFIG
    single = sweep(store, corpus.cases, {"k": [20]}, corpus.provider, base=cfg)
    direct = run_eval(store, corpus.cases, cfg, "chain", corpus.provider)
    assert len(single) == 1
    strip = lambda rep: [(r.case_id, r.evidence_recall, r.context_tokens, r.chain_lengths) for r in rep.rows]
    assert strip(single[0].report) == strip(direct)

    grid = sweep(store, corpus.cases, {"k": [5, 20], "beta": [0.0, 0.5]}, corpus.provider, base=cfg)
    assert [r.params for r in grid] == [
        {"k": 5, "beta": 0.0}, {"k": 5, "beta": 0.5}, {"k": 20, "beta": 0.0}, {"k": 20, "beta": 0.5}]

    betas = sweep(store, corpus.cases, {"beta": [0.0, 0.8, 1.0]}, corpus.provider, base=cfg)
    lengths = [r.report.mean_chain_length for r in betas]
    assert lengths == sorted(lengths, reverse=True)


def test_k_sweep_caps_anchor_count(hop3):
    corpus, store = hop3
    rows = sweep(store, corpus.cases[:2], {"k": [1, 5]}, corpus.provider)
    assert rows[0].report.config["l"] == 1 and rows[1].report.config["l"] == 3


def test_parse_sweep():
    assert parse_sweep("k=1,5,10;beta=0,0.8") == {"k": [1, 5, 10], "beta": [0.0, 0.8]}
    assert parse_sweep("max-len=2,3") == {"max_len": [2, 3]}
    for bad in ("", "gamma=1", "k=a", "k="):
        with pytest.raises(ValidationError):
            parse_sweep(bad)


def test_report_aggregates_recompute_from_rows(hop3):
    corpus, store = hop3
    report = run_eval(store, corpus.cases, SYNTHETIC_EVAL_CONFIG, "chain", corpus.provider)
    doc = json.loads(report.to_json())
    rows = doc["rows"]
    agg = doc["aggregates"]
    assert agg["total_tokens"] == sum(r["context_tokens"] for r in rows)
    assert agg["total_ms"] == sum(r["retrieval_ms"] + r["chain_ms"] for r in rows)
    assert agg["mean_recall"] == sum(r["evidence_recall"] for r in rows) / len(rows)
    assert agg["recall_by_category"] == {"multi-hop": agg["mean_recall"]}
    for r in rows:
        assert 0.0 <= r["evidence_recall"] <= 1.0
        assert {"evidence_recall", "retrieval_ms", "chain_ms", "context_tokens"} <= set(r)


def test_eval_is_reproducible(hop3):
    corpus, store = hop3
    a = run_eval(store, corpus.cases, SYNTHETIC_EVAL_CONFIG, "chain", corpus.provider)
    b = run_eval(store, corpus.cases, SYNTHETIC_EVAL_CONFIG, "chain", corpus.provider)
    assert [(r.evidence_recall, r.chain_lengths) for r in a.rows] == [(r.evidence_recall, r.chain_lengths) for r in b.rows]


def test_construction_is_embedding_only(hop1):
    corpus, _ = hop1
    counted = InstrumentedProvider(corpus.provider)
    store = build_store(corpus.conversation, counted)
    assert counted.embed_inputs == len(store) == len(corpus.conversation.splitlines())
    assert counted.generator_calls == 0


def test_cases_file_round_trip_and_validation(tmp_path, hop1):
    corpus, store = hop1
    path = tmp_path / "cases.jsonl"
    path.write_text(cases_to_jsonl(corpus.cases), encoding="utf-8")
    assert load_cases(path) == corpus.cases
    validate_cases(store, corpus.cases)
    with pytest.raises(ValidationError, match="ghost"):
        validate_cases(store, [EvalCase("ghost", "q", ("nope#0",))])
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"question": "q"}\n', encoding="utf-8")
    with pytest.raises(ValidationError, match="line 1"):
        load_cases(bad)


def test_unknown_mode(hop1):
    corpus, store = hop1
    with pytest.raises(ValidationError):
        run_eval(store, corpus.cases, SYNTHETIC_EVAL_CONFIG, "oracle", corpus.provider)
