"""Desk-scale evaluation: synthetic corpora with planted evidence chains,
evidence recall, cost accounting and hyperparameter sweeps.
"""

from __future__ import annotations

import itertools
import json
import random
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Optional, Sequence

import numpy as np

from .assembly import merge_chains, merge_scored
from .chain import evolve
from .embedding import DeterministicTestEmbedder, EmbeddingProvider, embed_text, token_vectors
from .model import AssembledContext, ChainConfig, Query, ValidationError, format_timestamp, validate_config
from .store import MemoryStore, retrieve_top_k

CATEGORIES = ("single-hop", "multi-hop", "temporal", "knowledge")
MODES = ("naive-topk", "chain")

# Config under which the synthetic multi-hop benchmark is run. Gate scores are
# products of two cosines, so a hop that is barely query-relevant scores far
# below its anchor's retrieval score; beta must sit under that ratio for a
# chain to reach it. max_len keeps the assembled node count below the number
# of planted distractors so the matched-budget comparison is meaningful.
SYNTHETIC_EVAL_CONFIG = ChainConfig(k=20, l=3, beta=0.1, max_len=4, token_budget=4096)
SYNTHETIC_DIMENSION = 1024


# ---------------------------------------------------------------------------
# Cases and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalCase:
    case_id: str
    question: str
    evidence: tuple
    category: str = "single-hop"

    def __post_init__(self):
        if not self.question or not self.question.strip():
            raise ValidationError(f"{self.case_id}: question is empty")
        if not self.evidence:
            raise ValidationError(f"{self.case_id}: evidence is empty")
        if self.category not in CATEGORIES:
            raise ValidationError(f"{self.case_id}: unknown category {self.category!r}")
        object.__setattr__(self, "evidence", tuple(self.evidence))

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "question": self.question,
                "evidence": list(self.evidence), "category": self.category}


def cases_to_jsonl(cases: Sequence[EvalCase]) -> str:
    return "".join(json.dumps(c.to_dict(), ensure_ascii=False) + "\n" for c in cases)


def load_cases(path) -> list:
    cases = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                cases.append(EvalCase(
                    case_id=str(rec.get("case_id", f"case-{lineno}")),
                    question=rec["question"],
                    evidence=tuple(rec["evidence"]),
                    category=rec.get("category", "single-hop"),
                ))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValidationError(f"line {lineno}: malformed case record ({exc})") from None
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
    return cases


def validate_cases(store: MemoryStore, cases: Sequence[EvalCase]) -> None:
    for case in cases:
        missing = [nid for nid in case.evidence if nid not in store]
        if missing:
            raise ValidationError(f"case {case.case_id}: evidence {missing} not in store")


def evidence_recall(context: AssembledContext, case: EvalCase) -> float:
    evidence = set(case.evidence)
    return len(evidence & set(context.nodes)) / len(evidence)


@dataclass(frozen=True)
class CaseResult:
    case_id: str
    category: str
    evidence_recall: float
    retrieval_ms: float
    chain_ms: float
    context_tokens: int
    context_nodes: int
    nodes_retrieved: int
    chains: int
    chain_lengths: tuple


@dataclass
class EvalReport:
    mode: str
    config: dict
    rows: list = field(default_factory=list)

    def recall_by_category(self) -> dict:
        grouped: dict = {}
        for row in self.rows:
            grouped.setdefault(row.category, []).append(row.evidence_recall)
        return {cat: sum(v) / len(v) for cat, v in sorted(grouped.items())}

    @property
    def mean_recall(self) -> float:
        return sum(r.evidence_recall for r in self.rows) / len(self.rows) if self.rows else 0.0

    @property
    def total_tokens(self) -> int:
        return sum(r.context_tokens for r in self.rows)

    @property
    def total_ms(self) -> float:
        return sum(r.retrieval_ms + r.chain_ms for r in self.rows)

    @property
    def mean_chain_length(self) -> float:
        lengths = [n for r in self.rows for n in r.chain_lengths]
        return sum(lengths) / len(lengths) if lengths else 0.0

    def aggregates(self) -> dict:
        return {
            "recall_by_category": self.recall_by_category(),
            "mean_recall": self.mean_recall,
            "total_tokens": self.total_tokens,
            "total_ms": self.total_ms,
            "mean_chain_length": self.mean_chain_length,
        }

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "config": self.config,
            "rows": [{**asdict(r), "chain_lengths": list(r.chain_lengths)} for r in self.rows],
            "aggregates": self.aggregates(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class InstrumentedProvider:
    """Wraps a provider and counts what passes through it.

    ``generator_calls`` exists for cost reports; nothing in this package ever
    calls a text generator, so it only moves if a caller bumps it.
    """

    def __init__(self, inner: EmbeddingProvider):
        self.inner = inner
        self.provider_id = inner.provider_id
        self.dimension = inner.dimension
        self.batch_size = getattr(inner, "batch_size", 64)
        self.embed_calls = 0
        self.embed_inputs = 0
        self.generator_calls = 0

    def embed(self, texts):
        self.embed_calls += 1
        self.embed_inputs += len(texts)
        return self.inner.embed(texts)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def _chain_context(store, query, cfg):
    t0 = time.perf_counter()
    pool = retrieve_top_k(store, query, cfg.k)
    t1 = time.perf_counter()
    chains, _ = evolve(pool, query, cfg)
    t2 = time.perf_counter()
    ctx = merge_chains(chains, store, cfg.token_budget)
    return pool, chains, ctx, (t1 - t0) * 1e3, (t2 - t1) * 1e3


def run_eval(
    store: MemoryStore,
    cases: Sequence[EvalCase],
    cfg: ChainConfig,
    mode: str,
    provider: EmbeddingProvider,
    *,
    matched: bool = True,
) -> EvalReport:
    """Evaluate ``cases`` in one mode.

    ``naive-topk`` assembles the top-N retrieved nodes without chaining. With
    ``matched`` (the default) N is the node count the chain pipeline assembles
    for the same case; otherwise N is ``cfg.k``.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    validate_config(cfg)
    validate_cases(store, cases)
    report = EvalReport(mode=mode, config={**asdict(cfg), "matched": matched})
    for case in cases:
        query = Query(case.question, embed_text(provider, case.question))
        if mode == "chain":
            pool, chains, ctx, retrieval_ms, chain_ms = _chain_context(store, query, cfg)
            row = CaseResult(
                case.case_id, case.category, evidence_recall(ctx, case), retrieval_ms, chain_ms,
                ctx.token_count, len(ctx.nodes), len(pool), len(chains), tuple(len(c) for c in chains),
            )
        else:
            if matched:
                n = len(_chain_context(store, query, cfg)[2].nodes)
            else:
                n = cfg.k
            t0 = time.perf_counter()
            pool = retrieve_top_k(store, query, max(n, 1))
            retrieval_ms = (time.perf_counter() - t0) * 1e3
            ctx = merge_scored({e.node_id: e.score for e in pool.entries}, store, cfg.token_budget)
            row = CaseResult(
                case.case_id, case.category, evidence_recall(ctx, case), retrieval_ms, 0.0,
                ctx.token_count, len(ctx.nodes), len(pool), 0, (),
            )
        report.rows.append(row)
    return report


@dataclass
class SweepRow:
    params: dict
    report: EvalReport

    def to_dict(self) -> dict:
        return {"mode": self.report.mode, **self.params, **self.report.aggregates()}


def parse_sweep(spec: str) -> dict:
    """``"k=1,5,10;beta=0,0.8"`` -> ``{"k": [1, 5, 10], "beta": [0.0, 0.8]}``."""
    grid: dict = {}
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        name, _, values = part.partition("=")
        name = name.strip().replace("-", "_")
        if name not in ("k", "l", "beta", "max_len", "token_budget") or not values:
            raise ValidationError(f"bad sweep term {part!r}")
        cast = float if name == "beta" else int
        try:
            grid[name] = [cast(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise ValidationError(f"bad sweep values in {part!r}") from None
    if not grid:
        raise ValidationError("empty sweep grid")
    return grid


def sweep(
    store: MemoryStore,
    cases: Sequence[EvalCase],
    grid: dict,
    provider: EmbeddingProvider,
    *,
    base: ChainConfig = ChainConfig(),
    mode: str = "chain",
    matched: bool = True,
) -> list:
    """One :func:`run_eval` per grid point, in row-major order of ``grid``.

    When ``k`` is swept but ``l`` is not, ``l`` is capped at ``k`` so small-k
    points stay valid.
    """
    names = list(grid)
    rows = []
    for values in itertools.product(*(grid[n] for n in names)):
        params = dict(zip(names, values))
        cfg = replace(base, **params)
        if "k" in params and "l" not in params and cfg.l > cfg.k:
            cfg = replace(cfg, l=cfg.k)
        rows.append(SweepRow(params, run_eval(store, cases, cfg, mode, provider, matched=matched)))
    return rows


def sweep_table_jsonl(rows: Sequence[SweepRow]) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in rows)


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_BRIDGE_WORDS = 4
_BRIDGE_PROJ = (0.03, 0.08)
_FOREIGN_WORD_PROJ = 0.06
_FILLER_WORDS = 5
_HOP_COS = (0.1, 0.2)
_MARGIN = 0.03


@dataclass
class SyntheticCorpus:
    conversation: str
    cases: list
    provider: DeterministicTestEmbedder


class _WordSource:
    """Fresh pseudo-words, filtered by how their vector projects on the questions."""

    def __init__(self, rng: random.Random, dimension: int, embed_seed: int):
        self.rng = rng
        self.dimension = dimension
        self.embed_seed = embed_seed
        self.used: set = set()

    def _fresh(self, n: int) -> list:
        out = []
        while len(out) < n:
            word = "".join(self.rng.choice(_CONSONANTS) + self.rng.choice(_VOWELS) for _ in range(4))
            if word not in self.used:
                self.used.add(word)
                out.append(word)
        return out

    def plain(self, n: int) -> list:
        return self._fresh(n)

    def draw(self, n: int, questions: np.ndarray, own: Optional[int], lo: float, hi: float) -> list:
        """``n`` words whose projection on question ``own`` lies in [lo, hi] and
        whose projection on every other question stays under the foreign limit."""
        picked: list = []
        while len(picked) < n:
            batch = self._fresh(64)
            vecs = token_vectors(batch, self.dimension, self.embed_seed)
            vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
            proj = vecs @ questions.T if len(questions) else np.zeros((len(batch), 0))
            for i, word in enumerate(batch):
                row = proj[i]
                if own is not None:
                    if not lo <= row[own] <= hi:
                        continue
                    others = np.delete(row, own)
                else:
                    others = row
                if others.size and np.max(np.abs(others)) > _FOREIGN_WORD_PROJ:
                    continue
                picked.append(word)
                if len(picked) == n:
                    break
        return picked


def _embed_many(provider, texts) -> np.ndarray:
    raw = provider.embed(texts)
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _plan_case(words: _WordSource, questions: np.ndarray, c: int, qa: list, qd: list,
               hops: int, distractors: int, rng: random.Random) -> tuple:
    bridges = [words.draw(_BRIDGE_WORDS, questions, c, *_BRIDGE_PROJ) for _ in range(hops)]
    hop_texts = []
    for j in range(hops):
        toks = (qa if j == 0 else bridges[j - 1]) + bridges[j]
        toks = list(toks)
        rng.shuffle(toks)
        hop_texts.append(" ".join(toks))
    pairs = [(0, 1), (0, 2), (1, 2)]
    distractor_texts = []
    for i in range(distractors):
        a, b = pairs[i % 3]
        toks = [qd[a], qd[b]] + words.draw(_FILLER_WORDS, questions, c, -0.03, 0.03)
        rng.shuffle(toks)
        distractor_texts.append(" ".join(toks))
    return hop_texts, distractor_texts


def _weakest_evidence(q: np.ndarray, hop_vecs: np.ndarray, dis_vecs: np.ndarray) -> float:
    """Query cosine that every unrelated turn has to stay under."""
    if len(hop_vecs) > 1:
        return float((hop_vecs[1:] @ q).min())
    if len(dis_vecs):
        return float((dis_vecs @ q).min())
    return float(hop_vecs[0] @ q)


def _case_contracts_hold(q: np.ndarray, hop_vecs: np.ndarray, dis_vecs: np.ndarray,
                         foreign_vecs: np.ndarray) -> bool:
    hop_cos = hop_vecs @ q
    dis_cos = dis_vecs @ q
    if len(dis_cos) and hop_cos[0] <= dis_cos.max() + _MARGIN:
        return False
    later = hop_cos[1:]
    if len(later):
        if not np.all((later >= _HOP_COS[0]) & (later < _HOP_COS[1])):
            return False
        if len(dis_cos) and later.max() + _MARGIN >= dis_cos.min():
            return False
    floor = _weakest_evidence(q, hop_vecs, dis_vecs)
    if len(foreign_vecs) and (foreign_vecs @ q).max() + _MARGIN >= floor:
        return False
    # Each later hop must be the best gate for the chain of its predecessors.
    every = np.vstack([hop_vecs, dis_vecs, foreign_vecs])
    relevance = every @ q
    acc = np.zeros_like(q)
    for j in range(1, len(hop_vecs)):
        acc = acc + hop_vecs[j - 1]
        gates = relevance * (every @ (acc / np.linalg.norm(acc)))
        gates[:j] = -np.inf
        if int(np.argmax(gates)) != j:
            return False
    return True


def generate_synthetic_corpus(
    seed: int,
    sessions: int = 20,
    turns_per_session: int = 20,
    planted_hops: int = 3,
    *,
    cases: int = 20,
    distractors: int = 14,
    dimension: int = SYNTHETIC_DIMENSION,
    embed_seed: int = 0,
    max_attempts: int = 200,
) -> SyntheticCorpus:
    """Build a conversation corpus with one planted evidence chain per case.

    For each case the question has six words: three are shared with hop 1,
    three are spread over the distractors (two each). Hop j > 1 shares four
    "bridge" words with hop j-1 and none with the question; bridge words are
    chosen so each hop keeps a small positive query cosine in [0.1, 0.2),
    below every distractor. Every turn of another case, and every filler
    turn, scores below the case's weakest hop. All contracts are checked
    under the returned test embedder before the corpus is emitted.
    """
    if planted_hops < 1 or cases < 1 or distractors < 0:
        raise ValidationError("planted_hops and cases must be >= 1, distractors >= 0")
    slots = sessions * turns_per_session
    needed = cases * (planted_hops + distractors)
    if sessions < 1 or turns_per_session < 1 or slots < planted_hops + 20 or slots < needed:
        raise ValidationError(
            f"infeasible corpus: {sessions}x{turns_per_session} turns cannot hold "
            f"{cases} cases x ({planted_hops} hops + {distractors} distractors)"
        )
    rng = random.Random(seed)
    provider = DeterministicTestEmbedder(dimension, embed_seed)
    words = _WordSource(rng, dimension, embed_seed)

    questions = np.zeros((0, dimension))
    question_texts: list = []
    planned: list = []  # per case: (hop_texts, distractor_texts)
    vectors: list = []  # per case: unit vectors of hop_texts + distractor_texts
    for c in range(cases):
        for _attempt in range(max_attempts):
            qa, qd = words.plain(3), words.plain(3)
            q_text = " ".join(qa + qd)
            q = _embed_many(provider, [q_text])[0]
            trial_q = np.vstack([questions, q])
            hop_texts, dis_texts = _plan_case(words, trial_q, c, qa, qd, planted_hops, distractors, rng)
            own = _embed_many(provider, hop_texts + dis_texts)
            prior = np.vstack(vectors) if vectors else np.zeros((0, dimension))
            if not _case_contracts_hold(q, own[:planted_hops], own[planted_hops:], prior):
                continue
            # The new case's turns must not disturb any earlier case.
            ok = True
            for c_prev, pv in enumerate(vectors):
                foreign = np.vstack([own] + [v for i, v in enumerate(vectors) if i != c_prev])
                if not _case_contracts_hold(questions[c_prev], pv[:planted_hops], pv[planted_hops:], foreign):
                    ok = False
                    break
            if ok:
                break
        else:
            raise ValidationError(f"could not satisfy corpus contracts for case {c} after {max_attempts} attempts")
        questions = trial_q
        question_texts.append(q_text)
        planned.append((hop_texts, dis_texts))
        vectors.append(own)

    floors = np.array([
        _weakest_evidence(questions[c], v[:planted_hops], v[planted_hops:]) for c, v in enumerate(vectors)
    ])
    fillers = []
    while len(fillers) < slots - needed:
        text = " ".join(words.draw(6, questions, None, 0.0, 0.0))
        v = _embed_many(provider, [text])[0]
        if np.all(questions @ v + _MARGIN < floors):
            fillers.append(text)

    # Lay turns out over the session grid: hops in chronological order.
    order = list(range(slots))
    rng.shuffle(order)
    layout: dict = {}
    cursor = 0
    evidence: list = []
    for hop_texts, dis_texts in planned:
        hop_slots = sorted(order[cursor:cursor + planted_hops])
        cursor += planted_hops
        ids = []
        for slot, text in zip(hop_slots, hop_texts):
            layout[slot] = text
            ids.append(f"sess-{slot // turns_per_session:03d}#{slot % turns_per_session}")
        evidence.append(tuple(ids))
        for text in dis_texts:
            layout[order[cursor]] = text
            cursor += 1
    for text in fillers:
        layout[order[cursor]] = text
        cursor += 1

    base = datetime(2024, 1, 1, tzinfo=timezone.utc)
    lines = []
    for slot in range(slots):
        s, t = divmod(slot, turns_per_session)
        lines.append(json.dumps({
            "session_id": f"sess-{s:03d}",
            "turn_index": t,
            "role": "user" if t % 2 == 0 else "assistant",
            "timestamp": format_timestamp(base + timedelta(days=s, minutes=t)),
            "text": layout[slot],
        }))
    category = "multi-hop" if planted_hops > 1 else "single-hop"
    eval_cases = [
        EvalCase(f"case-{c:03d}", question_texts[c], evidence[c], category) for c in range(cases)
    ]
    return SyntheticCorpus("\n".join(lines) + "\n", eval_cases, provider)


def build_store(corpus_text: str, provider: EmbeddingProvider) -> MemoryStore:
    """Ingest a conversation (newline-delimited records) into a fresh store."""
    from .store import ingest_session, parse_conversation

    store = MemoryStore(provider.dimension, provider.provider_id)
    for session_id, turns in parse_conversation(corpus_text.splitlines()).items():
        ingest_session(store, session_id, turns, provider)
    return store
