"""Memory-chain evolution over a retrieved candidate pool.

The top ``l`` pool entries seed one chain each. A chain grows greedily: at
every step each pool node not yet in the chain is scored by

    gate = cos(node, query) * cos(node, chain_embedding)

and the best one is appended unless ``gate < beta * previous_score``
(relative-threshold truncation). The previous score of a fresh chain is the
anchor's retrieval score, which is exactly the gate of the anchor against
its own singleton chain. The chain embedding is the normalized mean of the
member embeddings, kept incrementally.

Chains are independent: a node may sit in several chains, never twice in one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .embedding import cosine, cosine_rows, normalize
from .model import (
    CandidatePool,
    ChainConfig,
    ChainStatus,
    DegenerateEmbeddingError,
    FinalizeReason,
    MemoryChain,
    Query,
    ValidationError,
    validate_config,
)

APPEND = "append"
TERMINATE = "terminate"

# Maps a chain's member ids (in chain order) to a raw embedding of the chain.
ChainEmbedder = Callable[[Sequence[str]], np.ndarray]


@dataclass(frozen=True)
class StepRecord:
    step: int
    node_id: Optional[str]
    score: Optional[float]
    threshold: float
    decision: str

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "node_id": self.node_id,
            "score": self.score,
            "threshold": self.threshold,
            "decision": self.decision,
        }


@dataclass
class ChainTrace:
    anchor: str
    anchor_score: float
    steps: list = field(default_factory=list)
    finalize_reason: Optional[FinalizeReason] = None

    def score_history(self) -> list:
        return [self.anchor_score] + [s.score for s in self.steps if s.decision == APPEND]


@dataclass
class EvolutionTrace:
    chains: list = field(default_factory=list)

    def records(self) -> list:
        """Flatten to one dict per step, ready for newline-delimited output."""
        out = []
        for idx, ct in enumerate(self.chains):
            out.append({"chain": idx, "step": 0, "node_id": ct.anchor, "score": ct.anchor_score,
                        "threshold": None, "decision": "anchor"})
            for s in ct.steps:
                out.append({"chain": idx, **s.to_dict()})
            out.append({"chain": idx, "finalize_reason": ct.finalize_reason.value if ct.finalize_reason else None})
        return out

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r) for r in self.records())


def gate_score(candidate_embedding, query_embedding, chain_embedding) -> float:
    """Query relevance times consistency with the chain, each cosine clamped."""
    return cosine(candidate_embedding, query_embedding) * cosine(candidate_embedding, chain_embedding)


def _extended_mean(chain: MemoryChain, new_member_embedding) -> np.ndarray:
    n = len(chain.members)
    e = np.asarray(new_member_embedding, dtype=np.float64)
    if e.shape != chain.member_mean.shape:
        raise ValidationError(f"dimension mismatch: {e.shape} vs {chain.member_mean.shape}")
    return (n * chain.member_mean + e) / (n + 1)


def update_chain_embedding(chain: MemoryChain, new_member_embedding) -> np.ndarray:
    """Chain embedding after appending one member: normalize((n*mean + e) / (n+1)).

    Raises :class:`DegenerateEmbeddingError` when the new mean is the zero vector.
    """
    return normalize(_extended_mean(chain, new_member_embedding))


def _finalize(chain: MemoryChain, reason: FinalizeReason) -> MemoryChain:
    return MemoryChain(
        members=chain.members,
        scores=chain.scores,
        chain_embedding=chain.chain_embedding,
        member_mean=chain.member_mean,
        status=ChainStatus.FINALIZED,
        finalize_reason=reason,
    )


def init_chains(pool: CandidatePool, cfg: ChainConfig) -> list:
    """One growing chain per top-``l`` pool entry."""
    if not len(pool):
        raise ValidationError("cannot initialize chains from an empty pool")
    chains = []
    for z in range(min(cfg.l, len(pool))):
        emb = pool.embeddings[z]
        chains.append(
            MemoryChain(
                members=(pool.entries[z].node_id,),
                scores=(pool.entries[z].score,),
                chain_embedding=emb,
                member_mean=emb.astype(np.float64),
            )
        )
    return chains


def _query_relevance(pool: CandidatePool, query: Query) -> np.ndarray:
    if query.embedding.shape != (pool.dimension,):
        raise ValidationError(f"dimension mismatch: query {query.embedding.shape} vs pool {pool.dimension}")
    return cosine_rows(pool.embeddings, query.embedding)


def expand_step(
    chain: MemoryChain,
    pool: CandidatePool,
    query: Query,
    cfg: ChainConfig,
    *,
    step: int = 1,
    relevance: Optional[np.ndarray] = None,
    chain_embedder: Optional[ChainEmbedder] = None,
) -> tuple:
    """Run one expansion step; returns ``(chain, StepRecord | None)``.

    ``relevance`` may carry precomputed query cosines for the pool rows.
    With ``chain_embedder`` the chain embedding is re-derived from member
    content instead of the running mean.
    """
    if chain.status is not ChainStatus.GROWING:
        raise ValidationError("chain is already finalized")
    if len(chain) >= cfg.max_len:
        return _finalize(chain, FinalizeReason.MAX_LENGTH), None
    if relevance is None:
        relevance = _query_relevance(pool, query)
    threshold = cfg.beta * chain.last_score

    members = set(chain.members)
    free = [i for i, e in enumerate(pool.entries) if e.node_id not in members]
    if not free:
        return _finalize(chain, FinalizeReason.CANDIDATES_EXHAUSTED), None

    consistency = cosine_rows(pool.embeddings[free], chain.chain_embedding)
    gates = relevance[free] * consistency
    best = int(np.argmax(gates))  # first maximum, i.e. pool order on ties
    row, best_score = free[best], float(gates[best])
    node_id = pool.entries[row].node_id

    if best_score < threshold:
        record = StepRecord(step, node_id, best_score, threshold, TERMINATE)
        return _finalize(chain, FinalizeReason.THRESHOLD_DROP), record

    new_mean = _extended_mean(chain, pool.embeddings[row])
    new_members = chain.members + (node_id,)
    try:
        if chain_embedder is None:
            new_embedding = normalize(new_mean)
        else:
            new_embedding = normalize(chain_embedder(new_members))
    except DegenerateEmbeddingError:
        record = StepRecord(step, node_id, best_score, threshold, TERMINATE)
        return _finalize(chain, FinalizeReason.DEGENERATE_EMBEDDING), record

    grown = MemoryChain(
        members=new_members,
        scores=chain.scores + (best_score,),
        chain_embedding=new_embedding,
        member_mean=new_mean,
    )
    record = StepRecord(step, node_id, best_score, threshold, APPEND)
    if len(grown) >= cfg.max_len:
        grown = _finalize(grown, FinalizeReason.MAX_LENGTH)
    return grown, record


def evolve(
    pool: CandidatePool,
    query: Query,
    cfg: ChainConfig,
    *,
    chain_embedder: Optional[ChainEmbedder] = None,
) -> tuple:
    """Grow every anchored chain to completion; returns ``(chains, EvolutionTrace)``."""
    validate_config(cfg)
    relevance = _query_relevance(pool, query)
    finished, trace = [], EvolutionTrace()
    for chain in init_chains(pool, cfg):
        ct = ChainTrace(anchor=chain.anchor, anchor_score=chain.last_score)
        step = 1
        while chain.status is ChainStatus.GROWING:
            chain, record = expand_step(
                chain, pool, query, cfg, step=step, relevance=relevance, chain_embedder=chain_embedder
            )
            if record is not None:
                ct.steps.append(record)
            step += 1
        ct.finalize_reason = chain.finalize_reason
        finished.append(chain)
        trace.chains.append(ct)
    return finished, trace
