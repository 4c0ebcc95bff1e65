"""Context assembly: merge chains, deduplicate, order chronologically, fit a budget.

Each node renders as one line, ``[<timestamp>] <ROLE>: <text>``, with
backslashes, CR and LF in the text escaped so one node is always one line.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional

from .model import AssembledContext, MemoryNode, ValidationError, format_timestamp

Tokenizer = Callable[[str], int]


def count_tokens(text: str) -> int:
    """Byte heuristic: ceil(utf8_bytes / 4)."""
    return math.ceil(len(text.encode("utf-8")) / 4)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\r", "\\r").replace("\n", "\\n")


def render_node(node: MemoryNode) -> str:
    return f"[{format_timestamp(node.timestamp)}] {node.role.value.upper()}: {_escape(node.text)}"


def render(nodes: Iterable[MemoryNode]) -> str:
    return "\n".join(render_node(n) for n in nodes)


def merge_scored(
    best_scores: dict,
    store,
    budget: int,
    tokenizer: Optional[Tokenizer] = None,
) -> AssembledContext:
    """Assemble the nodes in ``best_scores`` (node_id -> retention score).

    Nodes are admitted by retention score, highest first (chronological order
    breaks ties), and admission stops at the first node that would push the
    rendered context over ``budget`` tokens. The admitted set is then
    re-ordered by (timestamp, session_id, turn_index).
    """
    if budget < 1:
        raise ValidationError("budget must be at least 1")
    tokenizer = tokenizer or count_tokens
    nodes = [store[nid] for nid in best_scores]
    ranked = sorted(nodes, key=lambda n: (-best_scores[n.node_id],) + n.chrono_key)

    kept: list = []
    for node in ranked:
        trial = sorted(kept + [node], key=lambda n: n.chrono_key)
        if tokenizer(render(trial)) > budget:
            break
        kept = trial

    text = render(kept)
    return AssembledContext(
        nodes=tuple(n.node_id for n in kept),
        rendered=text,
        token_count=tokenizer(text),
        dropped_for_budget=len(nodes) - len(kept),
    )


def merge_chains(chains, store, budget: int, tokenizer: Optional[Tokenizer] = None) -> AssembledContext:
    """Union of chain members; retention score is the best score a node earned in any chain."""
    best: dict = {}
    for chain in chains:
        for node_id, score in zip(chain.members, chain.scores):
            if node_id not in best or score > best[node_id]:
                best[node_id] = score
    return merge_scored(best, store, budget, tokenizer)
