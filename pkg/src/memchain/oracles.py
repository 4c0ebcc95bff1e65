"""Brute-force reference implementations for the property and acceptance suites.

Plain Python over lists of floats, sharing no code with the numpy paths they
check: full sort for retrieval, from-scratch mean recomputation for chains.
"""

from __future__ import annotations

import math


def _dot(a, b) -> float:
    return sum(x * y for x, y in zip(a, b))


def _clamp(x: float) -> float:
    return min(1.0, max(-1.0, x))


def _cos(a, b) -> float:
    return _clamp(_dot(a, b) / (math.sqrt(_dot(a, a)) * math.sqrt(_dot(b, b))))


def _unit(v):
    n = math.sqrt(_dot(v, v))
    if n == 0.0:
        return None
    return [x / n for x in v]


def brute_force_top_k(records, query, k: int) -> list:
    """``records``: iterable of ``(node_id, timestamp, vector)``. Returns node_ids."""
    q = [float(x) for x in query]
    scored = [(_cos([float(x) for x in vec], q), ts, nid) for nid, ts, vec in records]
    scored.sort(key=lambda r: (-r[0], r[1], r[2]))
    return [nid for _, _, nid in scored[:k]]


def naive_evolve(pool_ids, pool_vectors, pool_scores, query, l: int, beta: float, max_len: int) -> list:
    """Greedy chain growth recomputing everything from scratch at each step.

    Returns one dict per chain: ``members``, ``scores``, ``embeddings`` (the
    chain embedding after each member joined) and ``reason``.
    """
    vecs = [[float(x) for x in v] for v in pool_vectors]
    q = [float(x) for x in query]
    out = []
    for z in range(min(l, len(pool_ids))):
        members = [z]
        scores = [pool_scores[z]]
        embeddings = [vecs[z]]
        reason = None
        while reason is None:
            if len(members) >= max_len:
                reason = "max_length"
                break
            chain_vec = embeddings[-1]
            best, best_score = None, None
            for i in range(len(pool_ids)):
                if i in members:
                    continue
                g = _cos(vecs[i], q) * _cos(vecs[i], chain_vec)
                if best is None or g > best_score:
                    best, best_score = i, g
            if best is None:
                reason = "candidates_exhausted"
                break
            if best_score < beta * scores[-1]:
                reason = "threshold_drop"
                break
            grown = members + [best]
            mean = [sum(vecs[m][j] for m in grown) / len(grown) for j in range(len(q))]
            unit = _unit(mean)
            if unit is None:
                reason = "degenerate_embedding"
                break
            members, scores = grown, scores + [best_score]
            embeddings.append(unit)
        out.append({
            "members": [pool_ids[m] for m in members],
            "scores": scores,
            "embeddings": embeddings,
            "reason": reason,
        })
    return out
