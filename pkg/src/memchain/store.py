"""Flat memory store: one node per conversation turn, exhaustive top-K scan.

File formats (newline-delimited JSON, UTF-8):

* conversation input, one turn per line::

    {"session_id": "s1", "turn_index": 0, "role": "user",
     "timestamp": "2024-05-01T10:00:00Z", "text": "..."}

  ``turn_index`` is optional (list position within the session is used).

* store file: a header line
  ``{"format_version": 1, "dimension": d, "provider_id": ..., "node_count": n}``
  followed by one node record per line. Embedding components are written as
  the shortest decimal that round-trips the float32 value.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
from collections import OrderedDict
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .embedding import EmbeddingProvider, cosine_rows, embed_texts
from .model import (
    NODE_ID_SEPARATOR,
    CandidatePool,
    ConflictError,
    EmbedderMismatchError,
    EmptyMemoryError,
    MemoryNode,
    Query,
    Role,
    ScoredNode,
    StoreFormatError,
    ValidationError,
    format_timestamp,
    parse_timestamp,
    to_utc_seconds,
)

logger = logging.getLogger(__name__)

STORE_FORMAT_VERSION = 1


class Turn(NamedTuple):
    role: Role
    timestamp: datetime
    text: str


@dataclass(frozen=True, eq=False)
class _Snapshot:
    node_ids: tuple
    matrix: np.ndarray  # float64 copy of the float32 embeddings
    tiebreak: np.ndarray  # rank by (timestamp, node_id)


class MemoryStore:
    """In-memory node collection for one embedding space.

    Writers (ingestion) are serialized by a lock; readers retrieve from an
    immutable snapshot that is rebuilt lazily after each write.
    """

    def __init__(self, dimension: int, provider_id: str):
        if int(dimension) < 1:
            raise ValidationError("dimension must be positive")
        self.dimension = int(dimension)
        self.provider_id = provider_id
        self._nodes: dict = {}
        self._session_counts: "OrderedDict[str, int]" = OrderedDict()
        self._lock = threading.Lock()
        self._snapshot: Optional[_Snapshot] = None

    # -- read access ---------------------------------------------------------

    def __len__(self):
        return len(self._nodes)

    def __contains__(self, node_id):
        return node_id in self._nodes

    def __getitem__(self, node_id) -> MemoryNode:
        return self._nodes[node_id]

    def get(self, node_id, default=None):
        return self._nodes.get(node_id, default)

    @property
    def session_counts(self) -> dict:
        return dict(self._session_counts)

    def nodes(self) -> list:
        """All nodes ordered by (session_id, turn_index)."""
        return sorted(self._nodes.values(), key=lambda n: (n.session_id, n.turn_index))

    def __eq__(self, other):
        if not isinstance(other, MemoryStore):
            return NotImplemented
        return (
            self.dimension == other.dimension
            and self.provider_id == other.provider_id
            and self._session_counts == other._session_counts
            and self.nodes() == other.nodes()
        )

    __hash__ = None

    def snapshot(self) -> _Snapshot:
        snap = self._snapshot
        if snap is None:
            with self._lock:
                snap = self._snapshot
                if snap is None:
                    snap = self._build_snapshot()
                    self._snapshot = snap
        return snap

    def _build_snapshot(self) -> _Snapshot:
        nodes = list(self._nodes.values())
        ids = tuple(n.node_id for n in nodes)
        if nodes:
            matrix = np.stack([n.embedding for n in nodes]).astype(np.float64)
        else:
            matrix = np.zeros((0, self.dimension))
        order = sorted(range(len(nodes)), key=lambda i: (nodes[i].timestamp, nodes[i].node_id))
        tiebreak = np.empty(len(nodes), dtype=np.int64)
        tiebreak[order] = np.arange(len(nodes))
        matrix.setflags(write=False)
        return _Snapshot(ids, matrix, tiebreak)

    # -- writes --------------------------------------------------------------

    def _add_session(self, session_id: str, nodes: Sequence[MemoryNode]) -> None:
        with self._lock:
            if session_id in self._session_counts:
                raise ConflictError(f"session {session_id!r} already ingested")
            for node in nodes:
                self._nodes[node.node_id] = node
            self._session_counts[session_id] = len(nodes)
            self._snapshot = None


def _validate_session_id(session_id) -> None:
    if not isinstance(session_id, str) or not session_id:
        raise ValidationError("session_id must be a non-empty string")
    if NODE_ID_SEPARATOR in session_id:
        raise ValidationError(f"session_id {session_id!r} must not contain '#'")


def ingest_session(store: MemoryStore, session_id: str, turns: Iterable, provider: EmbeddingProvider) -> int:
    """Embed every turn of one session and add it to ``store`` atomically.

    ``turns`` is a sequence of ``(role, timestamp, text)``; turn indices are
    assigned by position. Nothing is written unless every turn validates
    and embeds.
    """
    _validate_session_id(session_id)
    if session_id in store.session_counts:
        raise ConflictError(f"session {session_id!r} already ingested")
    if provider.dimension != store.dimension:
        raise EmbedderMismatchError(
            f"embedder mismatch: provider dimension {provider.dimension} != store dimension {store.dimension}"
        )
    if provider.provider_id != store.provider_id:
        raise EmbedderMismatchError(
            f"embedder mismatch: {provider.provider_id!r} != store's {store.provider_id!r}"
        )
    turns = [Turn(Role.parse(r), to_utc_seconds(ts), t) for r, ts, t in turns]
    if not turns:
        raise ValidationError(f"session {session_id!r} has no turns")
    for i, turn in enumerate(turns):
        if not isinstance(turn.text, str) or not turn.text.strip():
            raise ValidationError(f"{session_id}#{i}: text is empty")
        if i and turn.timestamp < turns[i - 1].timestamp:
            raise ValidationError(f"{session_id}#{i}: timestamps decrease within session")

    embeddings = embed_texts(provider, [t.text for t in turns])
    nodes = [
        MemoryNode(session_id, i, t.role, t.timestamp, t.text, emb)
        for i, (t, emb) in enumerate(zip(turns, embeddings))
    ]
    store._add_session(session_id, nodes)
    return len(nodes)


def retrieve_top_k(store: MemoryStore, query: Query, k: int) -> CandidatePool:
    """Score every node by cosine to the query and keep the best ``k``.

    Order: score descending, then earlier timestamp, then smaller node_id.
    """
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
        raise ValidationError(f"k must be a positive integer, got {k!r}")
    snap = store.snapshot()
    if not snap.node_ids:
        raise EmptyMemoryError("empty memory")
    q = query.embedding
    if q.shape != (store.dimension,):
        raise ValidationError(f"dimension mismatch: query {q.shape[0]} vs store {store.dimension}")
    scores = cosine_rows(snap.matrix, q)
    order = np.lexsort((snap.tiebreak, -scores))[: int(k)]
    entries = [ScoredNode(snap.node_ids[i], float(scores[i])) for i in order]
    embeddings = np.stack([store[snap.node_ids[i]].embedding for i in order])
    return CandidatePool(tuple(entries), int(k), embeddings)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _float32_json(vec: np.ndarray) -> str:
    return "[" + ",".join(str(x) for x in vec.astype(np.float32)) + "]"


def _node_record(node: MemoryNode) -> str:
    head = json.dumps(
        {
            "node_id": node.node_id,
            "session_id": node.session_id,
            "turn_index": node.turn_index,
            "role": node.role.value,
            "timestamp": format_timestamp(node.timestamp),
            "text": node.text,
        },
        ensure_ascii=False,
    )
    return head[:-1] + ', "embedding": ' + _float32_json(node.embedding) + "}"


def save_store(store: MemoryStore, path) -> None:
    """Write ``store`` atomically (temp file + rename)."""
    path = Path(path)
    nodes = store.nodes()
    header = {
        "format_version": STORE_FORMAT_VERSION,
        "dimension": store.dimension,
        "provider_id": store.provider_id,
        "node_count": len(nodes),
    }
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header, ensure_ascii=False) + "\n")
            for node in nodes:
                fh.write(_node_record(node) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_json_line(raw: str, lineno: int) -> dict:
    try:
        rec = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise StoreFormatError(f"malformed record: {exc.msg}", line=lineno) from None
    if not isinstance(rec, dict):
        raise StoreFormatError("record is not an object", line=lineno)
    return rec


def load_store(path, expected_provider_id: Optional[str] = None) -> MemoryStore:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            lines = fh.read().decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise StoreFormatError(f"store file is not valid UTF-8: {exc}") from None
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise StoreFormatError("missing header", line=1)

    header = _parse_json_line(lines[0], 1)
    version = header.get("format_version")
    if version != STORE_FORMAT_VERSION:
        raise StoreFormatError(f"unsupported store version {version!r}", line=1)
    try:
        dimension = int(header["dimension"])
        provider_id = str(header["provider_id"])
        count = int(header["node_count"])
    except (KeyError, TypeError, ValueError):
        raise StoreFormatError("header lacks dimension/provider_id/node_count", line=1) from None
    if expected_provider_id is not None and expected_provider_id != provider_id:
        raise EmbedderMismatchError(
            f"embedder mismatch: store was built with {provider_id!r}, not {expected_provider_id!r}"
        )

    store = MemoryStore(dimension, provider_id)
    sessions: "OrderedDict[str, list]" = OrderedDict()
    for lineno, raw in enumerate(lines[1:], start=2):
        rec = _parse_json_line(raw, lineno)
        try:
            emb = np.asarray(rec["embedding"], dtype=np.float64).astype(np.float32)
            if emb.shape != (dimension,):
                raise ValidationError(f"embedding has shape {emb.shape}, expected ({dimension},)")
            node = MemoryNode(
                session_id=rec["session_id"],
                turn_index=rec["turn_index"],
                role=rec["role"],
                timestamp=parse_timestamp(rec["timestamp"]),
                text=rec["text"],
                embedding=emb,
                node_id=rec.get("node_id", ""),
            )
        except (KeyError, TypeError) as exc:
            raise StoreFormatError(f"malformed record: missing or invalid {exc}", line=lineno) from None
        except ValidationError as exc:
            raise StoreFormatError(f"malformed record: {exc}", line=lineno) from None
        sessions.setdefault(node.session_id, []).append(node)
    if sum(len(v) for v in sessions.values()) != count:
        raise StoreFormatError(
            f"header declares {count} nodes but file holds {len(lines) - 1}", line=len(lines)
        )
    for session_id, nodes in sessions.items():
        nodes.sort(key=lambda n: n.turn_index)
        if [n.turn_index for n in nodes] != list(range(len(nodes))):
            raise StoreFormatError(f"session {session_id!r} has gaps or duplicate turn indices")
        store._add_session(session_id, nodes)
    return store


# ---------------------------------------------------------------------------
# Conversation input
# ---------------------------------------------------------------------------


def parse_conversation(lines: Iterable[str]) -> "OrderedDict[str, list]":
    """Parse newline-delimited turn records into ``{session_id: [Turn, ...]}``.

    Sessions keep first-appearance order. Errors carry the 1-based line number.
    """
    staged: "OrderedDict[str, list]" = OrderedDict()
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        rec = _parse_json_line(raw, lineno)
        try:
            session_id = rec["session_id"]
            _validate_session_id(session_id)
            turn = Turn(Role.parse(rec["role"]), parse_timestamp(rec["timestamp"]), rec["text"])
            if not isinstance(turn.text, str) or not turn.text.strip():
                raise ValidationError("text is empty")
            index = rec.get("turn_index")
            if index is not None and (isinstance(index, bool) or not isinstance(index, int) or index < 0):
                raise ValidationError(f"turn_index must be a non-negative integer, got {index!r}")
        except KeyError as exc:
            raise StoreFormatError(f"missing field {exc}", line=lineno) from None
        except ValidationError as exc:
            raise StoreFormatError(str(exc), line=lineno) from None
        staged.setdefault(session_id, []).append((index, lineno, turn))

    sessions: "OrderedDict[str, list]" = OrderedDict()
    for session_id, rows in staged.items():
        explicit = [r for r in rows if r[0] is not None]
        if explicit and len(explicit) != len(rows):
            raise StoreFormatError(
                f"session {session_id!r} mixes explicit and positional turn_index", line=rows[0][1]
            )
        if explicit:
            rows = sorted(rows, key=lambda r: r[0])
            for pos, (index, lineno, _) in enumerate(rows):
                if index != pos:
                    raise StoreFormatError(
                        f"session {session_id!r}: turn_index {index} leaves a gap or repeats", line=lineno
                    )
        sessions[session_id] = [r[2] for r in rows]
    return sessions


def read_conversation(path) -> "OrderedDict[str, list]":
    with open(path, encoding="utf-8") as fh:
        return parse_conversation(fh)
