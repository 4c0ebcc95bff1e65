"""Domain types, identifiers, errors and configuration shared across memchain.

Every type here is an immutable value object. Vectors are numpy arrays
flagged read-only at construction so they can be shared between threads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional

import numpy as np

UNIT_TOLERANCE = 1e-6
NODE_ID_SEPARATOR = "#"


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class MemchainError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(MemchainError, ValueError):
    """Input violates a documented precondition."""


class ConfigError(ValidationError):
    pass


class DegenerateEmbeddingError(ValidationError):
    """A vector with zero norm cannot be normalized."""


class ConflictError(MemchainError):
    """A session is already present in the store."""


class EmptyMemoryError(MemchainError):
    pass


class StoreFormatError(ValidationError):
    """Store or input file could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmbedderMismatchError(ValidationError):
    pass


class ProviderError(MemchainError):
    """Embedding provider failed. ``status`` is the HTTP status when there was one."""

    def __init__(self, message: str, status: Optional[int] = None, retriable: bool = False):
        super().__init__(message)
        self.status = status
        self.retriable = retriable


# ---------------------------------------------------------------------------
# Enums
# ---------------------------------------------------------------------------


class Role(str, enum.Enum):
    USER = "user"
    ASSISTANT = "assistant"

    @classmethod
    def parse(cls, value: "str | Role") -> "Role":
        if isinstance(value, Role):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValidationError(f"unknown role {value!r}; expected 'user' or 'assistant'") from None


class ChainStatus(str, enum.Enum):
    GROWING = "growing"
    FINALIZED = "finalized"


class FinalizeReason(str, enum.Enum):
    THRESHOLD_DROP = "threshold_drop"
    CANDIDATES_EXHAUSTED = "candidates_exhausted"
    MAX_LENGTH = "max_length"
    DEGENERATE_EMBEDDING = "degenerate_embedding"


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def derive_node_id(session_id: str, turn_index: int) -> str:
    """Return ``"<session_id>#<turn_index>"``."""
    if not isinstance(session_id, str) or not session_id:
        raise ValidationError("session_id must be a non-empty string")
    if isinstance(turn_index, bool) or not isinstance(turn_index, (int, np.integer)) or turn_index < 0:
        raise ValidationError(f"turn_index must be a non-negative integer, got {turn_index!r}")
    return f"{session_id}{NODE_ID_SEPARATOR}{int(turn_index)}"


def to_utc_seconds(ts: datetime) -> datetime:
    """Normalize an aware datetime to UTC, truncated to whole seconds."""
    if not isinstance(ts, datetime):
        raise ValidationError(f"timestamp must be a datetime, got {type(ts).__name__}")
    if ts.tzinfo is None or ts.utcoffset() is None:
        raise ValidationError(f"timestamp {ts.isoformat()} has no time zone")
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def parse_timestamp(text: str) -> datetime:
    """Parse ISO-8601 with an explicit zone (``Z`` accepted) into UTC seconds."""
    if not isinstance(text, str):
        raise ValidationError(f"timestamp must be a string, got {type(text).__name__}")
    raw = text.strip()
    if raw.endswith(("Z", "z")):
        raw = raw[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(raw)
    except ValueError:
        raise ValidationError(f"invalid ISO-8601 timestamp {text!r}") from None
    return to_utc_seconds(ts)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def frozen_vector(values, dtype=np.float32) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def check_unit_vector(vec: np.ndarray, dimension: Optional[int] = None, what: str = "embedding") -> None:
    if vec.ndim != 1:
        raise ValidationError(f"{what} must be one-dimensional")
    if dimension is not None and vec.shape[0] != dimension:
        raise ValidationError(f"{what} has dimension {vec.shape[0]}, expected {dimension}")
    if not np.all(np.isfinite(vec)):
        raise ValidationError(f"{what} has non-finite components")
    norm = math.sqrt(float(np.dot(vec.astype(np.float64), vec.astype(np.float64))))
    if abs(norm - 1.0) > UNIT_TOLERANCE:
        raise ValidationError(f"{what} is not unit-norm (norm={norm!r})")


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MemoryNode:
    """One conversation turn: text, timestamp, role and its unit embedding."""

    session_id: str
    turn_index: int
    role: Role
    timestamp: datetime
    text: str
    embedding: np.ndarray
    node_id: str = field(default="")

    def __post_init__(self):
        if NODE_ID_SEPARATOR in self.session_id:
            raise ValidationError(f"session_id {self.session_id!r} must not contain '#'")
        expected = derive_node_id(self.session_id, self.turn_index)
        if self.node_id and self.node_id != expected:
            raise ValidationError(f"node_id {self.node_id!r} does not match {expected!r}")
        object.__setattr__(self, "node_id", expected)
        object.__setattr__(self, "turn_index", int(self.turn_index))
        object.__setattr__(self, "role", Role.parse(self.role))
        object.__setattr__(self, "timestamp", to_utc_seconds(self.timestamp))
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValidationError(f"{expected}: text is empty")
        emb = self.embedding
        if not (isinstance(emb, np.ndarray) and emb.dtype == np.float32 and not emb.flags.writeable):
            emb = frozen_vector(emb)
        check_unit_vector(emb, what=f"{expected} embedding")
        object.__setattr__(self, "embedding", emb)

    @property
    def chrono_key(self) -> tuple:
        return (self.timestamp, self.session_id, self.turn_index)

    def __eq__(self, other):
        if not isinstance(other, MemoryNode):
            return NotImplemented
        return (
            self.node_id == other.node_id
            and self.role == other.role
            and self.timestamp == other.timestamp
            and self.text == other.text
            and self.embedding.dtype == other.embedding.dtype
            and np.array_equal(self.embedding, other.embedding)
        )

    def __hash__(self):
        return hash(self.node_id)


@dataclass(frozen=True, eq=False)
class Query:
    text: str
    embedding: np.ndarray

    def __post_init__(self):
        if not isinstance(self.text, str) or not self.text.strip():
            raise ValidationError("query text is empty")
        emb = self.embedding
        if not (isinstance(emb, np.ndarray) and not emb.flags.writeable):
            emb = frozen_vector(emb, dtype=getattr(emb, "dtype", np.float32))
        check_unit_vector(emb, what="query embedding")
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class ScoredNode:
    node_id: str
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValidationError(f"{self.node_id}: score is not finite")


@dataclass(frozen=True, eq=False)
class CandidatePool:
    """Top-K retrieval result.

    ``embeddings`` holds the unit embedding of each entry, row-aligned with
    ``entries``, so chain evolution needs nothing but the pool and the query.
    """

    entries: tuple
    capacity: int
    embeddings: np.ndarray

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        if len(entries) > self.capacity:
            raise ValidationError("pool holds more entries than its capacity")
        ids = [e.node_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("pool contains duplicate node_ids")
        emb = self.embeddings
        if emb.ndim != 2 or emb.shape[0] != len(entries):
            raise ValidationError("pool embeddings are not row-aligned with entries")
        if emb.flags.writeable:
            emb = emb.copy()
            emb.setflags(write=False)
            object.__setattr__(self, "embeddings", emb)

    def __len__(self):
        return len(self.entries)

    @property
    def node_ids(self) -> list:
        return [e.node_id for e in self.entries]

    @property
    def scores(self) -> list:
        return [e.score for e in self.entries]

    @property
    def dimension(self) -> int:
        return int(self.embeddings.shape[1])


@dataclass(frozen=True, eq=False)
class MemoryChain:
    """An ordered path of pool nodes, anchor first.

    ``scores[i]`` is the score under which ``members[i]`` joined: the anchor's
    retrieval score, then one gate score per appended member. ``member_mean``
    is the running (unnormalized) mean of member embeddings in float64.
    """

    members: tuple
    scores: tuple
    chain_embedding: np.ndarray
    member_mean: np.ndarray
    status: ChainStatus = ChainStatus.GROWING
    finalize_reason: Optional[FinalizeReason] = None

    def __post_init__(self):
        if not self.members:
            raise ValidationError("a chain needs at least one member")
        if len(set(self.members)) != len(self.members):
            raise ValidationError("chain members must be distinct")
        if len(self.scores) != len(self.members):
            raise ValidationError("one score per member is required")
        if (self.status is ChainStatus.FINALIZED) != (self.finalize_reason is not None):
            raise ValidationError("finalize_reason is set exactly when the chain is finalized")
        for arr in (self.chain_embedding, self.member_mean):
            arr.setflags(write=False)

    @property
    def last_score(self) -> float:
        return self.scores[-1]

    @property
    def anchor(self) -> str:
        return self.members[0]

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class ChainConfig:
    k: int = 20
    l: int = 3  # noqa: E741
    beta: float = 0.8
    max_len: int = 8
    token_budget: int = 4096


def _is_int(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool)


def validate_config(cfg: ChainConfig) -> ChainConfig:
    """Return ``cfg`` unchanged if it is usable, else raise :class:`ConfigError`."""
    for name in ("k", "l", "token_budget"):
        value = getattr(cfg, name)
        if not _is_int(value) or value < 1:
            raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    if not _is_int(cfg.max_len) or cfg.max_len < 1:
        raise ConfigError("empty chains forbidden")
    if cfg.l > cfg.k:
        raise ConfigError("anchors exceed pool")
    beta = cfg.beta
    if isinstance(beta, bool) or not isinstance(beta, (int, float, np.floating)) or not (0.0 <= beta <= 1.0):
        raise ConfigError("beta out of range")
    return cfg


@dataclass(frozen=True)
class AssembledContext:
    nodes: tuple
    rendered: str
    token_count: int
    dropped_for_budget: int
