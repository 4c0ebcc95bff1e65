"""Embedding providers and the vector math used by retrieval and chaining.

Stored embeddings are unit-norm float32; every dot product is accumulated
in float64. Providers return raw vectors and :func:`embed_texts` normalizes
them, so a provider is free to return unnormalized output.
"""

from __future__ import annotations

import logging
import os
import time
from typing import Protocol, Sequence, runtime_checkable

import httpx
import numpy as np

from .model import DegenerateEmbeddingError, ProviderError, ValidationError

logger = logging.getLogger(__name__)

ENV_EMBED_URL = "MEMCHAIN_EMBED_URL"
ENV_EMBED_KEY = "MEMCHAIN_EMBED_KEY"
DEFAULT_BATCH_SIZE = 64

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MUL2 = np.uint64(0x94D049BB133111EB)


# ---------------------------------------------------------------------------
# Vector math
# ---------------------------------------------------------------------------


def normalize(v) -> np.ndarray:
    """Return ``v / ||v||`` as float64. Raises on a zero (or non-finite) vector."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError("can only normalize a non-empty 1-D vector")
    norm = float(np.sqrt((arr * arr).sum()))
    if not np.isfinite(norm):
        raise DegenerateEmbeddingError("degenerate embedding: non-finite components")
    if norm == 0.0:
        raise DegenerateEmbeddingError("degenerate embedding: zero vector")
    return arr / norm


def _norm(x: np.ndarray, axis=None):
    return np.sqrt((x * x).sum(axis=axis))


def cosine_rows(matrix: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cosine of every row of ``matrix`` with ``v``, clamped into [-1, 1].

    Uses the same elementwise-product-then-sum reduction as :func:`cosine`,
    so a batch score is bit-identical to the scalar one.
    """
    m = np.asarray(matrix, dtype=np.float64)
    v64 = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or m.shape[1:] != v64.shape:
        raise ValidationError(f"dimension mismatch: {m.shape} vs {v64.shape}")
    return np.clip((m * v64).sum(axis=1) / (_norm(m, axis=1) * _norm(v64)), -1.0, 1.0)


def cosine(a, b) -> float:
    """Cosine similarity, clamped into [-1, 1].

    Inputs are unit vectors up to storage rounding; dividing by both norms
    anyway makes cosine(v, v) == 1 to float64 precision for float32 vectors.
    """
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if a64.shape != b64.shape or a64.ndim != 1:
        raise ValidationError(f"dimension mismatch: {a64.shape} vs {b64.shape}")
    denom = _norm(a64) * _norm(b64)
    if not denom > 0.0:
        raise DegenerateEmbeddingError("cosine of a zero vector")
    return min(1.0, max(-1.0, float((a64 * b64).sum() / denom)))


def to_stored(v) -> np.ndarray:
    """Normalize and convert to the read-only float32 storage form."""
    out = normalize(v).astype(np.float32)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Provider contract
# ---------------------------------------------------------------------------


@runtime_checkable
class EmbeddingProvider(Protocol):
    provider_id: str
    dimension: int

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return an ``(len(texts), dimension)`` array of raw vectors."""
        ...


def _check_text(text) -> str:
    if not isinstance(text, str) or not text.strip():
        raise ValidationError("cannot embed empty text")
    return text


def embed_texts(provider: EmbeddingProvider, texts: Sequence[str], batch_size: int | None = None) -> list:
    """Embed ``texts`` in request order; returns float32 unit vectors."""
    texts = [_check_text(t) for t in texts]
    batch_size = batch_size or getattr(provider, "batch_size", DEFAULT_BATCH_SIZE)
    out = []
    for start in range(0, len(texts), batch_size):
        chunk = texts[start:start + batch_size]
        raw = np.asarray(provider.embed(chunk), dtype=np.float64)
        if raw.shape != (len(chunk), provider.dimension):
            raise ProviderError(
                f"provider returned shape {raw.shape}, expected {(len(chunk), provider.dimension)}"
            )
        out.extend(to_stored(row) for row in raw)
    return out


def embed_text(provider: EmbeddingProvider, text: str) -> np.ndarray:
    return embed_texts(provider, [text])[0]


# ---------------------------------------------------------------------------
# Deterministic hashed embedder
# ---------------------------------------------------------------------------


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list:
    return text.lower().split()


def _splitmix_block(seeds: np.ndarray, d: int) -> np.ndarray:
    """Draw ``d`` splitmix64 outputs per seed, mapped to [-1, 1).

    Output i of a splitmix64 stream seeded with s mixes ``s + (i+1)*gamma``,
    which is what lets the whole block be computed without a Python loop.
    Each 64-bit draw keeps its top 53 bits as a fraction u in [0, 1) and
    becomes ``2u - 1``.
    """
    steps = np.arange(1, d + 1, dtype=np.uint64) * _SM_GAMMA
    z = seeds.astype(np.uint64)[:, None] + steps[None, :]
    z = (z ^ (z >> np.uint64(30))) * _SM_MUL1
    z = (z ^ (z >> np.uint64(27))) * _SM_MUL2
    z = z ^ (z >> np.uint64(31))
    unit = (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    return 2.0 * unit - 1.0


def token_vectors(tokens: Sequence[str], d: int, seed: int) -> np.ndarray:
    """Raw (unnormalized) vector of each token, one row per token."""
    seeds = np.array(
        [fnv1a64(tok.encode("utf-8")) ^ (seed & _MASK64) for tok in tokens], dtype=np.uint64
    )
    if not len(tokens):
        return np.zeros((0, d))
    return _splitmix_block(seeds, d)


def hashed_embedding(text: str, d: int = 64, seed: int = 0) -> np.ndarray:
    """Unit float64 embedding of ``text`` under the hashed bag-of-tokens scheme."""
    tokens = tokenize(_check_text(text))
    vecs = token_vectors(tokens, d, seed)
    total = np.zeros(d)
    for row in vecs:
        total += row
    return normalize(total)


class DeterministicTestEmbedder:
    """Offline embedder: each whitespace token hashes to a pseudo-random vector.

    The text embedding is the normalized sum of its token vectors, so texts
    sharing tokens have proportionally high cosine while token-disjoint
    texts sit near zero (spread about 1/sqrt(d)). Output depends only on
    ``(text, dimension, seed)``.
    """

    batch_size = DEFAULT_BATCH_SIZE

    def __init__(self, dimension: int = 64, seed: int = 0):
        if int(dimension) < 1:
            raise ValidationError("dimension must be positive")
        self.dimension = int(dimension)
        self.seed = int(seed) & _MASK64
        self.provider_id = f"test-hash/d={self.dimension}/seed={self.seed}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        tokenized = [tokenize(_check_text(t)) for t in texts]
        vocab = sorted({tok for toks in tokenized for tok in toks})
        index = {tok: i for i, tok in enumerate(vocab)}
        table = token_vectors(vocab, self.dimension, self.seed)
        out = np.zeros((len(texts), self.dimension))
        for row, toks in enumerate(tokenized):
            if not toks:
                raise ValidationError("cannot embed all-whitespace text")
            acc = out[row]
            for tok in toks:
                acc += table[index[tok]]
        return out

    def __repr__(self):
        return f"DeterministicTestEmbedder(dimension={self.dimension}, seed={self.seed})"


# ---------------------------------------------------------------------------
# HTTP provider
# ---------------------------------------------------------------------------


class HttpEmbeddingProvider:
    """Batch embedding over HTTP.

    Request body: ``{"texts": [...]}``. Response body: ``{"embeddings":
    [[...], ...]}`` in request order. Transport errors, 429 and 5xx are
    retried with exponential backoff; other statuses fail immediately.
    """

    def __init__(
        self,
        url: str,
        dimension: int,
        api_key: str | None = None,
        *,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.25,
        batch_size: int = DEFAULT_BATCH_SIZE,
        transport: httpx.BaseTransport | None = None,
    ):
        if not url:
            raise ProviderError(f"{ENV_EMBED_URL} is not set")
        self.url = url
        self.dimension = int(dimension)
        self.provider_id = f"http:{url}"
        self.retries = retries
        self.backoff = backoff
        self.batch_size = batch_size
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @classmethod
    def from_env(cls, dimension: int, **kwargs) -> "HttpEmbeddingProvider":
        url = os.environ.get(ENV_EMBED_URL, "")
        if not url:
            raise ProviderError(f"{ENV_EMBED_URL} is not set")
        return cls(url, dimension, os.environ.get(ENV_EMBED_KEY), **kwargs)

    def _post(self, texts: list) -> httpx.Response:
        delay = self.backoff
        for attempt in range(self.retries + 1):
            last = attempt == self.retries
            try:
                resp = self._client.post(self.url, json={"texts": texts})
            except httpx.TransportError as exc:
                if last:
                    raise ProviderError(f"embedding request failed: {exc}", retriable=True) from exc
                logger.warning("embedding request failed (%s); retrying in %.2fs", exc, delay)
            else:
                if resp.status_code < 400:
                    return resp
                retriable = resp.status_code == 429 or resp.status_code >= 500
                if last or not retriable:
                    raise ProviderError(
                        f"embedding endpoint returned HTTP {resp.status_code}",
                        status=resp.status_code,
                        retriable=retriable,
                    )
                logger.warning("embedding endpoint returned %s; retrying in %.2fs", resp.status_code, delay)
            time.sleep(delay)
            delay *= 2
        raise AssertionError("unreachable")

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        resp = self._post(texts)
        try:
            vectors = resp.json()["embeddings"]
            arr = np.asarray(vectors, dtype=np.float64)
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderError(f"malformed embedding response: {exc}", status=resp.status_code) from exc
        if arr.shape != (len(texts), self.dimension) or not np.all(np.isfinite(arr)):
            raise ProviderError(
                f"embedding response has shape {arr.shape}, expected {(len(texts), self.dimension)}",
                status=resp.status_code,
            )
        return arr

    def close(self):
        self._client.close()


def provider_from_id(provider_id: str) -> EmbeddingProvider:
    """Rebuild a provider from the id recorded in a store file."""
    if provider_id.startswith("test-hash/"):
        try:
            parts = dict(p.split("=", 1) for p in provider_id.split("/")[1:])
            return DeterministicTestEmbedder(int(parts["d"]), int(parts["seed"]))
        except (KeyError, ValueError):
            raise ValidationError(f"unrecognized provider id {provider_id!r}") from None
    if provider_id.startswith("http:"):
        raise ValidationError("http stores need an explicit --embedder http and --dim")
    raise ValidationError(f"unrecognized provider id {provider_id!r}")
