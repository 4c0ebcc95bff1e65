import json
import math
import subprocess
import sys
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memchain.embedding import (
    DeterministicTestEmbedder,
    HttpEmbeddingProvider,
    cosine,
    cosine_rows,
    embed_text,
    embed_texts,
    fnv1a64,
    hashed_embedding,
    normalize,
    to_stored,
)
from memchain.model import DegenerateEmbeddingError, ProviderError, ValidationError

# Frozen from a standalone transcription of the hashed-embedding algorithm
# (FNV-1a, seed XOR, splitmix64, token-order sum, normalize), run outside the package.
AAA_BBB_COSINE_SEED0 = -0.0271455871914962
AAA_BBB_COSINE_SEED42 = 0.11711918195106708
HELLO_HEAD_SEED0 = (0.17772190861634893, 0.04664873881592487, -0.1290726162442651)


def test_normalize_examples():
    assert np.allclose(normalize([3, 4]), [0.6, 0.8], atol=1e-15)
    assert np.array_equal(normalize([1, 0, 0]), [1.0, 0.0, 0.0])
    with pytest.raises(DegenerateEmbeddingError):
        normalize([0, 0])


def test_cosine_examples():
    v = normalize([0.3, -0.2, 0.9])
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([1, 0], [-1, 0]) == -1.0
    with pytest.raises(ValidationError):
        cosine([1, 0], [1, 0, 0])


def test_cosine_clamps_rounding_excursions():
    v = np.full(3, 1 / math.sqrt(3) + 1e-9)
    assert cosine(v, v) == 1.0


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=16), st.data())
def test_cosine_symmetric_and_bounded(xs, data):
    ys = data.draw(st.lists(st.floats(-1e3, 1e3), min_size=len(xs), max_size=len(xs)))
    try:
        a, b = normalize(xs), normalize(ys)
    except DegenerateEmbeddingError:
        return
    assert cosine(a, b) == cosine(b, a)
    assert -1.0 <= cosine(a, b) <= 1.0


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=16), st.sampled_from([1e-3, 0.5, 7.0, 1e3]))
def test_normalization_scale_invariant(xs, c):
    try:
        a = normalize(xs)
    except DegenerateEmbeddingError:
        return
    if np.linalg.norm(xs) < 1e-150:
        return
    assert np.allclose(normalize(np.array(xs) * c), a, atol=1e-6)


def test_fnv1a64_reference_values():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C


def test_hashed_embedding_frozen_values():
    assert cosine(hashed_embedding("aaa"), hashed_embedding("bbb")) == pytest.approx(AAA_BBB_COSINE_SEED0, abs=1e-12)
    assert cosine(hashed_embedding("aaa", 64, 42), hashed_embedding("bbb", 64, 42)) == pytest.approx(
        AAA_BBB_COSINE_SEED42, abs=1e-12)
    assert np.allclose(hashed_embedding("hello")[:3], HELLO_HEAD_SEED0, atol=1e-15)


def test_repeated_token_is_parallel():
    e = DeterministicTestEmbedder()
    assert cosine(embed_text(e, "hello hello"), embed_text(e, "hello")) == pytest.approx(1.0, abs=1e-6)


def test_tokenization_lowercases_and_splits_unicode_whitespace():
    assert np.allclose(hashed_embedding("Hello World"), hashed_embedding("hello world"))


def test_embedder_deterministic_within_and_across_processes():
    e = DeterministicTestEmbedder(64, 7)
    a = embed_text(e, "the quick brown fox")
    assert np.array_equal(a, embed_text(e, "the quick brown fox"))
    code = (
        "import sys;from memchain.embedding import DeterministicTestEmbedder,embed_text;"
        "sys.stdout.write(embed_text(DeterministicTestEmbedder(64,7),'the quick brown fox').tobytes().hex())"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    assert bytes.fromhex(out) == a.tobytes()


def test_batch_matches_single_text_path():
    e = DeterministicTestEmbedder(32, 3)
    texts = ["alpha beta", "beta gamma delta", "alpha"]
    batch = embed_texts(e, texts)
    for t, v in zip(texts, batch):
        assert np.allclose(v, hashed_embedding(t, 32, 3).astype(np.float32), atol=0)


def test_embed_text_output_is_stored_unit():
    v = embed_text(DeterministicTestEmbedder(), "some text here")
    assert v.dtype == np.float32 and v.shape == (64,)
    assert np.allclose(normalize(v), v, atol=1e-6)


@pytest.mark.parametrize("text", ["", "   \n\t"])
def test_empty_text_rejected(text):
    with pytest.raises(ValidationError):
        embed_text(DeterministicTestEmbedder(), text)


# -- HTTP provider ----------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    plan: list = []
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.headers.get("Authorization"), body))
        status = type(self).plan.pop(0) if type(self).plan else 200
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        if status == 200:
            vecs = [[float(len(t)), 1.0, 0.0] for t in body["texts"]]
            self.wfile.write(json.dumps({"embeddings": vecs}).encode())

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.plan, _Handler.seen = [], []
    httpd = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{httpd.server_port}/embed"
    httpd.shutdown()


def test_http_provider_batches_in_order(server):
    p = HttpEmbeddingProvider(server, 3, "secret", backoff=0.001, batch_size=2)
    vecs = embed_texts(p, ["a", "bbb", "cc"])
    assert len(_Handler.seen) == 2
    assert _Handler.seen[0] == ("Bearer secret", {"texts": ["a", "bbb"]})
    assert np.allclose(vecs[1], normalize([3, 1, 0]), atol=1e-7)
    assert p.provider_id == f"http:{server}"


def test_http_provider_retries_server_errors(server):
    _Handler.plan = [503, 500]
    p = HttpEmbeddingProvider(server, 3, backoff=0.001)
    assert embed_text(p, "x").shape == (3,)
    assert len(_Handler.seen) == 3


def test_http_provider_gives_up_with_status(server):
    _Handler.plan = [503] * 4
    p = HttpEmbeddingProvider(server, 3, backoff=0.001)
    with pytest.raises(ProviderError) as info:
        embed_text(p, "x")
    assert info.value.status == 503 and info.value.retriable
    assert len(_Handler.seen) == 4  # first try + 3 retries


def test_http_provider_client_error_not_retried(server):
    _Handler.plan = [401]
    p = HttpEmbeddingProvider(server, 3, backoff=0.001)
    with pytest.raises(ProviderError) as info:
        embed_text(p, "x")
    assert info.value.status == 401 and not info.value.retriable
    assert len(_Handler.seen) == 1


def test_http_provider_dimension_checked(server):
    p = HttpEmbeddingProvider(server, 5, backoff=0.001)
    with pytest.raises(ProviderError):
        embed_text(p, "x")


def test_http_provider_requires_url(monkeypatch):
    monkeypatch.delenv("MEMCHAIN_EMBED_URL", raising=False)
    with pytest.raises(ProviderError):
        HttpEmbeddingProvider.from_env(64)


def test_http_provider_transport_failure():
    p = HttpEmbeddingProvider("http://127.0.0.1:9/embed", 3, retries=1, backoff=0.001, timeout=1.0)
    with pytest.raises(ProviderError) as info:
        embed_text(p, "x")
    assert info.value.retriable and info.value.status is None


def test_cosine_of_stored_vector_with_itself_is_one(rng):
    v = to_stored(rng.standard_normal(64))
    assert abs(cosine(v, v) - 1.0) <= 1e-15


def test_cosine_rows_matches_scalar_bitwise(rng):
    m = np.stack([to_stored(x) for x in rng.standard_normal((20, 16))])
    q = to_stored(rng.standard_normal(16))
    assert list(cosine_rows(m, q)) == [cosine(row, q) for row in m]


def test_cosine_of_zero_vector():
    with pytest.raises(DegenerateEmbeddingError):
        cosine([0.0, 0.0], [1.0, 0.0])
