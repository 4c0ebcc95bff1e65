from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from memchain.embedding import to_stored
from memchain.model import MemoryNode, Query, Role
from memchain.store import MemoryStore, retrieve_top_k

T0 = datetime(2024, 1, 1, tzinfo=timezone.utc)


def unit(*xs):
    v = np.array(xs, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_unit(rng, d, n=None):
    shape = (d,) if n is None else (n, d)
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def store_from_vectors(vectors, texts=None, timestamps=None, session="s", provider_id="manual"):
    """One-session store holding the given raw vectors (normalized on the way in)."""
    vectors = [np.asarray(v, dtype=np.float64) for v in vectors]
    d = len(vectors[0])
    store = MemoryStore(d, provider_id)
    nodes = []
    for i, v in enumerate(vectors):
        nodes.append(MemoryNode(
            session_id=session,
            turn_index=i,
            role=Role.USER if i % 2 == 0 else Role.ASSISTANT,
            timestamp=timestamps[i] if timestamps else T0 + timedelta(minutes=i),
            text=texts[i] if texts else f"turn {i}",
            embedding=to_stored(v),
        ))
    store._add_session(session, nodes)
    return store


def make_query(vec, text="q"):
    return Query(text, to_stored(vec))


def pool_for(vectors, query_vec, k=None, **kw):
    store = store_from_vectors(vectors, **kw)
    q = make_query(query_vec)
    return store, q, retrieve_top_k(store, q, k or len(vectors))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------

_ACCEPTANCE = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    number, label = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _ACCEPTANCE[number] = (label, call.excinfo is None, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        label, ok, detail = _ACCEPTANCE[number]
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {label}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
