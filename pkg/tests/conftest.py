from __future__ import annotations

import json
import threading
from pathlib import Path
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from slak.kg import ENTITY_TYPES, Fact, KnowledgeGraph, default_schema

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

settings.register_profile("slak", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("slak")


def random_kg(rng: np.random.Generator, n_per_type=(2, 6), max_facts: int = 300, schema=None) -> KnowledgeGraph:
    """Schema-valid random graph: a few entities of every type and random typed facts."""
    schema = schema or default_schema()
    ents = {}
    by_type = {}
    for t in ENTITY_TYPES:
        n = int(rng.integers(n_per_type[0], n_per_type[1] + 1))
        ids = [f"{t.lower()}:{i}" for i in range(n)]
        by_type[t] = ids
        ents.update({e: t for e in ids})
    n_facts = int(rng.integers(max_facts // 3, max_facts + 1))
    facts = []
    rels = schema.relations
    for _ in range(n_facts):
        rel = rels[int(rng.integers(len(rels)))]
        h = by_type[rel.head_type][int(rng.integers(len(by_type[rel.head_type])))]
        t = by_type[rel.tail_type][int(rng.integers(len(by_type[rel.tail_type])))]
        facts.append(Fact(h, rel.name, t))
    return KnowledgeGraph(schema, ents, facts)


def brute_force_paths(kg: KnowledgeGraph, mp) -> list[tuple[str, ...]]:
    """Independent enumeration: scan every fact at each step instead of using the indices."""
    paths = [(r,) for r in sorted(e for e, t in kg.entities.items() if t == mp.start_type)]
    for rel, _ in mp.hops:
        nxt = []
        for p in paths:
            for f in kg.facts:
                if f.relation == rel and f.head == p[-1]:
                    nxt.append(p + (f.tail,))
        paths = nxt
    return paths


class HTTPStub:
    """Tiny HTTP server; ``responses`` is a list of (status, body) consumed per request."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers["Content-Length"])
                stub.requests.append((json.loads(self.rfile.read(n)), self.headers.get("Authorization")))
                status, body = stub.responses.pop(0) if len(stub.responses) > 1 else stub.responses[0]
                raw = body if isinstance(body, bytes) else json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(raw)))
                self.end_headers()
                self.wfile.write(raw)

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_port}/embed"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def schema():
    return default_schema()


@pytest.fixture(scope="session")
def tiny_kg(schema):
    """Two regions with a handful of POIs, a brand and a business area."""
    ents = {
        "r0": "Region", "r1": "Region", "r2": "Region",
        "p0": "POI", "p1": "POI", "p2": "POI", "p3": "POI",
        "b0": "Brand", "ba0": "BusinessArea", "c0": "Category1",
    }
    facts = [
        ("r0", "Has", "p0"), ("r0", "Has", "p1"), ("r1", "Has", "p2"), ("r1", "Has", "p3"),
        ("p0", "LocateAt", "r0"), ("p1", "LocateAt", "r0"), ("p2", "LocateAt", "r1"), ("p3", "LocateAt", "r1"),
        ("p0", "Competitive", "p1"), ("p1", "Competitive", "p0"), ("p2", "Competitive", "p3"),
        ("p0", "HasBrandOf", "b0"), ("p2", "HasBrandOf", "b0"), ("b0", "BrandExistIn", "p0"), ("b0", "BrandExistIn", "p2"),
        ("r0", "HasStoreOf", "b0"), ("r1", "HasStoreOf", "b0"),
        ("r0", "ServedBy", "ba0"), ("ba0", "Contain", "p1"), ("p1", "BelongTo", "ba0"),
        ("p0", "HasCategory1Of", "c0"), ("p3", "HasCategory1Of", "c0"),
        ("r0", "BorderBy", "r1"), ("r1", "BorderBy", "r0"), ("r2", "NearBy", "r0"),
    ]
    return KnowledgeGraph(schema, ents, [Fact(*f) for f in facts])


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _CRITERIA[marker.args[0]] = (marker.args[1], rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
