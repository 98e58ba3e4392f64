import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from cardiopulm.locator import body_mask, lung_mask
from cardiopulm.phantom import FINDINGS, PhantomSpec, generate_phantom
from cardiopulm.volume import standardize


def make_spec(seed=1, dims=(96, 96, 96), **kw):
    levels = {f: kw.pop(f, 0.0) for f in FINDINGS}
    return PhantomSpec(seed=seed, dims=dims, pathology_levels=levels, **kw)


@pytest.fixture(scope="session")
def clean_phantom():
    return standardize(generate_phantom(make_spec(seed=7), "S1", "S1_T0"))


@pytest.fixture(scope="session")
def clean_masks(clean_phantom):
    body = body_mask(clean_phantom)
    return body, lung_mask(clean_phantom, body)


@pytest.fixture
def stub_server():
    """Serve one canned JSON reply (or status) per test; yields a setter and the URL."""
    state = {"status": 200, "body": {}, "requests": []}

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            n = int(self.headers.get("Content-Length", 0))
            state["requests"].append(json.loads(self.rfile.read(n)))
            payload = state["body"] if isinstance(state["body"], bytes) else json.dumps(state["body"]).encode()
            self.send_response(state["status"])
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{server.server_address[1]}/"

    def reply(body, status=200):
        state["body"], state["status"] = body, status

    yield reply, url, state
    server.shutdown()
    server.server_close()


def random_binary(rng, n):
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    return y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
