"""Benchmark source, HTTP source against a stub service, retry buffer."""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from taskfarm.domain import ExperimentConfig
from taskfarm.task_source import (
    BenchmarkSource,
    HttpTaskSource,
    RetryExhausted,
    RetryingPusher,
    SourceUnavailable,
)


def test_benchmark_source_generates_whole_workload():
    cfg = ExperimentConfig(kernel_id="monte_carlo_pi", total_tasks=720, task_size=5, rng_seed=9)
    source = BenchmarkSource(cfg)
    seen = []
    while True:
        batch = source.pull_tasks(100)
        if not batch:
            break
        seen.extend(batch)
    assert len(seen) == 720
    assert source.exhausted()
    assert seen[0]["task_id"] == "mc-00000"
    assert seen[0]["payload"] == {"iterations": 5, "seed": 9, "hits": 0, "done_iterations": 0}
    assert len({t["task_id"] for t in seen}) == 720
    # ids never repeat even after exhaustion
    assert source.pull_tasks(10) == []


def test_benchmark_source_push_collects_results():
    source = BenchmarkSource(ExperimentConfig(total_tasks=2, task_size=1))
    source.push_result("mc-00000", {"hits": 1})
    assert source.results == {"mc-00000": {"hits": 1}}


class StubHandler(BaseHTTPRequestHandler):
    tasks = [{"task_id": "r1", "kernel_id": "add_numbers", "payload": {"a": 1, "b": 2}}]
    pushed = []
    fail_pushes = False

    def do_GET(self):
        if self.path.startswith("/tasks"):
            body = json.dumps(self.tasks).encode()
            self.send_response(200)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        else:
            self.send_error(404)

    def do_POST(self):
        if self.path == "/results" and not self.fail_pushes:
            length = int(self.headers["Content-Length"])
            type(self).pushed.append(json.loads(self.rfile.read(length)))
            self.send_response(200)
            self.send_header("Content-Length", "0")
            self.end_headers()
        else:
            self.send_error(503)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_source_server():
    StubHandler.pushed = []
    StubHandler.fail_pushes = False
    server = HTTPServer(("127.0.0.1", 0), StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


def test_http_source_pull_and_push(stub_source_server):
    source = HttpTaskSource(stub_source_server)
    tasks = source.pull_tasks(5)
    assert tasks == StubHandler.tasks
    source.push_result("r1", {"result": 3})
    assert StubHandler.pushed == [{"task_id": "r1", "payload": {"result": 3}}]


def test_http_source_unreachable_raises():
    source = HttpTaskSource("http://127.0.0.1:9", timeout=0.3)
    with pytest.raises(SourceUnavailable):
        source.pull_tasks(1)
    with pytest.raises(SourceUnavailable):
        source.push_result("x", {})


def test_http_source_rejects_garbage(stub_source_server):
    source = HttpTaskSource(stub_source_server)
    StubHandler.tasks = [{"nope": 1}]
    try:
        with pytest.raises(SourceUnavailable):
            source.pull_tasks(1)
    finally:
        StubHandler.tasks = [
            {"task_id": "r1", "kernel_id": "add_numbers", "payload": {"a": 1, "b": 2}}
        ]


class FlakySource:
    def __init__(self, fail_times):
        self.fail_times = fail_times
        self.calls = 0
        self.stored = {}

    def push_result(self, task_id, payload):
        self.calls += 1
        if self.calls <= self.fail_times:
            raise SourceUnavailable("down")
        self.stored[task_id] = payload


def test_pusher_retries_until_success():
    source = FlakySource(fail_times=2)
    pusher = RetryingPusher(source, max_attempts=5)
    pusher.push("t1", {"v": 1})  # fails, parked
    assert pusher.pending() == 1
    pusher.flush()  # fails again
    assert pusher.pending() == 1
    pusher.flush()  # succeeds
    assert pusher.pending() == 0
    assert source.stored == {"t1": {"v": 1}}
    assert pusher.pushed_total == 1


def test_pusher_gives_up_after_bounded_attempts():
    source = FlakySource(fail_times=10**6)
    pusher = RetryingPusher(source, max_attempts=3)
    pusher.push("t1", {"v": 1})
    pusher.flush()
    with pytest.raises(RetryExhausted):
        pusher.flush()
    # the entry is gone; the pusher carries on
    assert pusher.pending() == 0
    assert pusher.dropped_total == 1
    pusher.flush()


def test_pusher_capacity_drops_oldest():
    source = FlakySource(fail_times=10**6)
    pusher = RetryingPusher(source, max_attempts=10, capacity=2)
    pusher.push("a", {})
    pusher.push("b", {})
    pusher.push("c", {})
    assert pusher.pending() == 2
    assert pusher.dropped_total == 1
