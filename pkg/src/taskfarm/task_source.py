"""Where tasks come from and where finished results go.

The manager is a cache, not a database: it pulls batches of fresh tasks
from a source, pushes accepted results back, and owns no durability.  A
built-in benchmark source generates kernel workloads in-process; the HTTP
source speaks the same two-call contract to a remote service (GET
/tasks?max=N, POST /results).  Pushes that fail are parked in a bounded
retry buffer and retried at the next poll; entries that keep failing are
dropped with a RetryExhausted so one dead endpoint cannot wedge the
manager.
"""

from __future__ import annotations

import json
import logging
import urllib.error
import urllib.request
from collections import deque
from typing import Any

from .domain import ExperimentConfig
from .kernels import get_kernel

log = logging.getLogger(__name__)


class SourceUnavailable(Exception):
    pass


class RetryExhausted(Exception):
    pass


class BenchmarkSource:
    """In-process source generating one experiment's kernel workload."""

    def __init__(self, cfg: ExperimentConfig) -> None:
        kernel = get_kernel(cfg.kernel_id)
        self._pending = deque(
            {"task_id": task_id, "kernel_id": cfg.kernel_id, "payload": payload}
            for task_id, payload in kernel.make_tasks(cfg)
        )
        self.results: dict[str, dict[str, Any]] = {}

    def pull_tasks(self, max_count: int) -> list[dict[str, Any]]:
        if max_count < 1:
            raise ValueError("max_count must be >= 1")
        batch = []
        while self._pending and len(batch) < max_count:
            batch.append(self._pending.popleft())
        return batch

    def push_result(self, task_id: str, payload: dict[str, Any]) -> None:
        self.results[task_id] = payload

    def exhausted(self) -> bool:
        return not self._pending


class HttpTaskSource:
    """Remote task source over the documented two-endpoint contract."""

    def __init__(self, base_url: str, timeout: float = 10.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def pull_tasks(self, max_count: int) -> list[dict[str, Any]]:
        if max_count < 1:
            raise ValueError("max_count must be >= 1")
        url = f"{self.base_url}/tasks?max={max_count}"
        try:
            with urllib.request.urlopen(url, timeout=self.timeout) as resp:
                body = resp.read()
        except (urllib.error.URLError, OSError) as exc:
            raise SourceUnavailable(f"pull from {url}: {exc}") from None
        try:
            items = json.loads(body)
        except json.JSONDecodeError as exc:
            raise SourceUnavailable(f"bad JSON from source: {exc}") from None
        if not isinstance(items, list):
            raise SourceUnavailable("source did not return a list")
        for item in items:
            if not isinstance(item, dict) or not {"task_id", "kernel_id", "payload"} <= item.keys():
                raise SourceUnavailable(f"malformed task entry: {item!r}")
        return items

    def push_result(self, task_id: str, payload: dict[str, Any]) -> None:
        body = json.dumps({"task_id": task_id, "payload": payload}).encode("utf-8")
        request = urllib.request.Request(
            f"{self.base_url}/results",
            data=body,
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                if resp.status != 200:
                    raise SourceUnavailable(f"push rejected: HTTP {resp.status}")
        except (urllib.error.URLError, OSError) as exc:
            raise SourceUnavailable(f"push for {task_id}: {exc}") from None


class RetryingPusher:
    """Bounded retry buffer in front of a source's push_result.

    push() tries immediately and parks failures; flush() is called at the
    manager's poll cadence and retries everything parked.  An entry that
    fails max_attempts times is dropped and reported via RetryExhausted
    (after removal, so the caller logs it and moves on).  When the buffer
    overflows, the oldest entry is dropped the same way.
    """

    def __init__(self, source: Any, max_attempts: int = 5, capacity: int = 1024) -> None:
        if max_attempts < 1 or capacity < 1:
            raise ValueError("max_attempts and capacity must be >= 1")
        self.source = source
        self.max_attempts = max_attempts
        self.capacity = capacity
        self._parked: deque[tuple[str, dict[str, Any], int]] = deque()
        self.pushed_total = 0
        self.dropped_total = 0

    def push(self, task_id: str, payload: dict[str, Any]) -> None:
        try:
            self.source.push_result(task_id, payload)
            self.pushed_total += 1
        except SourceUnavailable as exc:
            log.warning("parking result %s after push failure: %s", task_id, exc)
            self._park(task_id, payload, 1)

    def flush(self) -> None:
        for _ in range(len(self._parked)):
            task_id, payload, attempts = self._parked.popleft()
            try:
                self.source.push_result(task_id, payload)
                self.pushed_total += 1
            except SourceUnavailable:
                self._park(task_id, payload, attempts + 1)

    def _park(self, task_id: str, payload: dict[str, Any], attempts: int) -> None:
        if attempts >= self.max_attempts:
            self.dropped_total += 1
            log.error("dropping result %s after %d attempts", task_id, attempts)
            raise RetryExhausted(task_id)
        if len(self._parked) >= self.capacity:
            old_id, _, _ = self._parked.popleft()
            self.dropped_total += 1
            log.error("retry buffer full, dropping oldest result %s", old_id)
        self._parked.append((task_id, payload, attempts))

    def pending(self) -> int:
        return len(self._parked)
