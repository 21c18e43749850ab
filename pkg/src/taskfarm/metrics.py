"""Event log and the analysis that turns it into numbers.

Everything observable funnels through one append-only stream of
MetricEvents (newline-delimited JSON on disk).  Analysis is a pure replay
of that stream: the same log always produces the same summary, which is
what makes virtual-time experiments byte-reproducible.  Rendering plots is
somebody else's job (the report command); this module stops at CSV.

Schema note: the CSV column set is versioned via SCHEMA_VERSION and only
ever grows.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional, TextIO


SCHEMA_VERSION = 1


class EventKind(str, Enum):
    SESSION_OPEN = "session_open"
    SESSION_CLOSE = "session_close"
    BUNDLE_SERVED = "bundle_served"
    TASK_DISPATCHED = "task_dispatched"
    PARTIAL_RECEIVED = "partial_received"
    FINAL_RECEIVED = "final_received"
    WAIT_START = "wait_start"
    WAIT_END = "wait_end"
    BYTES = "bytes"


@dataclass(slots=True)
class MetricEvent:
    t: float
    kind: EventKind
    session_id: Optional[str] = None
    task_id: Optional[str] = None
    status: Optional[str] = None
    transport: Optional[str] = None
    direction: Optional[str] = None  # "in" to the server, "out" from it
    count: Optional[int] = None

    def to_json(self) -> str:
        doc = {"t": self.t, "kind": self.kind.value}
        for key in ("session_id", "task_id", "status", "transport", "direction", "count"):
            value = getattr(self, key)
            if value is not None:
                doc[key] = value
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "MetricEvent":
        doc = json.loads(line)
        return cls(
            t=float(doc["t"]),
            kind=EventKind(doc["kind"]),
            session_id=doc.get("session_id"),
            task_id=doc.get("task_id"),
            status=doc.get("status"),
            transport=doc.get("transport"),
            direction=doc.get("direction"),
            count=doc.get("count"),
        )


class EventSink:
    """Thread-safe event collector, optionally mirrored to a log file."""

    def __init__(self, path: Optional[str] = None) -> None:
        self._lock = threading.Lock()
        self._events: list[MetricEvent] = []
        self._fh: Optional[TextIO] = open(path, "a", encoding="utf-8") if path else None

    def emit(self, event: MetricEvent) -> None:
        with self._lock:
            self._events.append(event)
            if self._fh is not None:
                self._fh.write(event.to_json() + "\n")

    def events(self) -> list[MetricEvent]:
        with self._lock:
            return list(self._events)

    def flush(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()
                self._fh.close()
                self._fh = None


def write_events(events: Iterable[MetricEvent], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for event in events:
            fh.write(event.to_json() + "\n")


def read_events(path: str) -> list[MetricEvent]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(MetricEvent.from_json(line))
    return out


# ------------------------------------------------------------------- analysis


@dataclass(slots=True)
class SessionBreakdown:
    value_sessions: int
    non_value_sessions: int
    histogram: dict[int, int]  # tasks completed -> session count

    @property
    def total_sessions(self) -> int:
        return self.value_sessions + self.non_value_sessions

    @property
    def value_fraction(self) -> float:
        total = self.total_sessions
        return self.value_sessions / total if total else 0.0


def _completed_by_session(events: list[MetricEvent]) -> dict[str, int]:
    opened: dict[str, int] = {}
    for event in events:
        if event.kind is EventKind.SESSION_OPEN:
            opened.setdefault(event.session_id, 0)
        elif event.kind is EventKind.FINAL_RECEIVED and event.status == "accepted":
            opened[event.session_id] = opened.get(event.session_id, 0) + 1
    return opened

def classify_sessions(events: list[MetricEvent]) -> SessionBreakdown:
    """Split sessions into value (completed >= 1 task) and the rest.

    Sessions still open at the end of the log are classified by their state
    at that point, the drain-time convention.
    """
    per_session = _completed_by_session(events)
    histogram: dict[int, int] = {}
    value = 0
    for count in per_session.values():
        histogram[count] = histogram.get(count, 0) + 1
        if count >= 1:
            value += 1
    return SessionBreakdown(
        value_sessions=value,
        non_value_sessions=len(per_session) - value,
        histogram=dict(sorted(histogram.items())),
    )


def total_downtime(events: list[MetricEvent]) -> float:
    """Sum of idle-wait spans across sessions.

    WaitStart and WaitEnd alternate per session; a WaitStart left hanging
    by a killed session closes at that session's close (or the last event
    in the log).  Raises on logs that violate alternation.
    """
    open_wait: dict[str, float] = {}
    closed_at: dict[str, float] = {}
    total = 0.0
    last_t = 0.0
    for event in events:
        last_t = max(last_t, event.t)
        if event.kind is EventKind.WAIT_START:
            if event.session_id in open_wait:
                raise ValueError(f"nested wait_start for session {event.session_id}")
            open_wait[event.session_id] = event.t
        elif event.kind is EventKind.WAIT_END:
            start = open_wait.pop(event.session_id, None)
            if start is None:
                raise ValueError(f"wait_end without wait_start for {event.session_id}")
            total += event.t - start
        elif event.kind is EventKind.SESSION_CLOSE:
            closed_at[event.session_id] = event.t
    for session_id, start in open_wait.items():
        total += closed_at.get(session_id, last_t) - start
    return total


def wasted_dispatches(events: list[MetricEvent]) -> int:
    """Dispatches that never turned into an accepted Final from that session."""
    dispatched: list[tuple[str, str]] = []
    accepted: set[tuple[str, str]] = set()
    for event in events:
        if event.kind is EventKind.TASK_DISPATCHED:
            dispatched.append((event.session_id, event.task_id))
        elif event.kind is EventKind.FINAL_RECEIVED and event.status == "accepted":
            accepted.add((event.session_id, event.task_id))
    return sum(1 for pair in dispatched if pair not in accepted)


def bytes_by_transport(events: list[MetricEvent]) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    for event in events:
        if event.kind is EventKind.BYTES:
            per = out.setdefault(event.transport, {"in": 0, "out": 0})
            per[event.direction] += event.count
    return out


def top_decile_share(events: list[MetricEvent]) -> float:
    """Share of accepted tasks done by the busiest tenth of sessions."""
    counts = sorted(_completed_by_session(events).values(), reverse=True)
    total = sum(counts)
    if not counts or total == 0:
        return 0.0
    top = max(1, len(counts) // 10)
    return sum(counts[:top]) / total


@dataclass(slots=True)
class ExperimentSummary:
    label: str
    runtime: float
    drained: bool
    tasks_total: int
    tasks_accepted: int
    sessions: SessionBreakdown
    downtime: float
    bytes_in: int
    bytes_out: int
    wasted: int
    pushes: int
    server_messages: int
    top_decile: float
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def requests_per_second(self) -> float:
        return self.server_messages / self.runtime if self.runtime > 0 else 0.0


def experiment_summary(
    events: list[MetricEvent],
    label: str = "run",
    tasks_total: int = 0,
    drained: bool = True,
    pushes: Optional[int] = None,
    meta: Optional[dict[str, Any]] = None,
) -> ExperimentSummary:
    """Replay a log into one summary row.

    Runtime spans first event to the final accepted completion (or the last
    event when the run never drained).  server_messages counts every
    protocol message the server received, the load proxy behind the
    requests-per-second figure.  An empty log, which a run aborted before
    its first client arrived will produce, summarises to an all-zero row.
    """
    t0 = events[0].t if events else 0.0
    accepted_times = [
        e.t for e in events if e.kind is EventKind.FINAL_RECEIVED and e.status == "accepted"
    ]
    t_end = (
        max(accepted_times)
        if (drained and accepted_times)
        else max((e.t for e in events), default=t0)
    )
    byt = bytes_by_transport(events)
    bytes_in = sum(per["in"] for per in byt.values())
    bytes_out = sum(per["out"] for per in byt.values())
    messages_in = sum(1 for e in events if e.kind is EventKind.BYTES and e.direction == "in")
    accepted = len(accepted_times)
    return ExperimentSummary(
        label=label,
        runtime=t_end - t0,
        drained=drained,
        tasks_total=tasks_total,
        tasks_accepted=accepted,
        sessions=classify_sessions(events),
        downtime=total_downtime(events),
        bytes_in=bytes_in,
        bytes_out=bytes_out,
        wasted=wasted_dispatches(events),
        pushes=accepted if pushes is None else pushes,
        server_messages=messages_in,
        top_decile=top_decile_share(events),
        meta=dict(meta or {}),
    )


# ------------------------------------------------------------------ CSV output

SUMMARY_COLUMNS = [
    "schema_version",
    "label",
    "runtime",
    "drained",
    "tasks_total",
    "tasks_accepted",
    "sessions_total",
    "value_sessions",
    "non_value_sessions",
    "value_fraction",
    "downtime",
    "bytes_in",
    "bytes_out",
    "wasted_dispatches",
    "source_pushes",
    "server_messages",
    "requests_per_second",
    "top_decile_share",
]


def summary_row(summary: ExperimentSummary) -> list[str]:
    values = [
        SCHEMA_VERSION,
        summary.label,
        f"{summary.runtime:.6f}",
        int(summary.drained),
        summary.tasks_total,
        summary.tasks_accepted,
        summary.sessions.total_sessions,
        summary.sessions.value_sessions,
        summary.sessions.non_value_sessions,
        f"{summary.sessions.value_fraction:.6f}",
        f"{summary.downtime:.6f}",
        summary.bytes_in,
        summary.bytes_out,
        summary.wasted,
        summary.pushes,
        summary.server_messages,
        f"{summary.requests_per_second:.6f}",
        f"{summary.top_decile:.6f}",
    ]
    return [str(v) for v in values]


def write_summary_csv(summaries: list[ExperimentSummary], path: str) -> None:
    extra_keys = sorted({key for s in summaries for key in s.meta})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(SUMMARY_COLUMNS + extra_keys) + "\n")
        for summary in summaries:
            row = summary_row(summary) + [str(summary.meta.get(k, "")) for k in extra_keys]
            fh.write(",".join(row) + "\n")


def write_histogram_csv(summary: ExperimentSummary, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("schema_version,label,tasks_completed,session_count\n")
        for tasks_done, sessions in summary.sessions.histogram.items():
            fh.write(f"{SCHEMA_VERSION},{summary.label},{tasks_done},{sessions}\n")
