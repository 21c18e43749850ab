"""Core vocabulary shared by the queue, server, clients and simulator.

Tasks are the unit of distribution: an opaque payload plus bookkeeping the
manager needs to redeliver and deduplicate.  Payloads are schemaless dicts
so kernels evolve without touching the manager; the kernel registry owns
their interpretation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional


class TaskStatus(str, Enum):
    QUEUED = "queued"
    COMPLETED = "completed"


class TransportKind(str, Enum):
    REQUEST_RESPONSE = "request_response"
    STREAM = "stream"


class PolicyMode(str, Enum):
    SYNC_SINGLE = "sync_single"
    BATCH = "batch"
    ASYNC_PREFETCH = "async_prefetch"


class DwellKind(str, Enum):
    CONSTANT = "constant"
    WEIBULL = "weibull"


@dataclass(slots=True)
class CheckpointRecord:
    """Snapshot of partial progress reported by a worker.

    sequence numbers start at 1 and must strictly increase per task; the
    queue rejects anything else as stale.
    """

    sequence: int
    partial_payload: dict[str, Any]
    progress_units: int

    def __post_init__(self) -> None:
        if self.sequence < 1:
            raise ValueError(f"checkpoint sequence must be >= 1, got {self.sequence}")
        if self.progress_units < 0:
            raise ValueError("progress_units must be >= 0")


@dataclass(slots=True)
class Task:
    task_id: str
    kernel_id: str
    payload: dict[str, Any]
    checkpoint: Optional[CheckpointRecord] = None
    status: TaskStatus = TaskStatus.QUEUED
    dispatch_count: int = 0

    def __post_init__(self) -> None:
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        if self.dispatch_count < 0:
            raise ValueError("dispatch_count must be >= 0")


@dataclass(slots=True)
class SessionRecord:
    """One worker session as the manager saw it.

    dwell_budget is the session's lifetime draw; math.inf for sessions that
    never leave.  downtime accumulates the spans the session sat idle with
    no runnable task.
    """

    session_id: str
    transport: TransportKind
    dwell_budget: float
    opened_at: float
    closed_at: Optional[float] = None
    tasks_completed: int = 0
    downtime: float = 0.0
    bytes_sent: int = 0
    bytes_received: int = 0

    @property
    def is_value(self) -> bool:
        # a session only pays for itself once a whole task came back
        return self.tasks_completed >= 1


@dataclass(slots=True)
class PolicyConfig:
    """Client-side scheduling policy.

    SYNC_SINGLE is the degenerate batch of one.  ASYNC_PREFETCH issues one
    overlapping request for batch_size more tasks the moment the local
    buffer drops to prefetch_threshold, so the buffer can briefly hold up
    to batch_size + prefetch_threshold entries.
    """

    mode: PolicyMode = PolicyMode.SYNC_SINGLE
    batch_size: int = 1
    prefetch_threshold: int = 0
    checkpoint_every: Optional[int] = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode is PolicyMode.SYNC_SINGLE and self.batch_size != 1:
            raise ValueError("sync_single implies batch_size = 1")
        if self.mode is PolicyMode.ASYNC_PREFETCH:
            if not 0 <= self.prefetch_threshold < self.batch_size:
                raise ValueError("async_prefetch needs 0 <= prefetch_threshold < batch_size")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1 when set")


@dataclass(slots=True)
class DwellModel:
    """How long a worker session stays before vanishing.

    CONSTANT with seconds = inf models the immortal volunteer; WEIBULL
    draws lifetimes with the given shape and scale.  Shapes at or below 1
    put most mass on short visits with a long tail of devoted sessions.
    """

    kind: DwellKind
    seconds: float = math.inf
    shape: float = 1.0
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind is DwellKind.CONSTANT:
            if self.seconds <= 0:
                raise ValueError("constant dwell must be positive")
        else:
            if self.shape <= 0 or self.scale <= 0:
                raise ValueError("weibull shape and scale must be positive")

    @classmethod
    def constant(cls, seconds: float = math.inf) -> "DwellModel":
        return cls(kind=DwellKind.CONSTANT, seconds=seconds)

    @classmethod
    def weibull(cls, shape: float, scale: float) -> "DwellModel":
        return cls(kind=DwellKind.WEIBULL, shape=shape, scale=scale)


@dataclass(slots=True)
class ExperimentConfig:
    """Everything one simulated experiment needs, in one place.

    task_size is in kernel work units (iterations, rows or pixels);
    compute_scale maps one work unit to simulated seconds so desk-scale
    iteration counts can stand in for production-sized tasks.  The network
    knobs model one-way message latency and the one-off bundle fetch.
    """

    kernel_id: str = "monte_carlo_pi"
    total_tasks: int = 24
    task_size: int = 10_000
    worker_slots: int = 24
    dwell: DwellModel = field(default_factory=DwellModel.constant)
    transport: TransportKind = TransportKind.REQUEST_RESPONSE
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    rng_seed: int = 1
    compute_scale: float = 0.0
    net_latency: float = 0.02
    bundle_latency: float = 0.2
    time_limit: float = 3600.0
    compress_threshold: Optional[int] = None
    kernel_params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.total_tasks < 1:
            raise ValueError("total_tasks must be >= 1")
        if self.task_size < 1:
            raise ValueError("task_size must be >= 1")
        if self.worker_slots < 1:
            raise ValueError("worker_slots must be >= 1")
        if self.compute_scale < 0:
            raise ValueError("compute_scale must be >= 0")
        if self.net_latency < 0 or self.bundle_latency < 0:
            raise ValueError("latencies must be >= 0")
        if self.time_limit <= 0:
            raise ValueError("time_limit must be positive")
        if self.compress_threshold is not None and self.compress_threshold < 0:
            raise ValueError("compress_threshold must be >= 0 or None")


@dataclass
class ServerConfig:
    """Settings for a long-running manager process.

    source_url of None means the built-in benchmark source feeds the
    queue from `experiment`; otherwise tasks are pulled from the
    external document store at that address.  idle_timeout closes
    request-response sessions that stop calling in, since those clients
    cannot say goodbye.
    """

    host: str = "127.0.0.1"
    port: int = 8700
    enable_request_response: bool = True
    enable_stream: bool = True
    source_url: Optional[str] = None
    bundle_dir: Optional[str] = None
    idle_timeout: float = 60.0
    stats_interval: float = 10.0
    event_log: Optional[str] = None
    rr_request_overhead: int = 450
    rr_response_overhead: int = 250
    stream_frame_overhead: int = 6
    compress_threshold: Optional[int] = None

    def __post_init__(self) -> None:
        if not (self.enable_request_response or self.enable_stream):
            raise ValueError("at least one transport must be enabled")
        if self.idle_timeout <= 0:
            raise ValueError("idle_timeout must be positive")
        if self.stats_interval <= 0:
            raise ValueError("stats_interval must be positive")
        if not 0 <= self.port <= 65535:
            raise ValueError("port out of range")
