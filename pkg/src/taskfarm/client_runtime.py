"""Transport-agnostic client logic: what a worker does next and how it runs a task.

The session is written as a generator yielding effects (compute for this
long, exchange this message, wait for a prefetched reply) so exactly the
same logic drives three drivers: the virtual-time simulator, the
real-socket swarm threads, and unit tests with a scripted server.  The
browser worker mirrors this file's decision rules.

Downtime accounting lives in the effect metadata: an effect with
``idle=True`` means the client holds no runnable task while it waits, and
only those spans count as downtime.  A synchronous checkpoint wait is not
idle (the task is still in hand); the wait for a Final's ack after the
buffer emptied is.

Prefetch responses are delivered between effects, never concurrently: the
driver hands arrived replies to ``deliver_pending`` before resuming the
generator, which is exactly how a single-threaded worker would see them.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional

from .domain import PolicyConfig, PolicyMode
from .kernels import KernelFailure, get_kernel
from .protocol import (
    Ack,
    AckStatus,
    Drained,
    Final,
    Hello,
    Partial,
    RequestTasks,
    ServerMessage,
    TaskAssignment,
    Tasks,
)


# ------------------------------------------------------------------- actions


@dataclass(slots=True)
class RunTask:
    pass


@dataclass(slots=True)
class Request:
    count: int


@dataclass(slots=True)
class RequestAsync:
    count: int


@dataclass(slots=True)
class Idle:
    pass


# ------------------------------------------------------------------- effects


@dataclass(slots=True)
class Busy:
    """Execute this many work units of the current task."""

    units: int


@dataclass(slots=True)
class Exchange:
    """Send a message and block for the reply; idle marks downtime spans."""

    message: Any
    idle: bool


@dataclass(slots=True)
class StartPrefetch:
    """Fire a request without blocking; reply arrives via deliver_pending."""

    message: RequestTasks


@dataclass(slots=True)
class AwaitDelivery:
    """Nothing to run and a prefetch is in flight: idle until it lands."""


@dataclass(slots=True)
class Backoff:
    """Pause before retrying an empty queue; idle time by definition."""

    seconds: float


EMPTY_QUEUE_RETRY = 0.5


@dataclass(slots=True)
class ClientState:
    policy: PolicyConfig
    buffer: list[TaskAssignment] = field(default_factory=list)
    prefetch_in_flight: bool = False
    server_drained: bool = False
    tasks_completed: int = 0
    busy_units_executed: int = 0

    def buffer_cap(self) -> int:
        # the prefetch can land on top of threshold remaining tasks
        return self.policy.batch_size + self.policy.prefetch_threshold


def next_action(state: ClientState) -> RunTask | Request | RequestAsync | Idle:
    """Decide the next step under the configured policy.

    Single-valued on purpose: a prefetch trigger returns RequestAsync and
    the follow-up call (same instant, nothing else changed) returns
    RunTask, so "run and also prefetch" is two consecutive decisions.
    """
    policy = state.policy
    if not state.buffer:
        if state.prefetch_in_flight:
            return Idle()
        if state.server_drained:
            return Idle()
        return Request(policy.batch_size)
    if (
        policy.mode is PolicyMode.ASYNC_PREFETCH
        and not state.prefetch_in_flight
        and not state.server_drained
        and len(state.buffer) == policy.prefetch_threshold
    ):
        return RequestAsync(policy.batch_size)
    return RunTask()


def accept_tasks(state: ClientState, response: ServerMessage) -> bool:
    """Fold a reply to a task request into the buffer; True if any arrived."""
    if isinstance(response, Drained):
        state.server_drained = True
        return False
    if not isinstance(response, Tasks):
        raise ValueError(f"unexpected reply to a task request: {response!r}")
    state.buffer.extend(response.tasks)
    if len(state.buffer) > state.buffer_cap():
        raise AssertionError(
            f"buffer overflow: {len(state.buffer)} > cap {state.buffer_cap()}"
        )
    return bool(response.tasks)


def deliver_pending(state: ClientState, response: ServerMessage) -> None:
    """Hand an arrived prefetch reply to the client between effects."""
    state.prefetch_in_flight = False
    accept_tasks(state, response)


def run_task(state: ClientState, assignment: TaskAssignment) -> Iterator[Any]:
    """Run one task to its Final, checkpointing at every boundary crossed.

    Resumes from the assignment's checkpoint and performs only the
    remaining units.  Checkpoint waits are synchronous: the generator
    blocks on each Partial's ack before computing on.  A Stale ack is
    ignored (keep computing); ALREADY_COMPLETE abandons the task without a
    Final; a kernel failure abandons it locally and lets rotation recover.
    """
    kernel = get_kernel(assignment.kernel_id)
    payload = copy.deepcopy(assignment.payload)
    sequence = assignment.checkpoint.sequence if assignment.checkpoint else 0
    try:
        done = kernel.done_units(payload)
        total = kernel.total_units(payload)
    except (KeyError, TypeError) as exc:
        raise KernelFailure(f"unreadable payload for {assignment.task_id}: {exc}") from None
    every = state.policy.checkpoint_every
    while done < total:
        if every is not None:
            target = min(total, (done // every + 1) * every)
        else:
            target = total
        yield Busy(units=target - done)
        kernel.run_chunk(payload, target)
        state.busy_units_executed += target - done
        done = target
        if done < total:
            sequence += 1
            ack = yield Exchange(
                Partial(assignment.task_id, sequence, done, kernel.progress_payload(payload)),
                idle=False,
            )
            if isinstance(ack, Ack) and ack.status is AckStatus.ALREADY_COMPLETE:
                return
    sequence += 1
    ack = yield Exchange(Final(assignment.task_id, sequence, payload), idle=not state.buffer)
    if isinstance(ack, Ack) and ack.status is AckStatus.ACCEPTED:
        state.tasks_completed += 1


def session_process(state: ClientState, client_info: Optional[dict[str, Any]] = None) -> Iterator[Any]:
    """One whole worker session, from Hello to server drain.

    The driver kills it by dropping the generator; there is no farewell
    path, matching how browser sessions actually die.
    """
    yield Exchange(Hello(client_info or {}), idle=True)
    while True:
        if state.server_drained and not state.buffer:
            return
        action = next_action(state)
        if isinstance(action, RequestAsync):
            state.prefetch_in_flight = True
            yield StartPrefetch(RequestTasks(action.count))
        elif isinstance(action, Request):
            response = yield Exchange(RequestTasks(action.count), idle=True)
            got_any = accept_tasks(state, response)
            if not got_any and not state.server_drained:
                # queue momentarily dry (source still feeding); retry later
                yield Backoff(EMPTY_QUEUE_RETRY)
        elif isinstance(action, Idle):
            if state.server_drained and state.prefetch_in_flight:
                # nothing more will arrive worth waiting for
                return
            yield AwaitDelivery()
        else:
            assignment = state.buffer.pop(0)
            try:
                yield from run_task(state, assignment)
            except KernelFailure:
                continue
