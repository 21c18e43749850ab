"""The manager's in-memory task queue.

Dispatch is rotation, not leasing: taking a task moves it to the back of
the queue but leaves it queued, so a vanished worker costs nothing and a
slow one merely races whoever picks the task up next.  Completion is
idempotent; checkpoints merge forward monotonically.  All operations hold
one lock, so observable behaviour is a linearizable sequence and the
conservation invariant (queued + completed == enqueued) can never break.

Durability is the task source's problem: everything here is memory only.
"""

from __future__ import annotations

import copy
import threading
from collections import deque
from typing import Any, Optional

from .domain import CheckpointRecord, Task, TaskStatus
from .protocol import AckStatus, TaskAssignment


class DuplicateTaskId(Exception):
    pass


class UnknownTask(Exception):
    pass


class TaskQueue:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._order: deque[str] = deque()
        self._queued: dict[str, Task] = {}
        self._completed: dict[str, Task] = {}
        self._enqueued_total = 0
        self._accepted_total = 0

    def enqueue(self, task_id: str, kernel_id: str, payload: dict[str, Any]) -> None:
        with self._lock:
            if task_id in self._queued or task_id in self._completed:
                raise DuplicateTaskId(task_id)
            self._queued[task_id] = Task(task_id=task_id, kernel_id=kernel_id, payload=dict(payload))
            self._order.append(task_id)
            self._enqueued_total += 1

    def take_next(self, count: int = 1) -> list[TaskAssignment]:
        """Snapshot up to ``count`` tasks for dispatch, rotating each to the tail.

        Returns fewer (possibly none) only when the queue holds fewer queued
        tasks than asked for.  Snapshots carry the latest merged payload and
        checkpoint so a resumed task is self-contained.
        """
        if count < 1:
            raise ValueError("count must be >= 1")
        with self._lock:
            picked = []
            for _ in range(min(count, len(self._order))):
                task_id = self._order.popleft()
                self._order.append(task_id)
                task = self._queued[task_id]
                task.dispatch_count += 1
                picked.append(
                    TaskAssignment(
                        task_id=task.task_id,
                        kernel_id=task.kernel_id,
                        payload=copy.deepcopy(task.payload),
                        checkpoint=copy.deepcopy(task.checkpoint),
                    )
                )
            return picked

    def apply_partial(self, task_id: str, checkpoint: CheckpointRecord) -> AckStatus:
        """Merge a checkpoint into a queued task.

        Stale checkpoints (sequence not beyond the stored one) are dropped
        without touching the task; checkpoints for finished tasks answer
        ALREADY_COMPLETE so late workers can stop resending.
        """
        with self._lock:
            if task_id in self._completed:
                return AckStatus.ALREADY_COMPLETE
            task = self._queued.get(task_id)
            if task is None:
                raise UnknownTask(task_id)
            if task.checkpoint is not None and checkpoint.sequence <= task.checkpoint.sequence:
                return AckStatus.STALE
            task.payload.update(copy.deepcopy(checkpoint.partial_payload))
            task.checkpoint = CheckpointRecord(
                sequence=checkpoint.sequence,
                partial_payload=copy.deepcopy(checkpoint.partial_payload),
                progress_units=checkpoint.progress_units,
            )
            return AckStatus.APPLIED

    def complete(self, task_id: str, final_payload: dict[str, Any], final_sequence: int) -> AckStatus:
        """Record a final result; first writer wins, the rest are duplicates."""
        with self._lock:
            if task_id in self._completed:
                return AckStatus.DUPLICATE
            task = self._queued.pop(task_id, None)
            if task is None:
                raise UnknownTask(task_id)
            self._order.remove(task_id)
            task.payload.update(copy.deepcopy(final_payload))
            task.status = TaskStatus.COMPLETED
            task.checkpoint = CheckpointRecord(
                sequence=final_sequence,
                partial_payload=copy.deepcopy(final_payload),
                progress_units=task.checkpoint.progress_units if task.checkpoint else 0,
            )
            self._completed[task_id] = task
            self._accepted_total += 1
            return AckStatus.ACCEPTED

    def drained(self) -> bool:
        with self._lock:
            return not self._queued and self._enqueued_total > 0

    def queued_count(self) -> int:
        with self._lock:
            return len(self._queued)

    def completed_count(self) -> int:
        with self._lock:
            return len(self._completed)

    def accepted_total(self) -> int:
        with self._lock:
            return self._accepted_total

    def enqueued_total(self) -> int:
        with self._lock:
            return self._enqueued_total

    def completed_payload(self, task_id: str) -> dict[str, Any]:
        with self._lock:
            task = self._completed.get(task_id)
            if task is None:
                raise UnknownTask(task_id)
            return copy.deepcopy(task.payload)

    def completed_payloads(self) -> dict[str, dict[str, Any]]:
        with self._lock:
            return {tid: copy.deepcopy(t.payload) for tid, t in self._completed.items()}

    def check_conservation(self) -> None:
        """Assert queued + completed == enqueued; cheap enough to call anywhere."""
        with self._lock:
            total = len(self._queued) + len(self._completed)
            if total != self._enqueued_total:
                raise AssertionError(
                    f"conservation broken: {len(self._queued)} queued + "
                    f"{len(self._completed)} completed != {self._enqueued_total} enqueued"
                )
            if len(self._order) != len(self._queued):
                raise AssertionError("rotation order out of sync with queued set")
