"""Wire messages and their canonical encoding.

Both transports carry exactly these messages; only the framing differs.
Bodies are canonical JSON (sorted keys, compact separators, UTF-8) so the
same message always encodes to the same bytes on either side and in either
language.  Compression, when enabled, happens at the framing layer and is
flagged out-of-band: a header on the request-response transport, a flag
byte in stream frames.  ``encode``/``decode`` never see compressed bytes.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Union

from .domain import CheckpointRecord, TransportKind


class MalformedMessage(Exception):
    """Raised when bytes off the wire do not decode to a known message."""


class AckStatus(str, Enum):
    APPLIED = "applied"
    STALE = "stale"
    ALREADY_COMPLETE = "already_complete"
    ACCEPTED = "accepted"
    DUPLICATE = "duplicate"


@dataclass(slots=True)
class Hello:
    client_info: dict[str, Any] = field(default_factory=dict)


@dataclass(slots=True)
class RequestTasks:
    count: int = 1


@dataclass(slots=True)
class Partial:
    task_id: str
    sequence: int
    progress_units: int
    partial_payload: dict[str, Any]


@dataclass(slots=True)
class Final:
    task_id: str
    sequence: int
    payload: dict[str, Any]


@dataclass(slots=True)
class TaskAssignment:
    """One dispatched task as it crosses the wire."""

    task_id: str
    kernel_id: str
    payload: dict[str, Any]
    checkpoint: Optional[CheckpointRecord] = None


@dataclass(slots=True)
class Tasks:
    tasks: list[TaskAssignment]


@dataclass(slots=True)
class Ack:
    task_id: str
    status: AckStatus


@dataclass(slots=True)
class Drained:
    pass


ClientMessage = Union[Hello, RequestTasks, Partial, Final]
ServerMessage = Union[Tasks, Ack, Drained]
Message = Union[ClientMessage, ServerMessage]

_CLIENT_TYPES = (Hello, RequestTasks, Partial, Final)


def _to_doc(message: Message) -> dict[str, Any]:
    if isinstance(message, Hello):
        return {"type": "hello", "client_info": message.client_info}
    if isinstance(message, RequestTasks):
        return {"type": "request_tasks", "count": message.count}
    if isinstance(message, Partial):
        return {
            "type": "partial",
            "task_id": message.task_id,
            "sequence": message.sequence,
            "progress_units": message.progress_units,
            "partial_payload": message.partial_payload,
        }
    if isinstance(message, Final):
        return {
            "type": "final",
            "task_id": message.task_id,
            "sequence": message.sequence,
            "payload": message.payload,
        }
    if isinstance(message, Tasks):
        items = []
        for a in message.tasks:
            doc: dict[str, Any] = {
                "task_id": a.task_id,
                "kernel_id": a.kernel_id,
                "payload": a.payload,
            }
            if a.checkpoint is not None:
                doc["checkpoint"] = {
                    "sequence": a.checkpoint.sequence,
                    "partial_payload": a.checkpoint.partial_payload,
                    "progress_units": a.checkpoint.progress_units,
                }
            items.append(doc)
        return {"type": "tasks", "tasks": items}
    if isinstance(message, Ack):
        return {"type": "ack", "task_id": message.task_id, "status": message.status.value}
    if isinstance(message, Drained):
        return {"type": "drained"}
    raise TypeError(f"not a protocol message: {message!r}")


def encode(message: Message) -> bytes:
    """Canonical bytes for a message: sorted-key compact JSON, UTF-8."""
    return json.dumps(_to_doc(message), sort_keys=True, separators=(",", ":")).encode("utf-8")


def _require(doc: dict[str, Any], key: str, kind: type) -> Any:
    try:
        value = doc[key]
    except KeyError:
        raise MalformedMessage(f"missing field {key!r}") from None
    # bool is an int subclass; a bare True where a count belongs is malformed
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise MalformedMessage(f"field {key!r} has wrong type")
    return value


def _checkpoint_from(doc: dict[str, Any]) -> CheckpointRecord:
    try:
        return CheckpointRecord(
            sequence=_require(doc, "sequence", int),
            partial_payload=_require(doc, "partial_payload", dict),
            progress_units=_require(doc, "progress_units", int),
        )
    except ValueError as exc:
        raise MalformedMessage(str(exc)) from None


def decode(data: bytes) -> Message:
    """Parse canonical bytes back to a message.

    Raises MalformedMessage on truncated JSON, unknown type tags or missing
    fields; never returns a partially populated message.
    """
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMessage(f"undecodable body: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedMessage("body is not an object")
    tag = doc.get("type")
    if tag == "hello":
        return Hello(client_info=_require(doc, "client_info", dict))
    if tag == "request_tasks":
        count = _require(doc, "count", int)
        if count < 1:
            raise MalformedMessage("count must be >= 1")
        return RequestTasks(count=count)
    if tag == "partial":
        sequence = _require(doc, "sequence", int)
        progress = _require(doc, "progress_units", int)
        if sequence < 1 or progress < 0:
            raise MalformedMessage("partial sequence/progress out of range")
        return Partial(
            task_id=_require(doc, "task_id", str),
            sequence=sequence,
            progress_units=progress,
            partial_payload=_require(doc, "partial_payload", dict),
        )
    if tag == "final":
        sequence = _require(doc, "sequence", int)
        if sequence < 1:
            raise MalformedMessage("final sequence out of range")
        return Final(
            task_id=_require(doc, "task_id", str),
            sequence=sequence,
            payload=_require(doc, "payload", dict),
        )
    if tag == "tasks":
        items = _require(doc, "tasks", list)
        assignments = []
        for item in items:
            if not isinstance(item, dict):
                raise MalformedMessage("task entry is not an object")
            assignments.append(
                TaskAssignment(
                    task_id=_require(item, "task_id", str),
                    kernel_id=_require(item, "kernel_id", str),
                    payload=_require(item, "payload", dict),
                    checkpoint=_checkpoint_from(item["checkpoint"])
                    if item.get("checkpoint") is not None
                    else None,
                )
            )
        return Tasks(tasks=assignments)
    if tag == "ack":
        status = _require(doc, "status", str)
        try:
            parsed = AckStatus(status)
        except ValueError:
            raise MalformedMessage(f"unknown ack status {status!r}") from None
        return Ack(task_id=_require(doc, "task_id", str), status=parsed)
    if tag == "drained":
        return Drained()
    raise MalformedMessage(f"unknown message type {tag!r}")


# Per-exchange framing overhead estimates, in bytes.  Request-response pays
# a browser-typical header block split across the two directions (~700 per
# round trip); a stream frame costs a few header bytes either way.
RR_REQUEST_OVERHEAD = 450
RR_RESPONSE_OVERHEAD = 250
STREAM_FRAME_OVERHEAD = 6

COMPRESS_FLAG_RAW = 0
COMPRESS_FLAG_DEFLATE = 1


@dataclass(slots=True)
class Codec:
    """Framing policy: overhead model plus optional body compression.

    compress_threshold is the encoded-body size above which frames are
    deflated; None disables compression entirely (the default, so byte
    accounting against the overhead model stays exact).
    """

    rr_request_overhead: int = RR_REQUEST_OVERHEAD
    rr_response_overhead: int = RR_RESPONSE_OVERHEAD
    stream_frame_overhead: int = STREAM_FRAME_OVERHEAD
    compress_threshold: Optional[int] = None

    def frame(self, message: Message) -> tuple[bytes, bool]:
        """Encode and maybe compress; returns (body, compressed flag)."""
        body = encode(message)
        if self.compress_threshold is not None and len(body) > self.compress_threshold:
            packed = zlib.compress(body, 6)
            if len(packed) < len(body):
                return packed, True
        return body, False

    def unframe(self, body: bytes, compressed: bool) -> Message:
        if compressed:
            try:
                body = zlib.decompress(body)
            except zlib.error as exc:
                raise MalformedMessage(f"bad compressed body: {exc}") from None
        return decode(body)

    def wire_cost(self, message: Message, transport: TransportKind) -> int:
        """Estimated on-the-wire size of one message, body plus framing.

        A metrics model only; the transports never consult it.  Client and
        server messages charge the matching direction's overhead.
        """
        body, _ = self.frame(message)
        if transport is TransportKind.STREAM:
            return len(body) + self.stream_frame_overhead
        if isinstance(message, _CLIENT_TYPES):
            return len(body) + self.rr_request_overhead
        return len(body) + self.rr_response_overhead
