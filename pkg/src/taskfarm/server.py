"""The task manager: session registry, message handling, endpoints.

ServerCore is the transport-free heart.  It owns the task queue, the
session table, the upstream task source and the metric sink, and it
speaks in protocol messages: hand it a decoded client message, get back
the reply to send.  The simulator drives a core directly with a virtual
clock; TaskServer wraps the same core in real HTTP and stream endpoints.

Nothing here trusts clients.  A connection can die at any point in the
protocol without corrupting the queue: tasks rotate rather than lease,
so an assignment lost with its session simply comes around again for
the next requester.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Optional
from urllib.parse import parse_qs, urlsplit

from .domain import CheckpointRecord, ServerConfig, SessionRecord, TransportKind
from .kernels import KERNELS, UnknownKernel
from .metrics import EventKind, EventSink, MetricEvent, bytes_by_transport, total_downtime
from .protocol import (
    Ack,
    AckStatus,
    Codec,
    Drained,
    Final,
    Hello,
    MalformedMessage,
    Message,
    Partial,
    RequestTasks,
    ServerMessage,
    Tasks,
)
from .task_queue import DuplicateTaskId, TaskQueue, UnknownTask
from .task_source import RetryExhausted, RetryingPusher, SourceUnavailable
from .transports import (
    ConnectionClosed,
    StreamPeer,
    TransportError,
    server_handshake_response,
)

log = logging.getLogger(__name__)


class BindFailure(Exception):
    """Could not claim the listen address."""


class UnknownSession(Exception):
    """Message arrived for a session we never opened or already closed."""


@dataclass
class _Session:
    record: SessionRecord
    last_active: float


# ------------------------------------------------------------------ bundles


def _read_webkernel(name: str, bundle_dir: Optional[str]) -> str:
    if bundle_dir is not None:
        candidate = Path(bundle_dir) / name
        if candidate.is_file():
            return candidate.read_text(encoding="utf-8")
    ref = resources.files("taskfarm.webkernels").joinpath(name)
    if not ref.is_file():
        raise FileNotFoundError(name)
    return ref.read_text(encoding="utf-8")


def build_bundle(kernel_id: str, bundle_dir: Optional[str] = None) -> str:
    """Concatenate the client shim and one kernel into a single script.

    The result is static per kernel, so repeated fetches are
    byte-identical and the hash can back an ETag.
    """
    if kernel_id not in KERNELS:
        raise UnknownKernel(kernel_id)
    try:
        shim = _read_webkernel("shim.js", bundle_dir)
        kernel = _read_webkernel(f"{kernel_id}.js", bundle_dir)
    except FileNotFoundError as exc:
        raise UnknownKernel(f"no script for kernel {kernel_id}") from exc
    return f"// kernel bundle: {kernel_id}\n{shim}\n{kernel}"


def bundle_hash(bundle_text: str) -> str:
    return hashlib.sha256(bundle_text.encode("utf-8")).hexdigest()


# ------------------------------------------------------------------- core


class ServerCore:
    """Everything the manager does, minus sockets.

    clock is injected so the simulator can run the same code under
    virtual time.  All public methods are safe to call from any thread.
    """

    def __init__(
        self,
        *,
        codec: Optional[Codec] = None,
        sink: Optional[EventSink] = None,
        clock: Callable[[], float] = time.monotonic,
        source: Any = None,
        idle_timeout: float = 60.0,
        bundle_dir: Optional[str] = None,
        feed_chunk: int = 32,
    ) -> None:
        self.codec = codec if codec is not None else Codec()
        self.sink = sink if sink is not None else EventSink()
        self.clock = clock
        self.source = source
        self.idle_timeout = idle_timeout
        self.bundle_dir = bundle_dir
        self.feed_chunk = feed_chunk
        self.queue = TaskQueue()
        self.pusher = RetryingPusher(source) if source is not None else None
        self._sessions: dict[str, _Session] = {}
        self._lock = threading.Lock()
        self._session_counter = 0
        self._bundle_cache: dict[str, str] = {}

    # -- sessions ----------------------------------------------------

    def handle_hello(self, message: Hello, transport: TransportKind) -> str:
        now = self.clock()
        with self._lock:
            self._session_counter += 1
            session_id = f"s{self._session_counter:05d}"
            record = SessionRecord(
                session_id=session_id,
                transport=transport,
                dwell_budget=float("inf"),
                opened_at=now,
            )
            cost = self.codec.wire_cost(message, transport)
            record.bytes_received = cost
            self._sessions[session_id] = _Session(record=record, last_active=now)
        self.sink.emit(
            MetricEvent(now, EventKind.SESSION_OPEN, session_id=session_id, transport=transport.value)
        )
        self.sink.emit(
            MetricEvent(
                now,
                EventKind.BYTES,
                session_id=session_id,
                transport=transport.value,
                direction="in",
                count=cost,
            )
        )
        return session_id

    def close_session(self, session_id: str) -> bool:
        """Mark the session gone.  Safe to call twice; only the first counts."""
        now = self.clock()
        with self._lock:
            sess = self._sessions.get(session_id)
            if sess is None or sess.record.closed_at is not None:
                return False
            sess.record.closed_at = now
        self.sink.emit(MetricEvent(now, EventKind.SESSION_CLOSE, session_id=session_id))
        return True

    def close_all(self) -> None:
        with self._lock:
            open_ids = [
                sid for sid, sess in self._sessions.items() if sess.record.closed_at is None
            ]
        for sid in open_ids:
            self.close_session(sid)
        self.flush_pushes()

    def sweep_idle(self, now: Optional[float] = None) -> list[str]:
        """Close request-response sessions that stopped calling in.

        Stream sessions are skipped: their close signal is the socket
        dropping, which the connection handler sees directly.
        """
        if now is None:
            now = self.clock()
        with self._lock:
            stale = [
                sid
                for sid, sess in self._sessions.items()
                if sess.record.closed_at is None
                and sess.record.transport is TransportKind.REQUEST_RESPONSE
                and now - sess.last_active > self.idle_timeout
            ]
        for sid in stale:
            self.close_session(sid)
        return stale

    def session_record(self, session_id: str) -> SessionRecord:
        with self._lock:
            try:
                return self._sessions[session_id].record
            except KeyError:
                raise UnknownSession(session_id) from None

    # -- messages ----------------------------------------------------

    def handle_message(self, session_id: str, message: Message) -> Optional[ServerMessage]:
        """Route one decoded client message; returns the reply, if any.

        Raises UnknownSession for tokens we do not know and UnknownTask
        for reports about tasks we never issued; both are the caller's
        protocol errors, not server faults.
        """
        now = self.clock()
        push_after: Optional[tuple[str, dict[str, Any]]] = None
        with self._lock:
            sess = self._sessions.get(session_id)
            if sess is None or sess.record.closed_at is not None:
                raise UnknownSession(session_id)
            sess.last_active = now
            transport = sess.record.transport
            in_cost = self.codec.wire_cost(message, transport)
            sess.record.bytes_received += in_cost
        self._emit_bytes(now, session_id, transport, "in", in_cost)

        if isinstance(message, RequestTasks):
            reply = self._handle_request(now, session_id, message)
        elif isinstance(message, Partial):
            reply = self._handle_partial(now, session_id, message)
        elif isinstance(message, Final):
            reply, push_after = self._handle_final(now, session_id, message)
        elif isinstance(message, Hello):
            reply = None  # repeat hello: harmless, nothing to say back
        else:
            raise MalformedMessage(f"client sent a server message: {type(message).__name__}")

        if reply is not None:
            out_cost = self.codec.wire_cost(reply, transport)
            with self._lock:
                sess = self._sessions.get(session_id)
                if sess is not None:
                    sess.record.bytes_sent += out_cost
            self._emit_bytes(now, session_id, transport, "out", out_cost)
        if push_after is not None:
            self._push_result(*push_after)
        return reply

    def _handle_request(self, now: float, session_id: str, message: RequestTasks) -> ServerMessage:
        with self._lock:
            self._top_up(message.count)
        assignments = self.queue.take_next(message.count)
        if not assignments:
            if self.drained():
                return Drained()
            return Tasks([])  # feeding window: try again shortly
        for assignment in assignments:
            self.sink.emit(
                MetricEvent(
                    now, EventKind.TASK_DISPATCHED, session_id=session_id, task_id=assignment.task_id
                )
            )
        return Tasks(assignments)

    def _handle_partial(self, now: float, session_id: str, message: Partial) -> ServerMessage:
        status = self.queue.apply_partial(
            message.task_id,
            CheckpointRecord(
                sequence=message.sequence,
                partial_payload=message.partial_payload,
                progress_units=message.progress_units,
            ),
        )
        self.sink.emit(
            MetricEvent(
                now,
                EventKind.PARTIAL_RECEIVED,
                session_id=session_id,
                task_id=message.task_id,
                status=status.value,
            )
        )
        return Ack(message.task_id, status)

    def _handle_final(
        self, now: float, session_id: str, message: Final
    ) -> tuple[ServerMessage, Optional[tuple[str, dict[str, Any]]]]:
        status = self.queue.complete(message.task_id, message.payload, message.sequence)
        push_after = None
        if status is AckStatus.ACCEPTED:
            with self._lock:
                sess = self._sessions.get(session_id)
                if sess is not None:
                    sess.record.tasks_completed += 1
            if self.pusher is not None:
                push_after = (message.task_id, self.queue.completed_payload(message.task_id))
        self.sink.emit(
            MetricEvent(
                now,
                EventKind.FINAL_RECEIVED,
                session_id=session_id,
                task_id=message.task_id,
                status=status.value,
            )
        )
        return Ack(message.task_id, status), push_after

    def _emit_bytes(
        self, now: float, session_id: Optional[str], transport: TransportKind, direction: str, count: int
    ) -> None:
        self.sink.emit(
            MetricEvent(
                now,
                EventKind.BYTES,
                session_id=session_id,
                transport=transport.value,
                direction=direction,
                count=count,
            )
        )

    # -- source ------------------------------------------------------

    def prime(self) -> int:
        """Pull whatever the source has ready before serving.  Returns
        how many tasks were enqueued."""
        with self._lock:
            before = self.queue.enqueued_total()
            self._top_up(None)
            return self.queue.enqueued_total() - before

    def _top_up(self, needed: Optional[int]) -> None:
        """Feed the queue from the source.  Caller holds the core lock.

        needed of None means drain what the source will give in one
        priming sweep; otherwise stop once that many are on hand.
        """
        if self.source is None:
            return
        while not self.source.exhausted():
            if needed is not None and self.queue.queued_count() >= needed:
                return
            want = self.feed_chunk if needed is None else max(self.feed_chunk, needed)
            try:
                entries = self.source.pull_tasks(want)
            except SourceUnavailable as exc:
                log.warning("task source unavailable: %s", exc)
                return
            if not entries:
                return
            for entry in entries:
                try:
                    self.queue.enqueue(entry["task_id"], entry["kernel_id"], entry["payload"])
                except DuplicateTaskId:
                    log.warning("source repeated task %s; dropped", entry["task_id"])

    def _push_result(self, task_id: str, payload: dict[str, Any]) -> None:
        assert self.pusher is not None
        try:
            self.pusher.push(task_id, payload)
        except RetryExhausted as exc:
            log.warning("gave up pushing result for %s: %s", task_id, exc)

    def flush_pushes(self) -> None:
        if self.pusher is None:
            return
        try:
            self.pusher.flush()
        except (RetryExhausted, SourceUnavailable) as exc:
            log.warning("result push backlog not fully flushed: %s", exc)

    def drained(self) -> bool:
        """No work left anywhere: source dry and every queued task done."""
        source_dry = self.source is None or self.source.exhausted()
        return source_dry and self.queue.queued_count() == 0

    # -- bundles and stats -------------------------------------------

    def serve_bundle(self, kernel_id: str) -> str:
        """Return the single-file worker script, logging the delivery."""
        if kernel_id not in self._bundle_cache:
            self._bundle_cache[kernel_id] = build_bundle(kernel_id, self.bundle_dir)
        bundle = self._bundle_cache[kernel_id]
        now = self.clock()
        size = len(bundle.encode("utf-8"))
        self.sink.emit(MetricEvent(now, EventKind.BUNDLE_SERVED, task_id=None, count=size))
        self._emit_bytes(
            now, None, TransportKind.REQUEST_RESPONSE, "in", self.codec.rr_request_overhead
        )
        self._emit_bytes(
            now, None, TransportKind.REQUEST_RESPONSE, "out", size + self.codec.rr_response_overhead
        )
        return bundle

    def get_stats(self) -> dict[str, Any]:
        with self._lock:
            records = [sess.record for sess in self._sessions.values()]
        open_count = sum(1 for r in records if r.closed_at is None)
        closed = [r for r in records if r.closed_at is not None]
        value = sum(1 for r in closed if r.is_value)
        events = self.sink.events()
        return {
            "queued": self.queue.queued_count(),
            "completed": self.queue.completed_count(),
            "open_sessions": open_count,
            "value_sessions": value,
            "non_value_sessions": len(closed) - value,
            "downtime": total_downtime(events),
            "bytes": bytes_by_transport(events),
            "drained": self.drained(),
        }


# ------------------------------------------------------------- real server


class _ApiHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    core: ServerCore
    enable_rr: bool
    enable_stream: bool

    def __init__(self, address: tuple[str, int], handler: type) -> None:
        self.ws_socks: set[Any] = set()
        self.ws_lock = threading.Lock()
        super().__init__(address, handler)

    def handle_error(self, request: Any, client_address: Any) -> None:
        # Clients vanish whenever they like; that is workload, not news.
        exc = sys.exc_info()[1]
        if isinstance(exc, (ConnectionError, TimeoutError, OSError, TransportError)):
            log.debug("connection from %s dropped: %s", client_address, exc)
        else:
            log.warning("handler error for %s", client_address, exc_info=True)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: _ApiHTTPServer

    # -- plumbing ----------------------------------------------------

    def log_message(self, fmt: str, *args: Any) -> None:
        log.debug("%s %s", self.address_string(), fmt % args)

    def _write_response(
        self,
        status: int,
        reason: str,
        body: bytes,
        content_type: str = "application/json",
        extra_headers: Optional[list[tuple[str, str]]] = None,
    ) -> None:
        lines = [
            f"HTTP/1.1 {status} {reason}",
            "Server: taskfarm/0.1",
            f"Date: {self.date_time_string()}",
            f"Content-Type: {content_type}",
            f"Content-Length: {len(body)}",
            "Access-Control-Allow-Origin: *",
            "Cache-Control: no-store",
            "X-Content-Type-Options: nosniff",
            "Connection: keep-alive",
        ]
        for name, value in extra_headers or []:
            lines.append(f"{name}: {value}")
        raw = ("\r\n".join(lines) + "\r\n\r\n").encode("latin-1") + body
        self.wfile.write(raw)
        self.wfile.flush()

    def _json_error(self, status: int, reason: str, detail: str) -> None:
        body = json.dumps({"error": detail}).encode("utf-8")
        self._write_response(status, reason, body)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length", "0") or "0")
        if length <= 0:
            return b""
        return self.rfile.read(length)

    def _decode_request(self) -> Message:
        body = self._read_body()
        compressed = self.headers.get("Content-Encoding", "").lower() == "deflate"
        return self.server.core.codec.unframe(body, compressed=compressed)

    def _send_reply_message(self, reply: Message) -> None:
        codec = self.server.core.codec
        body, compressed = codec.frame(reply)
        extra = [("Content-Encoding", "deflate")] if compressed else None
        self._write_response(200, "OK", body, extra_headers=extra)

    # -- request-response endpoints ----------------------------------

    def do_POST(self) -> None:  # noqa: N802 (stdlib handler naming)
        parts = urlsplit(self.path)
        if not self.server.enable_rr or not parts.path.startswith("/api/"):
            self._read_body()
            self._json_error(404, "Not Found", f"no such endpoint: {parts.path}")
            return
        try:
            message = self._decode_request()
        except MalformedMessage as exc:
            self._json_error(400, "Bad Request", f"malformed message: {exc}")
            return

        route = parts.path[len("/api/") :]
        core = self.server.core
        try:
            if route == "hello":
                if not isinstance(message, Hello):
                    raise MalformedMessage("hello endpoint takes a hello message")
                token = core.handle_hello(message, TransportKind.REQUEST_RESPONSE)
                body = json.dumps({"session": token}).encode("utf-8")
                self._write_response(200, "OK", body)
                return
            expected = {"tasks": RequestTasks, "partial": Partial, "final": Final}.get(route)
            if expected is None:
                self._json_error(404, "Not Found", f"no such endpoint: {parts.path}")
                return
            if not isinstance(message, expected):
                raise MalformedMessage(f"{route} endpoint takes a {expected.__name__} message")
            tokens = parse_qs(parts.query).get("session", [])
            if not tokens:
                self._json_error(400, "Bad Request", "missing session token")
                return
            reply = core.handle_message(tokens[0], message)
            assert reply is not None
            self._send_reply_message(reply)
        except MalformedMessage as exc:
            self._json_error(400, "Bad Request", f"malformed message: {exc}")
        except UnknownSession:
            self._json_error(404, "Not Found", "unknown session")
        except UnknownTask as exc:
            self._json_error(400, "Bad Request", f"unknown task: {exc}")

    def do_GET(self) -> None:  # noqa: N802
        parts = urlsplit(self.path)
        if parts.path == "/ws":
            if not self.server.enable_stream:
                self._json_error(404, "Not Found", "stream transport disabled")
                return
            self._upgrade_stream()
            return
        if parts.path.startswith("/bundle/"):
            self._serve_bundle(parts.path[len("/bundle/") :])
            return
        if parts.path == "/admin/stats":
            body = json.dumps(self.server.core.get_stats(), sort_keys=True).encode("utf-8")
            self._write_response(200, "OK", body)
            return
        self._json_error(404, "Not Found", f"no such endpoint: {parts.path}")

    def do_OPTIONS(self) -> None:  # noqa: N802
        self._write_response(
            204,
            "No Content",
            b"",
            extra_headers=[
                ("Access-Control-Allow-Methods", "GET, POST, OPTIONS"),
                ("Access-Control-Allow-Headers", "Content-Type, Content-Encoding"),
                ("Access-Control-Max-Age", "86400"),
            ],
        )

    def _serve_bundle(self, kernel_id: str) -> None:
        try:
            bundle = self.server.core.serve_bundle(kernel_id)
        except UnknownKernel:
            self._json_error(404, "Not Found", f"unknown kernel: {kernel_id}")
            return
        body = bundle.encode("utf-8")
        self._write_response(
            200,
            "OK",
            body,
            content_type="text/javascript; charset=utf-8",
            extra_headers=[("ETag", f'"{bundle_hash(bundle)}"')],
        )

    # -- stream endpoint ---------------------------------------------

    def _upgrade_stream(self) -> None:
        headers = self.headers
        upgrade = headers.get("Upgrade", "").lower()
        key = headers.get("Sec-WebSocket-Key", "")
        version = headers.get("Sec-WebSocket-Version", "")
        if upgrade != "websocket" or not key or version != "13":
            self._json_error(400, "Bad Request", "not a valid stream upgrade request")
            return
        self.wfile.write(server_handshake_response(key))
        self.wfile.flush()
        self.close_connection = True

        core = self.server.core
        peer = StreamPeer(self.connection, core.codec, mask_outgoing=False, rfile=self.rfile)
        with self.server.ws_lock:
            self.server.ws_socks.add(self.connection)
        session_id: Optional[str] = None
        try:
            while True:
                message = peer.recv_message()
                if session_id is None:
                    if not isinstance(message, Hello):
                        log.debug("stream peer spoke before hello; dropping")
                        return
                    session_id = core.handle_hello(message, TransportKind.STREAM)
                    continue
                reply = core.handle_message(session_id, message)
                if reply is not None:
                    peer.send_message(reply)
        except (ConnectionClosed, MalformedMessage, UnknownTask, UnknownSession, OSError) as exc:
            log.debug("stream session %s ended: %s", session_id, exc)
        except TransportError as exc:
            log.debug("stream session %s framing error: %s", session_id, exc)
        finally:
            with self.server.ws_lock:
                self.server.ws_socks.discard(self.connection)
            if session_id is not None:
                core.close_session(session_id)
            peer.close()


class TaskServer:
    """Real endpoints around a ServerCore, one thread per connection."""

    def __init__(
        self,
        core: ServerCore,
        host: str = "127.0.0.1",
        port: int = 0,
        *,
        enable_rr: bool = True,
        enable_stream: bool = True,
        sweep_interval: float = 0.25,
        stats_interval: float = 10.0,
    ) -> None:
        self.core = core
        try:
            self._httpd = _ApiHTTPServer((host, port), _Handler)
        except OSError as exc:
            raise BindFailure(f"cannot listen on {host}:{port}: {exc}") from None
        self._httpd.core = core
        self._httpd.enable_rr = enable_rr
        self._httpd.enable_stream = enable_stream
        self.sweep_interval = sweep_interval
        self.stats_interval = stats_interval
        self._stop = threading.Event()
        self._serve_thread: Optional[threading.Thread] = None
        self._sweep_thread: Optional[threading.Thread] = None

    @property
    def host(self) -> str:
        return self._httpd.server_address[0]

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    def start(self) -> None:
        self._serve_thread = threading.Thread(
            target=self._httpd.serve_forever, kwargs={"poll_interval": 0.1}, daemon=True
        )
        self._serve_thread.start()
        self._sweep_thread = threading.Thread(target=self._sweep_loop, daemon=True)
        self._sweep_thread.start()
        log.info("listening on %s:%d", self.host, self.port)

    def _sweep_loop(self) -> None:
        last_stats = time.monotonic()
        while not self._stop.wait(self.sweep_interval):
            self.core.sweep_idle()
            self.core.flush_pushes()
            now = time.monotonic()
            if now - last_stats >= self.stats_interval:
                last_stats = now
                log.debug("stats: %s", self.core.get_stats())

    def stop(self) -> None:
        """Stop accepting, drop live streams, close the books."""
        self._stop.set()
        self._httpd.shutdown()
        with self._httpd.ws_lock:
            socks = list(self._httpd.ws_socks)
        for sock in socks:
            try:
                sock.close()
            except OSError:
                pass
        if self._sweep_thread is not None:
            self._sweep_thread.join(timeout=5)
        if self._serve_thread is not None:
            self._serve_thread.join(timeout=5)
        self._httpd.server_close()
        self.core.close_all()
        self.core.sink.flush()


def core_from_config(cfg: ServerConfig, source: Any, sink: Optional[EventSink] = None) -> ServerCore:
    codec = Codec(
        rr_request_overhead=cfg.rr_request_overhead,
        rr_response_overhead=cfg.rr_response_overhead,
        stream_frame_overhead=cfg.stream_frame_overhead,
        compress_threshold=cfg.compress_threshold,
    )
    if sink is None:
        sink = EventSink(cfg.event_log)
    return ServerCore(
        codec=codec,
        sink=sink,
        source=source,
        idle_timeout=cfg.idle_timeout,
        bundle_dir=cfg.bundle_dir,
    )


def server_from_config(cfg: ServerConfig, source: Any, sink: Optional[EventSink] = None) -> TaskServer:
    core = core_from_config(cfg, source, sink)
    core.prime()
    return TaskServer(
        core,
        cfg.host,
        cfg.port,
        enable_rr=cfg.enable_request_response,
        enable_stream=cfg.enable_stream,
        stats_interval=cfg.stats_interval,
    )
