"""Client-side transports and the shared stream framing layer.

Two ways to reach the server, carrying the same messages:

* request-response: plain HTTP/1.1 POSTs over a kept-alive socket, one
  round trip per message, session identity in a ``?session=`` query
  parameter handed out at hello time;
* stream: a single persistent bidirectional connection (RFC 6455
  framing) where each message rides in one binary frame and replies
  come back in request order.

Both transports count the bytes they actually put on the wire, which is
what the overhead comparison in the metrics is checked against.  The
HTTP client deliberately sends a browser-sized header block rather than
a minimal one; a stripped-down header set would make the
request-response transport look far cheaper than it is in the field.

The frame reader/writer pair here is also used by the server side of
the stream endpoint, with masking roles swapped.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import socket
import struct
import threading
from collections import deque
from typing import BinaryIO, Optional

from .protocol import Codec, Final, Hello, Message, Partial, RequestTasks


class TransportError(Exception):
    """Base failure for anything that goes wrong on the wire."""


class ConnectionClosed(TransportError):
    """Peer went away, cleanly or not."""


class HandshakeFailure(TransportError):
    """Stream upgrade was refused or malformed."""


# RFC 6455 section 1.3: fixed GUID appended to the client key.
WS_ACCEPT_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA

# Route each client message type to its request-response endpoint.
MESSAGE_PATHS = {
    Hello: "/api/hello",
    RequestTasks: "/api/tasks",
    Partial: "/api/partial",
    Final: "/api/final",
}


def ws_accept_value(key: str) -> str:
    """Compute the Sec-WebSocket-Accept header for a client key."""
    digest = hashlib.sha1((key + WS_ACCEPT_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def encode_frame(opcode: int, payload: bytes, mask: bool) -> bytes:
    """Build one complete frame, FIN always set (no fragmentation)."""
    header = bytearray([0x80 | (opcode & 0x0F)])
    length = len(payload)
    mask_bit = 0x80 if mask else 0x00
    if length < 126:
        header.append(mask_bit | length)
    elif length < 1 << 16:
        header.append(mask_bit | 126)
        header += struct.pack(">H", length)
    else:
        header.append(mask_bit | 127)
        header += struct.pack(">Q", length)
    if mask:
        key = os.urandom(4)
        header += key
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return bytes(header) + payload


def read_exact(rfile: BinaryIO, count: int) -> bytes:
    try:
        data = rfile.read(count)
    except (OSError, ValueError):
        # a concurrent teardown closes the file object under the reader
        raise ConnectionClosed("stream ended mid-frame") from None
    if data is None or len(data) < count:
        raise ConnectionClosed("stream ended mid-frame")
    return data


def read_frame(rfile: BinaryIO) -> tuple[int, bytes]:
    """Read one frame, unmasking if needed.  Returns (opcode, payload).

    Fragmented messages are not supported; every sender in this system
    emits single-frame messages well under the size where splitting
    would matter.
    """
    first, second = read_exact(rfile, 2)
    if not first & 0x80:
        raise TransportError("fragmented frames are not supported")
    opcode = first & 0x0F
    masked = bool(second & 0x80)
    length = second & 0x7F
    if length == 126:
        (length,) = struct.unpack(">H", read_exact(rfile, 2))
    elif length == 127:
        (length,) = struct.unpack(">Q", read_exact(rfile, 8))
    if masked:
        key = read_exact(rfile, 4)
        body = read_exact(rfile, length)
        body = bytes(b ^ key[i % 4] for i, b in enumerate(body))
    else:
        body = read_exact(rfile, length)
    return opcode, body


class StreamPeer:
    """One end of an upgraded stream connection.

    Wraps the socket after the handshake and speaks whole messages.
    Message payloads carry a one-byte flag in front of the encoded body:
    0 for raw, 1 for compressed, mirroring the codec's framing flag.
    Thread-safe for writes; reads must stay on a single thread.
    """

    def __init__(
        self,
        sock: socket.socket,
        codec: Codec,
        mask_outgoing: bool,
        rfile: Optional[BinaryIO] = None,
    ):
        self.sock = sock
        self.codec = codec
        self.mask_outgoing = mask_outgoing
        # Reuse the caller's buffered reader when one exists; frames may
        # already be sitting in its buffer right after the handshake.
        self.rfile = rfile if rfile is not None else sock.makefile("rb")
        self._send_lock = threading.Lock()
        self.bytes_sent = 0
        self.bytes_received = 0
        self._closed = False

    def send_message(self, message: Message) -> None:
        body, compressed = self.codec.frame(message)
        payload = bytes([1 if compressed else 0]) + body
        frame = encode_frame(OP_BINARY, payload, self.mask_outgoing)
        with self._send_lock:
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from None
            self.bytes_sent += len(frame)

    def recv_message(self) -> Message:
        """Block for the next data frame, servicing pings in passing."""
        while True:
            try:
                opcode, payload = read_frame(self.rfile)
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from None
            if opcode == OP_PING:
                self._send_control(OP_PONG, payload)
                continue
            if opcode == OP_PONG:
                continue
            if opcode == OP_CLOSE:
                self._send_control(OP_CLOSE, b"")
                raise ConnectionClosed("peer sent close")
            if opcode not in (OP_BINARY, OP_TEXT):
                raise TransportError(f"unexpected opcode {opcode:#x}")
            if not payload:
                raise TransportError("empty message frame")
            self.bytes_received += _frame_size_on_wire(payload, masked=not self.mask_outgoing)
            return self.codec.unframe(payload[1:], compressed=payload[0] == 1)

    def _send_control(self, opcode: int, payload: bytes) -> None:
        frame = encode_frame(opcode, payload, self.mask_outgoing)
        with self._send_lock:
            try:
                self.sock.sendall(frame)
            except OSError:
                pass

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._send_control(OP_CLOSE, b"")
        self._teardown()

    def kill(self) -> None:
        """Drop the connection with no farewell, like a dying browser tab."""
        if self._closed:
            return
        self._closed = True
        self._teardown()

    def _teardown(self) -> None:
        # shutdown, not just close: an open makefile handle keeps the
        # descriptor alive, so close alone would never send a FIN.
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


def _frame_size_on_wire(payload: bytes, masked: bool) -> int:
    """Reconstruct how many bytes the frame carrying payload occupied."""
    length = len(payload)
    if length < 126:
        header = 2
    elif length < 1 << 16:
        header = 4
    else:
        header = 10
    if masked:
        header += 4
    return header + length


def client_handshake(sock: socket.socket, host: str, port: int, path: str = "/ws") -> None:
    """Perform the upgrade request and validate the server's accept key."""
    key = base64.b64encode(os.urandom(16)).decode("ascii")
    request = (
        f"GET {path} HTTP/1.1\r\n"
        f"Host: {host}:{port}\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Key: {key}\r\n"
        "Sec-WebSocket-Version: 13\r\n"
        f"Origin: http://{host}:{port}\r\n"
        "\r\n"
    )
    sock.sendall(request.encode("ascii"))
    rfile = sock.makefile("rb")
    status = rfile.readline(4096)
    if not status.startswith(b"HTTP/1.1 101"):
        raise HandshakeFailure(f"upgrade refused: {status.strip().decode('latin-1')}")
    accept = None
    while True:
        line = rfile.readline(4096)
        if line in (b"\r\n", b"\n", b""):
            break
        name, _, value = line.decode("latin-1").partition(":")
        if name.strip().lower() == "sec-websocket-accept":
            accept = value.strip()
    if accept != ws_accept_value(key):
        raise HandshakeFailure("bad Sec-WebSocket-Accept value")


def server_handshake_response(key: str) -> bytes:
    """Build the 101 response block for an incoming upgrade request."""
    return (
        "HTTP/1.1 101 Switching Protocols\r\n"
        "Upgrade: websocket\r\n"
        "Connection: Upgrade\r\n"
        f"Sec-WebSocket-Accept: {ws_accept_value(key)}\r\n"
        "\r\n"
    ).encode("ascii")


class PendingReply:
    """Handle for a request whose reply arrives later."""

    def __init__(self) -> None:
        self._event = threading.Event()
        self._result: Optional[Message] = None
        self._error: Optional[Exception] = None

    def fulfil(self, message: Message) -> None:
        self._result = message
        self._event.set()

    def fail(self, error: Exception) -> None:
        self._error = error
        self._event.set()

    def poll(self) -> bool:
        return self._event.is_set()

    def wait(self, timeout: Optional[float] = None) -> Message:
        if not self._event.wait(timeout):
            raise TransportError("timed out waiting for reply")
        if self._error is not None:
            raise self._error
        assert self._result is not None
        return self._result


class StreamClientTransport:
    """Persistent-connection client: one socket, replies in FIFO order.

    A background reader pairs incoming messages with the oldest
    outstanding request, so a prefetch reply can land while the caller
    is busy computing, exactly like a browser socket delivering into
    the event queue.
    """

    def __init__(self, host: str, port: int, codec: Codec, connect_timeout: float = 10.0):
        self.host = host
        self.port = port
        sock = socket.create_connection((host, port), timeout=connect_timeout)
        sock.settimeout(None)
        try:
            client_handshake(sock, host, port)
        except Exception:
            sock.close()
            raise
        self.peer = StreamPeer(sock, codec, mask_outgoing=True)
        self._slots: deque[PendingReply] = deque()
        self._slot_lock = threading.Lock()
        self._dead: Optional[Exception] = None
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    @property
    def bytes_sent(self) -> int:
        return self.peer.bytes_sent

    @property
    def bytes_received(self) -> int:
        return self.peer.bytes_received

    def _read_loop(self) -> None:
        while True:
            try:
                message = self.peer.recv_message()
            except Exception as exc:
                with self._slot_lock:
                    self._dead = exc if isinstance(exc, TransportError) else ConnectionClosed(str(exc))
                    waiting = list(self._slots)
                    self._slots.clear()
                for slot in waiting:
                    slot.fail(self._dead)
                return
            with self._slot_lock:
                slot = self._slots.popleft() if self._slots else None
            if slot is None:
                # Reply with no outstanding request: protocol breach.
                with self._slot_lock:
                    self._dead = TransportError("unsolicited message from server")
                self.peer.close()
                return
            slot.fulfil(message)

    def _send_with_slot(self, message: Message) -> PendingReply:
        slot = PendingReply()
        with self._slot_lock:
            if self._dead is not None:
                raise self._dead
            self._slots.append(slot)
        try:
            self.peer.send_message(message)
        except Exception:
            with self._slot_lock:
                if slot in self._slots:
                    self._slots.remove(slot)
            raise
        return slot

    def hello(self, message: Hello) -> Optional[str]:
        """Announce the session.  Identity is the connection itself."""
        self.peer.send_message(message)
        return None

    def exchange(self, message: Message, timeout: Optional[float] = None) -> Message:
        return self._send_with_slot(message).wait(timeout)

    def start_request(self, message: Message) -> PendingReply:
        return self._send_with_slot(message)

    def close(self) -> None:
        self.peer.close()

    def kill(self) -> None:
        self.peer.kill()


# Header block sized like a real browser's, on purpose: the overhead
# model assumes a typical request, not a hand-minimised one.
_BROWSER_USER_AGENT = (
    "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 "
    "(KHTML, like Gecko) Chrome/113.0.0.0 Safari/537.36"
)


class _HttpConnection:
    """Minimal keep-alive HTTP/1.1 connection with exact byte counts."""

    def __init__(self, host: str, port: int, timeout: float):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.sock: Optional[socket.socket] = None
        self.rfile: Optional[BinaryIO] = None
        self.bytes_sent = 0
        self.bytes_received = 0
        self.dead = False

    def _connect(self) -> None:
        # Once killed, stay killed: request() reconnects dropped
        # keep-alive sockets, and a deliberate teardown must not be
        # papered over by that retry.
        if self.dead:
            raise ConnectionClosed("connection killed")
        self.sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        self.rfile = self.sock.makefile("rb")

    def _drop(self) -> None:
        # Swap out under whoever else might be dropping at the same
        # moment (a kill timer, say); only one caller sees the socket.
        sock, self.sock, self.rfile = self.sock, None, None
        if sock is not None:
            # shutdown first; a lingering makefile handle would
            # otherwise keep the descriptor open and delay the FIN.
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass

    def request(self, path: str, body: bytes, compressed: bool) -> tuple[int, dict[str, str], bytes]:
        """POST body to path; returns (status, headers, body).

        Retries once on a fresh connection if a kept-alive socket turns
        out to have been closed under us, which is normal keep-alive
        behaviour and not an error.
        """
        if self.dead:
            raise ConnectionClosed("connection killed")
        fresh = self.sock is None
        if fresh:
            self._connect()
        try:
            return self._roundtrip(path, body, compressed)
        except ConnectionClosed:
            self._drop()
            if fresh:
                raise
            self._connect()
            return self._roundtrip(path, body, compressed)

    def _roundtrip(self, path: str, body: bytes, compressed: bool) -> tuple[int, dict[str, str], bytes]:
        # Grab both handles up front; a concurrent kill nulls the
        # attributes, and that must surface as a closed connection.
        sock, rfile = self.sock, self.rfile
        if sock is None or rfile is None:
            raise ConnectionClosed("connection dropped")
        origin = f"http://{self.host}:{self.port}"
        head = [
            f"POST {path} HTTP/1.1",
            f"Host: {self.host}:{self.port}",
            "Connection: keep-alive",
            f"Content-Length: {len(body)}",
            "Cache-Control: no-cache",
            "Pragma: no-cache",
            f"User-Agent: {_BROWSER_USER_AGENT}",
            "Content-Type: application/json",
            "Accept: */*",
            f"Origin: {origin}",
            f"Referer: {origin}/",
            "Accept-Encoding: gzip, deflate",
            "Accept-Language: en-GB,en-US;q=0.9,en;q=0.8",
        ]
        if compressed:
            head.append("Content-Encoding: deflate")
        raw = ("\r\n".join(head) + "\r\n\r\n").encode("latin-1") + body
        try:
            sock.sendall(raw)
        except OSError as exc:
            raise ConnectionClosed(str(exc)) from None
        self.bytes_sent += len(raw)

        status_line = self._read_line(rfile)
        parts = status_line.split(" ", 2)
        if len(parts) < 2 or not parts[0].startswith("HTTP/1."):
            raise TransportError(f"garbled status line: {status_line!r}")
        status = int(parts[1])
        headers: dict[str, str] = {}
        while True:
            line = self._read_line(rfile)
            if not line:
                break
            name, _, value = line.partition(":")
            headers[name.strip().lower()] = value.strip()
        length = int(headers.get("content-length", "0"))
        reply_body = read_exact(rfile, length) if length else b""
        self.bytes_received += length
        if headers.get("connection", "").lower() == "close":
            self._drop()
        return status, headers, reply_body

    def _read_line(self, rfile: BinaryIO) -> str:
        try:
            line = rfile.readline(65536)
        except (OSError, ValueError):
            raise ConnectionClosed("connection dropped mid-read") from None
        if line == b"":
            raise ConnectionClosed("server closed the connection")
        self.bytes_received += len(line)
        return line.decode("latin-1").rstrip("\r\n")

    def close(self) -> None:
        self.dead = True
        self._drop()


class HttpClientTransport:
    """Request-response client: one POST per message, token in the URL.

    Blocking exchanges reuse a single kept-alive connection.  Prefetch
    requests run on a second connection from a helper thread, the same
    way a browser overlaps an async request with ongoing work.
    """

    def __init__(self, host: str, port: int, codec: Codec, timeout: float = 10.0):
        self.codec = codec
        self.timeout = timeout
        self._main = _HttpConnection(host, port, timeout)
        self._side = _HttpConnection(host, port, timeout)
        self._count_lock = threading.Lock()
        self.session_token: Optional[str] = None

    @property
    def bytes_sent(self) -> int:
        with self._count_lock:
            return self._main.bytes_sent + self._side.bytes_sent

    @property
    def bytes_received(self) -> int:
        with self._count_lock:
            return self._main.bytes_received + self._side.bytes_received

    def _path_for(self, message: Message) -> str:
        try:
            path = MESSAGE_PATHS[type(message)]
        except KeyError:
            raise TransportError(f"no endpoint for {type(message).__name__}") from None
        if self.session_token is not None:
            path += f"?session={self.session_token}"
        return path

    def hello(self, message: Hello) -> Optional[str]:
        """Open the session; the reply envelope carries our token."""
        body, compressed = self.codec.frame(message)
        status, _, reply = self._main.request("/api/hello", body, compressed)
        if status != 200:
            raise TransportError(f"hello rejected with status {status}")
        try:
            envelope = json.loads(reply.decode("utf-8"))
            token = envelope["session"]
        except (ValueError, KeyError, UnicodeDecodeError):
            raise TransportError("hello reply had no session token") from None
        if not isinstance(token, str) or not token:
            raise TransportError("hello reply had no session token")
        self.session_token = token
        return token

    def _post(self, conn: _HttpConnection, message: Message) -> Message:
        body, compressed = self.codec.frame(message)
        status, headers, reply = conn.request(self._path_for(message), body, compressed)
        if status != 200:
            raise TransportError(
                f"status {status} from server: {reply[:200].decode('utf-8', 'replace')}"
            )
        reply_compressed = headers.get("content-encoding", "").lower() == "deflate"
        return self.codec.unframe(reply, compressed=reply_compressed)

    def exchange(self, message: Message, timeout: Optional[float] = None) -> Message:
        return self._post(self._main, message)

    def start_request(self, message: Message) -> PendingReply:
        slot = PendingReply()

        def run() -> None:
            try:
                slot.fulfil(self._post(self._side, message))
            except Exception as exc:
                slot.fail(exc)

        threading.Thread(target=run, daemon=True).start()
        return slot

    def close(self) -> None:
        self._main.close()
        self._side.close()

    def kill(self) -> None:
        """Sever both connections immediately; identical to close for
        this transport, present so callers can treat transports alike."""
        self.close()
