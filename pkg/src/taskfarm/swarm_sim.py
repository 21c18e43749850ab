"""Swarm drivers: run a whole fleet of worker sessions against one core.

Two interchangeable drivers produce the same event stream shape:

* virtual: a discrete-event loop over simulated seconds.  The client
  generators talk straight to a ServerCore under an injected clock, so
  a thousand-session experiment finishes in milliseconds and produces
  byte-identical event logs on every run with the same config.
* real: the same client generators driven over genuine sockets against
  a TaskServer, with one thread per worker slot and a kill timer per
  session.  Used for smoke and fault coverage, not for deterministic
  numbers.

Churn model: each worker slot hosts one session at a time.  A session's
dwell time is drawn up front; when it expires the session vanishes
mid-whatever (no goodbye) and a fresh visitor takes the slot, exactly
like a page view ending.  Request-response sessions die silently, so
the server only notices at idle-timeout; stream deaths surface at once
as the connection drops.

Downtime accounting: a wait span opens when a registered session is at
a yield point holding no runnable task (blocking request travel, empty
queue backoff, waiting on a prefetch it has already run out ahead of)
and closes when compute resumes.  Checkpoint uploads do not open waits;
the session still holds its task.  In real mode only request-response
sessions report waits, since a stream client never learns the session
id the server filed it under.
"""

from __future__ import annotations

import heapq
import logging
import math
import random
import threading
import time
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .client_runtime import (
    AwaitDelivery,
    Backoff,
    Busy,
    ClientState,
    Exchange,
    StartPrefetch,
    deliver_pending,
    session_process,
)
from .domain import DwellKind, DwellModel, ExperimentConfig, TransportKind
from .kernels import get_kernel
from .metrics import EventKind, EventSink, MetricEvent
from .protocol import Codec, Hello
from .server import ServerCore, TaskServer, UnknownSession
from .task_source import BenchmarkSource
from .transports import (
    HttpClientTransport,
    StreamClientTransport,
    TransportError,
)

log = logging.getLogger(__name__)


# ------------------------------------------------------------ dwell model


def sample_dwell(model: DwellModel, u: float) -> float:
    """Draw one session lifetime from the model via inverse transform.

    u is a uniform draw in [0, 1).  Constant models ignore it.
    """
    if model.kind is DwellKind.CONSTANT:
        return model.seconds
    if not 0.0 <= u < 1.0:
        raise ValueError("u must lie in [0, 1)")
    return model.scale * (-math.log1p(-u)) ** (1.0 / model.shape)


def weibull_mean(shape: float, scale: float) -> float:
    return scale * math.gamma(1.0 + 1.0 / shape)


def weibull_median(shape: float, scale: float) -> float:
    return scale * math.log(2.0) ** (1.0 / shape)


def scale_for_mean(shape: float, mean: float) -> float:
    """Scale parameter giving the requested mean at this shape."""
    return mean / math.gamma(1.0 + 1.0 / shape)


def scale_for_median(shape: float, median: float) -> float:
    return median / math.log(2.0) ** (1.0 / shape)


def dwell_for_shape(shape: float, mean: float) -> DwellModel:
    """Weibull dwell at the given shape, normalised to a shared mean.

    Holding the mean fixed while the shape drops concentrates mass on
    short visits and stretches the tail, which is the knob the churn
    experiments turn.
    """
    return DwellModel.weibull(shape, scale_for_mean(shape, mean))


# ---------------------------------------------------------------- results


@dataclass
class RunResult:
    config: ExperimentConfig
    drained: bool
    aborted: bool
    finished_at: float
    events: list[MetricEvent]
    task_payloads: dict[str, dict[str, Any]] = field(default_factory=dict)
    result: Any = None


def _reduce_if_drained(core: ServerCore, cfg: ExperimentConfig, drained: bool) -> Any:
    if not drained:
        return None
    kernel = get_kernel(cfg.kernel_id)
    return kernel.reduce(list(core.queue.completed_payloads().values()))


def default_idle_timeout(cfg: ExperimentConfig) -> float:
    """Twice the rough wall time of one task, floored for fast configs."""
    task_seconds = cfg.task_size * cfg.compute_scale + 4.0 * cfg.net_latency
    return max(2.0 * task_seconds, 10.0 * cfg.net_latency, 1.0)


# ---------------------------------------------------------- virtual driver


class _VirtualSession:
    __slots__ = (
        "gen",
        "state",
        "sid",
        "dead",
        "retired",
        "waiting",
        "pending_ready",
        "await_resume",
        "deadline",
    )

    def __init__(self, gen: Any, state: ClientState, deadline: float) -> None:
        self.gen = gen
        self.state = state
        self.sid: Optional[str] = None
        self.dead = False
        self.retired = False
        self.waiting = False
        # (arrival virtual time, reply) for an in-flight prefetch
        self.pending_ready: Optional[tuple[float, Any]] = None
        self.await_resume = False
        self.deadline = deadline


class _VirtualSwarm:
    def __init__(self, cfg: ExperimentConfig, sink: EventSink, idle_timeout: float) -> None:
        self.cfg = cfg
        self.sink = sink
        self.now = 0.0
        self.heap: list[tuple[float, int, Callable[[], None]]] = []
        self.seq = 0
        self.idle_timeout = idle_timeout
        # Dwell draws get their own stream, decoupled from kernel seeds.
        self.dwell_rng = random.Random(cfg.rng_seed * 0x9E3779B1 + 0x5EED)
        self.source = BenchmarkSource(cfg)
        self.core = ServerCore(
            codec=Codec(compress_threshold=cfg.compress_threshold),
            sink=sink,
            clock=lambda: self.now,
            source=self.source,
            idle_timeout=idle_timeout,
        )
        self.core.prime()

    def schedule(self, t: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self.heap, (t, self.seq, fn))
        self.seq += 1

    # -- session lifecycle -------------------------------------------

    def spawn(self) -> None:
        cfg = self.cfg
        dwell = sample_dwell(cfg.dwell, self.dwell_rng.random())
        state = ClientState(policy=cfg.policy)
        sess = _VirtualSession(session_process(state), state, self.now + dwell)

        def arrive() -> None:
            if sess.dead:
                return
            self.core.serve_bundle(cfg.kernel_id)
            self.step(sess)

        self.schedule(self.now + cfg.bundle_latency, arrive)
        if math.isfinite(dwell):
            self.schedule(sess.deadline, lambda: self.kill(sess))

    def kill(self, sess: _VirtualSession) -> None:
        if sess.retired or sess.dead:
            return
        sess.dead = True
        sess.gen.close()
        if sess.sid is not None:
            if self.cfg.transport is TransportKind.STREAM:
                # connection drops with the tab; the server sees it now
                self.core.close_session(sess.sid)
            else:
                # silent death: the server finds out by idle timeout
                sid = sess.sid
                self.schedule(
                    self.now + self.idle_timeout, lambda: self.core.close_session(sid)
                )
        if not self.core.drained():
            self.spawn()

    def retire(self, sess: _VirtualSession) -> None:
        sess.retired = True
        if sess.sid is not None:
            self.core.close_session(sess.sid)

    # -- generator stepping ------------------------------------------

    def step(self, sess: _VirtualSession, send: Any = None) -> None:
        if sess.dead or sess.retired:
            return
        if (
            sess.pending_ready is not None
            and sess.pending_ready[0] <= self.now
            and sess.state.prefetch_in_flight
        ):
            _, reply = sess.pending_ready
            sess.pending_ready = None
            deliver_pending(sess.state, reply)
        try:
            effect = sess.gen.send(send)
        except StopIteration:
            self.retire(sess)
            return
        self.dispatch(sess, effect)

    def _set_wait(self, sess: _VirtualSession, idle: bool) -> None:
        if sess.sid is None:
            return
        if idle and not sess.waiting:
            sess.waiting = True
            self.sink.emit(MetricEvent(self.now, EventKind.WAIT_START, session_id=sess.sid))
        elif not idle and sess.waiting:
            sess.waiting = False
            self.sink.emit(MetricEvent(self.now, EventKind.WAIT_END, session_id=sess.sid))

    def dispatch(self, sess: _VirtualSession, effect: Any) -> None:
        cfg = self.cfg
        lat = cfg.net_latency
        if isinstance(effect, Busy):
            self._set_wait(sess, False)
            duration = effect.units * cfg.compute_scale
            self.schedule(self.now + duration, lambda: self.step(sess))
        elif isinstance(effect, Exchange):
            message = effect.message
            if isinstance(message, Hello):

                def deliver_hello() -> None:
                    if sess.dead:
                        return
                    sess.sid = self.core.handle_hello(message, cfg.transport)
                    self.schedule(self.now + lat, lambda: self.step(sess, None))

                self.schedule(self.now + lat, deliver_hello)
            else:
                self._set_wait(sess, effect.idle)

                def deliver() -> None:
                    if sess.dead:
                        return
                    try:
                        reply = self.core.handle_message(sess.sid, message)
                    except UnknownSession:
                        return
                    self.schedule(self.now + lat, lambda: self.step(sess, reply))

                self.schedule(self.now + lat, deliver)
        elif isinstance(effect, StartPrefetch):
            message = effect.message

            def deliver_prefetch() -> None:
                # The server answers even if the client died in flight;
                # a closed session, though, gets nothing dispatched.
                try:
                    reply = self.core.handle_message(sess.sid, message)
                except UnknownSession:
                    return
                arrival = self.now + lat
                sess.pending_ready = (arrival, reply)
                if sess.await_resume and not sess.dead:
                    sess.await_resume = False
                    self.schedule(arrival, lambda: self.step(sess, None))

            self.schedule(self.now + lat, deliver_prefetch)
            self.step(sess, None)
        elif isinstance(effect, AwaitDelivery):
            self._set_wait(sess, True)
            if sess.pending_ready is not None:
                arrival = max(self.now, sess.pending_ready[0])
                self.schedule(arrival, lambda: self.step(sess, None))
            elif sess.state.prefetch_in_flight:
                sess.await_resume = True
            else:
                raise AssertionError("await with no prefetch in flight")
        elif isinstance(effect, Backoff):
            self._set_wait(sess, True)
            self.schedule(self.now + effect.seconds, lambda: self.step(sess, None))
        else:
            raise AssertionError(f"unknown effect {effect!r}")

    # -- main loop ----------------------------------------------------

    def run(self) -> tuple[bool, bool]:
        for _ in range(self.cfg.worker_slots):
            self.spawn()
        aborted = False
        while self.heap:
            t, _, fn = heapq.heappop(self.heap)
            if t > self.cfg.time_limit and not self.core.drained():
                aborted = True
                break
            self.now = max(self.now, t)
            fn()
        if aborted:
            self.core.close_all()
        drained = self.core.drained()
        return drained, aborted


# ------------------------------------------------------------ real driver


class _RealSwarm:
    def __init__(self, cfg: ExperimentConfig, sink: EventSink, idle_timeout: float) -> None:
        self.cfg = cfg
        self.sink = sink
        self.source = BenchmarkSource(cfg)
        self.core = ServerCore(
            codec=Codec(compress_threshold=cfg.compress_threshold),
            sink=sink,
            clock=time.monotonic,
            source=self.source,
            idle_timeout=idle_timeout,
        )
        self.core.prime()
        self.server = TaskServer(self.core, sweep_interval=min(0.2, idle_timeout / 4))
        self.stop = threading.Event()
        self.rng_lock = threading.Lock()
        self.dwell_rng = random.Random(cfg.rng_seed * 0x9E3779B1 + 0x5EED)
        self.live_transports: set[Any] = set()
        self.live_lock = threading.Lock()

    def _emit_wait(self, sid: Optional[str], kind: EventKind) -> None:
        if sid is not None:
            self.sink.emit(MetricEvent(time.monotonic(), kind, session_id=sid))

    def _make_transport(self) -> Any:
        codec = self.core.codec
        if self.cfg.transport is TransportKind.STREAM:
            return StreamClientTransport("127.0.0.1", self.server.port, codec, connect_timeout=5)
        return HttpClientTransport("127.0.0.1", self.server.port, codec, timeout=10)

    def _fetch_bundle(self) -> None:
        url = f"http://127.0.0.1:{self.server.port}/bundle/{self.cfg.kernel_id}"
        with urllib.request.urlopen(url, timeout=5) as resp:
            resp.read()

    def _one_session(self, dwell: float) -> None:
        cfg = self.cfg
        try:
            self._fetch_bundle()
            transport = self._make_transport()
        except (OSError, TransportError):
            return
        with self.live_lock:
            self.live_transports.add(transport)
        timer: Optional[threading.Timer] = None
        if math.isfinite(dwell):
            timer = threading.Timer(dwell, transport.kill)
            timer.daemon = True
            timer.start()
        state = ClientState(policy=cfg.policy)
        gen = session_process(state)
        sid: Optional[str] = None
        waiting = False
        pending = None

        def set_wait(idle: bool) -> None:
            nonlocal waiting
            if idle and not waiting:
                waiting = True
                self._emit_wait(sid, EventKind.WAIT_START)
            elif not idle and waiting:
                waiting = False
                self._emit_wait(sid, EventKind.WAIT_END)

        retired = False
        try:
            effect = next(gen)
            while True:
                if pending is not None and pending.poll():
                    deliver_pending(state, pending.wait(0))
                    pending = None
                if isinstance(effect, Busy):
                    set_wait(False)
                    if cfg.compute_scale > 0:
                        self.stop.wait(effect.units * cfg.compute_scale)
                    effect = gen.send(None)
                elif isinstance(effect, Exchange):
                    if isinstance(effect.message, Hello):
                        sid = transport.hello(effect.message)
                        effect = gen.send(None)
                    else:
                        set_wait(effect.idle)
                        reply = transport.exchange(effect.message, timeout=30)
                        effect = gen.send(reply)
                elif isinstance(effect, StartPrefetch):
                    pending = transport.start_request(effect.message)
                    effect = gen.send(None)
                elif isinstance(effect, AwaitDelivery):
                    set_wait(True)
                    assert pending is not None
                    deliver_pending(state, pending.wait(30))
                    pending = None
                    effect = gen.send(None)
                elif isinstance(effect, Backoff):
                    set_wait(True)
                    self.stop.wait(effect.seconds)
                    effect = gen.send(None)
                else:
                    raise AssertionError(f"unknown effect {effect!r}")
        except StopIteration:
            retired = True
        except (TransportError, OSError) as exc:
            log.debug("session died: %s", exc)
        finally:
            if timer is not None:
                timer.cancel()
            gen.close()
            with self.live_lock:
                self.live_transports.discard(transport)
            if retired:
                transport.close()
                # Request-response leaves no disconnect signal; we run
                # both halves, so file the retirement directly.
                if sid is not None:
                    self.core.close_session(sid)
            else:
                transport.kill()

    def _slot_loop(self) -> None:
        while not self.stop.is_set() and not self.core.drained():
            with self.rng_lock:
                u = self.dwell_rng.random()
            self._one_session(sample_dwell(self.cfg.dwell, u))

    def run(self) -> tuple[bool, bool]:
        self.server.start()
        threads = [
            threading.Thread(target=self._slot_loop, daemon=True)
            for _ in range(self.cfg.worker_slots)
        ]
        started = time.monotonic()
        for thread in threads:
            thread.start()
        aborted = False
        while not self.core.drained():
            if time.monotonic() - started > self.cfg.time_limit:
                aborted = True
                break
            time.sleep(0.02)
        self.stop.set()
        with self.live_lock:
            for transport in list(self.live_transports):
                transport.kill()
        for thread in threads:
            thread.join(timeout=10)
        self.server.stop()
        return self.core.drained(), aborted


# ---------------------------------------------------------------- entry


def run_swarm(
    cfg: ExperimentConfig,
    *,
    real: bool = False,
    sink: Optional[EventSink] = None,
    idle_timeout: Optional[float] = None,
) -> RunResult:
    """Run one experiment to drain (or the time limit) and collect events.

    Virtual mode is the default and is fully deterministic for a given
    config.  Real mode stands the same experiment up on sockets.
    """
    if sink is None:
        sink = EventSink()
    if idle_timeout is None:
        idle_timeout = default_idle_timeout(cfg)
    driver: Any
    if real:
        driver = _RealSwarm(cfg, sink, idle_timeout)
    else:
        driver = _VirtualSwarm(cfg, sink, idle_timeout)
    drained, aborted = driver.run()
    core = driver.core
    result = _reduce_if_drained(core, cfg, drained)
    finished = driver.now if not real else time.monotonic()
    return RunResult(
        config=cfg,
        drained=drained,
        aborted=aborted,
        finished_at=finished,
        events=sink.events(),
        task_payloads=core.queue.completed_payloads(),
        result=result,
    )
