"""System-level guarantees, one test and one printed verdict line each.

These are the properties the package promises as a whole: no task is ever
lost to churn, split work reduces to the single-shot answer bit for bit,
checkpoints resume without recomputation, the dwell sampler is a real
Weibull, the published trend experiments come out in the right direction,
stream framing beats per-request overhead, and a storm of rude
disconnects cannot take the server down.

The trend tests replay the checked-in sweep configs under configs/ so the
numbers printed here are the same ones the command line produces.  Trend
directions are asserted; exact magnitudes are printed for the record
because they depend on the chosen desk-scale workload.
"""

import collections
import copy
import json
import math
import random
import socket
import time
import urllib.request
from pathlib import Path

import pytest
from scipy import stats as scipy_stats

from taskfarm.client_runtime import Busy, ClientState, Exchange, session_process
from taskfarm.config import experiment_config, read_config, sweep_matrix
from taskfarm.domain import (
    DwellKind,
    DwellModel,
    ExperimentConfig,
    PolicyConfig,
    PolicyMode,
    ServerConfig,
    TransportKind,
)
from taskfarm.kernels import get_kernel, mc_error_bound
from taskfarm.metrics import EventKind, experiment_summary
from taskfarm.protocol import (
    Ack,
    AckStatus,
    Codec,
    Drained,
    Final,
    Hello,
    Partial,
    RequestTasks,
    TaskAssignment,
    Tasks,
)
from taskfarm.rng import uniform
from taskfarm.server import ServerCore, server_from_config
from taskfarm.swarm_sim import dwell_for_shape, run_swarm, sample_dwell
from taskfarm.task_source import BenchmarkSource
from taskfarm.transports import (
    HttpClientTransport,
    StreamClientTransport,
    TransportError,
    client_handshake,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _verdict(capsys, ok: bool, name: str, detail: str) -> None:
    line = f"[{name}] {'PASS' if ok else 'FAIL'}: {detail}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def _sweep_summaries(config_name: str):
    cells = sweep_matrix(read_config(str(CONFIGS / config_name)))
    out = []
    for cell in cells:
        run = run_swarm(cell.config)
        out.append(
            experiment_summary(
                run.events,
                label=cell.label,
                tasks_total=cell.config.total_tasks,
                drained=run.drained,
                meta=cell.meta,
            )
        )
    return out


def _mean_by(summaries, key, value):
    groups = collections.defaultdict(list)
    for s in summaries:
        groups[s.meta[key]].append(value(s))
    return {k: sum(v) / len(v) for k, v in groups.items()}


# ------------------------------------------------------- conservation


def test_churn_never_loses_tasks(capsys):
    worst = 0.0
    failures = []
    for seed in range(50):
        cfg = ExperimentConfig(
            kernel_id="monte_carlo_pi",
            total_tasks=100,
            task_size=100,
            worker_slots=8,
            compute_scale=1e-3,
            net_latency=0.01,
            bundle_latency=0.05,
            rng_seed=seed,
            dwell=dwell_for_shape(0.5, 1.0),
        )
        run = run_swarm(cfg)
        counts = collections.Counter(
            e.task_id
            for e in run.events
            if e.kind is EventKind.FINAL_RECEIVED and e.status == "accepted"
        )
        worst = max(worst, run.finished_at)
        if not (
            run.drained
            and len(counts) == 100
            and all(v == 1 for v in counts.values())
            and run.finished_at < 60.0
        ):
            failures.append(seed)
    _verdict(
        capsys,
        not failures,
        "churn conservation",
        f"50 seeds, 100 tasks, 8 slots, k=0.5: every run drained with each task "
        f"accepted exactly once; slowest finished at {worst:.1f} virtual s"
        + (f"; failing seeds {failures}" if failures else ""),
    )


# ------------------------------------------------- kernel equivalence


def test_split_work_reduces_to_single_shot(capsys):
    kernel = get_kernel("mandelbrot")
    params = {"width": 40, "height": 30, "max_iter": 1000}

    def grid_cfg(n_tasks: int) -> ExperimentConfig:
        return ExperimentConfig(
            kernel_id="mandelbrot",
            total_tasks=n_tasks,
            task_size=1200 // n_tasks,
            worker_slots=5,
            compute_scale=1e-3,
            net_latency=0.01,
            bundle_latency=0.05,
            rng_seed=n_tasks * 7 + 1,
            dwell=dwell_for_shape(0.5, 1.5),
            kernel_params=params,
        )

    payload = kernel.make_tasks(grid_cfg(1))[0][1]
    kernel.run_chunk(payload, kernel.total_units(payload))
    oracle = kernel.reduce([payload])

    mismatched = [
        n for n in (1, 2, 7, 30) if run_swarm(grid_cfg(n)).result != oracle
    ]

    mc_cfg = experiment_config(read_config(str(CONFIGS / "default.ini")))
    mc_run = run_swarm(mc_cfg)
    estimate = mc_run.result
    err = abs(estimate - math.pi)
    sigma = mc_error_bound(mc_cfg.total_tasks * mc_cfg.task_size) / 3.0

    ok = not mismatched and mc_run.drained and err < 0.01
    _verdict(
        capsys,
        ok,
        "kernel equivalence",
        f"grid splits 1/2/7/30 under churn all bit-identical to single shot"
        + (f" except {mismatched}" if mismatched else "")
        + f"; pi estimate {estimate!r} from 72e6 points, error {err:.2e} "
        f"(binomial sigma {sigma:.1e})",
    )


# ------------------------------------------------- checkpoint resume


CK_POLICY = PolicyConfig(mode=PolicyMode.SYNC_SINGLE, checkpoint_every=100)


def _single_task_core() -> ServerCore:
    cfg = ExperimentConfig(
        kernel_id="monte_carlo_pi",
        total_tasks=1,
        task_size=400,
        dwell=DwellModel(kind=DwellKind.CONSTANT),
    )
    core = ServerCore(source=BenchmarkSource(cfg))
    core.prime()
    return core


def _drive_session(core: ServerCore, die_after_partials=None):
    """Run one worker against the core; optionally vanish right after the
    n-th checkpoint is merged server-side.  Returns (busy_units, final)."""
    state = ClientState(policy=CK_POLICY)
    gen = session_process(state)
    sid, busy, partials, final_payload = None, 0, 0, None
    effect = gen.send(None)
    try:
        while True:
            if isinstance(effect, Busy):
                busy += effect.units
                effect = gen.send(None)
            elif isinstance(effect, Exchange):
                msg = effect.message
                if isinstance(msg, Hello):
                    sid = core.handle_hello(msg, TransportKind.REQUEST_RESPONSE)
                    effect = gen.send(None)
                    continue
                if isinstance(msg, Final):
                    final_payload = msg.payload
                reply = core.handle_message(sid, msg)
                if isinstance(msg, Partial):
                    partials += 1
                    if die_after_partials is not None and partials >= die_after_partials:
                        return busy, None
                effect = gen.send(reply)
            else:
                effect = gen.send(None)
    except StopIteration:
        pass
    finally:
        gen.close()
        if sid is not None:
            core.close_session(sid)
    return busy, final_payload


def test_checkpoint_resume_skips_finished_work(capsys):
    core = _single_task_core()
    full_busy, oracle = _drive_session(core)
    assert full_busy == 400 and oracle is not None

    problems = []
    resumed_units = []
    for boundary in (1, 2, 3):
        core = _single_task_core()
        _drive_session(core, die_after_partials=boundary)
        busy, final = _drive_session(core)
        resumed_units.append(busy)
        if final != oracle:
            problems.append(f"boundary {boundary}: payload differs")
        if busy != 400 - 100 * boundary:
            problems.append(f"boundary {boundary}: reran {busy} units")
        if not core.drained():
            problems.append(f"boundary {boundary}: not drained")
    _verdict(
        capsys,
        not problems,
        "checkpoint resume",
        "killed after checkpoints 1/2/3 of a 400-unit task: resumed sessions "
        f"ran {resumed_units} units (expected [300, 200, 100]) and every Final "
        "matched the uninterrupted payload"
        + (f"; {problems}" if problems else ""),
    )


# --------------------------------------------------- dwell distribution


def test_dwell_sampler_is_weibull(capsys):
    lam, seed, n = 30.0, 2026, 10_000
    lines, ok = [], True
    for shape in (0.5, 0.75, 1.0):
        model = DwellModel(kind=DwellKind.WEIBULL, shape=shape, scale=lam)
        samples = [sample_dwell(model, uniform(seed, i)) for i in range(n)]
        p = scipy_stats.kstest(samples, "weibull_min", args=(shape, 0, lam)).pvalue
        median = sorted(samples)[n // 2]
        target = lam * math.log(2) ** (1.0 / shape)
        rel = abs(median - target) / target
        ok = ok and p > 0.01 and rel < 0.02
        lines.append(f"k={shape}: KS p={p:.3f}, median off by {rel:.2%}")
    _verdict(
        capsys,
        ok,
        "weibull sampler",
        f"{n} samples per shape; " + "; ".join(lines),
    )


# ------------------------------------------------- value-session trend


def test_short_sessions_return_less_value(capsys):
    summaries = _sweep_summaries("value_shapes.ini")
    by_seed = collections.defaultdict(dict)
    for s in summaries:
        by_seed[s.meta["seed"]][float(s.meta["shape"])] = s.sessions.value_fraction
    order_holds = all(
        per[1.0] > per[0.75] > per[0.5] for per in by_seed.values()
    )
    means = _mean_by(summaries, "shape", lambda s: s.sessions.value_fraction)
    under_half = all(v < 0.5 for v in means.values())
    pct = {k: f"{v:.1%}" for k, v in sorted(means.items(), reverse=True)}
    _verdict(
        capsys,
        order_holds and under_half,
        "value-session ordering",
        f"mean value fractions by shape {pct} (5 seeds, shared mean dwell "
        "4.2 s vs 3.75 s task): strictly decreasing for every seed, all below half",
    )


# --------------------------------------------------- granularity trend


def test_finer_tasks_trade_runtime_for_resilience(capsys):
    summaries = _sweep_summaries("granularity.ini")
    value = _mean_by(summaries, "task_size", lambda s: s.sessions.value_sessions)
    down = _mean_by(summaries, "task_size", lambda s: s.downtime)
    runtime = _mean_by(summaries, "task_size", lambda s: s.runtime)
    shrinking = sorted(value, key=int, reverse=True)  # largest first

    value_mono = all(
        value[a] <= value[b] for a, b in zip(shrinking, shrinking[1:])
    )
    down_mono = all(down[a] <= down[b] for a, b in zip(shrinking, shrinking[1:]))
    runtimes = [runtime[k] for k in shrinking]
    best = runtimes.index(min(runtimes))
    interior = 0 < best < len(runtimes) - 1
    saving = (runtimes[0] - runtimes[best]) / runtimes[0]

    _verdict(
        capsys,
        value_mono and down_mono and interior,
        "granularity trends",
        f"sizes {'/'.join(shrinking)} (40x span, total work fixed): value sessions "
        f"{[round(value[k], 1) for k in shrinking]} non-decreasing {value_mono}, "
        f"downtime {[round(down[k]) for k in shrinking]} s non-decreasing {down_mono}, "
        f"runtime {[round(r, 1) for r in runtimes]} s has interior best at size "
        f"{shrinking[best]} ({saving:.1%} under the coarsest)",
    )


# ------------------------------------------------------- policy trend


def test_policies_trade_speed_for_server_load(capsys):
    summaries = _sweep_summaries("policies.ini")
    by_policy = {s.meta["policy"]: s for s in summaries}
    single = by_policy["single"]
    ck = by_policy["checkpointed"]
    rate = {name: s.requests_per_second for name, s in by_policy.items()}

    ck_slower = ck.runtime > single.runtime
    small_busier = rate["prefetch_small"] > rate["single"]
    large_busier = rate["prefetch_large"] > rate["single"]
    _verdict(
        capsys,
        ck_slower and small_busier and large_busier,
        "policy comparison",
        f"checkpointing every quarter task: {ck.runtime:.1f} s vs {single.runtime:.1f} s "
        f"plain ({ck.runtime / single.runtime - 1:+.1%}); request rate vs plain: "
        f"batch-5 x{rate['prefetch_small'] / rate['single']:.2f}, "
        f"batch-10 x{rate['prefetch_large'] / rate['single']:.2f}",
    )


# --------------------------------------------------- transport economy


def test_stream_framing_beats_request_overhead(capsys):
    codec = Codec()
    mc_payload = {"iterations": 100000, "seed": 1, "done": 0, "inside": 0}
    grid = get_kernel("mandelbrot").make_tasks(
        ExperimentConfig(kernel_id="mandelbrot", total_tasks=2)
    )[0][1]
    bench = [
        Hello({}),
        RequestTasks(5),
        Tasks([TaskAssignment("t1", "monte_carlo_pi", mc_payload)]),
        Tasks([TaskAssignment("mb", "mandelbrot", grid)]),
        Partial("t1", 1, 50000, mc_payload),
        Final("t1", 1, mc_payload),
        Ack("t1", AckStatus.ACCEPTED),
        Drained(),
    ]
    costly = [
        type(m).__name__
        for m in bench
        if codec.wire_cost(m, TransportKind.STREAM)
        >= codec.wire_cost(m, TransportKind.REQUEST_RESPONSE)
    ]

    rel = {}
    for transport in TransportKind:
        cfg = ExperimentConfig(
            kernel_id="monte_carlo_pi",
            total_tasks=8,
            task_size=2000,
            worker_slots=3,
            compute_scale=1e-5,
            net_latency=0.005,
            bundle_latency=0.02,
            rng_seed=3,
            transport=transport,
            dwell=DwellModel(kind=DwellKind.CONSTANT),
        )
        model = experiment_summary(run_swarm(cfg).events)
        real = experiment_summary(run_swarm(cfg, real=True).events)
        model_bytes = model.bytes_in + model.bytes_out
        real_bytes = real.bytes_in + real.bytes_out
        rel[transport.value] = abs(real_bytes - model_bytes) / model_bytes
    within = all(r < 0.10 for r in rel.values())

    _verdict(
        capsys,
        not costly and within,
        "transport overhead",
        f"stream framing cheaper for all {len(bench)} benchmark messages"
        + (f" except {costly}" if costly else "")
        + "; socket bytes vs cost model off by "
        + ", ".join(f"{k} {v:.1%}" for k, v in rel.items()),
    )


# ------------------------------------------------------ fault injection


def test_server_survives_disconnect_storm(capsys):
    cfg = ExperimentConfig(
        kernel_id="monte_carlo_pi",
        total_tasks=40,
        task_size=50,
        dwell=DwellModel(kind=DwellKind.CONSTANT),
    )
    server = server_from_config(
        ServerConfig(port=0, idle_timeout=2.0), BenchmarkSource(cfg)
    )
    server.start()
    host, port, codec = server.host, server.port, server.core.codec
    rng = random.Random(99)

    def raw_close(payload: bytes = b"") -> None:
        sock = socket.create_connection((host, port), timeout=5)
        if payload:
            sock.sendall(payload)
        sock.close()

    def rr_die(steps: int) -> None:
        t = HttpClientTransport(host, port, codec)
        try:
            t.hello(Hello({}))
            if steps > 1:
                t.exchange(RequestTasks(1), timeout=5)
        except TransportError:
            pass
        t.kill()

    def ws_die(steps: int) -> None:
        if steps == 0:
            sock = socket.create_connection((host, port), timeout=5)
            try:
                client_handshake(sock, host, port)
                sock.sendall(b"\x81")  # frame cut off after the first header byte
            finally:
                sock.close()
            return
        t = StreamClientTransport(host, port, codec)
        try:
            t.hello(Hello({}))
            if steps > 1:
                t.exchange(RequestTasks(1), timeout=5)
        except TransportError:
            pass
        t.kill()

    scenarios = [
        lambda: raw_close(),
        lambda: raw_close(b"POST /msg HTTP/1.1\r\nContent-Length: 400\r\n\r\n{"),
        lambda: raw_close(b"\x16\x03\x01garbage\r\n\r\n"),
        lambda: rr_die(1),
        lambda: rr_die(2),
        lambda: ws_die(0),
        lambda: ws_die(1),
        lambda: ws_die(2),
    ]
    try:
        for _ in range(1000):
            rng.choice(scenarios)()

        worker = HttpClientTransport(host, port, codec)
        worker.hello(Hello({}))
        deadline = time.monotonic() + 60
        while time.monotonic() < deadline:
            reply = worker.exchange(RequestTasks(2), timeout=5)
            if isinstance(reply, Drained):
                break
            if isinstance(reply, Tasks) and not reply.tasks:
                time.sleep(0.02)
                continue
            for asm in reply.tasks:
                payload = copy.deepcopy(asm.payload)
                kern = get_kernel(asm.kernel_id)
                kern.run_chunk(payload, kern.total_units(payload))
                seq = (asm.checkpoint.sequence if asm.checkpoint else 0) + 1
                worker.exchange(Final(asm.task_id, seq, payload), timeout=5)
        worker.close()

        with urllib.request.urlopen(
            f"http://{host}:{port}/admin/stats", timeout=5
        ) as resp:
            stats = json.load(resp)
        forwarded = len(server.core.source.results)
    finally:
        server.stop()

    ok = (
        stats["drained"]
        and stats["queued"] == 0
        and stats["completed"] == 40
        and forwarded == 40
    )
    _verdict(
        capsys,
        ok,
        "fault injection",
        "1000 rude disconnects across raw, half-request, garbage, request-response "
        f"and stream states: server kept serving, drained {stats['completed']}/40 "
        f"tasks afterwards, {forwarded} results forwarded upstream",
    )
