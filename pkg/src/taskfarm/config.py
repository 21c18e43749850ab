"""INI config files for experiments, servers, and sweep matrices.

The documented format, by section:

[experiment]
    kernel = monte_carlo_pi        kernel registry name
    total_tasks = 720              tasks in the workload
    task_size = 100000             work units per task
    worker_slots = 24              concurrent sessions
    transport = request_response   or: stream
    rng_seed = 1
    compute_scale = 0.0            simulated seconds per work unit
    net_latency = 0.02             one-way message latency, seconds
    bundle_latency = 0.2           kernel bundle download time, seconds
    time_limit = 3600              abort cap, seconds
    compress_threshold =           bytes; empty disables compression

[policy]
    mode = sync_single             or: batch, async_prefetch
    batch_size = 1
    prefetch_threshold = 0
    checkpoint_every =             work units; empty disables checkpoints

[dwell]
    kind = weibull                 or: constant
    seconds =                      constant only; empty means immortal
    shape = 0.5
    mean = 30                      exactly one of mean / median / scale;
    median =                       mean and median renormalise the scale
    scale =                        per shape, scale pins it directly

[kernel]
    any key = value                passed through to the kernel, values
                                   parsed as int, then float, else string

[server]
    host = 127.0.0.1
    port = 8700
    request_response = true
    stream = true
    source_url =                   empty runs the built-in source
    bundle_dir =
    idle_timeout = 60
    stats_interval = 10
    event_log =
    rr_request_overhead = 450
    rr_response_overhead = 250
    stream_frame_overhead = 6
    compress_threshold =

[sweep]
    task_size = 5000, 20000, 100000    comma lists; each present axis
    shape = 0.5, 0.75, 1.0             multiplies the cross product
    transport = request_response, stream
    policy = quick, batched            names of [policy NAME] sections
    seeds = 1, 2, 3, 4, 5
    total_work = 72000000              optional; derives total_tasks
                                       per cell as total_work / task_size

A swept [policy NAME] section takes the same keys as [policy] plus an
optional task_size, letting a policy pin its own granularity (batching
policies usually pair with finer tasks); total_work still fixes the
overall workload.

The TASKFARM_LISTEN environment variable (host:port, host, or :port)
overrides the server listen address; everything else lives in the file.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field
from typing import Any, Optional

from .domain import (
    DwellModel,
    ExperimentConfig,
    PolicyConfig,
    PolicyMode,
    ServerConfig,
    TransportKind,
)
from .swarm_sim import scale_for_mean, scale_for_median

LISTEN_ENV = "TASKFARM_LISTEN"


class ConfigError(Exception):
    """Bad or missing configuration; the CLI maps this to exit code 2."""


def read_config(path: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    return parser


# ------------------------------------------------------------- primitives


def _clean(parser: configparser.ConfigParser, section: str, key: str) -> Optional[str]:
    value = parser.get(section, key, fallback=None)
    if value is None:
        return None
    value = value.strip()
    return value or None


def _get_int(parser, section, key, default=None) -> Optional[int]:
    raw = _clean(parser, section, key)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} must be an integer, got {raw!r}") from None


def _get_float(parser, section, key, default=None) -> Optional[float]:
    raw = _clean(parser, section, key)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} must be a number, got {raw!r}") from None


def _get_bool(parser, section, key, default: bool) -> bool:
    raw = _clean(parser, section, key)
    if raw is None:
        return default
    try:
        return parser.getboolean(section, key)
    except ValueError:
        raise ConfigError(f"[{section}] {key} must be a boolean, got {raw!r}") from None


def _get_enum(parser, section, key, enum_cls, default):
    raw = _clean(parser, section, key)
    if raw is None:
        return default
    try:
        return enum_cls(raw)
    except ValueError:
        allowed = ", ".join(m.value for m in enum_cls)
        raise ConfigError(f"[{section}] {key} must be one of: {allowed}") from None


def _get_list(parser, section, key) -> list[str]:
    raw = _clean(parser, section, key)
    if raw is None:
        return []
    return [item.strip() for item in raw.split(",") if item.strip()]


def _scalar(raw: str) -> Any:
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


# ----------------------------------------------------------- experiment


def _policy_from_section(parser: configparser.ConfigParser, section: str) -> PolicyConfig:
    if not parser.has_section(section):
        raise ConfigError(f"missing section [{section}]")
    mode = _get_enum(parser, section, "mode", PolicyMode, PolicyMode.SYNC_SINGLE)
    try:
        return PolicyConfig(
            mode=mode,
            batch_size=_get_int(parser, section, "batch_size", 1),
            prefetch_threshold=_get_int(parser, section, "prefetch_threshold", 0),
            checkpoint_every=_get_int(parser, section, "checkpoint_every", None),
        )
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def policy_config(parser: configparser.ConfigParser) -> PolicyConfig:
    if not parser.has_section("policy"):
        return PolicyConfig()
    return _policy_from_section(parser, "policy")


def _dwell_normalisation(parser) -> tuple[str, float]:
    """Which of mean / median / scale pins the weibull scale, and its value."""
    given = {
        key: _get_float(parser, "dwell", key)
        for key in ("mean", "median", "scale")
        if _clean(parser, "dwell", key) is not None
    }
    if len(given) > 1:
        raise ConfigError("[dwell] give exactly one of mean, median, scale")
    if not given:
        raise ConfigError("[dwell] weibull needs one of mean, median, scale")
    key, value = next(iter(given.items()))
    if value <= 0:
        raise ConfigError(f"[dwell] {key} must be positive")
    return key, value


def _weibull_for_shape(shape: float, norm_key: str, norm_value: float) -> DwellModel:
    if shape <= 0:
        raise ConfigError("[dwell] shape must be positive")
    if norm_key == "mean":
        scale = scale_for_mean(shape, norm_value)
    elif norm_key == "median":
        scale = scale_for_median(shape, norm_value)
    else:
        scale = norm_value
    return DwellModel.weibull(shape, scale)


def dwell_config(parser: configparser.ConfigParser) -> DwellModel:
    if not parser.has_section("dwell"):
        return DwellModel.constant()
    kind = _clean(parser, "dwell", "kind") or "constant"
    if kind == "constant":
        seconds = _get_float(parser, "dwell", "seconds", math.inf)
        try:
            return DwellModel.constant(seconds)
        except ValueError as exc:
            raise ConfigError(f"[dwell]: {exc}") from None
    if kind != "weibull":
        raise ConfigError("[dwell] kind must be constant or weibull")
    shape = _get_float(parser, "dwell", "shape")
    if shape is None:
        raise ConfigError("[dwell] weibull needs a shape")
    norm_key, norm_value = _dwell_normalisation(parser)
    return _weibull_for_shape(shape, norm_key, norm_value)


def kernel_params(parser: configparser.ConfigParser) -> dict[str, Any]:
    if not parser.has_section("kernel"):
        return {}
    return {key: _scalar(value.strip()) for key, value in parser.items("kernel")}


def experiment_config(parser: configparser.ConfigParser) -> ExperimentConfig:
    section = "experiment"
    if not parser.has_section(section):
        raise ConfigError("missing section [experiment]")
    try:
        return ExperimentConfig(
            kernel_id=_clean(parser, section, "kernel") or "monte_carlo_pi",
            total_tasks=_get_int(parser, section, "total_tasks", 24),
            task_size=_get_int(parser, section, "task_size", 10_000),
            worker_slots=_get_int(parser, section, "worker_slots", 24),
            dwell=dwell_config(parser),
            transport=_get_enum(
                parser, section, "transport", TransportKind, TransportKind.REQUEST_RESPONSE
            ),
            policy=policy_config(parser),
            rng_seed=_get_int(parser, section, "rng_seed", 1),
            compute_scale=_get_float(parser, section, "compute_scale", 0.0),
            net_latency=_get_float(parser, section, "net_latency", 0.02),
            bundle_latency=_get_float(parser, section, "bundle_latency", 0.2),
            time_limit=_get_float(parser, section, "time_limit", 3600.0),
            compress_threshold=_get_int(parser, section, "compress_threshold", None),
            kernel_params=kernel_params(parser),
        )
    except ValueError as exc:
        raise ConfigError(f"[experiment]: {exc}") from None


# --------------------------------------------------------------- server


def server_config(parser: configparser.ConfigParser) -> ServerConfig:
    section = "server"
    if not parser.has_section(section):
        raise ConfigError("missing section [server]")
    try:
        cfg = ServerConfig(
            host=_clean(parser, section, "host") or "127.0.0.1",
            port=_get_int(parser, section, "port", 8700),
            enable_request_response=_get_bool(parser, section, "request_response", True),
            enable_stream=_get_bool(parser, section, "stream", True),
            source_url=_clean(parser, section, "source_url"),
            bundle_dir=_clean(parser, section, "bundle_dir"),
            idle_timeout=_get_float(parser, section, "idle_timeout", 60.0),
            stats_interval=_get_float(parser, section, "stats_interval", 10.0),
            event_log=_clean(parser, section, "event_log"),
            rr_request_overhead=_get_int(parser, section, "rr_request_overhead", 450),
            rr_response_overhead=_get_int(parser, section, "rr_response_overhead", 250),
            stream_frame_overhead=_get_int(parser, section, "stream_frame_overhead", 6),
            compress_threshold=_get_int(parser, section, "compress_threshold", None),
        )
    except ValueError as exc:
        raise ConfigError(f"[server]: {exc}") from None
    return apply_listen_env(cfg)


def apply_listen_env(cfg: ServerConfig, environ: Optional[dict[str, str]] = None) -> ServerConfig:
    """Fold the TASKFARM_LISTEN override into a server config."""
    env = os.environ if environ is None else environ
    listen = env.get(LISTEN_ENV, "").strip()
    if not listen:
        return cfg
    host, sep, port_text = listen.rpartition(":")
    if not sep:
        cfg.host = listen
        return cfg
    if host:
        cfg.host = host
    if port_text:
        try:
            port = int(port_text)
        except ValueError:
            raise ConfigError(f"{LISTEN_ENV} port must be an integer, got {port_text!r}") from None
        if not 0 <= port <= 65535:
            raise ConfigError(f"{LISTEN_ENV} port out of range: {port}")
        cfg.port = port
    return cfg


# ---------------------------------------------------------------- sweeps


def _axis_values(parser, key, cast, what) -> list[Any]:
    values = []
    for raw in _get_list(parser, "sweep", key):
        try:
            values.append(cast(raw))
        except ValueError:
            raise ConfigError(f"[sweep] bad {what}: {raw!r}") from None
    return values


@dataclass
class SweepCell:
    """One point of the cross product: a runnable config plus the axis
    values that put it there, for CSV meta columns and file names."""

    label: str
    config: ExperimentConfig
    meta: dict[str, str] = field(default_factory=dict)


def sweep_matrix(parser: configparser.ConfigParser) -> list[SweepCell]:
    """Expand the [sweep] section into labelled experiment configs.

    The cross product runs over every axis present; absent axes fall back
    to the base experiment value.  An empty matrix is legal and yields no
    cells.
    """
    base = experiment_config(parser)
    if not parser.has_section("sweep"):
        return []

    sizes = _axis_values(parser, "task_size", int, "task_size")
    shapes = _axis_values(parser, "shape", float, "shape")
    transports = [
        _parse_transport(raw) for raw in _get_list(parser, "sweep", "transport")
    ]
    policy_names = _get_list(parser, "sweep", "policy")
    seeds = _axis_values(parser, "seeds", int, "seed")
    total_work = _get_int(parser, "sweep", "total_work", None)

    if not any((sizes, shapes, transports, policy_names, seeds)):
        return []

    norm: Optional[tuple[str, float]] = None
    if shapes:
        if not parser.has_section("dwell") or (_clean(parser, "dwell", "kind") != "weibull"):
            raise ConfigError("[sweep] shape axis needs a weibull [dwell] section")
        norm = _dwell_normalisation(parser)

    policies = [
        (
            name,
            _policy_from_section(parser, f"policy {name}"),
            _get_int(parser, f"policy {name}", "task_size", None),
        )
        for name in policy_names
    ]

    cells: list[SweepCell] = []
    for size in sizes or [base.task_size]:
        for shape in shapes or [None]:
            for transport in transports or [base.transport]:
                for policy_name, policy, size_override in policies or [
                    (None, base.policy, None)
                ]:
                    for seed in seeds or [base.rng_seed]:
                        cell_size = size_override if size_override is not None else size
                        total = base.total_tasks
                        if total_work is not None:
                            if cell_size < 1 or total_work % cell_size:
                                raise ConfigError(
                                    f"[sweep] total_work {total_work} not divisible "
                                    f"by task_size {cell_size}"
                                )
                            total = total_work // cell_size
                        dwell = base.dwell
                        if shape is not None:
                            assert norm is not None
                            dwell = _weibull_for_shape(shape, *norm)
                        meta: dict[str, str] = {}
                        if sizes or size_override is not None:
                            meta["task_size"] = str(cell_size)
                        if shape is not None:
                            meta["shape"] = f"{shape:g}"
                        if transports:
                            meta["transport"] = transport.value
                        if policy_name is not None:
                            meta["policy"] = policy_name
                        if seeds:
                            meta["seed"] = str(seed)
                        label = _cell_label(meta)
                        try:
                            cfg = ExperimentConfig(
                                kernel_id=base.kernel_id,
                                total_tasks=total,
                                task_size=cell_size,
                                worker_slots=base.worker_slots,
                                dwell=dwell,
                                transport=transport,
                                policy=policy,
                                rng_seed=seed,
                                compute_scale=base.compute_scale,
                                net_latency=base.net_latency,
                                bundle_latency=base.bundle_latency,
                                time_limit=base.time_limit,
                                compress_threshold=base.compress_threshold,
                                kernel_params=dict(base.kernel_params),
                            )
                        except ValueError as exc:
                            raise ConfigError(f"[sweep] cell {label}: {exc}") from None
                        cells.append(SweepCell(label, cfg, meta))
    return cells


def _parse_transport(raw: str) -> TransportKind:
    try:
        return TransportKind(raw)
    except ValueError:
        allowed = ", ".join(m.value for m in TransportKind)
        raise ConfigError(f"[sweep] transport must be one of: {allowed}") from None


def _cell_label(meta: dict[str, str]) -> str:
    parts = []
    if "task_size" in meta:
        parts.append(f"size{meta['task_size']}")
    if "shape" in meta:
        parts.append(f"k{meta['shape']}")
    if "transport" in meta:
        parts.append(meta["transport"])
    if "policy" in meta:
        parts.append(meta["policy"])
    if "seed" in meta:
        parts.append(f"seed{meta['seed']}")
    return "_".join(parts) if parts else "cell"
