"""Command line entry points: serve, simulate, sweep, report.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from typing import Optional

from .config import (
    ConfigError,
    experiment_config,
    read_config,
    server_config,
    sweep_matrix,
)
from .domain import TransportKind
from .metrics import (
    SUMMARY_COLUMNS,
    ExperimentSummary,
    experiment_summary,
    summary_row,
    write_events,
    write_histogram_csv,
    write_summary_csv,
)
from .report import ReportError, render_report
from .server import BindFailure, server_from_config
from .swarm_sim import RunResult, run_swarm
from .task_source import BenchmarkSource, HttpTaskSource

log = logging.getLogger(__name__)


def _build_argparser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskfarm",
        description="Volunteer task farming over browser-friendly transports.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="chatty logging")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the task manager until interrupted")
    serve.add_argument("config", help="INI file with a [server] section")

    simulate = sub.add_parser("simulate", help="run one experiment and summarise it")
    simulate.add_argument("config", help="INI file with an [experiment] section")
    simulate.add_argument("-o", "--output", default="out", help="output directory")
    simulate.add_argument("--repeats", type=int, default=1, metavar="N",
                          help="run N times on consecutive seeds, add a mean row")
    simulate.add_argument("--transport", choices=[t.value for t in TransportKind],
                          help="override the configured transport")
    simulate.add_argument("--real", action="store_true",
                          help="real sockets and wall time instead of virtual time")

    sweep = sub.add_parser("sweep", help="run every cell of a [sweep] matrix")
    sweep.add_argument("config", help="INI file with a [sweep] section")
    sweep.add_argument("-o", "--output", default="out", help="output directory")
    sweep.add_argument("--real", action="store_true",
                       help="real sockets and wall time instead of virtual time")

    report = sub.add_parser("report", help="render figures from summary CSVs")
    report.add_argument("directory", help="directory holding summary.csv")
    return parser


# ----------------------------------------------------------------- serve


def cmd_serve(args: argparse.Namespace) -> int:
    parser = read_config(args.config)
    cfg = server_config(parser)
    if cfg.source_url:
        source = HttpTaskSource(cfg.source_url)
    else:
        source = BenchmarkSource(experiment_config(parser))
    try:
        server = server_from_config(cfg, source)
    except BindFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    server.start()
    transports = []
    if cfg.enable_request_response:
        transports.append("request-response")
    if cfg.enable_stream:
        transports.append("stream")
    # flush so wrappers reading a pipe learn the bound port at once
    print(f"listening on {server.host}:{server.port} ({', '.join(transports)})", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        print("shutting down")
    finally:
        server.stop()
    return 0


# -------------------------------------------------------------- simulate


def _summarise(
    run: RunResult, label: str, meta: dict[str, str]
) -> ExperimentSummary:
    return experiment_summary(
        run.events,
        label=label,
        tasks_total=run.config.total_tasks,
        drained=run.drained,
        meta=meta,
    )


def _mean_line(summaries: list[ExperimentSummary], extra_keys: list[str]) -> str:
    """Average the numeric summary columns into one extra CSV line."""
    rows = [summary_row(s) for s in summaries]
    out = []
    for index, column in enumerate(SUMMARY_COLUMNS):
        cells = [row[index] for row in rows]
        if column == "schema_version":
            out.append(cells[0])
        elif column == "label":
            out.append("mean")
        elif column == "drained":
            out.append(str(min(int(c) for c in cells)))
        else:
            out.append(f"{sum(float(c) for c in cells) / len(cells):.6f}")
    out.extend("" for _ in extra_keys)
    return ",".join(out)


def _print_summary(summary: ExperimentSummary) -> None:
    sessions = summary.sessions
    print(
        f"{summary.label}: {summary.tasks_accepted}/{summary.tasks_total} tasks "
        f"in {summary.runtime:.2f}s, {sessions.total_sessions} sessions "
        f"({sessions.value_sessions} returned work), "
        f"downtime {summary.downtime:.1f}s, "
        f"{summary.bytes_in + summary.bytes_out} bytes on the wire"
    )


def cmd_simulate(args: argparse.Namespace) -> int:
    parser = read_config(args.config)
    cfg = experiment_config(parser)
    if args.transport:
        cfg = dataclasses.replace(cfg, transport=TransportKind(args.transport))
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    os.makedirs(args.output, exist_ok=True)

    summaries = []
    failed = False
    for repeat in range(args.repeats):
        run_cfg = dataclasses.replace(cfg, rng_seed=cfg.rng_seed + repeat)
        run = run_swarm(run_cfg, real=args.real)
        label = f"run{repeat + 1}"
        write_events(run.events, os.path.join(args.output, f"events_{label}.jsonl"))
        summary = _summarise(
            run,
            label,
            {"transport": run_cfg.transport.value, "seed": str(run_cfg.rng_seed)},
        )
        write_histogram_csv(summary, os.path.join(args.output, f"histogram_{label}.csv"))
        summaries.append(summary)
        _print_summary(summary)
        if run.result is not None:
            print(f"{label}: reduced result {run.result}")
        if not run.drained:
            failed = True
            print(f"{label}: hit the time limit before draining", file=sys.stderr)

    summary_path = os.path.join(args.output, "summary.csv")
    write_summary_csv(summaries, summary_path)
    if len(summaries) > 1:
        extra = sorted({k for s in summaries for k in s.meta})
        with open(summary_path, "a", encoding="utf-8", newline="") as fh:
            fh.write(_mean_line(summaries, extra) + "\n")
    print(f"wrote {summary_path}")
    return 1 if failed else 0


# ----------------------------------------------------------------- sweep


def cmd_sweep(args: argparse.Namespace) -> int:
    parser = read_config(args.config)
    cells = sweep_matrix(parser)
    if not cells:
        print("sweep matrix is empty; nothing to run")
        return 0
    os.makedirs(args.output, exist_ok=True)

    summaries = []
    failed = False
    for cell in cells:
        run = run_swarm(cell.config, real=args.real)
        summary = _summarise(run, cell.label, cell.meta)
        write_histogram_csv(
            summary, os.path.join(args.output, f"histogram_{cell.label}.csv")
        )
        summaries.append(summary)
        _print_summary(summary)
        if not run.drained:
            failed = True
            print(f"{cell.label}: hit the time limit before draining", file=sys.stderr)

    summary_path = os.path.join(args.output, "summary.csv")
    write_summary_csv(summaries, summary_path)
    print(f"wrote {summary_path} ({len(summaries)} cells)")
    return 1 if failed else 0


# ---------------------------------------------------------------- report


def cmd_report(args: argparse.Namespace) -> int:
    try:
        written = render_report(args.directory)
    except ReportError as exc:
        raise ConfigError(str(exc)) from None
    for path in written:
        print(f"wrote {path}")
    if not written:
        print("summary carries no figure axes; nothing to draw")
    return 0


# ------------------------------------------------------------------ main


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_argparser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "serve": cmd_serve,
        "simulate": cmd_simulate,
        "sweep": cmd_sweep,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
