"""Render figures from summary and histogram CSVs.

Everything here is replay: the inputs are the delimited files a
simulate or sweep run wrote, the outputs are PNGs saved next to them.
Each figure only appears when the summary carries the axis it needs,
so one report call does the right thing for any experiment kind.
"""

from __future__ import annotations

import csv
import glob
import os
import re
from collections import defaultdict
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

SUMMARY_FILE = "summary.csv"

# summary columns that average sensibly across repeat seeds
_NUMERIC = (
    "runtime",
    "tasks_accepted",
    "sessions_total",
    "value_sessions",
    "non_value_sessions",
    "value_fraction",
    "downtime",
    "bytes_in",
    "bytes_out",
    "wasted_dispatches",
    "source_pushes",
    "server_messages",
    "requests_per_second",
    "top_decile_share",
)


class ReportError(Exception):
    pass


def load_summary(path: str) -> list[dict[str, str]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise ReportError(f"{path} has no data rows")
    return rows


def _axis(rows: list[dict[str, str]], column: str) -> bool:
    return any(row.get(column, "").strip() for row in rows)


def mean_over_seeds(rows: list[dict[str, str]]) -> list[dict[str, float]]:
    """Collapse repeat seeds: group rows by every meta axis except seed
    and average the numeric columns within each group."""
    axes = [c for c in ("task_size", "shape", "transport", "policy") if _axis(rows, c)]
    groups: dict[tuple, list[dict[str, str]]] = defaultdict(list)
    for row in rows:
        if row.get("label") == "mean":
            continue
        groups[tuple(row.get(a, "") for a in axes)].append(row)
    collapsed = []
    for key, members in groups.items():
        out: dict = dict(zip(axes, key))
        for column in _NUMERIC:
            values = [float(m[column]) for m in members if m.get(column, "") != ""]
            if values:
                out[column] = sum(values) / len(values)
        collapsed.append(out)
    return collapsed


def _save(fig, out_dir: str, name: str, written: list[str]) -> None:
    path = os.path.join(out_dir, name)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)


def _value_by_shape(rows, out_dir, written) -> None:
    points = sorted(
        (float(r["shape"]), r["value_fraction"]) for r in rows if "shape" in r
    )
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot([p[0] for p in points], [p[1] for p in points], marker="o")
    ax.set_xlabel("dwell shape k")
    ax.set_ylabel("value session fraction")
    ax.set_ylim(0, 1)
    ax.grid(True, alpha=0.3)
    ax.set_title("Share of sessions returning work vs churn shape")
    _save(fig, out_dir, "value_by_shape.png", written)


def _by_size(rows, column, ylabel, filename, out_dir, written) -> None:
    points = sorted((r["task_size"], r[column]) for r in rows if "task_size" in r)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot([p[0] for p in points], [p[1] for p in points], marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("task size (work units)")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3, which="both")
    ax.set_title(f"{ylabel} vs task granularity")
    _save(fig, out_dir, filename, written)


def _by_policy(rows, column, ylabel, filename, out_dir, written) -> None:
    pairs = [(r["policy"], r[column]) for r in rows if "policy" in r]
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.bar([p[0] for p in pairs], [p[1] for p in pairs], color="#4878a8")
    ax.set_ylabel(ylabel)
    ax.set_xlabel("scheduling policy")
    ax.tick_params(axis="x", rotation=20)
    ax.grid(True, axis="y", alpha=0.3)
    ax.set_title(f"{ylabel} by policy")
    _save(fig, out_dir, filename, written)


def _bytes_by_transport(rows, out_dir, written) -> None:
    totals: dict[str, float] = defaultdict(float)
    for row in rows:
        transport = row.get("transport")
        if transport:
            totals[transport] += row.get("bytes_in", 0.0) + row.get("bytes_out", 0.0)
    names = sorted(totals)
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    ax.bar(names, [totals[n] for n in names], color=["#4878a8", "#a85448"][: len(names)])
    ax.set_ylabel("mean bytes on the wire per run")
    ax.grid(True, axis="y", alpha=0.3)
    ax.set_title("Transport overhead")
    _save(fig, out_dir, "bytes_by_transport.png", written)


_SEED_SUFFIX = re.compile(r"_?seed\d+$")


def _histograms(out_dir: str, written: list[str]) -> None:
    """One bar chart of tasks-per-session per histogram group, repeat
    seeds summed together."""
    grouped: dict[str, dict[int, int]] = defaultdict(lambda: defaultdict(int))
    for path in sorted(glob.glob(os.path.join(out_dir, "histogram_*.csv"))):
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                group = _SEED_SUFFIX.sub("", row["label"]) or "all"
                grouped[group][int(row["tasks_completed"])] += int(row["session_count"])
    for group, counts in grouped.items():
        ks = sorted(counts)
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.bar(ks, [counts[k] for k in ks], color="#4878a8")
        ax.set_xlabel("tasks completed by one session")
        ax.set_ylabel("sessions")
        ax.set_yscale("log" if max(counts.values()) > 50 else "linear")
        ax.grid(True, axis="y", alpha=0.3)
        ax.set_title(f"Session productivity ({group})")
        safe = re.sub(r"[^A-Za-z0-9._-]", "-", group)
        _save(fig, out_dir, f"sessions_{safe}.png", written)


def render_report(out_dir: str, summary_path: Optional[str] = None) -> list[str]:
    """Render every figure the data in out_dir supports; returns paths."""
    if summary_path is None:
        summary_path = os.path.join(out_dir, SUMMARY_FILE)
    raw = load_summary(summary_path)
    rows = mean_over_seeds(raw)
    written: list[str] = []
    if _axis(raw, "shape"):
        _value_by_shape(rows, out_dir, written)
    if _axis(raw, "task_size"):
        _by_size(rows, "runtime", "runtime (s)", "runtime_by_size.png", out_dir, written)
        _by_size(rows, "downtime", "total downtime (s)", "downtime_by_size.png", out_dir, written)
        _by_size(
            rows,
            "value_fraction",
            "value session fraction",
            "value_by_size.png",
            out_dir,
            written,
        )
    if _axis(raw, "policy"):
        _by_policy(rows, "runtime", "runtime (s)", "runtime_by_policy.png", out_dir, written)
        _by_policy(
            rows,
            "requests_per_second",
            "server messages per second",
            "request_rate_by_policy.png",
            out_dir,
            written,
        )
    if _axis(raw, "transport"):
        _bytes_by_transport(rows, out_dir, written)
    _histograms(out_dir, written)
    return written
