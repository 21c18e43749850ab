"""Benchmark kernels: the work the workers actually do.

Each kernel runs in resumable chunks over an opaque payload dict.  The
contract that makes churn safe: ``run_chunk(payload, until)`` advances a
payload from its current progress to ``until`` work units and depends only
on the payload contents, so any worker can pick up any checkpoint and the
result is identical to an uninterrupted run.  Floating-point expressions
are kept to plain double arithmetic evaluated in a fixed order, which the
browser-side kernels mirror operation for operation.

Work units are kernel-defined: Monte Carlo counts iterations, the fractal
counts rows (or single pixels when there are more tasks than rows).
"""

from __future__ import annotations

import math
from typing import Any, Optional

from .rng import uniform, uniform_block

DEFAULT_WINDOW = (-2.5, 1.0, -1.3125, 1.3125)  # x_min, x_max, y_min, y_max
DEFAULT_MAX_ITER = 1000
DEFAULT_GRID = (400, 300)


class UnknownKernel(Exception):
    pass


class KernelFailure(Exception):
    """A kernel could not run its payload; the client abandons locally."""


# ---------------------------------------------------------------- monte carlo


def mc_make_payload(iterations: int, seed: int) -> dict[str, Any]:
    return {"iterations": iterations, "seed": seed, "hits": 0, "done_iterations": 0}


def mc_run_chunk(payload: dict[str, Any], until: int) -> None:
    """Advance dart throwing to ``until`` iterations.

    Point i reads stream draws 2i and 2i+1, so progress is addressable and
    a resume continues exactly where the checkpoint stopped.  A dart on the
    unit circle boundary counts as a hit.  Big chunks take the vectorised
    path; both paths produce bit-identical hit counts (see rng.uniform_block)
    and the reference loop below is what the browser kernel mirrors.
    """
    seed = payload["seed"]
    done = payload["done_iterations"]
    hits = payload["hits"]
    if until - done >= 4096:
        u = uniform_block(seed, 2 * done, 2 * (until - done))
        x, y = u[0::2], u[1::2]
        hits += int(((x * x + y * y) <= 1.0).sum())
    else:
        for i in range(done, until):
            x = uniform(seed, 2 * i)
            y = uniform(seed, 2 * i + 1)
            if x * x + y * y <= 1.0:
                hits += 1
    payload["hits"] = hits
    payload["done_iterations"] = until


def mc_reduce(payloads: list[dict[str, Any]]) -> float:
    """Pool all tasks' darts into one estimate: 4 * hits / throws."""
    hits = sum(p["hits"] for p in payloads)
    throws = sum(p["iterations"] for p in payloads)
    if throws == 0:
        raise KernelFailure("cannot reduce zero iterations")
    return 4.0 * hits / throws


class MonteCarloKernel:
    kernel_id = "monte_carlo_pi"

    def total_units(self, payload: dict[str, Any]) -> int:
        return payload["iterations"]

    def done_units(self, payload: dict[str, Any]) -> int:
        return payload["done_iterations"]

    def run_chunk(self, payload: dict[str, Any], until: int) -> None:
        try:
            mc_run_chunk(payload, until)
        except (KeyError, TypeError) as exc:
            raise KernelFailure(f"bad monte carlo payload: {exc}") from None

    def progress_payload(self, payload: dict[str, Any]) -> dict[str, Any]:
        return {"hits": payload["hits"], "done_iterations": payload["done_iterations"]}

    def make_tasks(self, cfg: Any) -> list[tuple[str, dict[str, Any]]]:
        # one task per slot of work; distinct streams via seed_base + index
        return [
            (f"mc-{i:05d}", mc_make_payload(cfg.task_size, cfg.rng_seed + i))
            for i in range(cfg.total_tasks)
        ]

    def reduce(self, payloads: list[dict[str, Any]]) -> float:
        return mc_reduce(payloads)


# ------------------------------------------------------------------- fractal


def _escape_count(cx: float, cy: float, max_iter: int) -> int:
    """Iterations until z <- z^2 + c leaves |z| > 2, else max_iter."""
    zx = 0.0
    zy = 0.0
    count = 0
    while count < max_iter:
        nzx = zx * zx - zy * zy + cx
        nzy = 2.0 * zx * zy + cy
        zx = nzx
        zy = nzy
        count += 1
        if zx * zx + zy * zy > 4.0:
            break
    return count


def mandel_grid_geometry(
    width: int, height: int, window: tuple[float, float, float, float] = DEFAULT_WINDOW
) -> dict[str, float]:
    x_min, x_max, y_min, y_max = window
    return {
        "x_min": x_min,
        "y_max": y_max,
        "step_x": (x_max - x_min) / width,
        "step_y": (y_max - y_min) / height,
    }


def _pixel_value(geo: dict[str, Any], grid_width: int, pixel_index: int, max_iter: int) -> int:
    row, col = divmod(pixel_index, grid_width)
    cx = geo["x_min"] + (col + 0.5) * geo["step_x"]
    cy = geo["y_max"] - (row + 0.5) * geo["step_y"]
    return _escape_count(cx, cy, max_iter)


def mandel_split(
    width: int,
    height: int,
    total_tasks: int,
    max_iter: int = DEFAULT_MAX_ITER,
    window: tuple[float, float, float, float] = DEFAULT_WINDOW,
) -> list[dict[str, Any]]:
    """Tile the grid into contiguous per-task regions.

    Row bands while every task can own at least one whole row; otherwise
    (more tasks than rows, e.g. 300 rows over 720 tasks) fall back to
    contiguous pixel runs.  Either way the union tiles the grid exactly
    once and the last task takes the remainder.
    """
    if total_tasks < 1:
        raise ValueError("total_tasks must be >= 1")
    if width < 1 or height < 1:
        raise ValueError("grid must be non-empty")
    geo = mandel_grid_geometry(width, height, window)
    base = {
        **geo,
        "grid_width": width,
        "grid_height": height,
        "max_iter": max_iter,
    }
    payloads = []
    if total_tasks <= height:
        rows_each = height // total_tasks
        extra = height % total_tasks
        row = 0
        for i in range(total_tasks):
            band = rows_each + (1 if i < extra else 0)
            payloads.append(
                {**base, "counts": [], "mode": "rows", "row_offset": row, "band_rows": band, "done_rows": 0}
            )
            row += band
        return payloads
    total_px = width * height
    if total_tasks > total_px:
        raise ValueError(f"cannot split {total_px} pixels into {total_tasks} tasks")
    px_each = total_px // total_tasks
    extra = total_px % total_tasks
    offset = 0
    for i in range(total_tasks):
        run = px_each + (1 if i < extra else 0)
        payloads.append(
            {**base, "counts": [], "mode": "pixels", "offset_px": offset, "count_px": run, "done_px": 0}
        )
        offset += run
    return payloads


def mandel_run_chunk(payload: dict[str, Any], until: int) -> None:
    geo = payload
    grid_width = payload["grid_width"]
    max_iter = payload["max_iter"]
    counts = payload["counts"]
    if payload["mode"] == "rows":
        start_px = (payload["row_offset"] + payload["done_rows"]) * grid_width
        end_px = (payload["row_offset"] + until) * grid_width
        for p in range(start_px, end_px):
            counts.append(_pixel_value(geo, grid_width, p, max_iter))
        payload["done_rows"] = until
    else:
        start_px = payload["offset_px"] + payload["done_px"]
        end_px = payload["offset_px"] + until
        for p in range(start_px, end_px):
            counts.append(_pixel_value(geo, grid_width, p, max_iter))
        payload["done_px"] = until


def mandel_reduce(payloads: list[dict[str, Any]]) -> list[int]:
    """Reassemble the global grid, checking the tiling covers every pixel once."""
    if not payloads:
        raise KernelFailure("nothing to reduce")
    grid_width = payloads[0]["grid_width"]
    grid_height = payloads[0]["grid_height"]
    grid: list[Optional[int]] = [None] * (grid_width * grid_height)
    for p in payloads:
        if p["mode"] == "rows":
            offset = p["row_offset"] * grid_width
            expected = p["band_rows"] * grid_width
        else:
            offset = p["offset_px"]
            expected = p["count_px"]
        counts = p["counts"]
        if len(counts) != expected:
            raise KernelFailure(f"task returned {len(counts)} pixels, expected {expected}")
        for i, value in enumerate(counts):
            if grid[offset + i] is not None:
                raise KernelFailure(f"pixel {offset + i} covered twice")
            grid[offset + i] = value
    if any(v is None for v in grid):
        raise KernelFailure("tiling left holes in the grid")
    return grid  # type: ignore[return-value]


def write_pgm(grid: list[int], width: int, height: int, max_iter: int, path: str) -> None:
    """Dump the escape-count grid as a binary PGM for eyeballing."""
    with open(path, "wb") as fh:
        fh.write(f"P5 {width} {height} 255\n".encode("ascii"))
        fh.write(bytes(255 - (255 * v) // max_iter for v in grid))


class MandelbrotKernel:
    kernel_id = "mandelbrot"

    def total_units(self, payload: dict[str, Any]) -> int:
        return payload["band_rows"] if payload["mode"] == "rows" else payload["count_px"]

    def done_units(self, payload: dict[str, Any]) -> int:
        return payload["done_rows"] if payload["mode"] == "rows" else payload["done_px"]

    def run_chunk(self, payload: dict[str, Any], until: int) -> None:
        try:
            mandel_run_chunk(payload, until)
        except (KeyError, TypeError) as exc:
            raise KernelFailure(f"bad fractal payload: {exc}") from None

    def progress_payload(self, payload: dict[str, Any]) -> dict[str, Any]:
        done_key = "done_rows" if payload["mode"] == "rows" else "done_px"
        return {"counts": list(payload["counts"]), done_key: payload[done_key]}

    def make_tasks(self, cfg: Any) -> list[tuple[str, dict[str, Any]]]:
        params = cfg.kernel_params
        width, height = params.get("width", DEFAULT_GRID[0]), params.get("height", DEFAULT_GRID[1])
        max_iter = params.get("max_iter", DEFAULT_MAX_ITER)
        payloads = mandel_split(width, height, cfg.total_tasks, max_iter)
        return [(f"mb-{i:05d}", p) for i, p in enumerate(payloads)]

    def reduce(self, payloads: list[dict[str, Any]]) -> list[int]:
        return mandel_reduce(payloads)


# -------------------------------------------------------------------- trivial


class AddNumbersKernel:
    """Two-number demo kernel; the whole task is one work unit."""

    kernel_id = "add_numbers"

    def total_units(self, payload: dict[str, Any]) -> int:
        return 1

    def done_units(self, payload: dict[str, Any]) -> int:
        return 1 if "result" in payload else 0

    def run_chunk(self, payload: dict[str, Any], until: int) -> None:
        if until >= 1 and "result" not in payload:
            try:
                payload["result"] = payload["a"] + payload["b"]
            except (KeyError, TypeError) as exc:
                raise KernelFailure(f"bad add_numbers payload: {exc}") from None

    def progress_payload(self, payload: dict[str, Any]) -> dict[str, Any]:
        return dict(payload)

    def make_tasks(self, cfg: Any) -> list[tuple[str, dict[str, Any]]]:
        return [
            (f"add-{i:05d}", {"a": i, "b": cfg.task_size})
            for i in range(cfg.total_tasks)
        ]

    def reduce(self, payloads: list[dict[str, Any]]) -> list[Any]:
        return [p["result"] for p in payloads]


KERNELS = {
    k.kernel_id: k for k in (MonteCarloKernel(), MandelbrotKernel(), AddNumbersKernel())
}


def get_kernel(kernel_id: str):
    try:
        return KERNELS[kernel_id]
    except KeyError:
        raise UnknownKernel(kernel_id) from None


def mc_error_bound(iterations: int) -> float:
    """Three-sigma binomial error of the pooled estimate, for sanity checks."""
    p = math.pi / 4.0
    return 3.0 * 4.0 * math.sqrt(p * (1 - p) / iterations)
