"""Kernel correctness against independent sequential oracles.

The oracles here are deliberately plain re-derivations (straight loops, no
shared helpers beyond the rng primitive) so a bug in the kernel machinery
cannot hide in its own reflection.  Frozen constants were produced by the
pure scalar path before the vectorised path existed.
"""

import math
import random

import pytest

from taskfarm.domain import ExperimentConfig
from taskfarm.kernels import (
    DEFAULT_WINDOW,
    AddNumbersKernel,
    KernelFailure,
    UnknownKernel,
    _escape_count,
    get_kernel,
    mandel_reduce,
    mandel_run_chunk,
    mandel_split,
    mc_error_bound,
    mc_make_payload,
    mc_reduce,
    mc_run_chunk,
    write_pgm,
)
from taskfarm.rng import uniform


def mc_oracle_hits(seed, n):
    hits = 0
    for i in range(n):
        x = uniform(seed, 2 * i)
        y = uniform(seed, 2 * i + 1)
        if x * x + y * y <= 1.0:
            hits += 1
    return hits


def mandel_oracle_grid(width, height, max_iter, window=DEFAULT_WINDOW):
    x_min, x_max, y_min, y_max = window
    sx = (x_max - x_min) / width
    sy = (y_max - y_min) / height
    grid = []
    for row in range(height):
        for col in range(width):
            cx = x_min + (col + 0.5) * sx
            cy = y_max - (row + 0.5) * sy
            zx = zy = 0.0
            n = 0
            while n < max_iter:
                zx, zy = zx * zx - zy * zy + cx, 2.0 * zx * zy + cy
                n += 1
                if zx * zx + zy * zy > 4.0:
                    break
            grid.append(n)
    return grid


# ---------------------------------------------------------------- monte carlo


def test_mc_frozen_hit_counts():
    p = mc_make_payload(100_000, 1)
    mc_run_chunk(p, 100_000)
    assert p["hits"] == 78142
    q = mc_make_payload(1000, 7)
    mc_run_chunk(q, 1000)
    assert q["hits"] == 801


def test_mc_matches_oracle_small():
    for seed in (0, 3, 99):
        p = mc_make_payload(2000, seed)
        mc_run_chunk(p, 2000)
        assert p["hits"] == mc_oracle_hits(seed, 2000)


def test_mc_any_chunking_equals_one_shot():
    rng = random.Random(7)
    for _ in range(10):
        n = rng.randrange(1, 30_000)
        cuts = sorted(rng.randrange(1, n + 1) for _ in range(rng.randrange(1, 6)))
        p = mc_make_payload(n, 11)
        for cut in cuts:
            mc_run_chunk(p, cut)
        mc_run_chunk(p, n)
        whole = mc_make_payload(n, 11)
        mc_run_chunk(whole, n)
        assert p["hits"] == whole["hits"]


def test_mc_pooled_estimate_at_acceptance_scale():
    payloads = []
    for s in range(1, 721):
        p = mc_make_payload(100_000, s)
        mc_run_chunk(p, 100_000)
        payloads.append(p)
    est = mc_reduce(payloads)
    assert est == pytest.approx(3.141568111111111, abs=0)
    assert abs(est - math.pi) < 0.01


def test_mc_error_shrinks_with_sample_size():
    # fixed seed: 1e4 -> 0.0160, 1e5 -> 0.0087, 1e6 -> 0.0022
    errors = []
    for n in (10_000, 100_000, 1_000_000):
        p = mc_make_payload(n, 3)
        mc_run_chunk(p, n)
        errors.append(abs(4.0 * p["hits"] / n - math.pi))
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < mc_error_bound(1_000_000)


def test_mc_reduce_pools_across_tasks():
    a = mc_make_payload(1000, 1)
    b = mc_make_payload(3000, 2)
    mc_run_chunk(a, 1000)
    mc_run_chunk(b, 3000)
    assert mc_reduce([a, b]) == 4.0 * (a["hits"] + b["hits"]) / 4000


def test_mc_task_seeds_are_distinct():
    cfg = ExperimentConfig(kernel_id="monte_carlo_pi", total_tasks=10, task_size=100, rng_seed=50)
    tasks = get_kernel("monte_carlo_pi").make_tasks(cfg)
    seeds = [payload["seed"] for _, payload in tasks]
    assert seeds == list(range(50, 60))


# ------------------------------------------------------------------- fractal


def test_escape_count_fixed_points():
    assert _escape_count(0.0, 0.0, 50) == 50  # never escapes
    assert _escape_count(1.0, 0.0, 50) == 3  # z: 1, 2, 5
    assert _escape_count(-1.0, 0.0, 50) == 50  # period-2 cycle


def test_default_window_aspect_matches_4_3():
    x_min, x_max, y_min, y_max = DEFAULT_WINDOW
    assert (x_max - x_min) / (y_max - y_min) == pytest.approx(4 / 3)


def test_mandel_frozen_grid_sum():
    grid = mandel_oracle_grid(40, 30, 1000)
    assert sum(grid) == 202762


@pytest.mark.parametrize("tasks", [1, 2, 7, 30])
def test_mandel_split_reduce_equals_oracle(tasks):
    oracle = mandel_oracle_grid(40, 30, 1000)
    payloads = mandel_split(40, 30, tasks)
    for p in payloads:
        mandel_run_chunk(p, p["band_rows"])
    assert mandel_reduce(payloads) == oracle


def test_mandel_band_remainder_distribution():
    bands = [p["band_rows"] for p in mandel_split(40, 30, 7)]
    assert bands == [5, 5, 4, 4, 4, 4, 4]
    assert sum(bands) == 30


def test_mandel_pixel_fallback_when_tasks_exceed_rows():
    # 300 rows cannot give 720 tasks a row each; splitter goes per-pixel
    payloads = mandel_split(8, 300, 720, max_iter=30)
    assert all(p["mode"] == "pixels" for p in payloads)
    runs = [p["count_px"] for p in payloads]
    assert sum(runs) == 8 * 300
    assert max(runs) - min(runs) <= 1
    assert runs[-1] == min(runs)
    for p in payloads:
        mandel_run_chunk(p, p["count_px"])
    assert mandel_reduce(payloads) == mandel_oracle_grid(8, 300, 30)


def test_mandel_chunked_band_equals_whole():
    whole = mandel_split(20, 12, 1, max_iter=100)[0]
    mandel_run_chunk(whole, 12)
    stepped = mandel_split(20, 12, 1, max_iter=100)[0]
    for row in (1, 5, 6, 11, 12):
        mandel_run_chunk(stepped, row)
    assert stepped["counts"] == whole["counts"]


def test_mandel_reduce_rejects_bad_tilings():
    payloads = mandel_split(10, 10, 2, max_iter=20)
    for p in payloads:
        mandel_run_chunk(p, p["band_rows"])
    with pytest.raises(KernelFailure):
        mandel_reduce([payloads[0], payloads[0]])
    with pytest.raises(KernelFailure):
        mandel_reduce([payloads[0]])


def test_pgm_export(tmp_path):
    payloads = mandel_split(16, 12, 3, max_iter=64)
    for p in payloads:
        mandel_run_chunk(p, p["band_rows"])
    grid = mandel_reduce(payloads)
    out = tmp_path / "fractal.pgm"
    write_pgm(grid, 16, 12, 64, str(out))
    data = out.read_bytes()
    assert data.startswith(b"P5 16 12 255\n")
    pixels = data.split(b"\n", 1)[1]
    assert len(pixels) == 16 * 12
    assert min(pixels) >= 0 and max(pixels) <= 255


# ------------------------------------------------------------------ registry


def test_registry_and_unknown_kernel():
    assert get_kernel("monte_carlo_pi").kernel_id == "monte_carlo_pi"
    with pytest.raises(UnknownKernel):
        get_kernel("nope")


def test_add_numbers_kernel():
    k = AddNumbersKernel()
    payload = {"a": 2, "b": 3}
    assert k.done_units(payload) == 0
    k.run_chunk(payload, 1)
    assert payload == {"a": 2, "b": 3, "result": 5}
    assert k.done_units(payload) == 1
    with pytest.raises(KernelFailure):
        k.run_chunk({"a": 1}, 1)


def test_kernel_failure_on_garbage_payload():
    with pytest.raises(KernelFailure):
        get_kernel("monte_carlo_pi").run_chunk({"wrong": True}, 10)
    with pytest.raises(KernelFailure):
        get_kernel("mandelbrot").run_chunk({"mode": "rows"}, 1)
