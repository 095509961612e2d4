"""Timing and FLOP harness: one patched dual layer against one dense attention layer."""
from __future__ import annotations

import csv
import ctypes
import ctypes.util
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .attention import AttentionWeights, breadth_attention, depth_attention, multi_head_attention
from .spatial_index import make_layout


@dataclass
class BenchRow:
    variant: str
    N: int
    C: int
    N_p: int
    R: int
    P: int
    M: int
    d: int
    forward_ms: float
    backward_ms: float
    flops_counted: int
    peak_alloc_bytes: int
    status: str = "ok"


def _weights(rng, d: int, dtype) -> AttentionWeights:
    mats = [nx.Tensor(nx.uniform_init(rng, (d, d), d).astype(dtype), requires_grad=True) for _ in range(4)]
    return AttentionWeights(*mats)


def _keep_heap_resident() -> bool:
    """Stop glibc from mmap-ing (and page-faulting) every large temporary.

    Without this, arrays crossing the dynamic mmap threshold pay fresh page
    faults on each call, which shows up as step changes in the timings that
    have nothing to do with the attention algorithm. No-op off glibc.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"))
        ok = libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        ok &= libc.mallopt(-1, 2**31 - 1)  # M_TRIM_THRESHOLD
        return bool(ok)
    except (OSError, AttributeError, TypeError):
        return False


def _median_ms(fn: Callable[[], object], repeats: int) -> float:
    fn()  # warm-up, excluded
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def _measure(forward: Callable[[], nx.Tensor], params: list[nx.Tensor], repeats: int, timed: bool = True) -> tuple[float, float, int, int]:
    with nx.count_flops() as counter:
        forward()
    flops = counter.get("attention")
    if not timed:
        return float("nan"), float("nan"), flops, 0
    fwd = _median_ms(forward, repeats)

    def fwd_bwd():
        out = forward()
        nx.grad(nx.total(out), params)

    total = _median_ms(fwd_bwd, repeats)
    tracemalloc.start()
    forward()
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return fwd, max(total - fwd, 0.0), flops, peak


def patched_geometry(n_points: int, capacity: int, leaves_per_patch: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    coords = np.column_stack([rng.uniform(32.6, 33.2, n_points), rng.uniform(-117.3, -116.7, n_points)])
    _, layout = make_layout(coords, capacity, leaves_per_patch, padding="zero")
    return layout


def bench_size(
    n_points: int,
    d: int = 32,
    capacity: int = 2,
    leaves_per_patch: int = 8,
    n_heads: int = 1,
    repeats: int = 5,
    dtype=np.float32,
    seed: int = 0,
    variants: Sequence[str] = ("patched", "full"),
    timed: bool = True,
) -> list[BenchRow]:
    rng = np.random.default_rng(seed)
    layout = patched_geometry(n_points, capacity, leaves_per_patch, seed)
    r, p, m = layout.R, layout.P, layout.M
    rows = []
    for variant in variants:
        try:
            if variant == "patched":
                x = nx.Tensor(rng.standard_normal((r, p, d)).astype(dtype), requires_grad=True)
                wd, wb = _weights(rng, d, dtype), _weights(rng, d, dtype)

                def forward(x=x, wd=wd, wb=wb):
                    return breadth_attention(depth_attention(x, wd, n_heads), wb, n_heads)

                params = [x, wd.W_Q, wd.W_K, wd.W_V, wd.W_O, wb.W_Q, wb.W_K, wb.W_V, wb.W_O]
                geom = (r, p)
            else:
                x = nx.Tensor(rng.standard_normal((1, m, d)).astype(dtype), requires_grad=True)
                w = _weights(rng, d, dtype)

                def forward(x=x, w=w):
                    return multi_head_attention(x, w, n_heads)

                params = [x, w.W_Q, w.W_K, w.W_V, w.W_O]
                geom = (1, m)
            fwd, bwd, flops, peak = _measure(forward, params, repeats, timed)
            rows.append(BenchRow(variant, n_points, capacity, leaves_per_patch, geom[0], geom[1], m, d,
                                 fwd, bwd, flops, peak))
        except MemoryError:
            rows.append(BenchRow(variant, n_points, capacity, leaves_per_patch, 0, 0, m, d,
                                 float("nan"), float("nan"), 0, 0, status="failed"))
    return rows


def run_bench(sizes: Sequence[int], d: int = 32, capacity: int = 2, leaves_per_patch: int = 8,
              n_heads: int = 1, repeats: int = 5, dtype=np.float32, seed: int = 0) -> list[BenchRow]:
    if list(sizes) != sorted(sizes):
        raise ValueError("benchmark sizes must be ascending")
    rows: list[BenchRow] = []
    _keep_heap_resident()
    with threadpool_limits(1):
        for n in sizes:
            rows.extend(bench_size(n, d, capacity, leaves_per_patch, n_heads, repeats, dtype, seed))
    return rows


def write_rows(rows: Sequence[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f.name for f in fields(BenchRow)])
        for row in rows:
            writer.writerow(list(asdict(row).values()))
