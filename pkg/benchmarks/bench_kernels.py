"""Benchmark the compiled kernels against the pure-numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Covers the two hot paths: the 3x3 convolution (speaker-encoder forward and
backward at desk-preset shapes) and the DTW table (evaluation alignment).
"""

import argparse
import time

import numpy as np

from loopfit import kernels
from loopfit.kernels import _fallback

try:
    from loopfit.kernels import _compiled
except ImportError:
    _compiled = None


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_conv(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for label, (b, c_in, c_out, h, w) in [
        ("conv fwd desk  (32,1->8,100x24)", (32, 1, 8, 100, 24)),
        ("conv fwd desk  (32,8->8,100x24)", (32, 8, 8, 100, 24)),
        ("conv fwd full  (8,32->32,100x63)", (8, 32, 32, 100, 63)),
    ]:
        x = rng.normal(size=(b, c_in, h, w)).astype(np.float32)
        wgt = rng.normal(size=(c_out, c_in, 3, 3)).astype(np.float32)
        bias = rng.normal(size=c_out).astype(np.float32)
        dy = rng.normal(size=(b, c_out, h, w)).astype(np.float32)
        t_slow = timeit(lambda: _fallback.conv2d_forward(x, wgt, bias), repeats)
        t_fast = (
            timeit(lambda: _compiled.conv2d_forward(x, wgt, bias), repeats)
            if _compiled
            else float("nan")
        )
        rows.append((label, t_slow, t_fast))
        t_slow = timeit(lambda: _fallback.conv2d_backward(x, wgt, dy), repeats)
        t_fast = (
            timeit(lambda: _compiled.conv2d_backward(x, wgt, dy), repeats)
            if _compiled
            else float("nan")
        )
        rows.append((label.replace("fwd", "bwd"), t_slow, t_fast))
    return rows


def bench_dtw(repeats):
    rng = np.random.default_rng(1)
    rows = []
    for label, (la, lb) in [
        ("dtw table 100x100", (100, 100)),
        ("dtw table 300x300", (300, 300)),
    ]:
        dist = np.abs(rng.normal(size=(la, lb)))
        t_slow = timeit(lambda: _fallback.dtw_table(dist), repeats)
        t_fast = (
            timeit(lambda: _compiled.dtw_table(dist), repeats)
            if _compiled
            else float("nan")
        )
        rows.append((label, t_slow, t_fast))
    return rows


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    print(f"active backend: {kernels.backend_name()}")
    if _compiled is None:
        print("compiled extension not built; showing fallback timings only")
    rows = bench_conv(args.repeats) + bench_dtw(args.repeats)
    print(f"{'kernel':36s} {'numpy':>10s} {'compiled':>10s} {'speedup':>8s}")
    for label, t_slow, t_fast in rows:
        speedup = t_slow / t_fast if t_fast == t_fast else float("nan")
        print(f"{label:36s} {t_slow * 1e3:9.2f}ms {t_fast * 1e3:9.2f}ms {speedup:7.1f}x")


if __name__ == "__main__":
    main()
