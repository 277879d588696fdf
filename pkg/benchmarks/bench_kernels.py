#!/usr/bin/env python3
"""Benchmark the compiled hot kernels against the pure-NumPy fallback.

Runs each kernel on representative inputs with both implementations,
checks that the outputs agree, and prints per-kernel timings and speedup.

Usage:
    python benchmarks/bench_kernels.py [--size 128] [--repeat 5]
"""

import argparse
import time

import numpy as np

from lungcad._kernels import HAVE_COMPILED, fallback

if HAVE_COMPILED:
    from lungcad._kernels import _core
else:
    _core = None


def timeit(fn, args, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def check_equal(name, a, b):
    if isinstance(a, tuple):
        ok = all(np.array_equal(x, y) for x, y in zip(a, b))
    else:
        ok = np.allclose(a, b, rtol=1e-12, atol=1e-12)
    if not ok:
        raise AssertionError(f"{name}: compiled and fallback outputs differ")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=128,
                    help="volume edge length (default 128)")
    ap.add_argument("--repeat", type=int, default=5,
                    help="timing repetitions, best-of (default 5)")
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n = args.size
    vol = rng.normal(-850.0, 40.0, size=(n, n, n))
    coords = rng.uniform(-1.0, n, size=(n * n * 4, 3))
    mask = (rng.random((n, n, n)) < 0.3).astype(np.uint8)

    cases = [
        ("trilinear_sample", (vol, coords)),
        ("erode6", (mask,)),
        ("dilate6", (mask,)),
        ("label6", (mask,)),
    ]

    if not HAVE_COMPILED:
        print("compiled extension unavailable; timing fallback only")
    print(f"{'kernel':<18}{'fallback':>12}{'compiled':>12}{'speedup':>10}")
    for name, inputs in cases:
        t_fb, out_fb = timeit(getattr(fallback, name), inputs, args.repeat)
        if _core is None:
            print(f"{name:<18}{t_fb * 1e3:>10.1f}ms{'-':>12}{'-':>10}")
            continue
        t_c, out_c = timeit(getattr(_core, name), inputs, args.repeat)
        check_equal(name, out_c, out_fb)
        print(f"{name:<18}{t_fb * 1e3:>10.1f}ms{t_c * 1e3:>10.1f}ms"
              f"{t_fb / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
