"""Time the compiled kernels against the pure-NumPy fallback.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

Shapes mirror the mask stage: attention maps resized to 64x64 and
two-component mixture fits over 4096 pixel values.
"""

import argparse
import time

import numpy as np

from proxyclust.kernels import BACKEND, available_backends, gmm2_fit, resize_bilinear


def timeit(fn, repeat, number):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(number):
            fn()
        best = min(best, (time.perf_counter() - t0) / number)
    return best


def bench_resize(impl, rng, number):
    srcs = [rng.random((h, h)) for h in (8, 16, 32)]

    def work():
        for s in srcs:
            resize_bilinear(s, 64, 64, impl=impl)

    return timeit(work, repeat=5, number=number)


def bench_gmm(impl, rng, number):
    # bimodal pixel intensities, one map's worth per fit
    lo = rng.normal(0.1, 0.04, 3300)
    hi = rng.normal(0.6, 0.08, 796)
    values = np.clip(np.concatenate([lo, hi]), 0, 1)

    def work():
        gmm2_fit(values, impl=impl)

    return timeit(work, repeat=3, number=number)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--resize-iters", type=int, default=200)
    ap.add_argument("--gmm-iters", type=int, default=20)
    args = ap.parse_args()

    backends = available_backends()
    print(f"default backend: {BACKEND}; available: {', '.join(backends)}")
    rng = np.random.default_rng(0)

    rows = []
    for name, impl in backends.items():
        r = bench_resize(impl, rng, args.resize_iters)
        g = bench_gmm(impl, rng, args.gmm_iters)
        rows.append((name, r, g))

    print(f"{'backend':<10} {'resize 3 maps -> 64x64':>24} {'gmm2 fit 4096 vals':>20}")
    for name, r, g in rows:
        print(f"{name:<10} {r * 1e6:>21.1f} us {g * 1e3:>17.2f} ms")
    if len(rows) == 2:
        base = {n: (r, g) for n, r, g in rows}
        if "numpy" in base and "cython" in base:
            sr = base["numpy"][0] / base["cython"][0]
            sg = base["numpy"][1] / base["cython"][1]
            print(f"speedup (numpy/cython): resize {sr:.1f}x, gmm {sg:.1f}x")


if __name__ == "__main__":
    main()
