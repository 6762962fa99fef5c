"""Compare the compiled and pure-Python selective-scan kernels.

Usage: python3 benchmarks/bench_scan.py [--repeat R]
"""
import argparse
import time

import numpy as np

from mamba_moc.ssm import kernels


def make_inputs(rng, m, length, d, n, dtype=np.float32):
    x = rng.normal(size=(m, length, d)).astype(dtype)
    delta = rng.uniform(1e-3, 0.1, size=(m, length, d)).astype(dtype)
    a = -rng.uniform(0.5, 16, size=(4, d, n)).astype(dtype)
    b = rng.normal(size=(m, length, n)).astype(dtype)
    c = rng.normal(size=(m, length, n)).astype(dtype)
    return x, delta, a, b, c


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default {kernels.BACKEND})")
    print(f"{'shape (M,L,D,N)':<22}{'backend':<10}{'forward ms':>12}{'backward ms':>13}")
    for shape in [(32, 256, 32, 8), (32, 64, 64, 8), (8, 1024, 16, 16)]:
        x, delta, a, b, c = make_inputs(rng, *shape)
        gy = rng.normal(size=x.shape).astype(x.dtype)
        ref = None
        for backend in backends:
            y, cache = kernels.selective_forward(x, delta, a, b, c, backend=backend)
            fwd = best_of(lambda: kernels.selective_forward(x, delta, a, b, c, backend=backend), args.repeat)
            bwd = best_of(lambda: kernels.selective_backward(x, delta, a, b, c, cache, gy, backend=backend),
                          args.repeat)
            if ref is None:
                ref = y
            else:
                assert np.allclose(y, ref, rtol=1e-4, atol=1e-4), "backends disagree"
            print(f"{str(shape):<22}{backend:<10}{fwd * 1e3:>12.2f}{bwd * 1e3:>13.2f}")


if __name__ == "__main__":
    main()
