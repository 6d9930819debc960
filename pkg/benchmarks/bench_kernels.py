"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5] [--jacobi-n 200]

Prints one line per kernel: best-of-N wall time for each backend and the
speedup. The first numba call of each kernel (JIT compile) is excluded.
"""

import argparse
import time

import numpy as np

from dprl.kernels import numba_backend, numpy_backend, round_robin_schedule


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(args):
    rng = np.random.default_rng(0)
    m = rng.standard_normal((args.jacobi_n, args.jacobi_n))
    sym = m + m.T
    sched = round_robin_schedule(args.jacobi_n)
    tol = 1e-9 * float(np.sqrt(np.sum(sym * sym)))

    x = rng.random((64, 1, 28, 28)).astype(np.float32)
    w = rng.standard_normal((6, 1, 5, 5)).astype(np.float32)
    b = np.zeros(6, dtype=np.float32)
    delta = rng.standard_normal((64, 6, 24, 24)).astype(np.float32)
    pool_in = rng.random((64, 16, 24, 24)).astype(np.float32)
    state = np.array([1, 2, 3, 4], dtype=np.uint64)

    def pool_roundtrip(be):
        out, idx = be.maxpool_forward(pool_in)
        be.maxpool_backward(out, idx, pool_in.shape)

    return {
        f"jacobi {args.jacobi_n}x{args.jacobi_n}": lambda be: be.jacobi_sweeps(sym.copy(), sched, tol, 100),
        "conv2d forward 64x1x28x28 k5": lambda be: be.conv2d_forward(x, w, b),
        "conv2d input grad": lambda be: be.conv2d_backward_input(delta, w),
        "conv2d per-example weight grad": lambda be: be.conv2d_weight_grad_per_example(x, delta),
        "maxpool fwd+bwd 64x16x24x24": pool_roundtrip,
        "xoshiro 1e5 draws": lambda be: be.xoshiro_fill(state.copy(), np.empty(100_000, dtype=np.uint64)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--jacobi-n", type=int, default=200)
    args = ap.parse_args()
    if numba_backend is None:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':34s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s}")
    for name, fn in cases(args).items():
        fn(numba_backend)  # compile
        t_np = best_of(lambda: fn(numpy_backend), 1 if name.startswith("xoshiro") else args.repeat)
        t_nb = best_of(lambda: fn(numba_backend), args.repeat)
        print(f"{name:34s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
