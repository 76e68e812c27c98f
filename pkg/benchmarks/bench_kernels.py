#!/usr/bin/env python3
"""Time the numba-JIT kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py [--repeats N]

Each kernel is warmed once (JIT compilation) and then timed over the best
of N repeats. The active path for library users follows DAS_MAE_NUMBA.
"""

import argparse
import time

import numpy as np

from dasmae import kernels


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_adamw(repeats):
    rng = np.random.default_rng(0)
    n = 2_000_000
    base = {
        "p": rng.normal(0, 1, n).astype(np.float32),
        "g": rng.normal(0, 1, n).astype(np.float32),
        "m": np.zeros(n, np.float32),
        "v": np.zeros(n, np.float32),
    }
    f32 = np.float32
    args = (f32(0.9995), f32(0.1), f32(0.001), f32(0.9), f32(0.999),
            f32(1.1), f32(1.001), f32(1e-3), f32(1e-8))

    def runner(impl):
        state = {k: v.copy() for k, v in base.items()}
        return lambda: impl(state["p"], state["g"], state["m"], state["v"], *args)

    return _run_pair("adamw_update (2M params)", runner, repeats)


def bench_render(repeats):
    rng = np.random.default_rng(0)
    template = rng.normal(0, 1, 10000)
    centers = 5.0 + 3.0 * np.arange(10000) / 1e4

    def runner(impl):
        return lambda: impl(template, centers, 2.0, 1.0, 12)

    return _run_pair("render_moving_source (12x10000)", runner, repeats)


def bench_perplexity(repeats):
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (400, 16))
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * (x @ x.T), 0)
    target = float(np.log(30.0))

    def runner(impl):
        return lambda: impl(d2, target, 1e-5, 50)

    return _run_pair("perplexity_search (n=400)", runner, repeats)


def bench_kl_grad(repeats):
    rng = np.random.default_rng(0)
    n = 400
    p = np.abs(rng.normal(0, 1, (n, n)))
    np.fill_diagonal(p, 0)
    p /= p.sum()
    y = rng.normal(0, 1e-2, (n, 2))

    def runner(impl):
        return lambda: impl(p, y)

    return _run_pair("tsne_kl_grad (n=400)", runner, repeats)


def _run_pair(label, runner, repeats):
    numpy_impl, numba_impl = None, None
    for name, (np_fn, nb_fn) in kernels.IMPLEMENTATIONS.items():
        if name in label.split(" ")[0]:
            numpy_impl, numba_impl = np_fn, nb_fn
    t_numpy = best_of(runner(numpy_impl), repeats)
    if numba_impl is None:
        print(f"{label:38s} numpy {t_numpy * 1e3:9.2f} ms   (numba unavailable)")
        return
    warm = runner(numba_impl)
    warm()  # JIT compile outside the timed region
    t_numba = best_of(runner(numba_impl), repeats)
    ratio = t_numpy / t_numba if t_numba > 0 else float("inf")
    print(f"{label:38s} numpy {t_numpy * 1e3:9.2f} ms   numba "
          f"{t_numba * 1e3:9.2f} ms   speedup x{ratio:5.2f}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    print(f"active backend: {kernels.active_backend()}")
    bench_adamw(args.repeats)
    bench_render(args.repeats)
    bench_perplexity(args.repeats)
    bench_kl_grad(args.repeats)


if __name__ == "__main__":
    main()
