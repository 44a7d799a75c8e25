"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeats 20] [--n-x 121] [--paths 4096]

Reports the median time per call of each backend, the speed-up, and whether
the two backends produce bitwise-identical results.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from commonagency import kernels


def _time(fn, repeats):
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def bench_stencil(impls, n_x, repeats):
    rng = np.random.default_rng(0)
    cov = np.array([[1.0, 0.5], [0.5, 1.25]])
    plan = kernels.StencilPlan((n_x, n_x), np.array([0.1, 0.1]), cov)
    u = rng.standard_normal((n_x, n_x))
    out = {}
    for name, impl in impls.items():
        out[name] = (_time(lambda: plan.apply(u, impl), repeats), plan.apply(u, impl))
    return out


def bench_em_step(impls, n_paths, repeats):
    rng = np.random.default_rng(1)
    n, nc = 2, 2
    sigma = np.array([[1.0, 0.0], [0.5, 0.8]])
    drift = rng.standard_normal((n_paths, n))
    dW = rng.standard_normal((n_paths, n)) * 0.03
    alpha = rng.standard_normal((n_paths, nc))
    beta = rng.standard_normal((n_paths, nc, n))
    rate = rng.random(n_paths)
    out = {}
    for name, impl in impls.items():
        def call():
            X = np.zeros((n_paths, n))
            xi = np.zeros((n_paths, nc))
            cost = np.zeros(n_paths)
            kernels.em_step(X, drift, sigma, dW, 1e-3, alpha, beta, xi, rate, cost, impl)
            return X, xi, cost
        out[name] = (_time(call, repeats), call())
    return out


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--n-x", type=int, default=121)
    ap.add_argument("--paths", type=int, default=4096)
    args = ap.parse_args(argv)
    impls = kernels.backends()
    print(f"selected backend: {kernels.BACKEND}; available: {', '.join(impls)}")
    print(f"{'kernel':<10} {'backend':<8} {'median [ms]':>12} {'speed-up':>9}  identical")
    for label, res in (("stencil", bench_stencil(impls, args.n_x, args.repeats)),
                       ("em_step", bench_em_step(impls, args.paths, args.repeats))):
        base_t, base_out = res["python"]
        for name, (t, out) in res.items():
            print(f"{label:<10} {name:<8} {1e3 * t:12.4f} {base_t / t:9.2f}  {_same(out, base_out)}")


if __name__ == "__main__":
    main()
