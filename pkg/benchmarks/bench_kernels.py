#!/usr/bin/env python3
"""Time the numba kernels against the pure-numpy fallbacks.

The kernels run once per optimizer step over every trainable parameter, so
their per-call overhead matters at small array sizes. Run as

    python benchmarks/bench_kernels.py [--sizes 64,512,4096] [--repeats 20000]

The active backend for the library itself is chosen at import time; set
PACTUNE_NO_NUMBA=1 to force the numpy path in real runs.
"""

import argparse
import time

import numpy as np

from pactune import kernels


def time_call(fn, args, repeats):
    fn(*args)  # warm up (includes JIT compilation for the numba path)
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats


def bench_size(n, repeats):
    rng = np.random.default_rng(0)
    rows = []
    grad = rng.standard_normal(n)
    std = np.exp(rng.standard_normal(n) * 0.1)
    tau = rng.standard_normal(n)
    mu_q = rng.standard_normal(n)
    var_q = np.exp(rng.standard_normal(n) * 0.1)
    mu_p = rng.standard_normal(n)

    cases = {
        "adam_update": lambda impl: time_call(
            impl["adam_update"],
            (rng.standard_normal(n), np.zeros(n), np.zeros(n), grad, 5,
             1e-3, 0.9, 0.98, 1e-3, 0.01),
            repeats),
        "apply_noise": lambda impl: time_call(
            impl["apply_noise"], (mu_q, std, tau), repeats),
        "kl_accumulate": lambda impl: time_call(
            impl["kl_accumulate"], (mu_q, var_q, mu_p), repeats),
    }
    for name, runner in cases.items():
        t_np = runner(kernels.IMPLEMENTATIONS["numpy"])
        if "numba" in kernels.IMPLEMENTATIONS:
            t_nb = runner(kernels.IMPLEMENTATIONS["numba"])
            rows.append((name, n, t_np, t_nb, t_np / t_nb))
        else:
            rows.append((name, n, t_np, float("nan"), float("nan")))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="64,512,4096",
                        help="comma-separated array sizes")
    parser.add_argument("--repeats", type=int, default=20_000)
    args = parser.parse_args()

    print(f"active library backend: {kernels.BACKEND}")
    if "numba" not in kernels.IMPLEMENTATIONS:
        print("numba unavailable or disabled; timing the numpy path only")
    print(f"{'kernel':<16} {'size':>6} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        for name, size, t_np, t_nb, speedup in bench_size(n, args.repeats):
            print(f"{name:<16} {size:>6} {t_np * 1e6:>10.2f} {t_nb * 1e6:>10.2f} "
                  f"{speedup:>7.1f}x")


if __name__ == "__main__":
    main()
