"""Compare the compiled GPD kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Each workload is timed with ``timeit`` (best of ``--repeat``) on both
backends; results are checked to agree before timing.
"""
import argparse
import timeit

import numpy as np
from scipy import stats

from margsens import _kernels_py

try:
    from margsens import _kernels
except ImportError:
    _kernels = None


def workloads(rng):
    x = stats.genpareto.rvs(0.1, scale=2.0, size=1000, random_state=rng)
    n = 285
    design = np.column_stack([np.ones(n), np.linspace(-1, 1, n),
                              np.sin(np.linspace(0, np.pi, n)), np.cos(np.linspace(0, np.pi, n))])
    xn = stats.genpareto.rvs(0.1, scale=np.exp(0.3 * design[:, 1]), random_state=rng)
    boot = np.sort(rng.choice(xn, size=(100, n), replace=True), axis=1)
    probs = np.ascontiguousarray(0.99 * np.arange(1, 21) / 20)
    x0 = np.array([np.log(x.mean()), 0.0])
    return {
        "gpd_nll (n=1000, one evaluation)": lambda k: k.gpd_nll(x, 0.7, 0.1),
        "simplex_gpd (n=1000)": lambda k: k.simplex_gpd(x, x0),
        "simplex_gpd_ns (n=285, 4 scale terms)": lambda k: k.simplex_gpd_ns(xn, design, np.zeros(5)),
        "eqd_bootstrap (100 resamples of 285)": lambda k: k.eqd_bootstrap(boot, probs, x0),
    }


def best_time(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat=repeat, number=number)) / number


def agree(a, b):
    """Simplex results may stop at slightly different points; compare values tightly."""
    if not isinstance(a, tuple):
        return np.isclose(a, b, rtol=1e-12)
    if len(a) == 4:  # (x, fval, n_iter, converged)
        return np.isclose(a[1], b[1], rtol=1e-9) and np.allclose(a[0], b[0], atol=1e-5)
    return np.isclose(a[0], b[0], rtol=1e-6) and a[1] == b[1]  # (discrepancy, n_failed)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `python setup.py build_ext --inplace`")
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'workload':42s} {'python':>12s} {'compiled':>12s} {'speedup':>9s}")
    for name, fn in workloads(rng).items():
        a, b = fn(_kernels_py), fn(_kernels)
        if not agree(a, b):
            raise SystemExit(f"{name}: backends disagree ({a} vs {b})")
        tp = best_time(lambda: fn(_kernels_py), args.repeat)
        tc = best_time(lambda: fn(_kernels), args.repeat)
        print(f"{name:42s} {tp * 1e3:10.3f}ms {tc * 1e3:10.3f}ms {tp / tc:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
