"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--sizes 1000 100000 1000000] [--repeat 5]

Reports the best-of-``repeat`` wall time of the marginal log-likelihood
terms, the compensated sum and a full single-bin Gamma fit.
"""
import argparse
import timeit

import numpy as np
from scipy import special

from socal.fitting import fit_gamma_mml
from socal.kernels import get_backend


def _data(size, seed=0):
    rng = np.random.default_rng(seed)
    n = np.ascontiguousarray(rng.geometric(1 / 50, size).astype(float))
    y = np.ascontiguousarray(rng.poisson(rng.gamma(1.5, 1 / 40.0, size) * n).astype(float))
    return y, n


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[1_000, 100_000, 1_000_000])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    py = get_backend("python")
    try:
        cy = get_backend("cython")
    except ImportError:
        print("compiled kernels not built; nothing to compare")
        return 1

    a, b = 1.3, 35.0
    consts = (float(special.gammaln(a)), float(special.digamma(a)), float(special.polygamma(1, a)))
    print(f"{'kernel':<14}{'items':>10}{'python s':>12}{'cython s':>12}{'speedup':>9}")
    for size in args.sizes:
        y, n = _data(size)
        cases = {
            "loglik terms": lambda k: k.gamma_poisson_terms(y, n, a, b, *consts),
            "sum": lambda k: k.compensated_sum(y),
            "gamma fit": lambda k: fit_gamma_mml(y, n, backend=k),
        }
        for name, call in cases.items():
            t_py = _best(lambda: call(py), args.repeat)
            t_cy = _best(lambda: call(cy), args.repeat)
            print(f"{name:<14}{size:>10}{t_py:>12.5f}{t_cy:>12.5f}{t_py / t_cy:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
