"""Compare the compiled and numpy wavelet kernels.

Run with ``python3 benchmarks/bench_kernels.py``.  Each kernel is timed on
the same random batch with both backends (best of ``--repeat`` runs) and the
outputs are checked to agree before the timings are reported.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from reluwave import _pykernels, kernels
from reluwave.frame import FrameParams


def make_batch(d, n_points, n_terms, seed):
    rng = np.random.default_rng(seed)
    u = rng.uniform(-2, 2, size=(n_points, d))
    w = rng.uniform(-2.5, 0.0, size=n_points)
    ks = rng.integers(-1, 5, size=n_terms)
    bs = np.rint(rng.uniform(-2, 2, size=(n_terms, d)) * 2.0 ** (ks[:, None] / d)) * 2.0 ** (-ks[:, None] / d)
    coeffs = rng.normal(size=n_terms)
    return u, w, ks, bs, coeffs


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench(d, n_points, n_terms, repeat, seed=0):
    cd = FrameParams.for_dim(d).c_d
    u, w, ks, bs, coeffs = make_batch(d, n_points, n_terms, seed)
    calls = {
        "psi_eval": lambda impl: kernels.psi_eval(u, ks, bs, cd, w=w, impl=impl),
        "psi_combine": lambda impl: kernels.psi_combine(u, ks, bs, coeffs, cd, w=w, impl=impl),
        "psi_triplets": lambda impl: kernels.psi_triplets(u, ks, bs, cd, w=w, impl=impl),
    }
    rows = []
    for name, call in calls.items():
        fast, slow = call(None), call(_pykernels)
        if name == "psi_triplets":
            dense = lambda t: np.bincount(t[0] * n_terms + t[1], weights=t[2], minlength=n_points * n_terms)  # noqa: E731
            fast, slow = dense(fast), dense(slow)
        gap = float(np.max(np.abs(np.asarray(fast) - np.asarray(slow))))
        t_fast = best_time(lambda: call(None), repeat)
        t_slow = best_time(lambda: call(_pykernels), repeat)
        rows.append({"kernel": name, "d": d, "points": n_points, "terms": n_terms,
                     "compiled_ms": 1e3 * t_fast, "numpy_ms": 1e3 * t_slow,
                     "speedup": t_slow / t_fast, "max_abs_gap": gap})
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--points", type=int, default=20000)
    parser.add_argument("--terms", type=int, default=200)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--json", action="store_true", help="print JSON instead of a table")
    args = parser.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled extension not available; build it with pip install -e .", file=sys.stderr)
        return 1
    rows = [r for d in (1, 2, 3) for r in bench(d, args.points, args.terms, args.repeat)]
    if args.json:
        print(json.dumps(rows, indent=2))
        return 0
    print(f"{'kernel':<13} {'d':>2} {'compiled ms':>12} {'numpy ms':>10} {'speedup':>8} {'max gap':>9}")
    for r in rows:
        print(f"{r['kernel']:<13} {r['d']:>2} {r['compiled_ms']:>12.2f} {r['numpy_ms']:>10.2f} "
              f"{r['speedup']:>7.1f}x {r['max_abs_gap']:>9.1e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
