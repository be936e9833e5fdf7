"""Numerical self-checks of the frame construction for one dimension."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .frame import (
    FrameParams,
    WaveletIndex,
    moment_check,
    psi_kb,
    s_kernel,
    support_count,
    support_halfwidth,
)

# a few indices per dimension; d = 3 quadratures are the slow ones, so fewer there
_MOMENT_INDICES = {
    1: [(0, (0,)), (1, (3,)), (-1, (-2,)), (3, (5,))],
    2: [(0, (0, 0)), (1, (1, -2)), (-1, (2, 1))],
    3: [(0, (0, 0, 0)), (3, (2, -1, 1))],
}
_BOUND_GRID = {1: 4001, 2: 301, 3: 61}


@dataclass
class Check:
    name: str
    passed: bool
    value: float | None
    limit: float | None
    detail: str = ""


def _normalization(params: FrameParams) -> Check:
    m0, _ = moment_check(WaveletIndex(0, (0,) * params.d), params, kind="phi")
    err = abs(m0 - 1.0)
    return Check("normalization", err <= 1e-6, err, 1e-6, "|integral of phi - 1|")


def _moments(params: FrameParams) -> Check:
    worst = 0.0
    for k, n in _MOMENT_INDICES[params.d]:
        m0, m1 = moment_check(WaveletIndex(k, n), params)
        worst = max(worst, abs(m0), float(np.abs(m1).max()))
    return Check("moments", worst <= 1e-6, worst, 1e-6, "max |zeroth|, |first| moment of psi")


def _bound(params: FrameParams) -> Check:
    d = params.d
    worst = -np.inf
    for k in range(-2, 5):
        half = support_halfwidth(k, d)
        ax = np.linspace(-half, half, _BOUND_GRID[d])
        pts = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), -1).reshape(-1, d)
        vals = psi_kb(pts, WaveletIndex(k, (0,) * d), params)
        worst = max(worst, float(np.abs(vals).max() - 2.0 ** (k / 2 - 2)))
    return Check("bound", worst <= 1e-12, worst, 1e-12, "max of sup|psi| - 2^(k/2-2) over k")


def _support(params: FrameParams, rng) -> Check:
    d = params.d
    if d > 2:
        return Check("support_count", True, None, None, "skipped for d > 2")
    worst = max(support_count(x, k, d) for k in range(-2, 5) for x in rng.uniform(-4, 4, size=(50, d)))
    return Check("support_count", worst <= 12**d, float(worst), float(12**d),
                 "max brute-force count of wavelets per scale at a point")


def _identity(params: FrameParams, rng, n: int = 1000) -> Check:
    d = params.d
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(-4, 8))
        idx = WaveletIndex(k, tuple(int(v) for v in rng.integers(-5, 6, size=d)))
        x = idx.b + rng.uniform(-1, 1, size=d) * support_halfwidth(k, d)
        lhs = float(psi_kb(x, idx, params))
        rhs = float(2.0 ** (-k / 2) * (s_kernel(x, idx.b, k, params) - s_kernel(x, idx.b, k - 1, params)))
        worst = max(worst, abs(lhs - rhs) / (1.0 + abs(lhs)))
    return Check("identity", worst <= 1e-12, worst, 1e-12, "relative gap to 2^(-k/2)(S_k - S_(k-1))")


def run_selfcheck(d: int, fixture=None, seed: int = 0) -> dict:
    """All frame checks for dimension d; ``fixture`` overrides the stored C_d."""
    if d not in (1, 2, 3):
        raise ValueError("self-check supports d in {1, 2, 3}")
    params = FrameParams.for_dim(d, fixture)
    rng = np.random.default_rng(seed + d)
    checks = [_normalization(params), _moments(params), _bound(params), _support(params, rng),
              _identity(params, rng)]
    return {
        "d": d,
        "c_d": params.c_d,
        "checks": [asdict(c) for c in checks],
        "failed": [c.name for c in checks if not c.passed],
        "passed": all(c.passed for c in checks),
    }
