"""Rectifier-built scaling functions and wavelets on R^d and R^m.

The trapezoid ``t`` is a sum of four rectifiers with height 2 on [-1, 1] and
support [-3, 3].  The scaling function is

    phi(x) = C_d * rect(sum_j t(x_j) - 2(d-1))

normalized to unit integral, and the wavelet at scale k and offset b is

    psi_{k,b}(x) = 2^(k/2) * (phi(2^(k/d)(x-b)) - phi(2^((k-1)/d)(x-b)) / 2)

with offsets on the lattice 2^(-k/d) Z^d.
"""

from __future__ import annotations

import functools
import itertools
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

MAX_DIM = 4
K_RANGE = (-8, 16)
FIXTURE = "normalization.json"


def rect(x):
    """Rectifier max(0, x)."""
    return np.maximum(x, 0.0)


def trapezoid(x):
    """rect(x+3) - rect(x+1) - rect(x-1) + rect(x-3)."""
    x = np.asarray(x, dtype=float)
    return rect(x + 3.0) - rect(x + 1.0) - rect(x - 1.0) + rect(x - 3.0)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def _tensor_midpoint_body(d: int, n: int) -> float:
    """Tensor midpoint rule for the integral of rect(sum t(x_j) - 2(d-1)).

    Uses ``n`` cells per unit length on [-3, 3]^d.  At the midpoints every
    value of t is an integer multiple of 1/(2n), so the d-fold sum over the
    grid reduces to convolving the 1-d value histogram with itself; the result
    equals the full tensor-grid sum.
    """
    x = -3.0 + (np.arange(6 * n) + 0.5) / n
    units = np.rint(trapezoid(x) * 2 * n).astype(np.int64)
    hist = np.bincount(units).astype(float)
    total = np.ones(1)
    for _ in range(d):
        total = np.convolve(total, hist)
    values = np.arange(total.size) / (2.0 * n)
    return float(np.dot(total, rect(values - 2.0 * (d - 1)))) / n**d


def normalization_constant(d: int, rtol: float = 1e-9) -> float:
    """C_d such that phi integrates to one.

    Midpoint quadrature with Richardson extrapolation; cells are halved until
    two successive extrapolated integrals agree to ``rtol``.
    """
    if not 1 <= d <= MAX_DIM:
        raise ValueError(f"d must be in [1, {MAX_DIM}], got {d}")
    n = 4
    coarse = _tensor_midpoint_body(d, n)
    prev = None
    while n < 1 << 14:
        n *= 2
        fine = _tensor_midpoint_body(d, n)
        est = (4.0 * fine - coarse) / 3.0
        if prev is not None and abs(est - prev) <= rtol * abs(est):
            return 1.0 / est
        prev, coarse = est, fine
    raise RuntimeError(f"normalization quadrature did not converge for d={d}")


def write_fixture(path, dims=range(1, MAX_DIM + 1)) -> dict:
    """Compute C_d for ``dims`` and store them as decimal strings."""
    table = {str(d): repr(normalization_constant(d)) for d in dims}
    Path(path).write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return table


def load_fixture(path=None) -> dict[int, float]:
    if path is None:
        text = resources.files("reluwave.data").joinpath(FIXTURE).read_text()
    else:
        text = Path(path).read_text()
    return {int(k): float(v) for k, v in json.loads(text).items()}


@functools.lru_cache(maxsize=None)
def _packaged_constants() -> dict[int, float]:
    return load_fixture()


# ---------------------------------------------------------------------------
# parameter records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameParams:
    """Intrinsic dimension and the normalization constant of phi."""

    d: int
    c_d: float

    def __post_init__(self):
        if not 1 <= self.d <= MAX_DIM:
            raise ValueError(f"d must be in [1, {MAX_DIM}], got {self.d}")
        if not self.c_d > 0:
            raise ValueError("c_d must be positive")

    @classmethod
    def for_dim(cls, d: int, fixture=None) -> "FrameParams":
        table = _packaged_constants() if fixture is None else load_fixture(fixture)
        if d not in table:
            raise ValueError(f"no normalization constant recorded for d={d}")
        return cls(d, table[d])

    def spacing(self, k: int) -> float:
        """Lattice spacing 2^(-k/d) at scale k."""
        return 2.0 ** (-k / self.d)


@dataclass(frozen=True, order=True)
class WaveletIndex:
    """Scale ``k`` and integer lattice coordinates ``n``; offset b = n 2^(-k/d)."""

    k: int
    n: tuple[int, ...]

    def __post_init__(self):
        k = int(self.k)
        if not K_RANGE[0] <= k <= K_RANGE[1]:
            raise ValueError(f"scale {k} outside {K_RANGE}")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))

    @property
    def d(self) -> int:
        return len(self.n)

    @property
    def b(self) -> np.ndarray:
        return np.asarray(self.n, dtype=float) * 2.0 ** (-self.k / self.d)

    @classmethod
    def at(cls, k: int, b, rtol: float = 1e-12) -> "WaveletIndex":
        """Index from a real offset; ``b`` must sit on the scale-k lattice."""
        b = np.atleast_1d(np.asarray(b, dtype=float))
        scaled = b * 2.0 ** (k / b.size)
        n = np.rint(scaled)
        if np.any(np.abs(scaled - n) > rtol * np.maximum(1.0, np.abs(scaled))):
            raise ValueError(f"offset {b.tolist()} is not on the scale-{k} lattice")
        return cls(k, tuple(int(v) for v in n))


@dataclass(frozen=True)
class AmbientExtensionParams:
    """Plateau and support radii of the normal-direction trapezoids."""

    m: int
    d: int
    r1: float
    r2: float

    def __post_init__(self):
        if self.m <= self.d:
            raise ValueError(f"ambient dimension m={self.m} must exceed d={self.d}")
        if not 0 < self.r1 < self.r2:
            raise ValueError(f"need 0 < r1 < r2, got r1={self.r1}, r2={self.r2}")

    @classmethod
    def from_delta(cls, m: int, d: int, delta: float) -> "AmbientExtensionParams":
        return cls(m, d, delta / 2.0, math.sqrt(3.0) / 2.0 * delta)

    @property
    def codim(self) -> int:
        return self.m - self.d

    @property
    def plateau(self) -> float:
        return self.r1 / math.sqrt(self.codim)

    @property
    def support(self) -> float:
        return self.r2 / math.sqrt(self.codim)

    @property
    def slope(self) -> float:
        return 2.0 / (self.support - self.plateau)

    def t_r(self, v):
        """Height-2 trapezoid with plateau r1/sqrt(m-d) and support r2/sqrt(m-d)."""
        # equals slope*(rect(v+c) - rect(v+a) - rect(v-a) + rect(v-c)), but the
        # clipped form is exactly 2 on the plateau and exactly 0 off the support
        v = np.asarray(v, dtype=float)
        a, c = self.plateau, self.support
        return 2.0 * np.clip((c - np.abs(v)) / (c - a), 0.0, 1.0)

    def normal_offset(self, v):
        """sum_j t_r(v_j) - 2(m-d); zero on the plateau, <= -2 off the support."""
        v = np.asarray(v, dtype=float)
        return self.t_r(v).sum(axis=-1) - 2.0 * self.codim


# ---------------------------------------------------------------------------
# scaling functions and wavelets
# ---------------------------------------------------------------------------

def _check_dim(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 and d == 1:
        x = x[None]
    if x.ndim == 0 or x.shape[-1] != d:
        raise ValueError(f"expected trailing dimension {d}, got shape {x.shape}")
    return x


def _phi_body(z, d: int, offset=0.0):
    return rect(trapezoid(z).sum(axis=-1) - 2.0 * (d - 1) + offset)


def scaling_phi(x, params: FrameParams):
    x = _check_dim(x, params.d)
    return params.c_d * _phi_body(x, params.d)


def s_kernel(x, b, k: int, params: FrameParams):
    """Averaging kernel 2^k phi(2^(k/d)(x-b))."""
    x = _check_dim(x, params.d)
    b = _check_dim(b, params.d)
    return 2.0**k * scaling_phi(2.0 ** (k / params.d) * (x - b), params)


def mother_psi(x, params: FrameParams):
    x = _check_dim(x, params.d)
    return scaling_phi(x, params) - 0.5 * scaling_phi(2.0 ** (-1.0 / params.d) * x, params)


def _psi_scaled(diff, k: int, d: int, c_d: float, offset=0.0):
    fine = _phi_body(2.0 ** (k / d) * diff, d, offset)
    coarse = _phi_body(2.0 ** ((k - 1) / d) * diff, d, offset)
    return c_d * 2.0 ** (k / 2.0) * (fine - 0.5 * coarse)


def psi_kb(x, idx: WaveletIndex, params: FrameParams):
    """2^(k/2) psi(2^(k/d)(x - b))."""
    x = _check_dim(x, params.d)
    if idx.d != params.d:
        raise ValueError("wavelet index dimension does not match params.d")
    return _psi_scaled(x - idx.b, idx.k, params.d, params.c_d)


def support_halfwidth(k: int, d: int) -> float:
    """Half-width of the axis-aligned support box of psi_{k,b} (its coarse term)."""
    return 3.0 * 2.0 ** (-(k - 1) / d)


def lattice_offsets(k: int, lo, hi, tol: float = 1e-12) -> list[WaveletIndex]:
    """Lattice wavelets at scale k whose closed support box meets [lo, hi].

    Returned in lexicographic order of the lattice coordinates.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or lo.ndim != 1:
        raise ValueError("box corners must be 1-d arrays of equal length")
    if np.any(hi < lo) or not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
        raise ValueError("box is empty or unbounded")
    d = lo.size
    h = 2.0 ** (-k / d)
    reach = 3.0 * 2.0 ** (1.0 / d)
    ranges = []
    for a, c in zip(lo, hi):
        first = math.ceil(a / h - reach - tol * (1 + abs(a / h)))
        last = math.floor(c / h + reach + tol * (1 + abs(c / h)))
        ranges.append(range(first, last + 1))
    return [WaveletIndex(k, n) for n in itertools.product(*ranges)]


def ambient_psi(x, idx: WaveletIndex, ext: AmbientExtensionParams, params: FrameParams):
    """Wavelet extended to R^m in chart-local coordinates (tangent first)."""
    x = _check_dim(x, ext.m)
    if ext.d != params.d or idx.d != params.d:
        raise ValueError("extension, index and frame dimensions disagree")
    u, v = x[..., : ext.d], x[..., ext.d:]
    return _psi_scaled(u - idx.b, idx.k, params.d, params.c_d, ext.normal_offset(v))


# ---------------------------------------------------------------------------
# quadrature checks
# ---------------------------------------------------------------------------

def _midpoint_sum(fn, lo, hi, n: int, weights=None, slab: int = 1 << 20):
    """Tensor midpoint sums of fn times each weight over [lo, hi].

    ``weights`` is a callable mapping points (p, d) to (p, q); the integrand
    is evaluated slab by slab along the first axis to bound memory.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    d = lo.size
    h = (hi - lo) / n
    axes = [lo[a] + (np.arange(n) + 0.5) * h[a] for a in range(d)]
    rest = np.stack(np.meshgrid(*axes[1:], indexing="ij"), -1).reshape(-1, d - 1) if d > 1 else None
    rows = max(1, slab // max(1, n ** (d - 1)))
    total = None
    for start in range(0, n, rows):
        first = axes[0][start:start + rows]
        if rest is None:
            pts = first[:, None]
        else:
            pts = np.concatenate(
                [np.repeat(first, rest.shape[0])[:, None], np.tile(rest, (first.size, 1))], axis=1)
        vals = fn(pts)
        w = np.ones((pts.shape[0], 1)) if weights is None else weights(pts)
        part = vals @ w
        total = part if total is None else total + part
    return total * np.prod(h)


def richardson_quad(fn, lo, hi, weights=None, n0: int = 16, atol: float = 1e-10,
                    rtol: float = 1e-9, max_points: float = 4e7):
    """Midpoint quadrature with Richardson extrapolation on cell halving.

    Returns the extrapolated vector of integrals of fn times each weight
    column.  Refinement stops when two consecutive extrapolations agree to
    ``atol + rtol*|I|`` or the grid would exceed ``max_points`` nodes, in
    which case the last extrapolation is returned.
    """
    d = np.asarray(lo).size
    n = n0
    coarse = _midpoint_sum(fn, lo, hi, n, weights)
    prev = None
    while (2 * n) ** d <= max_points:
        n *= 2
        fine = _midpoint_sum(fn, lo, hi, n, weights)
        est = (4.0 * fine - coarse) / 3.0
        if prev is not None and np.all(np.abs(est - prev) <= atol + rtol * np.abs(est)):
            return est
        prev, coarse = est, fine
    if prev is None:
        return coarse
    if not np.all(np.isfinite(prev)):
        raise FloatingPointError("quadrature produced non-finite values")
    return prev


def _scaled_phi_moments(scale: float, center, params: FrameParams):
    """Moments (1, x) of phi(scale * (x - center)) on a breakpoint-aligned grid."""
    d = params.d
    half = 3.0 / scale
    fn = lambda p: scaling_phi(scale * (p - center), params)  # noqa: E731
    weights = lambda p: np.concatenate([np.ones((p.shape[0], 1)), p], axis=1)  # noqa: E731
    # 6 cells per unit of scaled length put the kinks at +-1, +-3 on cell faces
    return richardson_quad(fn, center - half, center + half, weights, n0=6,
                           max_points={1: 1e6, 2: 4e6, 3: 1e7, 4: 2e7}[d])


def moment_check(idx: WaveletIndex, params: FrameParams, kind: str = "psi"):
    """Quadrature estimates of the zeroth and first moments.

    ``kind="psi"`` integrates psi_{k,b}; ``kind="phi"`` integrates the scaling
    function phi (whose zeroth moment is 1) as a negative control.  The two
    scaling terms of psi have incommensurate breakpoints when d > 1, so each
    is integrated on its own aligned grid and the results combined.
    Returns ``(m0, m1)`` with m1 of length d.
    """
    d = params.d
    if kind == "psi":
        fine = _scaled_phi_moments(2.0 ** (idx.k / d), idx.b, params)
        coarse = _scaled_phi_moments(2.0 ** ((idx.k - 1) / d), idx.b, params)
        res = 2.0 ** (idx.k / 2.0) * (fine - 0.5 * coarse)
    elif kind == "phi":
        res = _scaled_phi_moments(1.0, np.zeros(d), params)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    if not np.all(np.isfinite(res)):
        raise FloatingPointError("moment quadrature produced non-finite values")
    return float(res[0]), res[1:].copy()


def support_count(x, k: int, d: int) -> int:
    """Brute-force count of lattice wavelets at scale k whose open support holds x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = 2.0 ** (-k / d)
    half = support_halfwidth(k, d)
    span = int(math.ceil(half / h)) + 2
    center = np.rint(x / h).astype(int)
    grids = [np.arange(c - span, c + span + 1) for c in center]
    pts = np.stack(np.meshgrid(*grids, indexing="ij"), -1).reshape(-1, d) * h
    return int(np.count_nonzero(np.all(np.abs(pts - x) < half, axis=1)))
