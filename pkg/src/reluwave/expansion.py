"""Wavelet coefficients on a chart: greedy selection, scale truncation, error metrics.

Coefficients are fitted, never read off a dual frame.  The orthogonal greedy
algorithm works in the Hilbert space defined by a midpoint grid on the box
(``<f, g> = h^d * sum f g``), in which the dictionary atoms are normalized.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.linalg.lapack as lapack
import scipy.sparse as sp

from . import kernels
from .frame import FrameParams, WaveletIndex, lattice_offsets, psi_kb, richardson_quad, support_halfwidth


class SingularFitWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Tensor midpoint grid on the box [lo, hi] with ``shape`` cells per axis."""

    lo: np.ndarray
    hi: np.ndarray
    shape: tuple[int, ...]

    @classmethod
    def with_spacing(cls, lo, hi, spacing: float) -> "Grid":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        shape = tuple(max(1, math.ceil((b - a) / spacing - 1e-9)) for a, b in zip(lo, hi))
        return cls(lo, hi, shape)

    @property
    def d(self) -> int:
        return self.lo.size

    @property
    def steps(self) -> np.ndarray:
        return (self.hi - self.lo) / np.asarray(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.steps))

    def points(self) -> np.ndarray:
        axes = [a + (np.arange(n) + 0.5) * h for a, n, h in zip(self.lo, self.shape, self.steps)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, self.d)

    def vertices(self) -> np.ndarray:
        """Cell corners including the box faces (an evaluation grid offset from the midpoints)."""
        axes = [np.linspace(a, b, n + 1) for a, b, n in zip(self.lo, self.hi, self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, self.d)


def fit_spacing(K: int, d: int) -> float:
    """Grid spacing for scale-K least-squares fits: an eighth of the finest lattice step.

    This keeps the fit heavily overdetermined in every dimension (roughly 8^d
    samples per finest-scale lattice cell), which matters for d >= 2 where a
    fit that merely interpolates oscillates between the samples.
    """
    return 2.0 ** (-K / d) / 8.0


def dictionary_spacing(k_max: int, d: int) -> float:
    """Default grid spacing for the greedy dictionary, finer than 2^(-(k_max+2)/d)."""
    return 2.0 ** (-(k_max + 3) / d)


# ---------------------------------------------------------------------------
# expansions and dictionaries
# ---------------------------------------------------------------------------

@dataclass
class Expansion:
    """Coefficients of raw (unnormalized) wavelets psi_{k,b} on one chart."""

    chart_id: int
    terms: list[tuple[WaveletIndex, float]] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for idx, c in self.terms:
            if idx in seen:
                raise ValueError(f"duplicate wavelet index {idx}")
            if not math.isfinite(c):
                raise ValueError("non-finite coefficient")
            seen.add(idx)

    def __len__(self):
        return len(self.terms)

    @property
    def ks(self) -> np.ndarray:
        return np.array([i.k for i, _ in self.terms], dtype=np.int64)

    @property
    def offsets(self) -> np.ndarray:
        if not self.terms:
            return np.zeros((0, 1))
        return np.array([i.b for i, _ in self.terms])

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([c for _, c in self.terms], dtype=float)

    def evaluate(self, u, params: FrameParams, normal_offset=None) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if not self.terms:
            return np.zeros(u.shape[0])
        return kernels.psi_combine(u, self.ks, self.offsets, self.coeffs, params.c_d, w=normal_offset)

    def nonzero(self, tol: float = 0.0) -> "Expansion":
        return Expansion(self.chart_id, [(i, c) for i, c in self.terms if abs(c) > tol])

    def to_list(self) -> list[dict]:
        return [{"k": i.k, "n": list(i.n), "b": [repr(float(v)) for v in i.b], "coeff": repr(float(c))}
                for i, c in self.terms]

    def to_json(self) -> str:
        return json.dumps({"chart_id": self.chart_id, "terms": self.to_list()}, indent=1) + "\n"

    @classmethod
    def from_list(cls, chart_id: int, items: list[dict]) -> "Expansion":
        terms = []
        for it in items:
            if "n" in it:
                idx = WaveletIndex(it["k"], tuple(it["n"]))
            else:
                idx = WaveletIndex.at(it["k"], [float(v) for v in it["b"]])
            terms.append((idx, float(it["coeff"])))
        return cls(chart_id, terms)

    @classmethod
    def from_json(cls, text: str) -> "Expansion":
        data = json.loads(text)
        return cls.from_list(data["chart_id"], data["terms"])


def scale_indices(d: int, lo, hi, k_min: int, k_max: int) -> list[WaveletIndex]:
    """lattice_offsets over scales k_min..k_max, sorted by (k, offset)."""
    out = []
    for k in range(k_min, k_max + 1):
        out.extend(lattice_offsets(k, lo, hi))
    return out


@dataclass
class Dictionary:
    """Truncated wavelet dictionary sampled on a midpoint grid of the box.

    ``norms`` are the L2(box) norms of the raw wavelets under the grid inner
    product; atoms are the raw wavelets divided by these norms.
    """

    params: FrameParams
    grid: Grid
    indices: list[WaveletIndex]
    norms: np.ndarray
    matrix: sp.csc_matrix  # raw wavelet values, (grid points, terms)

    @classmethod
    def build(cls, params: FrameParams, lo, hi, k_min: int, k_max: int,
              spacing: float | None = None) -> "Dictionary":
        grid = Grid.with_spacing(lo, hi, spacing or dictionary_spacing(k_max, params.d))
        indices = scale_indices(params.d, grid.lo, grid.hi, k_min, k_max)
        matrix = design_matrix(grid.points(), indices, params)
        norms = np.sqrt(np.asarray(matrix.multiply(matrix).sum(axis=0)).ravel() * grid.cell_volume)
        keep = norms > 0
        if not np.all(keep):
            indices = [i for i, ok in zip(indices, keep) if ok]
            matrix = matrix[:, np.nonzero(keep)[0]]
            norms = norms[keep]
        if not indices:
            raise ValueError("dictionary is empty")
        return cls(params, grid, indices, norms, sp.csc_matrix(matrix))

    def __len__(self):
        return len(self.indices)

    def inner(self, a, b) -> float:
        return float(np.dot(a, b)) * self.grid.cell_volume

    def atoms(self) -> sp.csc_matrix:
        return sp.csc_matrix(self.matrix @ sp.diags(1.0 / self.norms))

    def sample(self, f) -> np.ndarray:
        return np.asarray(f(self.grid.points()), dtype=float)

    def combination(self, unit_coeffs) -> np.ndarray:
        """Grid values of sum_j c_j g_j for unit-norm atoms g_j."""
        return self.matrix @ (np.asarray(unit_coeffs) / self.norms)


def design_matrix(points, indices: list[WaveletIndex], params: FrameParams) -> sp.csc_matrix:
    ks = np.array([i.k for i in indices], dtype=np.int64)
    bs = np.array([i.b for i in indices]).reshape(len(indices), params.d)
    r, c, v = kernels.psi_triplets(points, ks, bs, params.c_d)
    return sp.csc_matrix((v, (r, c)), shape=(points.shape[0], len(indices)))


# ---------------------------------------------------------------------------
# inner products
# ---------------------------------------------------------------------------

def quad_inner_product(f, idx: WaveletIndex, params: FrameParams, lo, hi,
                       rtol: float = 1e-7, return_error: bool = False, seed: int = 0):
    """Integral of f * psi_{k,b} over the box intersected with the wavelet support.

    Midpoint rule with Richardson refinement for d <= 2; Monte Carlo with 10^6
    samples for d >= 3 (the error estimate is then the standard error).
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    half = support_halfwidth(idx.k, params.d)
    a = np.maximum(lo, idx.b - half)
    b = np.minimum(hi, idx.b + half)
    if np.any(b <= a):
        return (0.0, 0.0) if return_error else 0.0

    def integrand(p):
        vals = np.asarray(f(p), dtype=float) * psi_kb(p, idx, params)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("non-finite integrand")
        return vals

    if params.d <= 2:
        # absolute floor scaled by the size of |psi| over the region
        scale = 2.0 ** (idx.k / 2.0) * float(np.prod(b - a))
        val = richardson_quad(integrand, a, b, n0=32, atol=rtol * 1e-3 * scale, rtol=rtol,
                              max_points=1.7e7)[0]
        result, err = float(val), rtol * max(abs(float(val)), 1e-3 * scale)
    else:
        rng = np.random.default_rng(seed)
        pts = rng.uniform(a, b, size=(10**6, params.d))
        vals = integrand(pts) * float(np.prod(b - a))
        result, err = float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))
    return (result, err) if return_error else result


# ---------------------------------------------------------------------------
# orthogonal greedy algorithm
# ---------------------------------------------------------------------------

@dataclass
class OGAResult:
    expansion: Expansion
    residual_norms: list[float]  # ||r_0|| = ||f||, then ||r_1||, ...
    selected: list[int]  # dictionary positions in selection order
    unit_coeffs: np.ndarray  # coefficients of the unit-norm atoms, selection order
    stopped_early: str | None = None

    def __iter__(self):
        return iter((self.expansion, self.residual_norms))


def oga_approximate(f, dictionary: Dictionary, N: int, chart_id: int = 0,
                    max_condition: float = 1e12) -> OGAResult:
    """N steps of the orthogonal greedy algorithm.

    ``f`` is either a callable on R^d or the vector of its grid values.  Each
    step picks the atom most correlated with the residual (ties go to the
    lowest scale, then lexicographic offset, which is dictionary order) and
    projects f orthogonally onto the span of all picked atoms.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    y = f if isinstance(f, np.ndarray) else dictionary.sample(f)
    y = np.asarray(y, dtype=float)
    vol = dictionary.grid.cell_volume
    atoms = dictionary.atoms()
    sqv = math.sqrt(vol)

    # orthonormal basis of the selected span in the scaled space sqrt(vol) * values
    n = y.size
    basis = np.zeros((n, min(N, len(dictionary))))
    rmat = np.zeros((basis.shape[1], basis.shape[1]))
    target = sqv * y
    resid = target.copy()
    fnorm = float(np.linalg.norm(target))
    norms = [fnorm]
    selected: list[int] = []
    chosen = np.zeros(len(dictionary), dtype=bool)
    stopped = None
    for step in range(basis.shape[1]):
        corr = np.abs(atoms.T @ resid) * sqv
        corr[chosen] = -1.0
        j = int(np.argmax(corr))
        if corr[j] <= 1e-13 * max(fnorm, 1e-300):
            stopped = "residual orthogonal to every remaining atom"
            break
        col = sqv * atoms[:, j].toarray().ravel()
        coef = np.zeros(step + 1)
        vec = col.copy()
        for _ in range(2):  # Gram-Schmidt with one reorthogonalization pass
            proj = basis[:, :step].T @ vec
            vec -= basis[:, :step] @ proj
            coef[:step] += proj
        diag = float(np.linalg.norm(vec))
        coef[step] = diag
        diags = np.abs(np.append(np.diag(rmat)[:step], diag))
        if diag == 0.0 or (diags.max() / diags.min()) ** 2 > max_condition:
            stopped = "Gram system numerically singular"
            break
        basis[:, step] = vec / diag
        rmat[: step + 1, step] = coef
        selected.append(j)
        chosen[j] = True
        resid = target - basis[:, : step + 1] @ (basis[:, : step + 1].T @ target)
        norms.append(float(np.linalg.norm(resid)))

    k = len(selected)
    if k:
        unit = sla.solve_triangular(rmat[:k, :k], basis[:, :k].T @ target)
    else:
        unit = np.zeros(0)
    terms = [(dictionary.indices[j], float(c / dictionary.norms[j])) for j, c in zip(selected, unit)]
    terms.sort(key=lambda t: (t[0].k, t[0].n))
    return OGAResult(Expansion(chart_id, terms), norms, selected, unit, stopped)


# ---------------------------------------------------------------------------
# scale truncation
# ---------------------------------------------------------------------------

def truncate_scale_K(f, params: FrameParams, lo, hi, K: int, k_min: int = -2,
                     chart_id: int = 0, ridge: float = 1e-10) -> Expansion:
    """All lattice wavelets with k_min <= k <= K meeting the box, fitted by least squares.

    The fit samples f on a midpoint grid of spacing ``fit_spacing(K, d)``.
    The normal equations of the column-normalized system are solved directly
    when well conditioned.  The truncated frame is usually linearly dependent;
    then a ridge of ``ridge`` (relative to unit column norms) is added, which
    picks a near minimum-norm solution, and a SingularFitWarning is raised.
    """
    if K < k_min:
        raise ValueError("K must be at least k_min")
    grid = Grid.with_spacing(lo, hi, fit_spacing(K, params.d))
    pts = grid.points()
    indices = scale_indices(params.d, grid.lo, grid.hi, k_min, K)
    A = design_matrix(pts, indices, params)
    y = np.asarray(f(pts), dtype=float)
    coeffs = _least_squares(A, y, ridge)
    return Expansion(chart_id, list(zip(indices, (float(c) for c in coeffs))))


def fit_on_samples(u, y, params: FrameParams, k_min: int, K: int, normal_offset=None,
                   chart_id: int = 0, ridge: float = 1e-10) -> Expansion:
    """Least-squares fit of scattered values y(u) by all wavelets k_min <= k <= K.

    With ``normal_offset`` the atoms are the ambient extensions evaluated at
    the given offsets, so the fit sees exactly what the compiled network will
    compute at those points.  Atoms that vanish on every sample are dropped.
    """
    if K < k_min:
        raise ValueError("K must be at least k_min")
    u = np.atleast_2d(np.asarray(u, dtype=float))
    y = np.asarray(y, dtype=float)
    if u.shape[0] != y.shape[0]:
        raise ValueError("u and y must have the same number of rows")
    if u.shape[0] == 0:
        return Expansion(chart_id, [])
    indices = scale_indices(params.d, u.min(axis=0), u.max(axis=0), k_min, K)
    ks = np.array([i.k for i in indices], dtype=np.int64)
    bs = np.array([i.b for i in indices], dtype=float).reshape(len(indices), params.d)
    rows, cols, vals = kernels.psi_triplets(u, ks, bs, params.c_d, w=normal_offset)
    A = sp.csc_matrix((vals, (rows, cols)), shape=(u.shape[0], len(indices)))
    used = np.diff(A.indptr) > 0
    A = A[:, used]
    indices = [i for i, keep in zip(indices, used) if keep]
    coeffs = _least_squares(A, y, ridge)
    return Expansion(chart_id, list(zip(indices, (float(c) for c in coeffs))))


def _least_squares(A: sp.csc_matrix, y: np.ndarray, ridge: float) -> np.ndarray:
    if not np.any(y):
        return np.zeros(A.shape[1])
    colnorm = np.sqrt(np.asarray(A.multiply(A).sum(axis=0)).ravel())
    colnorm[colnorm == 0] = 1.0
    scaled = A @ sp.diags(1.0 / colnorm)
    gram = (scaled.T @ scaled).toarray()
    rhs = scaled.T @ y
    factor, info = lapack.dpotrf(gram, lower=0)
    rcond = 0.0
    if info == 0:
        rcond, info = lapack.dpocon(factor, np.abs(gram).sum(axis=0).max(), uplo="U")
    if info == 0 and rcond > 1e-12:
        return sla.cho_solve((factor, False), rhs) / colnorm
    warnings.warn(f"normal equations singular (reciprocal condition {rcond:.1e}); "
                  f"regularizing with ridge {ridge:g}", SingularFitWarning, stacklevel=3)
    gram[np.diag_indices_from(gram)] += ridge
    try:
        sol = sla.solve(gram, rhs, assume_a="pos")
    except (sla.LinAlgError, ValueError):
        sol = sla.lstsq(gram, rhs, cond=1e-13, lapack_driver="gelsd")[0]
    return sol / colnorm


# ---------------------------------------------------------------------------
# error metrics and rates
# ---------------------------------------------------------------------------

def l2_error(f, expansion: Expansion, params: FrameParams, lo, hi, max_points: float = 4e6) -> float:
    """Quadrature L2 norm of f - sum alpha psi over the box."""
    def sq(p):
        return (np.asarray(f(p), dtype=float) - expansion.evaluate(p, params)) ** 2

    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    val = richardson_quad(sq, lo, hi, n0=64 if lo.size == 1 else 32, rtol=1e-6, atol=1e-14,
                          max_points=max_points)[0]
    return math.sqrt(max(float(val), 0.0))


def sup_error(f, expansion: Expansion, params: FrameParams, lo, hi, K: int | None = None,
              spacing: float | None = None) -> float:
    """Max |f - sum alpha psi| over the cell corners of a grid finer than 2^(-(K+2)/d)."""
    if spacing is None:
        spacing = fit_spacing(K if K is not None else max((i.k for i, _ in expansion.terms), default=0),
                              params.d)
    pts = Grid.with_spacing(lo, hi, spacing).vertices()
    return float(np.max(np.abs(np.asarray(f(pts), dtype=float) - expansion.evaluate(pts, params))))


@dataclass
class RateReport:
    Ns: list[int]
    errors: list[float]
    slope: float
    metric: str
    intercept: float = 0.0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.Ns, self.Ns[1:])):
            raise ValueError("Ns must be strictly increasing")
        if any(e <= 0 for e in self.errors):
            raise ValueError("errors must be positive")

    def to_csv(self, config_hash: str = "") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["N", "error", "metric", "config_hash"])
        for n, e in zip(self.Ns, self.errors):
            w.writerow([n, repr(float(e)), self.metric, config_hash])
        return buf.getvalue()


def rate_fit(Ns, errors, metric: str = "l2_squared") -> RateReport:
    """Least-squares slope of log(error) against log(N)."""
    Ns = [int(n) for n in Ns]
    errors = [float(e) for e in errors]
    if len(Ns) < 3 or len(Ns) != len(errors):
        raise ValueError("rate fit needs at least 3 (N, error) pairs")
    if any(e <= 0 for e in errors) or any(n <= 0 for n in Ns):
        raise ValueError("rate fit needs positive N and errors")
    slope, intercept = np.polyfit(np.log(Ns), np.log(errors), 1)
    return RateReport(Ns, errors, float(slope), metric, float(intercept))
