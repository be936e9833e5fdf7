"""End-to-end approximation pipeline: targets, chart fits, errors and soundness checks.

Two fitting routes are offered.  ``fit="tangent"`` fits each chart-local
function on a grid in its tangent box, which is the textbook route and the
right one for flat patches and rate studies.  ``fit="manifold"`` fits each
chart's extended wavelet sum to f times the chart's partition weight on
manifold samples, using the same normal offsets the compiled network sees.
On curved manifolds with a coarse atlas this also accounts for samples that
leave the ball U_i but stay within the extension's support.
"""

from __future__ import annotations

import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .atlas import (
    Atlas,
    AtlasError,
    ManifoldModel,
    PartitionOfUnity,
    build_atlas,
    chart_coords,
    chart_inverse_batch,
    chart_local_function,
    verify_radii,
)
from .expansion import (
    Dictionary,
    Expansion,
    SingularFitWarning,
    fit_on_samples,
    l2_error,
    oga_approximate,
    sup_error,
    truncate_scale_K,
)
from .frame import AmbientExtensionParams, FrameParams, WaveletIndex
from . import kernels
from .network import analytic_evaluate, chart_contributions

TARGETS = ("gaussian_bump", "sphere_harmonic", "finite_combination")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (ValueError, AtlasError, FloatingPointError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def default_planted_terms(d: int) -> list[dict]:
    """Eight wavelets with pairwise disjoint supports inside [-4, 4] (d=1) or [-3, 3]^2."""
    coeffs = [1.0, -0.8, 0.6, -1.2, 0.9, -0.5, 1.1, -0.7]
    if d == 1:
        # k = 4: lattice step 1/16, support half-width 0.375, centres 1 apart
        centres = [[-56 + 16 * j] for j in range(8)]
        k = 4
    elif d == 2:
        # k = 6: lattice step 1/8, support half-width 0.53, centres 1.5 apart
        centres = [[x, y] for y in (-12, 12) for x in (-18, -6, 6, 18)]
        k = 6
    else:
        raise ValueError("default planted terms exist for d = 1 and d = 2 only")
    return [{"k": k, "n": n, "coeff": c} for n, c in zip(centres, coeffs)]


def make_target(spec: dict, model: ManifoldModel) -> Callable[[np.ndarray], np.ndarray]:
    """Target function on ambient points, built from a target description."""
    kind = spec["id"]
    if kind == "gaussian_bump":
        default = {"sphere2": [0.0, 0.0, 1.0], "circle": [1.0, 0.0]}.get(model.kind, [0.0] * model.q)
        center = np.asarray(spec.get("center", default), dtype=float)
        if center.shape != (model.q,):
            raise ValueError(f"gaussian_bump center needs {model.q} base coordinates")
        sigma = float(spec.get("sigma", 0.5))

        def gaussian(x):
            y = model.to_base(np.atleast_2d(x))
            return np.exp(-((y - center) ** 2).sum(axis=1) / (2.0 * sigma**2))

        return gaussian

    if kind == "sphere_harmonic":
        if model.kind != "sphere2":
            raise ValueError("sphere_harmonic needs a sphere2 model")
        legendre = {1: lambda z: z, 2: lambda z: 0.5 * (3 * z**2 - 1), 3: lambda z: 0.5 * (5 * z**3 - 3 * z)}
        poly = legendre[int(spec.get("degree", 2))]
        return lambda x: poly(model.to_base(np.atleast_2d(x))[:, 2])

    if kind == "finite_combination":
        if model.kind != "flat_patch":
            raise ValueError("finite_combination is defined on flat_patch models")
        terms = spec.get("terms") or default_planted_terms(model.d)
        idx = [WaveletIndex(int(t["k"]), tuple(int(v) for v in t["n"])) for t in terms]
        if any(i.d != model.d for i in idx):
            raise ValueError("finite_combination offsets must have d entries")
        ks = np.array([i.k for i in idx], dtype=np.int64)
        bs = np.array([i.b for i in idx], dtype=float).reshape(len(idx), model.d)
        coef = np.array([float(t["coeff"]) for t in terms])
        c_d = FrameParams.for_dim(model.d).c_d
        return lambda x: kernels.psi_combine(model.to_base(np.atleast_2d(x)), ks, bs, coef, c_d)

    raise ValueError(f"unknown target {kind!r}")


# ---------------------------------------------------------------------------
# experiment setup
# ---------------------------------------------------------------------------

@dataclass
class Experiment:
    model: ManifoldModel
    atlas: Atlas
    pou: PartitionOfUnity
    params: FrameParams
    target: Callable | None
    samples: np.ndarray
    seed: int


def atlas_samples(model: ManifoldModel, n: int, seed: int) -> np.ndarray:
    """Manifold samples for the atlas.  Flat patches start at the patch centre,
    so a single covering chart is centred and tangent and base coordinates agree."""
    samples = model.sample(n, seed=seed)
    if model.kind == "flat_patch":
        samples = np.vstack([model.to_ambient(np.zeros(model.d)), samples])
    return samples


def build_experiment(model: ManifoldModel, delta: float, n_samples: int, seed: int,
                     target: dict | None = None, fixture=None) -> Experiment:
    with stage("atlas"):
        samples = atlas_samples(model, n_samples, seed)
        atlas = build_atlas(model, delta, samples, seed=seed)
    with stage("target"):
        fn = make_target(target, model) if target is not None else None
    return Experiment(model, atlas, PartitionOfUnity(atlas), FrameParams.for_dim(model.d, fixture),
                      fn, samples, seed)


def chart_box(exp: Experiment, chart_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Tangent-coordinate box holding the chart-local function's support."""
    chart = exp.atlas.charts[chart_id]
    delta = exp.atlas.delta
    if exp.model.kind == "flat_patch":
        # u = y - y_anchor exactly, so the box is the patch shifted by the anchor
        y0 = exp.model.to_base(chart.anchor)
        hw = exp.model.half_width
        lo = np.maximum(-hw - y0, -delta)
        hi = np.minimum(hw - y0, delta)
        return lo, hi
    near = exp.samples[np.linalg.norm(exp.samples - chart.anchor, axis=1) < delta]
    u, _ = chart_coords(chart, near)
    return u.min(axis=0), u.max(axis=0)


def _need_target(exp: Experiment):
    if exp.target is None:
        raise StageError("fit", ValueError("no target function configured"))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def fit_tangent(exp: Experiment, K: int, k_min: int) -> list[Expansion]:
    """Scale-K truncation of every chart-local function on its tangent box."""
    _need_target(exp)
    out = []
    with stage("fit"), warnings.catch_warnings():
        warnings.simplefilter("ignore", SingularFitWarning)
        for i in range(exp.atlas.size):
            local = chart_local_function(exp.target, i, exp.atlas, exp.pou)
            lo, hi = chart_box(exp, i)
            out.append(truncate_scale_K(local, exp.params, lo, hi, K, k_min=k_min, chart_id=i))
    return out


def fit_manifold(exp: Experiment, K: int, k_min: int, n_fit: int, seed: int) -> list[Expansion]:
    """Fit every chart's extended sum to f * eta_i on manifold samples.

    Only samples where the chart's extension is active (normal offset above
    the masking level) enter each chart's system; elsewhere the network's
    chart output is exactly zero whatever the coefficients.
    """
    _need_target(exp)
    atlas, model = exp.atlas, exp.model
    ext = AmbientExtensionParams.from_delta(model.m, model.d, atlas.delta)
    with stage("fit"):
        pts = model.sample(n_fit, seed=seed)
        values = exp.target(pts)
        weights = exp.pou.weights(pts)
    out = []
    with stage("fit"), warnings.catch_warnings():
        warnings.simplefilter("ignore", SingularFitWarning)
        for i, chart in enumerate(atlas.charts):
            u, v = chart_coords(chart, pts)
            w = ext.normal_offset(v)
            active = w > -2.0
            out.append(fit_on_samples(u[active], values[active] * weights[active, i], exp.params,
                                      k_min, K, normal_offset=w[active], chart_id=i))
    return out


def fit_expansions(exp: Experiment, K: int, k_min: int, fit: str = "tangent",
                   n_fit: int = 20000, seed: int = 0) -> list[Expansion]:
    if fit == "tangent":
        return fit_tangent(exp, K, k_min)
    if fit == "manifold":
        return fit_manifold(exp, K, k_min, n_fit, seed)
    raise StageError("fit", ValueError(f"unknown fit mode {fit!r}"))


def oga_chart(exp: Experiment, chart_id: int, N: int, k_min: int, k_max: int):
    """OGA on one chart-local function; returns (OGAResult, Dictionary)."""
    _need_target(exp)
    with stage("fit"):
        lo, hi = chart_box(exp, chart_id)
        dic = Dictionary.build(exp.params, lo, hi, k_min, k_max)
        local = chart_local_function(exp.target, chart_id, exp.atlas, exp.pou)
        return oga_approximate(local, dic, N, chart_id=chart_id), dic


# ---------------------------------------------------------------------------
# errors
# ---------------------------------------------------------------------------

def manifold_errors(exp: Experiment, expansions: list[Expansion], n_eval: int, seed: int) -> dict:
    """Errors of the assembled approximation on independent manifold samples.

    ``l2`` is the Monte Carlo estimate sqrt(area * mean squared error).
    """
    _need_target(exp)
    with stage("evaluate"):
        x = exp.model.sample(n_eval, seed=seed)
        diff = analytic_evaluate(exp.atlas, expansions, exp.params, x) - exp.target(x)
    return {
        "l2": math.sqrt(exp.model.surface_area * float(np.mean(diff**2))),
        "sup": float(np.abs(diff).max()),
        "samples": int(n_eval),
    }


def chart_errors(exp: Experiment, expansion: Expansion, K: int | None = None) -> dict:
    """Chart-local sup (on the fit-resolution vertex grid) and quadrature L2 errors."""
    _need_target(exp)
    with stage("evaluate"):
        i = expansion.chart_id
        local = chart_local_function(exp.target, i, exp.atlas, exp.pou)
        lo, hi = chart_box(exp, i)
        sup = sup_error(local, expansion, exp.params, lo, hi, K=K)
        l2 = l2_error(local, expansion, exp.params, lo, hi)
    return {"sup": sup, "l2": l2}


# ---------------------------------------------------------------------------
# soundness checks
# ---------------------------------------------------------------------------

def pou_check(exp: Experiment, n: int, seed: int) -> dict:
    x = exp.model.sample(n, seed=seed)
    dev = float(np.abs(exp.pou.weights(x).sum(axis=1) - 1.0).max())
    return {"max_deviation": dev, "samples": n, "passed": dev <= 1e-9}


def reconstruction_check(exp: Experiment, n: int, seed: int) -> dict:
    """Sum over the charts whose ball holds x of the chart-local functions at phi_i(x)."""
    _need_target(exp)
    x = exp.model.sample(n, seed=seed)
    total = np.zeros(n)
    for i, chart in enumerate(exp.atlas.charts):
        near = np.linalg.norm(x - chart.anchor, axis=1) < exp.atlas.delta
        if np.any(near):
            u, _ = chart_coords(chart, x[near])
            total[near] += chart_local_function(exp.target, i, exp.atlas, exp.pou)(u)
    dev = float(np.abs(total - exp.target(x)).max())
    return {"max_deviation": dev, "samples": n, "passed": dev <= 1e-9}


def radii_check(exp: Experiment, samples=None) -> dict:
    rep = verify_radii(exp.atlas, exp.samples if samples is None else samples)
    rep["guidance"] = None if rep["passed"] else (
        "normal distances violate the extension radii; rebuild the atlas with a smaller delta")
    return rep


def masking_check(exp: Experiment, net, n: int, seed: int) -> dict:
    """Charts whose ball misses x but whose image holds phi_i(x) must output zero at x."""
    x = exp.model.sample(n, seed=seed)
    parts = chart_contributions(net, x)
    checked, worst = 0, 0.0
    for i, chart in enumerate(exp.atlas.charts):
        outside = np.linalg.norm(x - chart.anchor, axis=1) >= exp.atlas.delta
        if not np.any(outside):
            continue
        _, in_image = chart_inverse_batch(chart, exp.model, chart_coords(chart, x[outside])[0])
        rows = np.nonzero(outside)[0][in_image]
        checked += int(rows.size)
        if rows.size:
            worst = max(worst, float(np.abs(parts[rows, i]).max()))
    return {"pairs_checked": checked, "max_masked_output": worst, "passed": worst <= 1e-12}
