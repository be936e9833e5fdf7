import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reluwave import kernels
from reluwave.expansion import (
    Dictionary,
    Expansion,
    Grid,
    RateReport,
    SingularFitWarning,
    design_matrix,
    fit_spacing,
    l2_error,
    oga_approximate,
    quad_inner_product,
    rate_fit,
    scale_indices,
    sup_error,
    truncate_scale_K,
)
from reluwave.frame import FrameParams, WaveletIndex, lattice_offsets, psi_kb

pytestmark = pytest.mark.filterwarnings("ignore::reluwave.expansion.SingularFitWarning")


def exact_norm_1d(idx, params):
    """L2 norm of a 1-d wavelet: it is piecewise linear, so Simpson per piece is exact."""
    h_f, h_c = 2.0 ** -idx.k, 2.0 ** -(idx.k - 1)
    b = idx.b[0]
    knots = sorted({b + s * h * c for h in (h_f, h_c) for c in (1, 3) for s in (-1, 1)})
    total = 0.0
    for a, c in zip(knots, knots[1:]):
        m = 0.5 * (a + c)
        fa, fm, fc = (psi_kb(np.array([v]), idx, params) ** 2 for v in (a, m, c))
        total += (c - a) / 6.0 * (fa + 4 * fm + fc)
    return math.sqrt(total)


def gaussian(center, sigma):
    center = np.atleast_1d(np.asarray(center, dtype=float))

    def f(x):
        x = np.asarray(x, dtype=float).reshape(-1, center.size)
        return np.exp(-((x - center) ** 2).sum(axis=1) / (2 * sigma**2))

    return f


def planted_target(dictionary, n_terms, seed):
    """Grid values of a random combination of unit atoms, and its L1 norm."""
    rng = np.random.default_rng(seed)
    pos = rng.choice(len(dictionary), size=n_terms, replace=False)
    coef = np.zeros(len(dictionary))
    coef[pos] = rng.normal(size=n_terms)
    return dictionary.combination(coef), float(np.abs(coef).sum())


# ---------------------------------------------------------------------------
# grids and containers
# ---------------------------------------------------------------------------

def test_grid_points_are_midpoints():
    g = Grid.with_spacing([0.0], [1.0], 0.25)
    assert g.shape == (4,)
    np.testing.assert_allclose(g.points()[:, 0], [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(g.vertices()[:, 0], [0, 0.25, 0.5, 0.75, 1.0])
    assert g.cell_volume == pytest.approx(0.25)


def test_fit_spacing_is_fine_enough():
    for d in (1, 2, 3):
        for K in range(-2, 7):
            assert fit_spacing(K, d) <= 2.0 ** (-(K + 2) / d)


def test_expansion_rejects_duplicates_and_nonfinite():
    idx = WaveletIndex(0, (0,))
    with pytest.raises(ValueError):
        Expansion(0, [(idx, 1.0), (idx, 2.0)])
    with pytest.raises(ValueError):
        Expansion(0, [(idx, float("nan"))])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(-3, 5), st.integers(-20, 20), st.integers(-20, 20),
                          st.floats(-1e6, 1e6, allow_nan=False)),
                max_size=12, unique_by=lambda t: t[:3]))
def test_expansion_json_round_trip(items):
    e = Expansion(3, [(WaveletIndex(k, (a, b)), c) for k, a, b, c in items])
    back = Expansion.from_json(e.to_json())
    assert back == e
    assert back.to_json() == e.to_json()


def test_expansion_evaluate_matches_pointwise_sum():
    p = FrameParams.for_dim(2)
    terms = [(WaveletIndex(0, (0, 0)), 1.5), (WaveletIndex(1, (1, -2)), -0.5), (WaveletIndex(2, (3, 1)), 2.0)]
    e = Expansion(0, terms)
    x = np.random.default_rng(0).uniform(-3, 3, size=(200, 2))
    ref = sum(c * psi_kb(x, i, p) for i, c in terms)
    np.testing.assert_allclose(e.evaluate(x, p), ref, atol=1e-14)


def test_design_matrix_matches_dense_kernel():
    p = FrameParams.for_dim(1)
    idx = scale_indices(1, [-2.0], [2.0], -1, 2)
    x = np.linspace(-2, 2, 57)[:, None]
    dense = np.column_stack([psi_kb(x, i, p) for i in idx])
    np.testing.assert_allclose(design_matrix(x, idx, p).toarray(), dense, atol=1e-15)


def test_dictionary_indices_are_lattice_offsets():
    p = FrameParams.for_dim(2)
    dic = Dictionary.build(p, [-1.0, -1.0], [1.0, 1.0], -1, 1)
    expect = [i for k in range(-1, 2) for i in lattice_offsets(k, [-1.0, -1.0], [1.0, 1.0])]
    # terms whose support only touches the box boundary vanish on the grid and are dropped
    assert set(dic.indices) <= set(expect)
    assert len(dic.indices) >= len(expect) - 4 * 3 * 12
    assert np.all(dic.norms > 0)
    atoms = dic.atoms()
    col_norms = np.sqrt(np.asarray(atoms.multiply(atoms).sum(axis=0)).ravel() * dic.grid.cell_volume)
    np.testing.assert_allclose(col_norms, 1.0, rtol=1e-12)


# ---------------------------------------------------------------------------
# inner products
# ---------------------------------------------------------------------------

def test_inner_product_of_zero_is_zero():
    p = FrameParams.for_dim(1)
    assert quad_inner_product(lambda x: np.zeros(len(x)), WaveletIndex(0, (0,)), p, [-10.0], [10.0]) == 0.0


@pytest.mark.parametrize("k,n", [(0, 0), (1, 3), (-1, -2), (3, 5)])
def test_inner_product_recovers_norm(k, n):
    p = FrameParams.for_dim(1)
    idx = WaveletIndex(k, (n,))
    norm = exact_norm_1d(idx, p)
    f = lambda x: psi_kb(x, idx, p) / norm  # noqa: E731
    val = quad_inner_product(f, idx, p, [-40.0], [40.0])
    assert abs(val - norm) <= 1e-5


@pytest.mark.parametrize("d,k", [(1, 0), (1, 2), (2, 0), (2, 1)])
def test_inner_product_with_constant_vanishes(d, k):
    p = FrameParams.for_dim(d)
    idx = WaveletIndex(k, (1,) * d)
    val = quad_inner_product(lambda x: np.ones(len(x)), idx, p, [-20.0] * d, [20.0] * d)
    assert abs(val) <= 1e-6


def test_inner_product_outside_box_is_zero():
    p = FrameParams.for_dim(1)
    assert quad_inner_product(lambda x: np.ones(len(x)), WaveletIndex(0, (0,)), p, [50.0], [60.0]) == 0.0


def test_inner_product_rejects_nonfinite():
    p = FrameParams.for_dim(1)
    with pytest.raises(FloatingPointError):
        quad_inner_product(lambda x: np.full(len(x), np.inf), WaveletIndex(0, (0,)), p, [-5.0], [5.0])


def test_inner_product_monte_carlo_in_3d():
    p = FrameParams.for_dim(3)
    idx = WaveletIndex(0, (0, 0, 0))
    val, err = quad_inner_product(lambda x: np.ones(len(x)), idx, p, [-9.0] * 3, [9.0] * 3,
                                  return_error=True, seed=1)
    assert err > 0
    assert abs(val) <= 5 * err


# ---------------------------------------------------------------------------
# orthogonal greedy algorithm
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("d", [1, 2])
def test_oga_one_term_recovery(d):
    p = FrameParams.for_dim(d)
    dic = Dictionary.build(p, [-4.0] * d, [4.0] * d, -1, 1)
    j = dic.indices.index(WaveletIndex(0, (0,) * d))
    y = 3.0 * dic.atoms()[:, j].toarray().ravel()
    res = oga_approximate(y, dic, 1)
    assert res.selected == [j]
    assert res.unit_coeffs[0] == pytest.approx(3.0, abs=1e-9)
    assert res.residual_norms[-1] <= 1e-6
    (idx, c), = res.expansion.terms
    assert idx == WaveletIndex(0, (0,) * d)
    assert c == pytest.approx(3.0 / dic.norms[j], rel=1e-9)


def test_oga_rejects_zero_steps():
    p = FrameParams.for_dim(1)
    dic = Dictionary.build(p, [-1.0], [1.0], 0, 1)
    with pytest.raises(ValueError):
        oga_approximate(lambda x: np.ones(len(x)), dic, 0)


def test_oga_first_residual_is_norm_of_target():
    p = FrameParams.for_dim(1)
    dic = Dictionary.build(p, [-2.0], [2.0], -1, 2)
    f = gaussian(0.0, 0.5)
    res = oga_approximate(f, dic, 3)
    y = dic.sample(f)
    assert res.residual_norms[0] == pytest.approx(math.sqrt(dic.inner(y, y)), rel=1e-12)


@pytest.mark.parametrize("d,n_terms,seed", [(1, 8, 0), (1, 32, 1), (2, 16, 2), (2, 64, 3)])
def test_oga_barron_bound_monotone_and_orthogonal(d, n_terms, seed):
    p = FrameParams.for_dim(d)
    dic = Dictionary.build(p, [-2.0] * d, [2.0] * d, -1, 2 if d == 1 else 1)
    y, l1 = planted_target(dic, n_terms, seed)
    res = oga_approximate(y, dic, 40)
    norms = np.array(res.residual_norms)
    steps = np.arange(norms.size)
    assert np.all(norms[1:] <= norms[:-1] * (1 + 1e-12) + 1e-15)
    assert np.all(norms <= l1 / np.sqrt(steps + 1) + 1e-12)
    # final residual is orthogonal to every selected atom
    atoms = dic.atoms()
    fitted = dic.combination(np.bincount(res.selected, weights=res.unit_coeffs, minlength=len(dic)))
    r = y - fitted
    corr = np.abs(atoms[:, res.selected].T @ r) * dic.grid.cell_volume
    assert corr.max() <= 1e-8


def test_oga_matches_brute_force_least_squares():
    p = FrameParams.for_dim(1)
    full = Dictionary.build(p, [-1.0], [1.0], 1, 1)
    keep = slice(2, 12)
    dic = Dictionary(p, full.grid, full.indices[keep], full.norms[keep], full.matrix[:, keep])
    assert len(dic) <= 12
    rng = np.random.default_rng(5)
    y = dic.combination(rng.normal(size=len(dic)))
    res = oga_approximate(y, dic, len(dic))
    assert res.residual_norms[-1] <= 1e-8
    # exhaustive least squares over every subset of the same size as the selection
    A = dic.atoms().toarray() * math.sqrt(dic.grid.cell_volume)
    target = y * math.sqrt(dic.grid.cell_volume)
    size = len(res.selected)
    best = min(np.linalg.norm(target - A[:, s] @ np.linalg.lstsq(A[:, s], target, rcond=None)[0])
               for s in map(list, itertools.combinations(range(len(dic)), size)))
    assert res.residual_norms[-1] <= best + 1e-8


def test_oga_prefix_is_projection():
    p = FrameParams.for_dim(1)
    dic = Dictionary.build(p, [-2.0], [2.0], -1, 2)
    f = gaussian(0.2, 0.4)
    y = dic.sample(f)
    res = oga_approximate(y, dic, 6)
    A = dic.atoms().toarray()[:, res.selected] * math.sqrt(dic.grid.cell_volume)
    target = y * math.sqrt(dic.grid.cell_volume)
    proj = A @ np.linalg.lstsq(A, target, rcond=None)[0]
    assert res.residual_norms[-1] == pytest.approx(np.linalg.norm(target - proj), rel=1e-9, abs=1e-12)


def test_oga_stops_when_target_is_in_span():
    p = FrameParams.for_dim(1)
    dic = Dictionary.build(p, [-3.0], [3.0], 0, 1)
    coef = np.zeros(len(dic))
    coef[5] = -2.0
    res = oga_approximate(dic.combination(coef), dic, 10)
    assert res.stopped_early is not None
    assert res.selected == [5]
    assert res.residual_norms[-1] <= 1e-10


def test_oga_is_deterministic():
    p = FrameParams.for_dim(2)
    dic = Dictionary.build(p, [-1.5, -1.5], [1.5, 1.5], -1, 1)
    f = gaussian([0.1, -0.3], 0.6)
    a, b = oga_approximate(f, dic, 12), oga_approximate(f, dic, 12)
    assert a.expansion.to_json() == b.expansion.to_json()
    assert a.residual_norms == b.residual_norms


# ---------------------------------------------------------------------------
# scale truncation
# ---------------------------------------------------------------------------

def test_truncation_of_zero_has_zero_coefficients():
    p = FrameParams.for_dim(1)
    e = truncate_scale_K(lambda x: np.zeros(len(x)), p, [-2.0], [2.0], 2)
    assert len(e) > 0
    assert np.all(np.abs(e.coeffs) <= 1e-10)


@pytest.mark.parametrize("d", [1, 2])
def test_truncation_reproduces_a_member(d):
    p = FrameParams.for_dim(d)
    f = lambda x: kernels.psi_eval(x, [0], [[0.0] * d], p.c_d)[:, 0]  # noqa: E731
    lo, hi = [-7.0] * d, [7.0] * d
    e = truncate_scale_K(f, p, lo, hi, 0)
    assert sup_error(f, e, p, lo, hi, K=0) <= 1e-8


def test_truncation_warns_on_singular_system():
    p = FrameParams.for_dim(1)
    with pytest.warns(SingularFitWarning):
        truncate_scale_K(gaussian(0.0, 0.5), p, [-4.0], [4.0], 1)


def test_truncation_rejects_k_below_k_min():
    p = FrameParams.for_dim(1)
    with pytest.raises(ValueError):
        truncate_scale_K(gaussian(0.0, 0.5), p, [-1.0], [1.0], -3, k_min=-2)


def test_truncation_1d_gaussian_sup_error_decreases():
    p = FrameParams.for_dim(1)
    f = gaussian(0.0, 0.5)
    errs = [sup_error(f, truncate_scale_K(f, p, [-4.0], [4.0], K), p, [-4.0], [4.0], K=K) for K in range(2, 7)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert rate_fit([2 ** (K + 1) for K in range(2, 7)], errs, "sup").slope <= -1.5


# ---------------------------------------------------------------------------
# error metrics and rates
# ---------------------------------------------------------------------------

def test_errors_vanish_for_exact_expansion():
    p = FrameParams.for_dim(1)
    terms = [(WaveletIndex(0, (0,)), 2.0), (WaveletIndex(1, (1,)), -1.0)]
    e = Expansion(0, terms)
    f = lambda x: e.evaluate(x, p)  # noqa: E731
    assert l2_error(f, e, p, [-8.0], [8.0]) <= 1e-12
    assert sup_error(f, e, p, [-8.0], [8.0], K=1) <= 1e-14


def test_errors_of_empty_expansion_are_target_norms():
    p = FrameParams.for_dim(1)
    sigma, L = 0.5, 4.0
    f = gaussian(0.0, sigma)
    empty = Expansion(0, [])
    exact_l2 = math.sqrt(sigma * math.sqrt(math.pi) * math.erf(L / sigma))
    assert l2_error(f, empty, p, [-L], [L]) == pytest.approx(exact_l2, rel=1e-6)
    assert sup_error(f, empty, p, [-L], [L], K=2) == pytest.approx(1.0, abs=1e-12)


def test_sup_error_grid_contains_box_corners():
    p = FrameParams.for_dim(2)
    f = lambda x: np.where(np.all(np.abs(np.abs(x) - 1.0) < 1e-12, axis=1), 1.0, 0.0)  # noqa: E731
    assert sup_error(f, Expansion(0, []), p, [-1.0, -1.0], [1.0, 1.0], K=0) == 1.0


@pytest.mark.parametrize("power", [1, 2])
def test_rate_fit_exact_power_laws(power):
    Ns = [4, 8, 16, 32, 64]
    rep = rate_fit(Ns, [3.7 / n**power for n in Ns], "sup")
    assert rep.slope == pytest.approx(-power, abs=1e-10)
    assert math.exp(rep.intercept) == pytest.approx(3.7, rel=1e-10)


def test_rate_fit_needs_three_points():
    with pytest.raises(ValueError):
        rate_fit([1, 2], [1.0, 0.5])
    with pytest.raises(ValueError):
        rate_fit([1, 2, 4], [1.0, 0.0, 0.5])


def test_rate_report_validation_and_csv():
    with pytest.raises(ValueError):
        RateReport([4, 4, 8], [1.0, 1.0, 1.0], -1.0, "sup")
    with pytest.raises(ValueError):
        RateReport([2, 4, 8], [1.0, -1.0, 1.0], -1.0, "sup")
    rep = rate_fit([2, 4, 8], [0.5, 0.25, 0.125], "l2_squared")
    lines = rep.to_csv("abc123").splitlines()
    assert lines[0] == "N,error,metric,config_hash"
    assert lines[1] == "2,0.5,l2_squared,abc123"
    assert len(lines) == 4
