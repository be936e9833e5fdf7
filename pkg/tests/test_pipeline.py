import math

import numpy as np
import pytest

from reluwave import kernels
from reluwave.atlas import ManifoldModel, chart_coords
from reluwave.expansion import Expansion, SingularFitWarning, fit_on_samples
from reluwave.frame import AmbientExtensionParams, FrameParams, WaveletIndex, psi_kb, support_halfwidth
from reluwave.network import analytic_evaluate
from reluwave.pipeline import (
    StageError,
    atlas_samples,
    build_experiment,
    chart_box,
    default_planted_terms,
    fit_manifold,
    fit_tangent,
    make_target,
    manifold_errors,
    oga_chart,
    pou_check,
    radii_check,
    reconstruction_check,
    stage,
)

pytestmark = pytest.mark.filterwarnings("ignore::reluwave.expansion.SingularFitWarning")


@pytest.fixture(scope="module")
def sphere_exp():
    model = ManifoldModel.make("sphere2", 10, embed_seed=3)
    target = {"id": "gaussian_bump", "center": [0.0, 0.0, 1.0], "sigma": 0.5}
    return build_experiment(model, 0.9, 10000, 2, target)


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def test_gaussian_bump_peaks_at_center():
    model = ManifoldModel.make("sphere2", 5, embed_seed=1)
    f = make_target({"id": "gaussian_bump", "sigma": 0.3}, model)
    north = model.to_ambient([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    vals = f(north)
    assert vals[0] == 1.0
    assert vals[1] == pytest.approx(math.exp(-4 / (2 * 0.09)), rel=1e-12)


def test_sphere_harmonic_is_zonal_legendre():
    model = ManifoldModel.make("sphere2", 4)
    f = make_target({"id": "sphere_harmonic", "degree": 2}, model)
    y = np.array([[0.6, 0.0, 0.8], [0.0, 1.0, 0.0]])
    np.testing.assert_allclose(f(model.to_ambient(y)), [0.5 * (3 * 0.64 - 1), -0.5], atol=1e-15)
    with pytest.raises(ValueError):
        make_target({"id": "sphere_harmonic"}, ManifoldModel.make("circle", 3))


@pytest.mark.parametrize("d", [1, 2])
def test_default_planted_terms_have_disjoint_supports(d):
    terms = default_planted_terms(d)
    assert len(terms) == 8
    idx = [WaveletIndex(t["k"], tuple(t["n"])) for t in terms]
    half = support_halfwidth(idx[0].k, d)
    for a in range(8):
        for b in range(a + 1, 8):
            assert np.abs(idx[a].b - idx[b].b).max() >= 2 * half
    hw = 4.0 if d == 1 else 3.0
    assert all(np.all(np.abs(i.b) + half <= hw) for i in idx)


def test_finite_combination_values():
    model = ManifoldModel.make("flat_patch", 3, d=2, half_width=3.0)
    terms = [{"k": 1, "n": [0, 1], "coeff": 2.0}, {"k": 3, "n": [2, -1], "coeff": -0.5}]
    f = make_target({"id": "finite_combination", "terms": terms}, model)
    y = np.random.default_rng(0).uniform(-3, 3, size=(300, 2))
    p = FrameParams.for_dim(2)
    ref = 2.0 * psi_kb(y, WaveletIndex(1, (0, 1)), p) - 0.5 * psi_kb(y, WaveletIndex(3, (2, -1)), p)
    np.testing.assert_allclose(f(model.to_ambient(y)), ref, atol=1e-14)
    with pytest.raises(ValueError):
        make_target({"id": "finite_combination"}, ManifoldModel.make("sphere2", 3))


def test_unknown_target():
    with pytest.raises(ValueError):
        make_target({"id": "nope"}, ManifoldModel.make("circle", 2))


# ---------------------------------------------------------------------------
# setup and boxes
# ---------------------------------------------------------------------------

def test_flat_patch_atlas_is_centred():
    model = ManifoldModel.make("flat_patch", 4, d=2, half_width=1.5, embed_seed=2)
    samples = atlas_samples(model, 50, seed=0)
    assert samples.shape == (51, 4)
    exp = build_experiment(model, 4.5, 50, 0, {"id": "gaussian_bump"})
    assert exp.atlas.size == 1
    np.testing.assert_allclose(exp.atlas.charts[0].anchor, 0.0, atol=1e-15)
    lo, hi = chart_box(exp, 0)
    np.testing.assert_allclose(lo, [-1.5, -1.5])
    np.testing.assert_allclose(hi, [1.5, 1.5])


def test_curved_chart_box_holds_nearby_samples(sphere_exp):
    exp = sphere_exp
    chart = exp.atlas.charts[3]
    lo, hi = chart_box(exp, 3)
    near = exp.samples[np.linalg.norm(exp.samples - chart.anchor, axis=1) < exp.atlas.delta]
    u, _ = chart_coords(chart, near)
    assert np.all(u >= lo) and np.all(u <= hi)
    assert np.all(hi - lo <= 2 * exp.atlas.delta)


def test_stage_errors_name_the_stage():
    with pytest.raises(StageError) as info:
        with stage("fit"):
            raise ValueError("boom")
    assert info.value.stage == "fit"
    assert "stage 'fit' failed: boom" in str(info.value)
    model = ManifoldModel.make("circle", 2)
    with pytest.raises(StageError, match="atlas"):
        build_experiment(model, 0.01, 10, 0)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("d", [1, 2])
def test_sample_fit_reproduces_a_member(d):
    p = FrameParams.for_dim(d)
    rng = np.random.default_rng(d)
    u = rng.uniform(-3, 3, size=(4000, d))
    idx = WaveletIndex(1, (1,) * d)
    y = 1.7 * psi_kb(u, idx, p)
    e = fit_on_samples(u, y, p, 0, 1)
    assert e.chart_id == 0
    np.testing.assert_allclose(e.evaluate(u, p), y, atol=1e-8)


def test_sample_fit_uses_extended_atoms():
    # off the plateau the extended atom is a different function of u
    p = FrameParams.for_dim(1)
    ext = AmbientExtensionParams.from_delta(3, 1, 1.0)
    rng = np.random.default_rng(0)
    u = rng.uniform(-2, 2, size=(3000, 1))
    v = rng.uniform(-0.45, 0.45, size=(3000, 2))
    w = ext.normal_offset(v)
    ks, bs = np.array([0]), np.array([[0.0]])
    y = -0.9 * kernels.psi_eval(u, ks, bs, p.c_d, w=w)[:, 0]
    e = fit_on_samples(u, y, p, -1, 1, normal_offset=w)
    np.testing.assert_allclose(e.evaluate(u, p, normal_offset=w), y, atol=1e-8)


def test_sample_fit_validation():
    p = FrameParams.for_dim(1)
    with pytest.raises(ValueError):
        fit_on_samples(np.zeros((3, 1)), np.zeros(2), p, 0, 1)
    with pytest.raises(ValueError):
        fit_on_samples(np.zeros((3, 1)), np.zeros(3), p, 2, 1)
    assert len(fit_on_samples(np.zeros((0, 1)), np.zeros(0), p, 0, 1)) == 0


def test_sample_fit_drops_atoms_without_samples():
    p = FrameParams.for_dim(1)
    u = np.linspace(-0.1, 0.1, 50)[:, None]
    e = fit_on_samples(u, np.cos(u[:, 0]), p, 0, 2)
    assert all(np.abs(i.b[0]) < 0.1 + support_halfwidth(i.k, 1) for i, _ in e.terms)


def test_fit_on_samples_warns_on_redundant_frame():
    p = FrameParams.for_dim(1)
    u = np.linspace(-2, 2, 400)[:, None]
    with pytest.warns(SingularFitWarning):
        fit_on_samples(u, np.exp(-u[:, 0] ** 2), p, -2, 2)


def test_flat_patch_tangent_fit_matches_single_chart_errors():
    model = ManifoldModel.make("flat_patch", 3, d=1, half_width=4.0)
    exp = build_experiment(model, 16.5, 400, 0, {"id": "gaussian_bump", "sigma": 0.5})
    errs = []
    for K in (2, 3, 4):
        exps = fit_tangent(exp, K, -2)
        assert len(exps) == 1
        errs.append(manifold_errors(exp, exps, 2000, 7)["sup"])
    assert errs[0] > errs[1] > errs[2]


def test_manifold_fit_beats_tangent_fit_on_coarse_sphere(sphere_exp):
    """With delta = 0.9 many points sit in the extension band outside U_i; the
    sample fit accounts for them and the tangent fit does not."""
    exp = sphere_exp
    band = manifold_errors(exp, fit_manifold(exp, 0, 0, 8000, seed=5), 2000, 9)["l2"]
    tangent = manifold_errors(exp, fit_tangent(exp, 0, 0), 2000, 9)["l2"]
    assert band < 0.1
    assert band < tangent


def test_manifold_fit_output_vanishes_where_masked(sphere_exp):
    exp = sphere_exp
    exps = fit_manifold(exp, 0, 0, 6000, seed=5)
    assert [e.chart_id for e in exps] == list(range(exp.atlas.size))
    far = exp.model.sample(500, seed=11)
    parts = analytic_evaluate(exp.atlas, exps, exp.params, far, per_chart=True)
    ext = AmbientExtensionParams.from_delta(10, 2, exp.atlas.delta)
    for i, chart in enumerate(exp.atlas.charts):
        w = ext.normal_offset(chart_coords(chart, far)[1])
        assert np.all(parts[w <= -2, i] == 0.0)


def test_oga_chart_recovers_planted_terms():
    model = ManifoldModel.make("flat_patch", 3, d=1, half_width=4.0)
    exp = build_experiment(model, 16.5, 400, 0, {"id": "finite_combination"})
    res, dic = oga_chart(exp, 0, 12, -2, 4)
    assert res.residual_norms[8] <= 1e-10 * res.residual_norms[0]
    planted = {WaveletIndex(t["k"], tuple(t["n"])) for t in default_planted_terms(1)}
    assert {dic.indices[j] for j in res.selected} == planted
    got = dict(res.expansion.terms)
    for t in default_planted_terms(1):
        assert got[WaveletIndex(t["k"], tuple(t["n"]))] == pytest.approx(t["coeff"], rel=1e-9)


# ---------------------------------------------------------------------------
# soundness checks
# ---------------------------------------------------------------------------

def test_sphere_soundness_checks(sphere_exp):
    assert pou_check(sphere_exp, 1000, 1)["passed"]
    assert reconstruction_check(sphere_exp, 1000, 2)["passed"]
    rep = radii_check(sphere_exp)
    assert rep["passed"] and rep["guidance"] is None


def test_radii_check_gives_guidance_when_delta_too_large():
    model = ManifoldModel.make("sphere2", 3)
    exp = build_experiment(model, 1.5, 2000, 0)
    rep = radii_check(exp)
    assert not rep["passed"]
    assert "smaller delta" in rep["guidance"]


def test_empty_expansions_have_target_error(sphere_exp):
    exp = sphere_exp
    errs = manifold_errors(exp, [Expansion(i, []) for i in range(exp.atlas.size)], 4000, 3)
    assert errs["sup"] <= 1.0
    # |y - n|^2 = 2 - 2z, so the squared bump integrates to pi s^2 (1 - exp(-4/s^2)), s = 0.5
    exact = math.sqrt(math.pi * 0.25 * (1 - math.exp(-16.0)))
    assert errs["l2"] == pytest.approx(exact, rel=0.05)
