import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bispde.cholesky import factorize
from bispde.mesh import assemble_fem, build_mesh, projector
from bispde.preprocess import (
    BoxCoxTransform,
    EmpiricalVariogram,
    EstimationError,
    TransformDomainError,
    boxcox,
    empirical_variogram,
    estimate_lambda,
    fit_matern_variogram,
    inverse_boxcox,
    lambda_grid,
    matern_variogram,
)
from bispde.spde import UniParams, uni_precision


class TestBoxCox:
    def test_examples(self):
        assert boxcox(1.0, 0.37) == 0.0
        assert boxcox(3.0, 1.0) == pytest.approx(2.0, abs=1e-15)
        assert boxcox(2.0, 0.66) == pytest.approx((2**0.66 - 1) / 0.66, rel=1e-14)
        assert boxcox(5.0, 1e-12) == pytest.approx(np.log(5.0), rel=1e-14)
        assert inverse_boxcox(0.0, -1.3) == 1.0
        assert inverse_boxcox(np.log(5), 0.0) == pytest.approx(5.0, rel=1e-15)

    def test_domain(self):
        with pytest.raises(TransformDomainError):
            boxcox(0.0, 0.5)
        with pytest.raises(TransformDomainError):
            boxcox([1.0, -2.0], 0.5)
        with pytest.raises(TransformDomainError):
            inverse_boxcox(-3.0, 0.5)

    def test_roundtrip_batch(self):
        # Recovering y from a rounded t has condition number 1 / (|lam| y^lam);
        # draws keep y^lam >= 1e-3 so the float round trip is well posed.
        rng = np.random.default_rng(0)
        y = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), 5000))
        lam = rng.uniform(-2, 2, 5000)
        ok = y**lam >= 1e-3
        y, lam = y[ok][:1000], lam[ok][:1000]
        assert y.size == 1000
        back = np.array([inverse_boxcox(boxcox(a, b), b) for a, b in zip(y, lam)])
        assert np.max(np.abs(back / y - 1)) <= 1e-12

    @given(
        lam=st.floats(-2, 2),
        ys=st.lists(st.floats(1e-4, 1e4), min_size=2, max_size=20, unique=True),
    )
    def test_strictly_increasing(self, lam, ys):
        y = np.sort(np.array(ys))
        t = boxcox(y, lam)
        assert np.all(np.diff(t) > 0)

    def test_transform_object(self):
        tr = BoxCoxTransform(0.66)
        assert tr.inverse(tr.forward(0.007)) == pytest.approx(0.007, rel=1e-13)
        assert tr.applied_field == "H"


class TestLambda:
    def test_grid(self):
        g = lambda_grid()
        assert g[0] == -2.0 and g[-1] == 2.0 and len(g) == 401 and 1.0 in g

    def test_gaussian(self):
        y = np.random.default_rng(1).normal(10, 1, 500)
        assert abs(estimate_lambda(y) - 1.0) <= 0.3

    def test_lognormal(self):
        y = np.exp(np.random.default_rng(2).normal(0, 1, 500))
        assert abs(estimate_lambda(y)) <= 0.2

    def test_order_invariant(self):
        y = np.exp(np.random.default_rng(3).normal(0, 0.5, 200))
        perm = np.random.default_rng(4).permutation(200)
        assert estimate_lambda(y) == estimate_lambda(y[perm]) == estimate_lambda(y)

    def test_errors(self):
        with pytest.raises(EstimationError):
            estimate_lambda(np.full(20, 3.0))
        with pytest.raises(EstimationError):
            estimate_lambda(np.arange(1.0, 5.0))
        with pytest.raises(TransformDomainError):
            estimate_lambda(np.r_[np.arange(1.0, 12.0), 0.0])


class TestVariogram:
    def test_constant_field(self):
        loc = np.random.default_rng(0).uniform(0, 1, (30, 2))
        ev = empirical_variogram(np.full(30, 2.0), loc)
        assert np.all(ev.gamma_hat == 0)

    def test_two_points(self):
        ev = empirical_variogram([0.0, 2.0], [[0, 0], [1, 0]], n_bins=1, max_dist=2.0)
        assert ev.gamma_hat.tolist() == [2.0] and ev.counts.tolist() == [1]

    def test_pair_count_and_symmetry(self):
        rng = np.random.default_rng(5)
        loc = rng.uniform(0, 5, (40, 2))
        v = rng.normal(size=40)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ev = empirical_variogram(v, loc, n_bins=10, max_dist=100.0)
            perm = rng.permutation(40)
            ev2 = empirical_variogram(v[perm], loc[perm], n_bins=10, max_dist=100.0)
        assert ev.counts.sum() == 40 * 39 // 2
        assert np.allclose(ev.gamma_hat, ev2.gamma_hat, rtol=1e-12)
        assert np.all(ev.gamma_hat >= 0) and np.all(ev.counts >= 1)

    def test_empty_bins_warn(self):
        loc = np.array([[0, 0], [1, 0], [10, 0]], float)
        with pytest.warns(UserWarning):
            ev = empirical_variogram([0, 1, 2], loc, n_bins=10, max_dist=10.0)
        assert np.all(ev.counts >= 1)

    def test_exact_curve_recovery(self):
        h = np.linspace(0.1, 5, 15)
        g = matern_variogram(h, 2.0, 1.3, 0.2)
        fit = fit_matern_variogram(EmpiricalVariogram(h, g, np.arange(15) + 5))
        assert fit.sigma2 == pytest.approx(2.0, rel=1e-4)
        assert fit.kappa == pytest.approx(1.3, rel=1e-4)
        assert fit.nugget == pytest.approx(0.2, rel=1e-4)
        assert fit.converged

    def test_distance_scaling(self):
        h = np.linspace(0.1, 5, 15)
        g = matern_variogram(h, 2.0, 1.3, 0.2)
        c = np.arange(15) + 5
        a = fit_matern_variogram(EmpiricalVariogram(h, g, c))
        b = fit_matern_variogram(EmpiricalVariogram(2 * h, g, c))
        assert b.kappa == pytest.approx(a.kappa / 2, abs=1e-3)

    def test_too_few_bins(self):
        with pytest.raises(ValueError):
            fit_matern_variogram(EmpiricalVariogram(np.ones(2), np.ones(2), np.ones(2, int)))


@pytest.fixture(scope="module")
def matern_field():
    """Factor of a unit-variance kappa = 2 field on a 20 km square."""
    L = 20.0
    mesh = build_mesh(np.array([[0, 0], [L, 0], [L, L], [0, L]], float), 0.2, 1.5)
    fem = assemble_fem(mesh)
    return mesh, factorize(uni_precision(fem, UniParams.unit_variance(2.0)).Q), L


def _replicate_variograms(matern_field, n_rep, n_obs=800):
    mesh, f, L = matern_field
    out = []
    for s in range(n_rep):
        rng = np.random.default_rng(s)
        x = f.color(rng.standard_normal(f.n))
        loc = rng.uniform(0, L, (n_obs, 2))
        out.append(empirical_variogram(projector(mesh, loc) @ x, loc, 15, 6.0))
    return out


@pytest.mark.slow
def test_simulated_field_recovery(matern_field):
    evs = _replicate_variograms(matern_field, 20)
    fits = [fit_matern_variogram(ev) for ev in evs]
    sill = np.median([f.sigma2 + f.nugget for f in fits])
    kappa = np.median([f.kappa for f in fits])
    assert sill == pytest.approx(1.0, rel=0.15)
    assert kappa == pytest.approx(2.0, rel=0.15)
    # The replicate-mean variogram is matched best by the true smoothness.
    mean = EmpiricalVariogram(evs[0].bin_centers, np.mean([e.gamma_hat for e in evs], 0), evs[0].counts)
    loss = {nu: fit_matern_variogram(mean, nu).loss for nu in (0.5, 1.0, 2.0)}
    assert loss[1.0] < min(loss[0.5], loss[2.0])


@pytest.mark.slow
@pytest.mark.xfail(
    strict=True,
    reason="per-replicate Matheron estimates at n=800 are too noisy to separate nu=1 from nu=2",
)
def test_smoothness_one_wins_most_replications(matern_field):
    wins = 0
    for ev in _replicate_variograms(matern_field, 50):
        loss = {nu: fit_matern_variogram(ev, nu).loss for nu in (0.5, 1.0, 2.0)}
        wins += loss[1.0] <= min(loss[0.5], loss[2.0])
    assert wins >= 40
