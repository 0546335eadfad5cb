import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from bispde.evaluation import (
    CSV_HEADER,
    ScoreRow,
    ScoreTable,
    SplitError,
    co_observed,
    crps_gaussian,
    crps_mean,
    crps_quantile,
    mae,
    make_split,
    mse,
    run_validation,
    score_backtransformed,
)
from bispde.mesh import build_mesh
from bispde.model import Observation, ObservationTable
from bispde.preprocess import boxcox


def crps_quad(mu, sigma, y):
    """Integral of (F(p) - 1{p >= y})^2 dp split at y."""
    F = norm(mu, sigma).cdf
    lo = quad(lambda p: F(p) ** 2, -np.inf, y, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    hi = quad(lambda p: (1 - F(p)) ** 2, y, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    return lo + hi


class TestPointScores:
    def test_examples(self):
        assert mae([1, 2], [1, 2]) == 0 and mse([1, 2], [1, 2]) == 0
        assert mae([1, -1], [0, 0]) == 1 and mse([1, -1], [0, 0]) == 1

    def test_two_pass_oracle(self):
        rng = np.random.default_rng(0)
        p, o = rng.normal(size=100), rng.normal(size=100)
        s1 = s2 = 0.0
        for a, b in zip(p, o):
            s1 += abs(a - b)
            s2 += (a - b) ** 2
        assert mae(p, o) == pytest.approx(s1 / 100, rel=1e-12)
        assert mse(p, o) == pytest.approx(s2 / 100, rel=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            mae([1, 2], [1])
        with pytest.raises(ValueError):
            mse([], [])
        with pytest.raises(ValueError):
            crps_mean([], [], [])

    @given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=30), st.randoms())
    def test_reordering_invariance(self, pairs, rnd):
        p, o = map(np.array, zip(*pairs))
        perm = list(range(len(p)))
        rnd.shuffle(perm)
        assert mae(p[perm], o[perm]) == pytest.approx(mae(p, o), rel=1e-12, abs=1e-300)
        assert mse(p[perm], o[perm]) == pytest.approx(mse(p, o), rel=1e-12, abs=1e-300)


class TestCrps:
    def test_zero_z(self):
        expected = 2 * norm.pdf(0) - 1 / math.sqrt(math.pi)
        assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.23370, abs=1e-5)
        assert crps_quad(0.0, 1.0, 0.0) == pytest.approx(expected, abs=1e-7)

    def test_quadrature_grid(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            mu, y = rng.normal(0, 3, 2)
            s = math.exp(rng.uniform(-3, 2))
            assert crps_gaussian(mu, s, y) == pytest.approx(crps_quad(mu, s, y), abs=1e-7)

    def test_deterministic_limit(self):
        assert crps_gaussian(1.5, 1e-8, -0.5) == pytest.approx(2.0, abs=1e-6)

    @given(
        mu=st.floats(-5, 5), logs=st.floats(-3, 2), y=st.floats(-5, 5), c=st.floats(0.01, 100)
    )
    def test_scale_equivariance(self, mu, logs, y, c):
        s = math.exp(logs)
        assert crps_gaussian(c * mu, c * s, c * y) == pytest.approx(c * crps_gaussian(mu, s, y), rel=1e-9, abs=1e-12)

    def test_sigma_domain(self):
        with pytest.raises(ValueError):
            crps_gaussian(0, 0, 0)
        with pytest.raises(ValueError):
            crps_gaussian(0, -1, 0)

    def test_mean(self):
        assert crps_mean([0.3], [1.2], [1.0]) == crps_gaussian(0.3, 1.2, 1.0)
        rng = np.random.default_rng(2)
        mu, s, y = rng.normal(size=100), np.exp(rng.normal(size=100)), rng.normal(size=100)
        v = crps_mean(mu, s, y)
        assert crps_mean(np.r_[mu, mu], np.r_[s, s], np.r_[y, y]) == pytest.approx(v, rel=1e-14)
        assert v == pytest.approx(np.mean([crps_quad(*t) for t in zip(mu, s, y)]), abs=1e-6)

    def test_quantile_form_matches_closed_form(self):
        rng = np.random.default_rng(3)
        mu, s, y = rng.normal(size=20), np.exp(rng.normal(size=20) * 0.3), rng.normal(size=20)
        got = crps_quantile(lambda tau: mu + s * norm.ppf(tau), y, n_levels=20001)
        assert np.allclose(got, crps_gaussian(mu, s, y), rtol=1e-3)

    def test_backtransformed_scores(self):
        # lam = 1 is a shift, so the raw-scale forecast stays Gaussian.
        rng = np.random.default_rng(4)
        mu, sd, y = rng.uniform(0, 1, 50), rng.uniform(0.05, 0.15, 50), rng.uniform(-0.5, 2, 50)
        m, s2, c, n = score_backtransformed(mu, sd, y, 1.0)
        assert n == 50
        assert m == pytest.approx(mae(mu, y), rel=1e-12)
        assert c == pytest.approx(crps_mean(mu, sd, y), rel=1e-3)
        lam = 0.66
        t = boxcox(np.array([0.004, 0.006, 0.008]), lam)
        m, _, c, _ = score_backtransformed(t, np.full(3, 1e-6), t, lam)
        assert m < 1e-15 and c < 1e-7


def _table(n_st=30, years=(2000, 2001), h_share=0.6, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 50, (n_st, 2))
    recs = []
    for yr in years:
        for i, p in enumerate(pts):
            recs.append(Observation(f"s{i:02d}", yr, "T", float(rng.normal()), p[0], p[1], 0.0, 0.0))
            if i < h_share * n_st:
                recs.append(Observation(f"s{i:02d}", yr, "H", float(rng.normal()), p[0], p[1], 0.0, 0.0))
    return pts, ObservationTable.from_records(recs)


class TestSplits:
    def test_deterministic_and_sizes(self):
        _, obs = _table()
        a, b = make_split(obs, "H", 5), make_split(obs, "H", 5)
        assert a == b
        for yr, ids in a.held_out.items():
            assert len(ids) == 18 and set(ids) <= set(co_observed(obs, yr))
        assert make_split(obs, "H", 6) != a

    def test_twenty_of_fifty_six(self):
        _, obs = _table(n_st=70, h_share=0.8)
        split = make_split(obs, "HT", 0)
        assert all(len(co_observed(obs, y)) == 56 for y in obs.years())
        assert all(len(v) == 20 for v in split.held_out.values())

    def test_settings(self):
        _, obs = _table()
        for setting, fields in (("H", {"H"}), ("T", {"T"}), ("HT", {"T", "H"})):
            split = make_split(obs, setting, 1)
            train, test = split.apply(obs)
            assert set(test.field) == fields
            assert len(train) + len(test) == len(obs)
        train, _ = make_split(obs, "H", 1).apply(obs)
        held = make_split(obs, "H", 1).held_out[2000]
        t_rows = (train.year == 2000) & (train.field == "T") & np.isin(train.station_id, held)
        assert t_rows.sum() == len(held)

    def test_year_keyed_streams(self):
        _, obs = _table(years=(2000, 2001))
        _, obs3 = _table(years=(2000, 2001, 2002))
        # Same station layout and ids, so year 2000 draws match.
        assert make_split(obs, "H", 3).held_out[2000] == make_split(obs3, "H", 3).held_out[2000]

    def test_no_co_observed(self):
        obs = ObservationTable.from_records([Observation("a", 2000, "T", 0.0, 0, 0, 0, 0)])
        with pytest.raises(SplitError):
            make_split(obs, "H", 0)
        with pytest.raises(ValueError):
            make_split(obs, "X", 0)


class TestScoreTable:
    def test_csv_roundtrip(self):
        t = ScoreTable([ScoreRow("UM", "H", "H", "all", 0.1, 0.02, 0.07, 40),
                        ScoreRow("BM_TH", "H", "H", "all", math.nan, math.nan, math.nan, 0)])
        text = t.to_csv()
        assert text.splitlines()[0] == CSV_HEADER
        back = ScoreTable.from_csv(text)
        assert back.get("UM", "H", "H").crps == 0.07
        assert math.isnan(back.get("BM_TH", "H", "H").mae)
        with pytest.raises(ValueError):
            ScoreTable.from_csv("x\n")


@pytest.fixture(scope="module")
def validation_run():
    pts, obs = _table(n_st=25, h_share=0.8, seed=4)
    mesh = build_mesh(pts, 15.0, 10.0)
    kw = dict(models=("UM", "BM_TH", "BM_HT"), settings=("H", "T", "HT"), seed=2, n_test=6,
              spec_kwargs={"sigma_H": 0.1}, fit_kwargs={"max_iter": 30})
    return obs, mesh, kw, run_validation(obs, mesh, **kw)


class TestRunValidation:
    def test_cells(self, validation_run):
        _, _, _, res = validation_run
        keys = {(r.model, r.setting, r.field) for r in res.table.rows}
        assert len({(m, s) for m, s, _ in keys}) == 9
        assert len(res.table.rows) == 3 * (1 + 1 + 2)
        for r in res.table.rows:
            assert r.n == 12 or r.n == 0
            if r.n:
                assert r.mae >= 0 and r.mse >= 0 and r.crps >= 0

    def test_um_held_field_same_across_settings(self, validation_run):
        _, _, _, res = validation_run
        # Under UM the held humidity is predicted from humidity alone, and the
        # humidity training data are identical under H and HT.
        a = res.table.get("UM", "H", "H")
        b = res.table.get("UM", "HT", "H")
        assert a.crps == pytest.approx(b.crps, rel=1e-4)

    def test_exclude_years_and_determinism(self, validation_run):
        obs, mesh, kw, res = validation_run
        kw = dict(kw, models=("UM",), settings=("H",))
        a = run_validation(obs, mesh, exclude_years={2001}, **kw)
        b = run_validation(obs, mesh, exclude_years={2001}, **kw)
        assert a.table.to_csv() == b.table.to_csv()
        row = a.table.get("UM", "H", "H")
        assert row.year_filter == "excl_2001" and row.n == 6

    def test_failed_cell_is_nan(self, validation_run):
        obs, mesh, kw, _ = validation_run
        kw = dict(kw, models=("UM",), settings=("H",), theta0={"UM": [-1.0, 1, 1, 1]})
        res = run_validation(obs, mesh, **kw)
        row = res.table.get("UM", "H", "H")
        assert row.n == 0 and math.isnan(row.crps) and ("UM", "H") in res.failures
