import numpy as np
import pytest
import scipy.sparse as sp
from conftest import THETA

from bispde.cholesky import factorize
from bispde.mesh import OutOfDomainError
from bispde.model import (
    ModelKind,
    ModelSpec,
    Observation,
    ObservationTable,
    ParameterDomainError,
    Problem,
    SchemaError,
    assemble_system,
    build_design,
    log_prior_theta,
    spatial_precision,
)
from bispde.spde import BiParams, UniParams, bi_precision, uni_precision

YEARS5 = (2005, 2006, 2007, 2008, 2009)
HALF_LOG = -0.5 * np.log(2 * np.pi * 100)


def _obs(field, year=2007, elev=2000.0, dist=2.5e5):
    return ObservationTable.from_records([Observation("a", year, field, 0.0, 0.0, 0.0, elev, dist)])


class TestDesign:
    def test_temperature_row(self):
        X = build_design(_obs("T"), ModelSpec("UM", YEARS5))
        assert X.shape == (1, 14)
        assert X[0].tolist() == [0, 0, 1, 0, 0, 1.0, 1.0] + [0] * 7

    def test_year_indicator_first_year(self):
        X = build_design(_obs("T", year=2005), ModelSpec("UM", YEARS5))
        assert X[0, :7].tolist() == [1, 0, 0, 0, 0, 1.0, 1.0]

    def test_humidity_row(self):
        X = build_design(_obs("H"), ModelSpec("BM_TH", YEARS5))
        assert np.all(X[0, :7] == 0)
        assert X[0, 7:].tolist() == [0, 0, 1, 0, 0, 1.0, 1.0]

    def test_unknown_year(self):
        with pytest.raises(SchemaError):
            build_design(_obs("T", year=1999), ModelSpec("UM", YEARS5))

    def test_indicator_counts(self, tiny):
        _, _, obs = tiny
        spec = ModelSpec("BM_TH", obs.years())
        X = build_design(obs, spec)
        J = spec.n_years
        ind = np.concatenate([X[:, :J], X[:, J + 2 : 2 * J + 2]], axis=1)
        assert np.all(ind.sum(axis=1) == 1)
        assert np.all(np.any(X != 0, axis=0))

    def test_dataset_row_count(self):
        recs = [Observation(f"t{i}", 2011, "T", 0.0, 0, 0, 0, 0) for i in range(128)]
        recs += [Observation(f"t{i}", 2011, "H", 0.0, 0, 0, 0, 0) for i in range(70)]
        X = build_design(ObservationTable.from_records(recs), ModelSpec("BM_TH", (2011,)))
        assert X.shape == (198, 6)


class TestObservationTable:
    def test_rejects_non_finite_covariate(self):
        with pytest.raises(SchemaError):
            ObservationTable.from_records([Observation("a", 2000, "T", 0.0, 0, 0, np.nan, 0)])

    def test_rejects_unknown_field(self):
        with pytest.raises(SchemaError):
            ObservationTable.from_records([Observation("a", 2000, "P", 0.0, 0, 0, 0, 0)])

    def test_subset_concat(self, tiny):
        obs = tiny[2]
        a = obs.subset(obs.field == "T")
        b = obs.subset(obs.field == "H")
        assert len(a.concat(b)) == len(obs)
        assert obs.records()[0].station_id == obs.station_id[0]


class TestLogPrior:
    def test_um_at_ones(self):
        assert log_prior_theta(np.ones(4), ModelSpec("UM", (1,))) == pytest.approx(4 * HALF_LOG)

    def test_bm_b21_zero(self):
        th = np.array([1, 1, 0, 1, 1, 1.0])
        assert log_prior_theta(th, ModelSpec("BM_TH", (1,))) == pytest.approx(6 * HALF_LOG)

    def test_wider_prior_lower_density(self):
        th = np.array([1, 1, 0, 1, 1, 1.0])
        a = log_prior_theta(th, ModelSpec("BM_TH", (1,)))
        b = log_prior_theta(th, ModelSpec("BM_TH", (1,), theta_prior_variance=200))
        assert b < a

    def test_log_scale_density(self):
        th = np.array([np.e, 1, 1, 1.0])
        v = log_prior_theta(th, ModelSpec("UM", (1,)))
        assert v == pytest.approx(4 * HALF_LOG - 0.5 / 100)

    def test_domain(self):
        with pytest.raises(ParameterDomainError):
            log_prior_theta([1, -1, 1, 1], ModelSpec("UM", (1,)))
        with pytest.raises(ParameterDomainError):
            log_prior_theta([1, 1, 1], ModelSpec("UM", (1,)))


class TestSpatialPrecision:
    def test_um_equals_univariate_blocks(self, tiny):
        _, fem, _ = tiny
        th = THETA["UM"]
        Q = spatial_precision(fem, ModelSpec("UM", (1,)), th).Q.toarray()
        n = fem.n
        assert np.array_equal(Q[:n, :n], uni_precision(fem, UniParams(th[0], th[1])).Q.toarray())
        assert np.array_equal(Q[n:, n:], uni_precision(fem, UniParams(th[2], th[3])).Q.toarray())
        assert np.all(Q[:n, n:] == 0)

    def test_um_equals_bivariate_with_zero_coupling(self, tiny):
        _, fem, _ = tiny
        th = THETA["UM"]
        bm = bi_precision(fem, BiParams(th[0], th[1], 0.0, 1.0, th[2], th[3])).Q.toarray()
        um = spatial_precision(fem, ModelSpec("UM", (1,)), th).Q.toarray()
        assert np.array_equal(bm, um)

    def test_bm_ht_swaps_order(self, tiny):
        _, fem, _ = tiny
        th = THETA["BM_HT"]
        n = fem.n
        Q = spatial_precision(fem, ModelSpec("BM_HT", (1,)), th).Q.toarray()
        B = bi_precision(fem, BiParams(*th)).Q.toarray()
        perm = np.r_[n : 2 * n, 0:n]
        assert np.allclose(Q, B[np.ix_(perm, perm)], rtol=0, atol=1e-13 * abs(B).max())


class TestSystem:
    def test_dimensions_and_noise(self, tiny_problems):
        p = tiny_problems["BM_TH"]
        sys = p.system(THETA["BM_TH"])
        J = p.spec.n_years
        assert sys.dim == J * 2 * p.n_nodes + 2 * (J + 2)
        assert sys.C_obs.shape == (len(p.obs), sys.dim)
        is_t = p.obs.field == "T"
        assert np.allclose(sys.q_eps[is_t], 100.0)
        assert np.allclose(sys.q_eps[~is_t], 10000.0)

    def test_five_year_counting(self, tiny):
        mesh, fem, obs = tiny
        spec = ModelSpec("BM_TH", YEARS5)
        p = Problem(ObservationTable.empty(), mesh, spec, fem)
        assert p.dim == 5 * 2 * mesh.n_vertices + 14

    def test_prior_block_structure(self, tiny_problems):
        p = tiny_problems["BM_TH"]
        th = THETA["BM_TH"]
        Q = p.prior_precision(th).toarray()
        Qs = p.spatial(th).Q.toarray()
        m = Qs.shape[0]
        ref = sp.block_diag([Qs] * p.spec.n_years + [np.eye(p.spec.n_beta) / 100]).toarray()
        assert np.array_equal(Q, ref)
        assert Q[p.n_x :, p.n_x :].diagonal() == pytest.approx(0.01)
        factorize(sp.csc_matrix(Q))
        assert m == 2 * p.n_nodes

    def test_posterior_precision(self, tiny_problems):
        p = tiny_problems["UM"]
        th = THETA["UM"]
        sys = p.system(th)
        C = sys.C_obs.toarray()
        ref = sys.Q_prior.toarray() + C.T @ np.diag(sys.q_eps) @ C
        assert np.allclose(p.posterior_precision(th).toarray(), ref, atol=1e-9)

    def test_observation_operator_rows(self, tiny_problems):
        p = tiny_problems["BM_TH"]
        C = p.C_obs.toarray()
        A = C[:, : p.n_x]
        assert np.allclose(A.sum(axis=1), 1.0)
        for i in range(len(p.obs)):
            j = p.spec.years.index(int(p.obs.year[i]))
            f = 0 if p.obs.field[i] == "T" else 1
            blk = slice((2 * j + f) * p.n_nodes, (2 * j + f + 1) * p.n_nodes)
            assert A[i, blk].sum() == pytest.approx(1.0)

    def test_outside_mesh(self, tiny):
        mesh, fem, _ = tiny
        bad = ObservationTable.from_records([Observation("z", 2000, "T", 0.0, 1e3, 1e3, 0, 0)])
        with pytest.raises(OutOfDomainError):
            assemble_system(bad, mesh, fem, ModelSpec("UM", (2000,)), THETA["UM"])

    def test_kind_parse(self):
        assert ModelKind.parse("bmth") is ModelKind.BM_TH
        assert ModelKind.parse("BM-HT") is ModelKind.BM_HT
        assert ModelKind.parse("um") is ModelKind.UM
