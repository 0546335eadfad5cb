"""End-to-end acceptance checks, one test per criterion.

Every test records a one-line PASS/FAIL summary that is echoed in the
pytest terminal summary; running this file directly prints the same lines.
"""

import math

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, THETA

from bispde import cli
from bispde.evaluation import crps_gaussian, run_validation
from bispde.experiments import (
    MaternConfig,
    StudyConfig,
    SweepConfig,
    crps_check,
    matern_fidelity,
    parameter_recovery,
    sign_rule,
    spd_sweep,
    validation_study,
)
from bispde.inference import conditional, dense_log_posterior, fit_at, log_posterior, predict
from bispde.preprocess import boxcox, estimate_lambda, inverse_boxcox
from bispde.simulate import SimulationConfig, simulate

NULL_THETA = (10.0, 0.028, 0.0, 0.028, 300.0, 0.035)


def report(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def test_1_matern_fidelity():
    r = matern_fidelity(MaternConfig())
    ok = r.max_corr_error <= 0.02 and r.variance_rel_error <= 0.05 and r.seconds <= 60
    report(1, "Matern fidelity", ok,
           f"{r.n_nodes} nodes, max |corr err| {r.max_corr_error:.4f}, "
           f"variance rel err {r.variance_rel_error:.4f}, {r.seconds:.1f} s")
    assert ok


def test_2_positive_definiteness():
    r = spd_sweep(SweepConfig(n_draws=10_000))
    ok = not r.failures
    report(2, "positive definiteness", ok,
           f"{len(r.failures)} of {r.n_draws} factorizations failed, {r.seconds:.1f} s")
    assert ok, f"{len(r.failures)} indefinite in float64, first {r.failures[0]}"


def test_3_cross_correlation_sign():
    r = sign_rule()
    ok = r.mismatches == 0 and r.max_abs_uncoupled < 1e-10
    report(3, "cross-correlation sign", ok,
           f"{r.mismatches} of {r.n_draws} sign mismatches, max |r| at b21=0 {r.max_abs_uncoupled:.1e}")
    assert ok


def _dense(problem, theta):
    Q = problem.prior_precision(theta).toarray()
    C = problem.C_obs.toarray()
    Qc = Q + C.T @ np.diag(problem.q_eps) @ C
    return np.linalg.solve(Qc, C.T @ (problem.q_eps * problem.y)), np.linalg.inv(Qc)


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def test_4_dense_oracle(tiny_problems):
    worst = 0.0
    for kind, p in tiny_problems.items():
        assert p.n_nodes <= 40
        th1 = THETA[kind]
        th2 = th1 * np.where(p.spec.kind.positive, 1.25, -0.6)
        mu_d, S = _dense(p, th1)
        worst = max(worst, _rel(conditional(p.system(th1)).mu, mu_d))
        targets = p.obs.subset(np.arange(0, len(p.obs), 2))
        mu, sd = predict(fit_at(p, th1), targets)
        R = p.observation_operator(targets).toarray()
        noise = np.array([p.spec.sigma(f) ** 2 for f in targets.field])
        worst = max(worst, _rel(mu, R @ mu_d), _rel(sd, np.sqrt(np.diag(R @ S @ R.T) + noise)))
        d_sparse = log_posterior(th1, p) - log_posterior(th2, p)
        d_dense = dense_log_posterior(th1, p) - dense_log_posterior(th2, p)
        worst = max(worst, abs(d_sparse - d_dense) / abs(d_dense))
    ok = worst <= 1e-6
    report(4, "dense-oracle equivalence", ok, f"max relative deviation {worst:.1e}")
    assert ok


def test_5_crps():
    err = crps_check(1000, seed=0)
    lim = abs(crps_gaussian(1.5, 1e-8, -0.5) - 2.0)
    ok = err <= 1e-7 and lim <= 1e-6
    report(5, "CRPS", ok, f"max |closed - quadrature| {err:.1e}, sigma=1e-8 limit error {lim:.1e}")
    assert ok


def test_6_parameter_recovery():
    r = parameter_recovery(SimulationConfig())
    zt, zb = np.max(np.abs(r.z_theta)), np.max(np.abs(r.z_beta))
    ok = r.converged and zt < 3 and zb < 3 and r.seconds <= 600
    report(6, "parameter recovery", ok,
           f"{r.n_nodes} nodes, {r.n_obs} obs, max |z| theta {zt:.2f}, beta {zb:.2f}, {r.seconds:.0f} s")
    assert ok


def test_7_validation_ordering():
    rows = validation_study(StudyConfig())
    n_ord = sum(r.ordered for r in rows)
    null = validation_study(StudyConfig(sim=SimulationConfig(theta=NULL_THETA)))
    um = np.mean([r.um for r in null])
    d_h = abs(np.mean([r.bm_h for r in null]) / um - 1)
    d_ht = abs(np.mean([r.bm_ht for r in null]) / um - 1)
    ok = n_ord >= 8 and max(d_h, d_ht) < 0.05 and not any(r.failures for r in rows + null)
    report(7, "validation ordering", ok,
           f"BM-H <= BM-HT <= UM in {n_ord}/10 seeds; b21=0 BM vs UM differ {d_h:.1%} (H), {d_ht:.1%} (HT)")
    assert ok, [(r.seed, r.bm_h, r.bm_ht, r.um) for r in rows]


def test_8_boxcox():
    rng = np.random.default_rng(0)
    y = np.exp(rng.uniform(math.log(1e-3), math.log(1e3), 1000))
    lam = rng.uniform(-2, 2, 1000)
    rt = max(abs(inverse_boxcox(boxcox(a, b), b) / a - 1) for a, b in zip(y, lam))
    l_gauss = estimate_lambda(np.random.default_rng(1).normal(10, 1, 500))
    l_logn = estimate_lambda(np.exp(np.random.default_rng(2).normal(0, 1, 500)))
    ok = rt <= 1e-12 and abs(l_gauss - 1) <= 0.3 and abs(l_logn) <= 0.2
    report(8, "Box-Cox", ok,
           f"roundtrip max rel err {rt:.1e}, lambda Gaussian {l_gauss:.2f}, lognormal {l_logn:.2f}")
    assert ok


def test_9_determinism(tmp_path):
    names = ("stations.csv", "observations.csv", "mesh.txt", "truth.txt", "manifest.txt")
    sim_args = ["simulate", "--n-t", "40", "--n-h", "20", "--max-edge", "60", "--years", "2005,2006",
                "--seed", "7", "--out", str(tmp_path / "sim")]
    assert cli.main(sim_args) == 0
    first = [(tmp_path / "sim" / n).read_bytes() for n in names]
    assert cli.main(sim_args) == 0
    same_sim = first == [(tmp_path / "sim" / n).read_bytes() for n in names]

    sim = simulate(SimulationConfig(years=(2005, 2006), n_T=40, n_H=20, max_edge=60.0, seed=7))
    kw = dict(models=("UM", "BM_TH"), settings=("H", "HT"), seed=3, n_test=8)
    a = run_validation(sim.obs, sim.mesh, **kw)
    b = run_validation(sim.obs, sim.mesh, **kw)
    same_scores = a.table.to_csv().encode() == b.table.to_csv().encode()
    same_preds = a.predictions_csv() == b.predictions_csv()
    ok = same_sim and same_scores and same_preds
    report(9, "determinism", ok,
           f"simulation files identical: {same_sim}, score CSV identical: {same_scores}")
    assert ok


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
