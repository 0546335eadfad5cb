"""Synthetic experiments behind the acceptance checks and the scripts.

Each experiment takes a small frozen config and returns plain numbers, so
the same code serves ``tests/test_acceptance.py`` and ``scripts/``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import quad
from scipy.stats import norm

from .cholesky import NotPositiveDefiniteError, factorize
from .evaluation import crps_gaussian, run_validation
from .inference import optimize
from .mesh import assemble_fem, build_mesh
from .model import ModelKind, Problem
from .spde import (
    BiParams,
    UniParams,
    bi_precision,
    central_node,
    correlation_curve,
    cross_correlation,
    marginal_variances,
    matern_correlation,
    uni_precision,
)
from .simulate import SimulationConfig, simulate


def _square(L: float) -> np.ndarray:
    return np.array([[0, 0], [L, 0], [L, L], [0, L]], dtype=float)


def _log_uniform(rng, lo, hi) -> float:
    return float(np.exp(rng.uniform(math.log(lo), math.log(hi))))


# --- Matern fidelity -------------------------------------------------------


@dataclass(frozen=True)
class MaternConfig:
    side: float = 10.0
    max_edge: float = 0.1
    extension: float = 3.0
    kappa: float = 2.0
    d_min: float = 0.05
    d_max: float = 1.5


@dataclass
class MaternResult:
    n_nodes: int
    max_corr_error: float
    variance: float
    target_variance: float
    seconds: float

    @property
    def variance_rel_error(self) -> float:
        return abs(self.variance / self.target_variance - 1)


def matern_fidelity(cfg: MaternConfig = MaternConfig()) -> MaternResult:
    """Correlations and variance of the unit-variance field at the central node."""
    t0 = time.perf_counter()
    mesh = build_mesh(_square(cfg.side), cfg.max_edge, cfg.extension)
    p = UniParams.unit_variance(cfg.kappa)
    prec = uni_precision(assemble_fem(mesh), p)
    factor = factorize(prec.Q)
    node = central_node(mesh)
    d, c = correlation_curve(prec, mesh, node, (0, 0), max_dist=cfg.d_max, factor=factor)
    sel = d >= cfg.d_min
    err = float(np.max(np.abs(c[sel] - matern_correlation(d[sel], cfg.kappa))))
    var = float(marginal_variances(factor, [node])[0])
    target = 1.0 / (4 * math.pi * p.b**2 * cfg.kappa**2)
    return MaternResult(mesh.n_vertices, err, var, target, time.perf_counter() - t0)


# --- random bivariate parameters -------------------------------------------


@dataclass(frozen=True)
class ParamBox:
    """Log-uniform ranges for b and kappa, uniform b21 with |b21| >= b21_min."""

    b: tuple[float, float] = (1e-3, 10.0)
    kappa: tuple[float, float] = (0.1, 50.0)
    b21_max: float = 5.0
    b21_min: float = 0.0

    def draw(self, rng) -> BiParams:
        b21 = float(rng.uniform(self.b21_min, self.b21_max) * rng.choice([-1.0, 1.0]))
        return BiParams(
            _log_uniform(rng, *self.b), _log_uniform(rng, *self.kappa), b21,
            _log_uniform(rng, *self.kappa), _log_uniform(rng, *self.b), _log_uniform(rng, *self.kappa),
        )


WIDE_BOX = ParamBox()
MODERATE_BOX = ParamBox(b=(0.1, 10.0), kappa=(0.3, 10.0), b21_max=5.0, b21_min=0.05)


@dataclass(frozen=True)
class SweepConfig:
    n_draws: int = 10_000
    seed: int = 0
    side: float = 10.0
    max_edge: float = 2.0
    extension: float = 1.0
    box: ParamBox = WIDE_BOX


@dataclass
class SweepResult:
    n_draws: int
    failures: list[BiParams]
    seconds: float


def spd_sweep(cfg: SweepConfig = SweepConfig()) -> SweepResult:
    """Attempt a Cholesky factorization of ``bi_precision`` for random draws."""
    t0 = time.perf_counter()
    fem = assemble_fem(build_mesh(_square(cfg.side), cfg.max_edge, cfg.extension))
    rng = np.random.default_rng(cfg.seed)
    fails = []
    for _ in range(cfg.n_draws):
        p = cfg.box.draw(rng)
        try:
            factorize(bi_precision(fem, p).Q)
        except NotPositiveDefiniteError:
            fails.append(p)
    return SweepResult(cfg.n_draws, fails, time.perf_counter() - t0)


def extreme_eigenvalues(fem, p: BiParams) -> tuple[float, float]:
    """Smallest and largest float64 eigenvalue of the bivariate precision (small meshes only).

    ``lmax / |lmin|`` is the condition number; a negative ``lmin`` means the
    rounded matrix is numerically indefinite.
    """
    e = np.linalg.eigvalsh(bi_precision(fem, p).Q.toarray())
    return float(e[0]), float(e[-1])


@dataclass
class SignResult:
    n_draws: int
    mismatches: int
    max_abs_uncoupled: float


def sign_rule(cfg: SweepConfig = SweepConfig(n_draws=1000, box=MODERATE_BOX)) -> SignResult:
    """Zero-lag cross-correlation sign against b21, plus the uncoupled check."""
    mesh = build_mesh(_square(cfg.side), cfg.max_edge, cfg.extension)
    fem = assemble_fem(mesh)
    node = central_node(mesh)
    rng = np.random.default_rng(cfg.seed)
    bad, worst = 0, 0.0
    for _ in range(cfg.n_draws):
        p = cfg.box.draw(rng)
        r = cross_correlation(bi_precision(fem, p), node)
        bad += np.sign(r) != -np.sign(p.b21)
        r0 = cross_correlation(bi_precision(fem, replace(p, b21=0.0)), node)
        worst = max(worst, abs(r0))
    return SignResult(cfg.n_draws, int(bad), worst)


# --- CRPS ------------------------------------------------------------------


def crps_by_quadrature(mu: float, sigma: float, y: float) -> float:
    """Threshold integral of squared Brier residuals, split at ``y``."""
    F = norm(mu, sigma).cdf
    lo = quad(lambda t: F(t) ** 2, -np.inf, y, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    hi = quad(lambda t: (1 - F(t)) ** 2, y, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    return lo + hi


def crps_check(n: int = 1000, seed: int = 0) -> float:
    """Largest |closed form - quadrature| over random (mu, sigma, y)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        mu, y = rng.normal(0, 3, 2)
        s = math.exp(rng.uniform(-3, 2))
        worst = max(worst, abs(crps_gaussian(mu, s, y) - crps_by_quadrature(mu, s, y)))
    return worst


# --- parameter recovery ----------------------------------------------------


@dataclass
class RecoveryResult:
    n_nodes: int
    n_obs: int
    converged: bool
    z_theta: np.ndarray
    z_beta: np.ndarray
    seconds: float


def parameter_recovery(cfg: SimulationConfig = SimulationConfig()) -> RecoveryResult:
    """Fit the simulating model and standardise the errors by posterior sds."""
    t0 = time.perf_counter()
    sim = simulate(cfg)
    fit = optimize(Problem(sim.obs, sim.mesh, sim.spec))
    return RecoveryResult(
        sim.mesh.n_vertices, len(sim.obs), fit.converged,
        (fit.theta_hat - sim.theta) / fit.std_devs, (fit.beta_hat - sim.beta) / fit.beta_sd,
        time.perf_counter() - t0,
    )


# --- validation study ------------------------------------------------------


@dataclass(frozen=True)
class StudyConfig:
    seeds: tuple[int, ...] = tuple(range(10))
    sim: SimulationConfig = field(default_factory=SimulationConfig)
    bm: str = "BM_TH"
    n_test: int = 20


@dataclass
class StudyRow:
    seed: int
    bm_h: float
    bm_ht: float
    um: float
    failures: int

    @property
    def ordered(self) -> bool:
        return self.bm_h <= self.bm_ht <= self.um


def _um_theta(theta) -> np.ndarray:
    return np.asarray(theta, float)[[0, 1, 4, 5]]


def validation_study(cfg: StudyConfig = StudyConfig()) -> list[StudyRow]:
    """Humidity CRPS of BM under settings H and HT against UM, one row per seed.

    Fits start from the simulating parameters. UM humidity predictions do
    not depend on the temperature data, so UM is scored under setting H.
    """
    kind = ModelKind.parse(cfg.bm)
    rows = []
    for seed in cfg.seeds:
        sim = simulate(replace(cfg.sim, seed=seed))
        th = sim.theta
        theta0 = {kind: th, ModelKind.UM: _um_theta(th)}
        spec_kw = {"sigma_T": cfg.sim.sigma_T, "sigma_H": cfg.sim.sigma_H}
        bm = run_validation(sim.obs, sim.mesh, models=(kind,), settings=("H", "HT"), seed=seed,
                            n_test=cfg.n_test, theta0=theta0, spec_kwargs=spec_kw)
        um = run_validation(sim.obs, sim.mesh, models=(ModelKind.UM,), settings=("H",), seed=seed,
                            n_test=cfg.n_test, theta0=theta0, spec_kwargs=spec_kw)
        rows.append(StudyRow(
            seed,
            bm.table.get(kind.value, "H", "H").crps,
            bm.table.get(kind.value, "HT", "H").crps,
            um.table.get("UM", "H", "H").crps,
            len(bm.failures) + len(um.failures),
        ))
    return rows
