"""Hyperparameter posterior, its mode, and the Gaussian conditional of z.

For fixed theta the latent vector is Gaussian given the data,

    z | y, theta ~ N(mu_c, Q_c^-1),  Q_c = Q + C' Q_eps C,  Q_c mu_c = C' Q_eps y,

and the marginal posterior of theta follows from dividing the joint density
by this conditional at ``z = mu_c``:

    log p(theta | y) = log p(theta) + 1/2 log|Q| - 1/2 log|Q_c|
                       + 1/2 mu_c' Q_c mu_c - 1/2 y' Q_eps y
                       + 1/2 log|Q_eps| - m/2 log(2 pi)    (+ const).

The last three terms do not depend on theta but are kept so the value is
the exact log joint density of (theta, y).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .cholesky import Factor, NotPositiveDefiniteError, factorize
from .model import (
    FIELDS,
    LOG_2PI,
    LatentSystem,
    ModelKind,
    ObservationTable,
    ParameterDomainError,
    Problem,
    check_theta,
    log_prior_theta,
)
from .spde import (
    KAPPA_MIN,
    RangeUndefinedError,
    binned_curve,
    central_node,
    correlation_curve,
    correlation_range,
)

log = logging.getLogger(__name__)

FD_STEP = 1e-4
HESSIAN_STEP = 1e-3


class IndefiniteSystemError(np.linalg.LinAlgError):
    """Q_c could not be factorised; theta is invalid or assembly is broken."""


class InitializationError(RuntimeError):
    """The optimiser could not find a finite starting region."""


@dataclass(frozen=True, eq=False)
class ConditionalGaussian:
    mu: np.ndarray
    factor: Factor
    Q: sp.csc_matrix

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def permutation(self) -> np.ndarray:
        return self.factor.permutation

    def variances(self, rows) -> np.ndarray:
        """``diag(R Q_c^-1 R')`` for the rows of a (k, dim) matrix ``R``."""
        R = sp.csr_matrix(rows)
        if R.shape[0] == 0:
            return np.zeros(0)
        out = np.empty(R.shape[0])
        for start in range(0, R.shape[0], 256):
            w = self.factor.whiten(R[start : start + 256].T.tocsc())
            out[start : start + w.shape[1]] = np.sum(w * w, axis=0)
        return out


def conditional(system: LatentSystem, symbolic=None) -> ConditionalGaussian:
    Qeps = sp.diags(system.q_eps)
    Qc = (system.Q_prior + system.C_obs.T @ Qeps @ system.C_obs).tocsc()
    rhs = system.C_obs.T @ (system.q_eps * system.y)
    return _condition(Qc, np.asarray(rhs).ravel(), symbolic)


def _condition(Qc, rhs, symbolic=None) -> ConditionalGaussian:
    try:
        f = symbolic.factorize(Qc) if symbolic is not None else factorize(Qc)
    except NotPositiveDefiniteError as exc:
        raise IndefiniteSystemError(str(exc)) from exc
    mu = f.solve(rhs) if rhs.size else np.zeros(Qc.shape[0])
    return ConditionalGaussian(np.asarray(mu).ravel(), f, Qc)


@dataclass
class Evaluation:
    """Pieces of one log-posterior evaluation (kept for diagnostics)."""

    log_posterior: float
    log_prior: float
    logdet_Q: float
    logdet_Qc: float
    quad: float
    cond: ConditionalGaussian | None = None


def evaluate(theta, problem: Problem, free=None, keep_conditional: bool = False) -> Evaluation:
    """Log posterior of theta; raises on an invalid theta."""
    spec = problem.spec
    theta = check_theta(theta, spec)
    if np.any(theta[spec.kind.positive] <= KAPPA_MIN):
        raise ParameterDomainError("positive parameter below lower bound")
    lp = log_prior_theta(theta, spec, free)
    spatial = problem.spatial(theta)
    Qs = spatial.Q
    try:
        fs = problem.symbolic(Qs).factorize(Qs)
    except NotPositiveDefiniteError as exc:
        raise IndefiniteSystemError(f"spatial precision: {exc}") from exc
    J = spec.n_years
    ld_Q = J * fs.logdet() + spec.n_beta * -math.log(spec.beta_prior_variance)
    Qc = problem.posterior_precision(theta, spatial)
    cond = _condition(Qc, problem.CtQy, problem.symbolic(Qc))
    ld_Qc = cond.factor.logdet()
    mu = cond.mu
    quad = float(mu @ problem.CtQy)  # mu' Q_c mu
    # y'Q_eps y - mu'Q_c mu in its stationary form: errors in mu enter only
    # at second order, avoiding cancellation between two large terms.
    r = problem.y - problem.C_obs @ mu
    xs = mu[: problem.n_x].reshape(J, -1)
    beta = mu[problem.n_x :]
    misfit = (
        float(r @ (problem.q_eps * r))
        + float(np.sum(xs * (Qs @ xs.T).T))
        + float(beta @ beta) / spec.beta_prior_variance
    )
    m = len(problem.y)
    loglik = (
        0.5 * ld_Q
        - 0.5 * ld_Qc
        - 0.5 * misfit
        + 0.5 * float(np.sum(np.log(problem.q_eps)))
        - 0.5 * m * LOG_2PI
    )
    return Evaluation(lp + loglik, lp, ld_Q, ld_Qc, quad, cond if keep_conditional else None)


def log_posterior(theta, problem: Problem, free=None) -> float:
    """Log posterior density of theta (up to the log evidence).

    Returns ``-inf`` for theta outside the admissible domain or where a
    factorisation fails, so optimisers can step back.
    """
    try:
        return evaluate(theta, problem, free).log_posterior
    except (ParameterDomainError, IndefiniteSystemError, FloatingPointError) as exc:
        log.debug("log_posterior invalid at %s: %s", theta, exc)
        return -math.inf


def condition_at(problem: Problem, theta) -> ConditionalGaussian:
    Qc = problem.posterior_precision(theta)
    return _condition(Qc, problem.CtQy, problem.symbolic(Qc))


# --- optimisation ----------------------------------------------------------


class Transform:
    """Map between natural parameters and unconstrained coordinates.

    Positive parameters use ``log``; others are divided by ``scale``
    (identity by default).
    """

    def __init__(self, positive: np.ndarray, scale: np.ndarray | None = None):
        self.positive = np.asarray(positive, dtype=bool)
        self.scale = np.ones(self.positive.shape) if scale is None else np.asarray(scale, dtype=float)

    def forward(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.where(self.positive, np.log(np.abs(theta) + (theta == 0)), theta / self.scale)

    def inverse(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.where(self.positive, np.exp(np.clip(t, -700, 700)), t * self.scale)

    def jacobian(self, t) -> np.ndarray:
        """d theta / d t (diagonal)."""
        return np.where(self.positive, self.inverse(t), self.scale)


@dataclass
class TraceRow:
    iteration: int
    theta: np.ndarray
    log_post: float
    grad_norm: float

    def line(self) -> str:
        th = " ".join(f"{v:.10g}" for v in self.theta)
        return f"{self.iteration} {th} {self.log_post:.12g} {self.grad_norm:.6g}"


@dataclass(eq=False)
class FitResult:
    problem: Problem
    param_names: tuple[str, ...]
    theta_hat: np.ndarray
    log_post_at_mode: float
    hessian: np.ndarray
    std_devs: np.ndarray
    conditional: ConditionalGaussian
    converged: bool
    message: str
    trace: list[TraceRow] = field(default_factory=list)
    n_evals: int = 0
    free: np.ndarray | None = None
    hessian_negative_definite: bool = True

    @property
    def spec(self):
        return self.problem.spec

    @property
    def beta_hat(self) -> np.ndarray:
        return self.conditional.mu[self.problem.n_x :]

    @property
    def beta_sd(self) -> np.ndarray:
        nb = self.problem.spec.n_beta
        rows = sp.hstack(
            [sp.csr_matrix((nb, self.problem.n_x)), sp.identity(nb, format="csr")], format="csr"
        )
        return np.sqrt(self.conditional.variances(rows))

    def theta_dict(self) -> dict[str, float]:
        return dict(zip(self.param_names, map(float, self.theta_hat)))

    def trace_text(self) -> str:
        head = "iter " + " ".join(self.param_names) + " log_post grad_norm"
        return "\n".join([head] + [r.line() for r in self.trace]) + "\n"

    def predict(self, targets: ObservationTable):
        return predict(self, targets)


def fd_gradient(fun: Callable, t: np.ndarray, step: float = FD_STEP, f0: float | None = None):
    """Central differences with step ``step * max(1, |t_i|)``."""
    t = np.asarray(t, dtype=float)
    g = np.zeros_like(t)
    for i in range(t.size):
        h = step * max(1.0, abs(t[i]))
        tp, tm = t.copy(), t.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (fun(tp) - fun(tm)) / (2 * h)
    return g


def fd_hessian(fun: Callable, t: np.ndarray, step: float = HESSIAN_STEP) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    k = t.size
    h = step * np.maximum(1.0, np.abs(t))
    f0 = fun(t)
    H = np.zeros((k, k))
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h[i]
        H[i, i] = (fun(t + ei) - 2 * f0 + fun(t - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(k)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                fun(t + ei + ej) - fun(t + ei - ej) - fun(t - ei + ej) + fun(t - ei - ej)
            ) / (4 * h[i] * h[j])
    return H


def default_theta0(problem: Problem) -> np.ndarray:
    """Heuristic start: per-field residual variance after a least-squares fit
    of the covariates, and a correlation range of a fifth of the domain."""
    obs = problem.obs
    spec = problem.spec
    inner = problem.mesh.vertices[problem.mesh.interior]
    extent = float(np.linalg.norm(inner.max(axis=0) - inner.min(axis=0))) if len(inner) else 1.0
    kappa0 = math.sqrt(8.0) / (0.2 * max(extent, 1e-6))
    X = problem.C_obs[:, problem.n_x :].toarray()
    var = {}
    for f in FIELDS:
        rows = obs.field == f
        y = problem.y[rows]
        if y.size > spec.n_beta:
            beta, *_ = np.linalg.lstsq(X[rows], y, rcond=None)
            r = y - X[rows] @ beta
            var[f] = float(np.var(r)) if np.var(r) > 0 else 1.0
        elif y.size > 1:
            var[f] = float(np.var(y)) or 1.0
        else:
            var[f] = 1.0
    bx = {f: 1.0 / math.sqrt(4 * math.pi * var[f] * kappa0**2) for f in FIELDS}
    if spec.kind is ModelKind.UM:
        return np.array([bx["T"], kappa0, bx["H"], kappa0])
    first, second = spec.kind.order
    return np.array([bx[first], kappa0, 0.0, kappa0, bx[second], kappa0])


def optimize(
    problem: Problem,
    theta0=None,
    max_iter: int = 200,
    gtol: float = 1e-5,
    fixed: Mapping[str, float] | None = None,
    step: float = FD_STEP,
) -> FitResult:
    """Posterior mode of theta by L-BFGS on transformed coordinates.

    Gradients are central finite differences; the Hessian at the mode is by
    central second differences. ``fixed`` pins named parameters (they carry
    no prior and no standard deviation).
    """
    spec = problem.spec
    names = spec.param_names
    theta0 = default_theta0(problem) if theta0 is None else np.asarray(theta0, dtype=float)
    fixed = dict(fixed or {})
    unknown = set(fixed) - set(names)
    if unknown:
        raise ValueError(f"unknown fixed parameters: {sorted(unknown)}")
    theta0 = theta0.copy()
    for k, v in fixed.items():
        theta0[names.index(k)] = v
    free = np.array([n not in fixed for n in names])
    check_theta(theta0, spec)

    # Identity coordinate for b21: the relative step rule then adapts to |b21|.
    tr = Transform(spec.kind.positive, np.ones(len(names)))
    t_full0 = tr.forward(theta0)

    def full(tf):
        t = t_full0.copy()
        t[free] = tf
        return t

    n_evals = 0
    best = {"f": math.inf, "t": t_full0[free].copy()}

    def objective(tf):
        nonlocal n_evals
        n_evals += 1
        val = log_posterior(tr.inverse(full(tf)), problem, free)
        if not np.isfinite(val):
            return 1e300
        if -val < best["f"]:
            best["f"], best["t"] = -val, np.array(tf, copy=True)
        return -val

    x0 = t_full0[free]
    f0 = objective(x0)
    if f0 >= 1e300:
        raise InitializationError(f"log posterior is -inf at the initial theta {theta0}")

    trace: list[TraceRow] = []
    state = {"it": 0}

    last = {"t": None, "g": None, "f": None}

    def grad(tf):
        if last["t"] is None or not np.array_equal(last["t"], tf):
            last["t"], last["g"] = np.array(tf, copy=True), fd_gradient(objective, tf, step)
        return last["g"]

    def callback(tf):
        state["it"] += 1
        g = grad(tf)
        val = log_posterior(tr.inverse(full(tf)), problem, free)
        trace.append(TraceRow(state["it"], tr.inverse(full(tf)), val, float(np.linalg.norm(g))))

    g0 = grad(x0)
    trace.append(TraceRow(0, theta0.copy(), -f0, float(np.linalg.norm(g0))))
    res = minimize(
        objective,
        x0,
        jac=grad,
        method="L-BFGS-B",
        callback=callback,
        options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-13, "maxcor": 20},
    )
    t_hat = res.x if res.fun <= best["f"] else best["t"]
    f_hat = objective(t_hat)
    g_hat = grad(t_hat)
    # Finite-difference noise can stall the line search at the mode; accept
    # such a stop when the gradient is within an order of the tolerance.
    stalled_ok = "ABNORMAL" in str(res.message) and np.max(np.abs(g_hat)) <= 10 * gtol
    converged = bool(res.success or stalled_ok)

    H_free = -fd_hessian(objective, t_hat)  # Hessian of the log posterior
    H = np.zeros((len(names), len(names)))
    H[np.ix_(free, free)] = H_free
    sd_t = np.full(len(names), np.nan)
    neg_def = bool(np.all(np.linalg.eigvalsh(0.5 * (H_free + H_free.T)) < 0))
    if neg_def:
        cov = np.linalg.inv(-H_free)
        sd_t[free] = np.sqrt(np.diag(cov))
    sd_t[~free] = 0.0
    t_all = full(t_hat)
    theta_hat = tr.inverse(t_all)
    std = np.abs(tr.jacobian(t_all)) * sd_t

    cond = condition_at(problem, theta_hat)
    message = res.message if isinstance(res.message, str) else res.message.decode()
    if not neg_def:
        message += "; Hessian not negative definite at the mode"
    return FitResult(
        problem=problem,
        param_names=names,
        theta_hat=theta_hat,
        log_post_at_mode=-f_hat,
        hessian=H,
        std_devs=std,
        conditional=cond,
        converged=converged,
        message=message,
        trace=trace,
        n_evals=n_evals,
        free=free,
        hessian_negative_definite=neg_def,
    )


def fit_at(problem: Problem, theta) -> FitResult:
    """A FitResult pinned at ``theta`` with no optimisation (for prediction)."""
    theta = check_theta(theta, problem.spec)
    k = len(theta)
    return FitResult(
        problem=problem,
        param_names=problem.spec.param_names,
        theta_hat=theta.copy(),
        log_post_at_mode=log_posterior(theta, problem),
        hessian=np.full((k, k), np.nan),
        std_devs=np.full(k, np.nan),
        conditional=condition_at(problem, theta),
        converged=False,
        message="fixed theta",
    )


# --- sampling and prediction ----------------------------------------------


def sample_latent(cond: ConditionalGaussian, n_samples: int, seed) -> np.ndarray:
    """(n_samples, dim) draws ``mu_c + P' L^-T D^-1/2 u``."""
    if n_samples == 0:
        return np.zeros((0, cond.dim))
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((cond.dim, n_samples))
    return (cond.mu[:, None] + cond.factor.color(u)).T


def predict(fit: FitResult, targets: ObservationTable) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and sd (including measurement noise) at ``targets``.

    Target values are ignored; location, year, field and covariates are used.
    """
    problem = fit.problem
    if len(targets) == 0:
        return np.zeros(0), np.zeros(0)
    rows = problem.observation_operator(targets)
    mean = rows @ fit.conditional.mu
    var = fit.conditional.variances(rows)
    noise = np.array([problem.spec.sigma(str(f)) ** 2 for f in targets.field])
    return np.asarray(mean).ravel(), np.sqrt(var + noise)


def predict_latent(fit: FitResult, targets: ObservationTable) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sd of the noise-free linear predictor at ``targets``."""
    rows = fit.problem.observation_operator(targets)
    return np.asarray(rows @ fit.conditional.mu).ravel(), np.sqrt(fit.conditional.variances(rows))


def dense_log_posterior(theta, problem: Problem) -> float:
    """Reference value through the marginal Gaussian likelihood of y.

    ``y ~ N(0, C Q^-1 C' + Q_eps^-1)`` with the beta prior folded into ``Q``.
    Dense O(dim^3); only for small problems.
    """
    Q = problem.prior_precision(theta).toarray()
    C = problem.C_obs.toarray()
    S = C @ np.linalg.solve(Q, C.T) + np.diag(1.0 / problem.q_eps)
    sign, ld = np.linalg.slogdet(S)
    y = problem.y
    ll = -0.5 * (ld + y @ np.linalg.solve(S, y) + len(y) * LOG_2PI)
    return log_prior_theta(theta, problem.spec) + ll


def correlation_ranges(fit: FitResult, threshold: float = 0.1) -> dict[str, float]:
    """Correlation ranges of the fitted spatial model from the central node.

    ``rho_T`` and ``rho_H`` are where the marginal correlations fall to
    ``threshold``. For bivariate models ``gamma`` is the zero-lag T/H
    correlation and ``rho_TH`` is where the cross-correlation falls to
    ``threshold`` times its zero-lag value. Curves are averaged in bins of
    the median edge length; NaN marks a range beyond the mesh.
    """
    mesh = fit.problem.mesh
    prec = fit.problem.spatial(fit.theta_hat)
    factor = factorize(prec.Q)
    node = central_node(mesh)
    width = float(np.median(mesh.edge_lengths()))
    pairs = {"rho_T": ("T", "T"), "rho_H": ("H", "H")}
    out: dict[str, float] = {}
    if fit.spec.kind is not ModelKind.UM:
        pairs["rho_TH"] = ("T", "H")
    for key, pair in pairs.items():
        d, c = correlation_curve(prec, mesh, node, pair, factor=factor)
        if key == "rho_TH":
            gamma = float(c[0])
            out["gamma"] = gamma
            c = c / gamma if gamma != 0 else np.zeros_like(c)
        bd, bc = binned_curve(d, c, width)
        try:
            out[key] = correlation_range(bd, bc, threshold)
        except RangeUndefinedError:
            out[key] = math.nan
    return out


def theta_as_array(values: Mapping[str, float] | Sequence[float], names: Sequence[str]) -> np.ndarray:
    if isinstance(values, Mapping):
        return np.array([float(values[n]) for n in names])
    return np.asarray(values, dtype=float)
