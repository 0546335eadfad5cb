"""Box-Cox transformation of humidity and exploratory variogram fitting."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.distance import pdist

from .spde import matern_correlation

log = logging.getLogger(__name__)

LAMBDA_ZERO = 1e-10


class TransformDomainError(ValueError):
    pass


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class BoxCoxTransform:
    lam: float
    applied_field: str = "H"

    def forward(self, y):
        return boxcox(y, self.lam)

    def inverse(self, t):
        return inverse_boxcox(t, self.lam)


def boxcox(y, lam: float):
    """``(y^lam - 1) / lam``, or ``log y`` when ``|lam| < 1e-10``."""
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0)):
        raise TransformDomainError("Box-Cox requires strictly positive values")
    if abs(lam) < LAMBDA_ZERO:
        out = np.log(y)
    else:
        # expm1 keeps precision for y near 1 and small lam.
        out = np.expm1(lam * np.log(y)) / lam
    return out if out.ndim else float(out)


def inverse_boxcox(t, lam: float):
    t = np.asarray(t, dtype=float)
    if abs(lam) < LAMBDA_ZERO:
        out = np.exp(t)
    else:
        base = 1.0 + lam * t
        if np.any(base <= 0):
            raise TransformDomainError("1 + lam * t must be positive")
        out = np.exp(np.log1p(lam * t) / lam)
    return out if out.ndim else float(out)


def boxcox_profile_loglik(y, lam: float) -> float:
    """Gaussian profile log-likelihood of the transformed sample plus the
    Jacobian ``(lam - 1) sum log y``."""
    y = np.asarray(y, dtype=float)
    t = boxcox(y, lam)
    var = np.mean((t - t.mean()) ** 2)
    if not var > 0:
        return -np.inf
    return float(-0.5 * y.size * np.log(var) + (lam - 1.0) * np.sum(np.log(y)))


def lambda_grid(lo: float = -2.0, hi: float = 2.0, step: float = 0.01) -> np.ndarray:
    n = int(round((hi - lo) / step))
    return np.round(lo + step * np.arange(n + 1), 10)


def estimate_lambda(y, grid=None) -> float:
    """Grid maximiser of the profile likelihood; ties go to the point nearest 1."""
    y = np.sort(np.asarray(y, dtype=float))  # order-free summation
    if y.size < 10:
        raise EstimationError("need at least 10 values to estimate lambda")
    if np.any(~(y > 0)):
        raise TransformDomainError("Box-Cox requires strictly positive values")
    if np.ptp(y) <= 1e-12 * np.abs(y).max():
        raise EstimationError("constant input; lambda is not identifiable")
    grid = lambda_grid() if grid is None else np.asarray(grid, dtype=float)
    ll = np.array([boxcox_profile_loglik(y, lam) for lam in grid])
    best = np.max(ll)
    cand = grid[ll >= best - 1e-12 * max(1.0, abs(best))]
    return float(cand[np.argmin(np.abs(cand - 1.0))])


# --- variograms ------------------------------------------------------------


@dataclass(frozen=True)
class EmpiricalVariogram:
    bin_centers: np.ndarray
    gamma_hat: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return self.bin_centers.size


def empirical_variogram(
    values, locations, n_bins: int = 15, max_dist: float | None = None
) -> EmpiricalVariogram:
    """Matheron estimator over equal-width distance bins.

    ``max_dist`` defaults to half the largest pairwise distance. Bin centres
    are the mean pair distance within each bin; empty bins are dropped.
    """
    v = np.asarray(values, dtype=float)
    loc = np.asarray(locations, dtype=float).reshape(len(v), -1)
    if v.size < 2:
        raise ValueError("need at least two observations")
    d = pdist(loc)
    sq = 0.5 * pdist(v[:, None], "sqeuclidean")
    if max_dist is None:
        max_dist = 0.5 * d.max()
    if not max_dist > 0:
        raise ValueError("max_dist must be positive")
    keep = d <= max_dist
    d, sq = d[keep], sq[keep]
    idx = np.minimum((d / max_dist * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        gam = np.bincount(idx, weights=sq, minlength=n_bins) / counts
        cen = np.bincount(idx, weights=d, minlength=n_bins) / counts
    nonempty = counts > 0
    if not np.all(nonempty):
        warnings.warn(f"dropping {int(np.sum(~nonempty))} empty variogram bins", stacklevel=2)
    return EmpiricalVariogram(cen[nonempty], gam[nonempty], counts[nonempty])


def matern_variogram(h, sigma2: float, kappa: float, nugget: float = 0.0, nu: float = 1.0):
    h = np.asarray(h, dtype=float)
    return nugget + sigma2 * (1.0 - matern_correlation(h, kappa, nu))


@dataclass(frozen=True)
class VariogramFit:
    sigma2: float
    kappa: float
    nugget: float
    nu: float
    loss: float
    converged: bool
    message: str = ""


def _wls_loss(ev: EmpiricalVariogram, s2, kappa, nugget, nu) -> float:
    r = matern_variogram(ev.bin_centers, s2, kappa, nugget, nu) - ev.gamma_hat
    return float(np.sum(ev.counts * r * r))


def fit_matern_variogram(ev: EmpiricalVariogram, nu: float = 1.0) -> VariogramFit:
    """Weighted least squares (weights = pair counts) for sill, kappa and nugget.

    The smoothness is held at ``nu``. Several starting ranges are tried and
    the lowest loss is kept.
    """
    if len(ev) < 3:
        raise ValueError("need at least three non-empty bins")
    h, g, w = ev.bin_centers, ev.gamma_hat, np.sqrt(ev.counts.astype(float))
    scale = max(float(np.max(g)), 1e-300)

    def resid(p):
        s2, lk, nug = p
        return w * (matern_variogram(h, s2 * scale, np.exp(lk), nug * scale, nu) - g) / scale

    best = None
    for frac in (0.1, 0.3, 1.0, 3.0):
        k0 = np.sqrt(8 * nu) / (frac * h.max())
        x0 = np.array([1.0, np.log(k0), 0.05])
        try:
            r = least_squares(
                resid, x0, bounds=([0, -np.inf, 0], [np.inf, np.inf, np.inf]),
                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=5000,
            )
        except ValueError as exc:  # pragma: no cover - defensive
            log.debug("variogram start %s failed: %s", frac, exc)
            continue
        if best is None or r.cost < best.cost:
            best = r
    if best is None:
        return VariogramFit(np.nan, np.nan, np.nan, nu, np.inf, False, "all starts failed")
    s2, lk, nug = best.x
    fit = VariogramFit(
        float(s2 * scale), float(np.exp(lk)), float(nug * scale), nu,
        _wls_loss(ev, s2 * scale, np.exp(lk), nug * scale, nu), bool(best.success), str(best.message),
    )
    if not fit.converged:
        log.warning("variogram fit did not converge: %s (loss %.3g)", fit.message, fit.loss)
    return fit
