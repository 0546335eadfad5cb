"""Scoring rules and the hold-out validation harness.

Settings hold out data at ``n_test`` randomly chosen stations per year among
those observing both fields: ``H`` removes their humidity, ``T`` their
temperature and ``HT`` both. Only held-out values are scored.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .inference import optimize, predict
from .mesh import Mesh
from .model import FIELDS, ModelKind, ModelSpec, ObservationTable, Problem
from .preprocess import inverse_boxcox

log = logging.getLogger(__name__)

SETTINGS = ("H", "T", "HT")
INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
CSV_HEADER = "model,setting,field,year_filter,MAE,MSE,CRPS,n"


def _pair(pred, obs) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float).ravel()
    o = np.asarray(obs, dtype=float).ravel()
    if p.shape != o.shape:
        raise ValueError(f"length mismatch: {p.size} predictions, {o.size} observations")
    if p.size == 0:
        raise ValueError("empty input")
    return p, o


def mae(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(np.mean(np.abs(p - o)))


def mse(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(np.mean((p - o) ** 2))


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of ``N(mu, sigma^2)`` at ``y``."""
    mu, sigma, y = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mu, sigma, y)))
    if np.any(~(sigma > 0)):
        raise ValueError("sigma must be positive")
    z = (y - mu) / sigma
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    out = sigma * (z * (2 * ndtr(z) - 1) + 2 * pdf - INV_SQRT_PI)
    return out if out.ndim else float(out)


def crps_mean(mu, sigma, obs) -> float:
    mu, o = _pair(mu, obs)
    s, _ = _pair(sigma, obs)
    return float(np.mean(crps_gaussian(mu, s, o)))


def crps_quantile(quantile_fn, y, n_levels: int = 1999) -> np.ndarray:
    """CRPS as twice the integral of the pinball loss over quantile levels.

    ``quantile_fn(tau)`` must return an array of shape ``(n_levels, len(y))``.
    Used for monotone back-transforms where no closed form exists.
    """
    y = np.asarray(y, dtype=float)
    tau = (np.arange(n_levels) + 0.5) / n_levels
    q = quantile_fn(tau[:, None])
    pin = (np.where(y < q, 1.0, 0.0) - tau[:, None]) * (q - y)
    return 2.0 * pin.mean(axis=0)


# --- splits ----------------------------------------------------------------


class SplitError(ValueError):
    pass


def split_rng(seed: int, year: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, year); years never share draws."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(year)])))


@dataclass(frozen=True)
class ValidationSplit:
    setting: str
    seed: int
    held_out: Mapping[int, tuple[str, ...]]

    @property
    def held_fields(self) -> tuple[str, ...]:
        return tuple(f for f in FIELDS if f in self.setting)

    def test_mask(self, obs: ObservationTable) -> np.ndarray:
        mask = np.zeros(len(obs), dtype=bool)
        fields = np.isin(obs.field, self.held_fields)
        for yr, ids in self.held_out.items():
            mask |= (obs.year == yr) & np.isin(obs.station_id, list(ids)) & fields
        return mask

    def apply(self, obs: ObservationTable) -> tuple[ObservationTable, ObservationTable]:
        m = self.test_mask(obs)
        return obs.subset(~m), obs.subset(m)


def co_observed(obs: ObservationTable, year: int) -> list[str]:
    sel = obs.year == year
    t = set(obs.station_id[sel & (obs.field == "T")])
    h = set(obs.station_id[sel & (obs.field == "H")])
    return sorted(str(s) for s in t & h)


def make_split(obs: ObservationTable, setting: str, seed: int, n_test: int = 20) -> ValidationSplit:
    setting = str(setting).upper()
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}, got {setting!r}")
    held = {}
    for yr in obs.years():
        ids = co_observed(obs, yr)
        if not ids:
            continue
        rng = split_rng(seed, yr)
        k = min(n_test, len(ids))
        pick = rng.choice(len(ids), size=k, replace=False)
        held[yr] = tuple(ids[i] for i in sorted(pick))
    if not held:
        raise SplitError("no station observes both fields in any year")
    return ValidationSplit(setting, int(seed), held)


# --- score tables ----------------------------------------------------------


@dataclass(frozen=True)
class ScoreRow:
    model: str
    setting: str
    field: str
    year_filter: str
    mae: float
    mse: float
    crps: float
    n: int

    def csv(self) -> str:
        def fmt(v):
            return "NaN" if not np.isfinite(v) else f"{v:.10g}"

        return ",".join(
            [self.model, self.setting, self.field, self.year_filter,
             fmt(self.mae), fmt(self.mse), fmt(self.crps), str(self.n)]
        )


@dataclass
class ScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)

    def get(self, model, setting, field_, year_filter=None) -> ScoreRow:
        for r in self.rows:
            if (r.model, r.setting, r.field) == (str(model), setting, field_) and (
                year_filter is None or r.year_filter == year_filter
            ):
                return r
        raise KeyError((model, setting, field_, year_filter))

    def to_csv(self) -> str:
        return "\n".join([CSV_HEADER] + [r.csv() for r in self.rows]) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ScoreTable":
        lines = text.strip().splitlines()
        if not lines or lines[0] != CSV_HEADER:
            raise ValueError("not a score table")
        rows = []
        for ln in lines[1:]:
            m, s, f, yf, a, b, c, n = ln.split(",")
            rows.append(ScoreRow(m, s, f, yf, float(a), float(b), float(c), int(n)))
        return cls(rows)


def score(pred_mu, pred_sd, obs_values) -> tuple[float, float, float, int]:
    if len(obs_values) == 0:
        return math.nan, math.nan, math.nan, 0
    return (
        mae(pred_mu, obs_values),
        mse(pred_mu, obs_values),
        crps_mean(pred_mu, pred_sd, obs_values),
        len(obs_values),
    )


def score_backtransformed(pred_mu, pred_sd, obs_values, lam: float) -> tuple[float, float, float, int]:
    """Scores on the raw humidity scale.

    The predictive distribution is pushed through the inverse Box-Cox map, so
    it is no longer Gaussian; the point forecast is its median and the CRPS is
    integrated over quantile levels.
    """
    if len(obs_values) == 0:
        return math.nan, math.nan, math.nan, 0
    mu, sd = np.asarray(pred_mu, float), np.asarray(pred_sd, float)
    y = inverse_boxcox(np.asarray(obs_values, float), lam)
    lo = -1.0 / lam if lam > 0 else -np.inf
    hi = -1.0 / lam if lam < 0 else np.inf

    def q(tau):
        t = np.clip(mu + sd * ndtri(tau), np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))
        return inverse_boxcox(t, lam)

    med = q(np.array([[0.5]]))[0]
    crps = crps_quantile(q, y)
    return mae(med, y), mse(med, y), float(np.mean(crps)), len(y)


# --- validation ------------------------------------------------------------


@dataclass
class Prediction:
    model: str
    setting: str
    station_id: str
    year: int
    field: str
    observed: float
    mean: float
    sd: float


@dataclass
class ValidationResult:
    table: ScoreTable
    predictions: list[Prediction]
    fits: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def predictions_csv(self) -> str:
        out = io.StringIO()
        out.write("model,setting,station_id,year,field,observed,mean,sd\n")
        for p in self.predictions:
            out.write(
                f"{p.model},{p.setting},{p.station_id},{p.year},{p.field},"
                f"{p.observed:.10g},{p.mean:.10g},{p.sd:.10g}\n"
            )
        return out.getvalue()


def year_filter_label(exclude_years: Iterable[int]) -> str:
    ex = sorted(int(y) for y in exclude_years)
    return "all" if not ex else "excl_" + "_".join(map(str, ex))


def run_validation(
    obs: ObservationTable,
    mesh: Mesh,
    years: Sequence[int] | None = None,
    models: Sequence = (ModelKind.UM, ModelKind.BM_TH, ModelKind.BM_HT),
    settings: Sequence[str] = SETTINGS,
    seed: int = 0,
    exclude_years: Iterable[int] = (),
    n_test: int = 20,
    theta0: Mapping | None = None,
    spec_kwargs: Mapping | None = None,
    fit_kwargs: Mapping | None = None,
    backtransform_lambda: float | None = None,
    warm_start: bool = True,
) -> ValidationResult:
    """Refit every model on each setting's training data and score held-out values.

    ``exclude_years`` drops those years from the scores and the prediction
    rows; the split and the fits are unaffected. A failing fit marks its cells with NaN and ``n = 0``.
    With ``warm_start`` each model's fit starts from its mode in the previous
    setting (or ``theta0``).
    """
    years = tuple(obs.years() if years is None else years)
    exclude = {int(y) for y in exclude_years}
    yf = year_filter_label(exclude)
    theta0 = dict(theta0 or {})
    table = ScoreTable()
    preds: list[Prediction] = []
    fits, failures = {}, {}
    fem = None
    for setting in settings:
        split = make_split(obs, setting, seed, n_test)
        train, test = split.apply(obs)
        for kind in map(ModelKind.parse, models):
            spec = ModelSpec(kind, years, **dict(spec_kwargs or {}))
            label = kind.value
            try:
                problem = Problem(train, mesh, spec, fem)
                fem = problem.fem
                start = theta0.get(kind, theta0.get(label))
                fit = optimize(problem, start, **dict(fit_kwargs or {}))
                mu, sd = predict(fit, test)
                if warm_start:
                    theta0[kind] = fit.theta_hat
            except Exception as exc:  # a failed cell must not stop the run
                log.warning("validation cell %s/%s failed: %s", label, setting, exc)
                failures[(label, setting)] = repr(exc)
                for f in split.held_fields:
                    table.rows.append(ScoreRow(label, setting, f, yf, math.nan, math.nan, math.nan, 0))
                continue
            fits[(label, setting)] = fit
            keep = ~np.isin(test.year, list(exclude))
            for f in split.held_fields:
                sel = keep & (test.field == f)
                if backtransform_lambda is not None and f == "H":
                    s = score_backtransformed(mu[sel], sd[sel], test.value[sel], backtransform_lambda)
                else:
                    s = score(mu[sel], sd[sel], test.value[sel])
                table.rows.append(ScoreRow(label, setting, f, yf, *s))
            for i in np.flatnonzero(keep):
                preds.append(
                    Prediction(label, setting, str(test.station_id[i]), int(test.year[i]),
                               str(test.field[i]), float(test.value[i]), float(mu[i]), float(sd[i]))
                )
    return ValidationResult(table, preds, fits, failures)

