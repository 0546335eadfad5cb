"""Synthetic station data drawn from the hierarchical model.

Covariates are smooth closed-form surfaces so that rasters of them can be
produced for any grid: elevation is a sinusoidal relief and the ocean is the
line ``x = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import conditional, sample_latent
from .io import GridSpec, RawObservation, Station
from .mesh import Mesh, build_mesh, projector
from .model import FIELDS, ModelKind, ModelSpec, ObservationTable, Problem, build_design
from .preprocess import inverse_boxcox

DEFAULT_YEARS = (2005, 2006, 2007, 2008, 2009)

# Ranges near 100 km on a 300 km domain; unit-sd temperature, humidity
# sd near 0.035 on the Box-Cox scale and zero-lag correlation near 0.6.
DEFAULT_THETA = {
    ModelKind.BM_TH: (10.0, 0.028, -8.0, 0.028, 300.0, 0.035),
    ModelKind.BM_HT: (300.0, 0.035, -280.0, 0.028, 10.0, 0.028),
    ModelKind.UM: (10.0, 0.028, 230.0, 0.035),
}


def elevation_m(x_km, y_km):
    x, y = np.asarray(x_km, float), np.asarray(y_km, float)
    return 800.0 + 600.0 * np.sin(x / 70.0) * np.cos(y / 90.0)


def dist_ocean_m(x_km, y_km):
    x, _ = np.broadcast_arrays(np.asarray(x_km, float), np.asarray(y_km, float))
    return 1000.0 * np.maximum(x, 0.0)


def default_beta(years) -> np.ndarray:
    J = len(years)
    bt = [10.0 + 0.5 * j for j in range(J)] + [-13.0, 0.8]
    bh = [-1.30 + 0.01 * j for j in range(J)] + [-0.02, -0.01]
    return np.array(bt + bh)


@dataclass(frozen=True)
class SimulationConfig:
    kind: ModelKind = ModelKind.BM_TH
    theta: tuple[float, ...] | None = None
    years: tuple[int, ...] = DEFAULT_YEARS
    n_T: int = 120
    n_H: int = 60
    domain_km: float = 300.0
    max_edge: float = 24.0
    extension: float = 40.0
    missing_rate: float = 0.05
    sigma_T: float = 0.1
    sigma_H: float = 0.01
    noise_free: bool = False
    lam: float = 0.66
    seed: int = 0
    beta: tuple[float, ...] | None = None

    def resolved_theta(self) -> np.ndarray:
        kind = ModelKind.parse(self.kind)
        return np.asarray(self.theta if self.theta is not None else DEFAULT_THETA[kind], float)

    def spec(self) -> ModelSpec:
        return ModelSpec(self.kind, self.years, sigma_T=self.sigma_T, sigma_H=self.sigma_H)


@dataclass(eq=False)
class Simulation:
    config: SimulationConfig
    stations: list[Station]
    raw: list[RawObservation]
    obs: ObservationTable  # humidity on the Box-Cox scale
    mesh: Mesh
    theta: np.ndarray
    beta: np.ndarray
    x: np.ndarray  # (J, 2, n_nodes), fields in (T, H) order
    extra: dict = field(default_factory=dict)

    @property
    def spec(self) -> ModelSpec:
        return self.config.spec()

    def truth(self, grid: GridSpec, year: int, field_: str) -> np.ndarray:
        """Noise-free linear predictor on the grid (NaN outside the mesh)."""
        pts = grid.centres()
        inside = self.mesh.contains(pts)
        out = np.full(len(pts), np.nan)
        if inside.any():
            p = pts[inside]
            A = projector(self.mesh, p)
            j = self.config.years.index(int(year))
            tab = covariate_table(p, year, field_)
            X = build_design(tab, self.spec)
            out[inside] = A @ self.x[j, FIELDS.index(field_)] + X @ self.beta
        return out.reshape(grid.ny, grid.nx)


def covariate_table(points, year: int, field_: str) -> ObservationTable:
    p = np.asarray(points, float)
    n = len(p)
    return ObservationTable(
        [f"g{i}" for i in range(n)], [int(year)] * n, [field_] * n, np.zeros(n),
        p[:, 0], p[:, 1], elevation_m(p[:, 0], p[:, 1]), dist_ocean_m(p[:, 0], p[:, 1]),
    )


def simulate(cfg: SimulationConfig) -> Simulation:
    kind = ModelKind.parse(cfg.kind)
    cfg = SimulationConfig(**{**cfg.__dict__, "kind": kind})
    if cfg.n_H > cfg.n_T:
        raise ValueError("humidity stations are a subset of temperature stations")
    rng = np.random.default_rng(cfg.seed)
    L = cfg.domain_km
    loc = rng.uniform(0.05 * L, 0.95 * L, size=(cfg.n_T, 2))
    width = len(str(cfg.n_T - 1))
    stations = [
        Station(f"S{i:0{width}d}", float(a), float(b), float(elevation_m(a, b)), float(dist_ocean_m(a, b)))
        for i, (a, b) in enumerate(loc)
    ]
    mesh = build_mesh(loc, cfg.max_edge, cfg.extension)
    spec = cfg.spec()
    theta = cfg.resolved_theta()
    beta = np.asarray(cfg.beta, float) if cfg.beta is not None else default_beta(cfg.years)
    if beta.shape != (spec.n_beta,):
        raise ValueError(f"beta must have {spec.n_beta} entries")

    prior = Problem(ObservationTable.empty(), mesh, spec)
    cond = conditional(prior.system(theta))
    z = sample_latent(cond, 1, rng.integers(2**63))[0]
    x = z[: prior.n_x].reshape(spec.n_years, 2, mesh.n_vertices)

    records = []
    for j, yr in enumerate(cfg.years):
        for f, n_f in (("T", cfg.n_T), ("H", cfg.n_H)):
            present = rng.uniform(size=n_f) >= cfg.missing_rate
            for i in np.flatnonzero(present):
                records.append((i, yr, f))
    idx = np.array([r[0] for r in records])
    tab = ObservationTable(
        [stations[i].station_id for i in idx],
        [r[1] for r in records],
        [r[2] for r in records],
        np.zeros(len(records)),
        loc[idx, 0], loc[idx, 1],
        [stations[i].elevation_m for i in idx],
        [stations[i].dist_ocean_m for i in idx],
    )
    C = prior.observation_operator(tab)
    eta = C @ np.concatenate([x.ravel(), beta])
    sig = np.where(tab.field == "T", cfg.sigma_T, cfg.sigma_H)
    noise = rng.standard_normal(len(eta))
    y = eta if cfg.noise_free else eta + sig * noise
    table = ObservationTable(
        tab.station_id, tab.year, tab.field, y, tab.x, tab.y, tab.elevation_m, tab.dist_ocean_m
    )
    is_h = table.field == "H"
    raw_vals = y.copy()
    raw_vals[is_h] = inverse_boxcox(y[is_h], cfg.lam)
    raw = [
        RawObservation(str(s), int(yr), str(f), float(v))
        for s, yr, f, v in zip(table.station_id, table.year, table.field, raw_vals)
    ]
    return Simulation(cfg, stations, raw, table, mesh, theta, beta, x, {"eta": eta})
