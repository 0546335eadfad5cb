"""Hierarchical model for co-observed temperature (T) and humidity (H).

Data level: ``y ~ N(eta, sigma_k^2)`` with fixed measurement noise per field.
Process level: ``eta = X beta + x`` per year, where ``X`` holds year
indicators and standardised elevation / distance-to-ocean for each field,
and ``x`` is the spatial field of the year. Years are independent replicates
sharing one set of SPDE hyperparameters.

The latent vector is ``z = (x, beta)`` with ``x`` ordered year-major, then
field (T before H), then mesh node.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .cholesky import Symbolic
from .mesh import FemMatrices, Mesh, assemble_fem, projector
from .spde import (
    BiParams,
    PrecisionMatrix,
    UniParams,
    bi_blocks,
    block_layout,
    operator_basis,
    position_map,
)

FIELDS = ("T", "H")
LOG_2PI = float(np.log(2 * np.pi))


class SchemaError(ValueError):
    """Input records violate the dataset schema."""


class ParameterDomainError(ValueError):
    """A hyperparameter lies outside its admissible domain."""


class ModelKind(str, Enum):
    UM = "UM"
    BM_TH = "BM_TH"
    BM_HT = "BM_HT"

    @classmethod
    def parse(cls, value: "str | ModelKind") -> "ModelKind":
        if isinstance(value, ModelKind):
            return value
        key = str(value).upper().replace("-", "_")
        aliases = {"BMTH": "BM_TH", "BMHT": "BM_HT"}
        return cls(aliases.get(key, key))

    @property
    def order(self) -> tuple[str, str]:
        """Fields in SPDE order (first field is the pure Matern one)."""
        return ("H", "T") if self is ModelKind.BM_HT else ("T", "H")

    @property
    def param_names(self) -> tuple[str, ...]:
        if self is ModelKind.UM:
            return ("b_T", "kappa_T", "b_H", "kappa_H")
        return ("b11", "kappa11", "b21", "kappa21", "b22", "kappa22")

    @property
    def positive(self) -> np.ndarray:
        return np.array([name != "b21" for name in self.param_names])


class Observation(NamedTuple):
    station_id: str
    year: int
    field: str
    value: float
    x: float
    y: float
    elevation_m: float
    dist_ocean_m: float


@dataclass(frozen=True, eq=False)
class ObservationTable:
    """Column store of observations; humidity values already transformed."""

    station_id: np.ndarray
    year: np.ndarray
    field: np.ndarray
    value: np.ndarray
    x: np.ndarray
    y: np.ndarray
    elevation_m: np.ndarray
    dist_ocean_m: np.ndarray

    def __post_init__(self):
        cols = {
            "station_id": np.asarray(self.station_id, dtype=object),
            "year": np.asarray(self.year, dtype=np.int64),
            "field": np.asarray(self.field, dtype="<U1"),
            "value": np.asarray(self.value, dtype=float),
            "x": np.asarray(self.x, dtype=float),
            "y": np.asarray(self.y, dtype=float),
            "elevation_m": np.asarray(self.elevation_m, dtype=float),
            "dist_ocean_m": np.asarray(self.dist_ocean_m, dtype=float),
        }
        n = {v.shape for v in cols.values()}
        if len(n) != 1 or len(next(iter(n))) != 1:
            raise SchemaError("observation columns must be 1-d and equally long")
        bad = ~np.isin(cols["field"], FIELDS)
        if np.any(bad):
            raise SchemaError(f"unknown field at row {int(np.flatnonzero(bad)[0])}")
        for name in ("x", "y", "elevation_m", "dist_ocean_m"):
            if not np.all(np.isfinite(cols[name])):
                row = int(np.flatnonzero(~np.isfinite(cols[name]))[0])
                raise SchemaError(f"non-finite {name} at row {row}")
        for k, v in cols.items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    def __len__(self) -> int:
        return self.value.shape[0]

    @classmethod
    def from_records(cls, records: Iterable[Observation]) -> "ObservationTable":
        rows = list(records)
        if not rows:
            return cls.empty()
        cols = list(zip(*rows))
        return cls(*cols)

    @classmethod
    def empty(cls) -> "ObservationTable":
        return cls(*([[]] * 8))

    def records(self) -> list[Observation]:
        return [
            Observation(str(s), int(yr), str(f), float(v), float(a), float(b), float(e), float(d))
            for s, yr, f, v, a, b, e, d in zip(
                self.station_id, self.year, self.field, self.value,
                self.x, self.y, self.elevation_m, self.dist_ocean_m,
            )
        ]

    def subset(self, mask) -> "ObservationTable":
        mask = np.asarray(mask)
        return ObservationTable(
            self.station_id[mask], self.year[mask], self.field[mask], self.value[mask],
            self.x[mask], self.y[mask], self.elevation_m[mask], self.dist_ocean_m[mask],
        )

    def concat(self, other: "ObservationTable") -> "ObservationTable":
        return ObservationTable(
            *(np.concatenate([getattr(self, c), getattr(other, c)]) for c in _COLUMNS)
        )

    @property
    def locations(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def years(self) -> tuple[int, ...]:
        return tuple(sorted(set(int(v) for v in self.year)))


_COLUMNS = ("station_id", "year", "field", "value", "x", "y", "elevation_m", "dist_ocean_m")


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    years: tuple[int, ...]
    sigma_T: float = 0.1
    sigma_H: float = 0.01
    beta_prior_variance: float = 100.0
    theta_prior_variance: float = 100.0
    elevation_divisor: float = 2e3
    distance_divisor: float = 2.5e5

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        if len(set(self.years)) != len(self.years) or not self.years:
            raise ValueError("years must be a non-empty set")
        if not (self.sigma_T > 0 and self.sigma_H > 0):
            raise ValueError("noise standard deviations must be positive")

    def with_kind(self, kind) -> "ModelSpec":
        return replace(self, kind=ModelKind.parse(kind))

    @property
    def n_years(self) -> int:
        return len(self.years)

    @property
    def n_beta(self) -> int:
        return 2 * (self.n_years + 2)

    @property
    def param_names(self) -> tuple[str, ...]:
        return self.kind.param_names

    def sigma(self, field: str) -> float:
        return self.sigma_T if field == "T" else self.sigma_H

    def beta_names(self) -> list[str]:
        names = []
        for f in FIELDS:
            names += [f"year_{y}_{f}" for y in self.years]
            names += [f"elevation_{f}", f"distance_{f}"]
        return names

    def beta_offset(self, field: str) -> int:
        return FIELDS.index(field) * (self.n_years + 2)


def build_design(obs: ObservationTable, spec: ModelSpec) -> np.ndarray:
    """Design matrix with ``2 (J + 2)`` columns: per field J year indicators,
    standardised elevation and standardised distance to the ocean."""
    year_pos = {y: i for i, y in enumerate(spec.years)}
    X = np.zeros((len(obs), spec.n_beta))
    for row, (yr, f, elev, dist) in enumerate(
        zip(obs.year, obs.field, obs.elevation_m, obs.dist_ocean_m)
    ):
        if int(yr) not in year_pos:
            raise SchemaError(f"year {int(yr)} at row {row} is not in the model years")
        off = spec.beta_offset(str(f))
        X[row, off + year_pos[int(yr)]] = 1.0
        X[row, off + spec.n_years] = elev / spec.elevation_divisor
        X[row, off + spec.n_years + 1] = dist / spec.distance_divisor
    return X


def check_theta(theta, spec: ModelSpec) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (len(spec.param_names),):
        raise ParameterDomainError(
            f"{spec.kind.value} expects {len(spec.param_names)} parameters, got {theta.shape}"
        )
    pos = spec.kind.positive
    if not np.all(np.isfinite(theta)) or np.any(theta[pos] <= 0):
        bad = [n for n, v, p in zip(spec.param_names, theta, pos) if not np.isfinite(v) or (p and v <= 0)]
        raise ParameterDomainError(f"parameters out of domain: {', '.join(bad)}")
    return theta


def log_prior_theta(theta, spec: ModelSpec, free: Sequence[bool] | None = None) -> float:
    """Independent N(0, var) on log of positive parameters and on ``b21``.

    ``free`` masks out parameters held fixed, which carry no prior.
    """
    theta = check_theta(theta, spec)
    pos = spec.kind.positive
    u = np.where(pos, np.log(np.where(pos, theta, 1.0)), theta)
    var = spec.theta_prior_variance
    terms = -0.5 * (np.log(2 * np.pi * var) + u**2 / var)
    if free is not None:
        terms = terms[np.asarray(free, dtype=bool)]
    return float(np.sum(terms))


def spatial_precision(fem: FemMatrices, spec: ModelSpec, theta) -> PrecisionMatrix:
    """Precision of one year's (T, H) field pair, T block first."""
    theta = check_theta(theta, spec)
    basis = operator_basis(fem)
    if spec.kind is ModelKind.UM:
        UniParams(theta[0], theta[1]), UniParams(theta[2], theta[3])  # validation
        qt = basis.product(theta[0], theta[1], theta[0], theta[1])
        qh = basis.product(theta[2], theta[3], theta[2], theta[3])
        Q = block_layout(basis, False).assemble(qt, None, qh)
        return PrecisionMatrix(Q, 2, fem.n, FIELDS)
    q11, q12, q22 = bi_blocks(fem, BiParams(*theta))
    layout = block_layout(basis, True)
    if spec.kind is ModelKind.BM_TH:
        Q = layout.assemble(q11, q12, q22)
    else:
        # SPDE order is (H, T); the coupling block is symmetric so only the
        # diagonal blocks trade places.
        Q = layout.assemble(q22, q12, q11)
    return PrecisionMatrix(Q, 2, fem.n, FIELDS)


@dataclass(frozen=True, eq=False)
class LatentSystem:
    """Everything needed to condition ``z = (x, beta)`` on ``y`` at one theta."""

    Q_prior: sp.csc_matrix
    C_obs: sp.csr_matrix
    q_eps: np.ndarray
    y: np.ndarray
    beta_layout: tuple[str, ...]
    n_x: int
    spatial: PrecisionMatrix

    @property
    def dim(self) -> int:
        return self.Q_prior.shape[0]

    @property
    def n_beta(self) -> int:
        return len(self.beta_layout)


class Problem:
    """Observations bound to a mesh and model specification.

    Holds every theta-independent piece (observation operator, noise
    precision, data) so that repeated evaluations only rebuild the spatial
    precision.
    """

    def __init__(
        self,
        obs: ObservationTable,
        mesh: Mesh,
        spec: ModelSpec,
        fem: FemMatrices | None = None,
    ):
        self.obs = obs
        self.mesh = mesh
        self.spec = spec
        self.fem = fem if fem is not None else assemble_fem(mesh)
        self.n_nodes = mesh.n_vertices
        self.n_x = spec.n_years * 2 * self.n_nodes
        self.dim = self.n_x + spec.n_beta
        self.C_obs = self.observation_operator(obs)
        self.y = np.asarray(obs.value, dtype=float)
        if not np.all(np.isfinite(self.y)):
            raise SchemaError("observation values must be finite")
        self.q_eps = np.array([1.0 / spec.sigma(str(f)) ** 2 for f in obs.field])
        self.CtQC = (self.C_obs.T @ sp.diags(self.q_eps) @ self.C_obs).tocsc()
        self.CtQC.sum_duplicates()
        self.CtQC.sort_indices()
        self.CtQy = self.C_obs.T @ (self.q_eps * self.y)
        self.yQy = float(self.y @ (self.q_eps * self.y))
        self.Q_beta = sp.identity(spec.n_beta, format="csc") / spec.beta_prior_variance
        self._symbolic: dict = {}
        self._maps = None

    def latent_index(self, year: int, field: str, node=0):
        j = self.spec.years.index(int(year))
        return (j * 2 + FIELDS.index(field)) * self.n_nodes + node

    def observation_operator(self, obs: ObservationTable) -> sp.csr_matrix:
        """Rows ``(A, X)`` mapping ``z`` to the linear predictor of ``obs``."""
        if len(obs) == 0:
            return sp.csr_matrix((0, self.dim))
        A = projector(self.mesh, obs.locations).tocoo()
        offsets = np.array(
            [self.latent_index(yr, str(f)) for yr, f in zip(obs.year, obs.field)], dtype=np.int64
        )
        A = sp.csr_matrix(
            (A.data, (A.row, A.col + offsets[A.row])), shape=(len(obs), self.n_x)
        )
        X = sp.csr_matrix(build_design(obs, self.spec))
        return sp.hstack([A, X], format="csr")

    def spatial(self, theta) -> PrecisionMatrix:
        return spatial_precision(self.fem, self.spec, theta)

    def _assembly(self):
        """Fixed patterns of Q_prior and Q_c and the maps between them."""
        if self._maps is None:
            layout = block_layout(operator_basis(self.fem), self.spec.kind is not ModelKind.UM)
            s1 = sp.csc_matrix(
                (np.ones(layout.indices.size), layout.indices, layout.indptr),
                shape=(layout.n, layout.n),
            )
            prior = sp.block_diag(
                [s1] * self.spec.n_years + [sp.identity(self.spec.n_beta, format="csc")],
                format="csc",
            )
            prior.sort_indices()
            ctqc = sp.csc_matrix(
                (np.ones(self.CtQC.nnz), self.CtQC.indices, self.CtQC.indptr), shape=self.CtQC.shape
            )
            pat = (prior + ctqc).tocsc()
            pat.sort_indices()
            self._maps = (prior, pat, position_map(pat, prior), position_map(pat, self.CtQC))
        return self._maps

    def _prior_data(self, spatial: PrecisionMatrix) -> np.ndarray:
        beta = np.full(self.spec.n_beta, 1.0 / self.spec.beta_prior_variance)
        return np.concatenate([np.tile(spatial.Q.data, self.spec.n_years), beta])

    def prior_precision(self, theta, spatial: PrecisionMatrix | None = None) -> sp.csc_matrix:
        prior = self._assembly()[0]
        spatial = spatial if spatial is not None else self.spatial(theta)
        return sp.csc_matrix((self._prior_data(spatial), prior.indices, prior.indptr), shape=prior.shape)

    def posterior_precision(self, theta, spatial: PrecisionMatrix | None = None) -> sp.csc_matrix:
        """``Q_c = Q_prior + C' Q_eps C`` on its fixed pattern."""
        _, pat, pos_prior, pos_ct = self._assembly()
        spatial = spatial if spatial is not None else self.spatial(theta)
        data = np.zeros(pat.nnz)
        data[pos_prior] = self._prior_data(spatial)
        data[pos_ct] += self.CtQC.data
        return sp.csc_matrix((data, pat.indices, pat.indptr), shape=pat.shape)

    def system(self, theta) -> LatentSystem:
        sp_prec = self.spatial(theta)
        return LatentSystem(
            Q_prior=self.prior_precision(theta, sp_prec),
            C_obs=self.C_obs,
            q_eps=self.q_eps,
            y=self.y,
            beta_layout=tuple(self.spec.beta_names()),
            n_x=self.n_x,
            spatial=sp_prec,
        )

    def symbolic(self, Q):
        """Cached symbolic analysis keyed by sparsity pattern."""
        Q = sp.csc_matrix(Q)
        key = (Q.shape, Q.nnz, hash(Q.indptr.tobytes()), hash(Q.indices.tobytes()))
        sym = self._symbolic.get(key)
        if sym is None:
            sym = Symbolic(Q)
            self._symbolic[key] = sym
        return sym

    def with_obs(self, obs: ObservationTable) -> "Problem":
        return Problem(obs, self.mesh, self.spec, self.fem)

    def with_spec(self, spec: ModelSpec) -> "Problem":
        return Problem(self.obs, self.mesh, spec, self.fem)


def assemble_system(
    obs: ObservationTable, mesh: Mesh, fem: FemMatrices, spec: ModelSpec, theta
) -> LatentSystem:
    return Problem(obs, mesh, spec, fem).system(theta)
