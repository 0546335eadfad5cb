"""Data ingestion, flat key-value configs, run manifests and ASCII rasters.

Station file columns: ``station_id,x_km,y_km,elevation_m,dist_ocean_m``.
Observation file columns: ``station_id,year,field,value`` with raw values
(degrees Celsius for T, kg/kg mixing ratio for H).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .model import FIELDS, ObservationTable, SchemaError
from .preprocess import boxcox, estimate_lambda

STATION_COLUMNS = ("station_id", "x_km", "y_km", "elevation_m", "dist_ocean_m")
OBS_COLUMNS = ("station_id", "year", "field", "value")


@dataclass(frozen=True)
class Station:
    station_id: str
    x_km: float
    y_km: float
    elevation_m: float
    dist_ocean_m: float


@dataclass(frozen=True)
class RawObservation:
    station_id: str
    year: int
    field: str
    value: float


def iter_rows(path, columns: Sequence[str]):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        # Line 1 is the header, so data rows start at 2.
        for lineno, row in enumerate(reader, start=2):
            yield lineno, row


def parse_float(value: str, what: str, where: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: {what} is not a number: {value!r}") from None
    if not math.isfinite(v):
        raise SchemaError(f"{where}: {what} is not finite")
    return v


def read_stations(path) -> dict[str, Station]:
    out: dict[str, Station] = {}
    for ln, row in iter_rows(path, STATION_COLUMNS):
        where = f"{path}:{ln}"
        sid = row["station_id"].strip()
        if not sid:
            raise SchemaError(f"{where}: empty station_id")
        if sid in out:
            raise SchemaError(f"{where}: duplicate station_id {sid!r}")
        out[sid] = Station(sid, *(parse_float(row[c], c, where) for c in STATION_COLUMNS[1:]))
    return out


def read_observations(path) -> list[RawObservation]:
    out, seen = [], set()
    for ln, row in iter_rows(path, OBS_COLUMNS):
        where = f"{path}:{ln}"
        sid = row["station_id"].strip()
        try:
            year = int(row["year"])
        except ValueError:
            raise SchemaError(f"{where}: year is not an integer: {row['year']!r}") from None
        f = row["field"].strip().upper()
        if f not in FIELDS:
            raise SchemaError(f"{where}: field must be T or H, got {row['field']!r}")
        value = parse_float(row["value"], "value", where)
        if f == "H" and value <= 0:
            raise SchemaError(f"{where}: humidity must be positive, got {value}")
        key = (sid, year, f)
        if key in seen:
            raise SchemaError(f"{where}: duplicate observation {key}")
        seen.add(key)
        out.append(RawObservation(sid, year, f, value))
    return out


def write_stations(path, stations: Sequence[Station]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(STATION_COLUMNS) + "\n")
        for s in stations:
            fh.write(f"{s.station_id},{float(s.x_km)!r},{float(s.y_km)!r},{float(s.elevation_m)!r},{float(s.dist_ocean_m)!r}\n")


def write_observations(path, obs: Sequence[RawObservation]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(OBS_COLUMNS) + "\n")
        for o in obs:
            fh.write(f"{o.station_id},{o.year},{o.field},{float(o.value)!r}\n")


@dataclass
class Dataset:
    obs: ObservationTable  # humidity on the transformed scale
    stations: dict[str, Station]
    lam: float | None
    lam_estimated: bool
    manifest: dict = field(default_factory=dict)

    @property
    def years(self) -> tuple[int, ...]:
        return self.obs.years()

    def locations(self) -> np.ndarray:
        return np.array([[s.x_km, s.y_km] for s in self.stations.values()], dtype=float)


def join(stations: Mapping[str, Station], raw: Sequence[RawObservation], lam="auto") -> Dataset:
    """Attach station covariates and Box-Cox transform humidity.

    ``lam`` is a number to fix the transform or ``"auto"`` to estimate it
    from all humidity values pooled over years.
    """
    for i, o in enumerate(raw):
        if o.station_id not in stations:
            raise SchemaError(f"observation row {i + 2}: unknown station_id {o.station_id!r}")
    h = np.array([o.value for o in raw if o.field == "H"])
    estimated = False
    if h.size == 0:
        lam_v = None if lam == "auto" else float(lam)
    elif lam == "auto":
        lam_v, estimated = estimate_lambda(h), True
    else:
        lam_v = float(lam)
    vals = np.array([o.value for o in raw], dtype=float)
    is_h = np.array([o.field == "H" for o in raw], dtype=bool)
    if is_h.any():
        vals[is_h] = boxcox(vals[is_h], lam_v)
    st = [stations[o.station_id] for o in raw]
    table = ObservationTable(
        [o.station_id for o in raw],
        [o.year for o in raw],
        [o.field for o in raw],
        vals,
        [s.x_km for s in st],
        [s.y_km for s in st],
        [s.elevation_m for s in st],
        [s.dist_ocean_m for s in st],
    )
    manifest = {"lambda": "none" if lam_v is None else repr(lam_v), "lambda_estimated": estimated}
    return Dataset(table, dict(stations), lam_v, estimated, manifest)


def load_dataset(stations_path, obs_path, lam="auto") -> Dataset:
    return join(read_stations(stations_path), read_observations(obs_path), lam)


# --- config and manifest ---------------------------------------------------


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"config line {n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in out:
            raise SchemaError(f"config line {n}: duplicate key {k!r}")
        out[k] = v
    return out


def format_kv(items: Mapping[str, object]) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in items.items())


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_int_list(s: str) -> tuple[int, ...]:
    s = s.strip()
    return tuple(int(x) for x in s.split(",") if x.strip()) if s and s.lower() != "none" else ()


def parse_str_list(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


@dataclass
class RunConfig:
    """Every tunable of a run. Field names double as config-file keys."""

    stations: str = ""
    observations: str = ""
    out: str = "out"
    model: str = "bmth"
    models: tuple[str, ...] = ("um", "bmth", "bmht")
    settings: tuple[str, ...] = ("h", "t", "ht")
    seed: int = 0
    exclude_years: tuple[int, ...] = ()
    years: tuple[int, ...] = ()
    lam: str = "auto"
    max_edge: float = 25.0
    extension: float = 50.0
    grid: str = ""
    sigma_T: float = 0.1
    sigma_H: float = 0.01
    beta_prior_variance: float = 100.0
    theta_prior_variance: float = 100.0
    elevation_divisor: float = 2e3
    distance_divisor: float = 2.5e5
    max_iter: int = 200
    gtol: float = 1e-5
    n_test: int = 20
    score_raw_humidity: bool = False

    @classmethod
    def from_mapping(cls, items: Mapping[str, str]) -> "RunConfig":
        kw = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for k, v in items.items():
            key = "lam" if k == "lambda" else k.replace("-", "_")
            if key not in fields:
                raise SchemaError(f"unknown config key {k!r}")
            kw[key] = _convert(fields[key].type, v, k)
        return cls(**kw)

    @classmethod
    def read(cls, path) -> "RunConfig":
        return cls.from_mapping(parse_kv(Path(path).read_text()))

    def update(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def spec_kwargs(self) -> dict:
        return {
            k: getattr(self, k)
            for k in ("sigma_T", "sigma_H", "beta_prior_variance", "theta_prior_variance",
                      "elevation_divisor", "distance_divisor")
        }

    def digest(self) -> str:
        return hashlib.sha256(format_kv(self.as_dict()).encode()).hexdigest()[:16]


def _convert(type_name, value: str, key: str):
    t = str(type_name)
    try:
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
        if t == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if t == "tuple[int, ...]":
            return parse_int_list(value)
        if t == "tuple[str, ...]":
            return parse_str_list(value)
    except ValueError:
        raise SchemaError(f"config key {key!r}: cannot parse {value!r} as {t}") from None
    return value


def versions() -> dict[str, str]:
    import scipy

    from . import __version__

    out = {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
           "bispde": __version__}
    try:
        import sksparse

        out["scikit-sparse"] = getattr(sksparse, "__version__", "present")
    except ImportError:
        out["scikit-sparse"] = "absent"
    return out


def write_manifest(path, command: str, config: RunConfig, extra: Mapping[str, object] = ()) -> None:
    items = {"command": command, "config_hash": config.digest()}
    items.update({f"config.{k}": v for k, v in config.as_dict().items()})
    items.update(dict(extra))
    items.update({f"version.{k}": v for k, v in versions().items()})
    Path(path).write_text(format_kv(items))


# --- rasters ---------------------------------------------------------------

NODATA = -9999.0


@dataclass(frozen=True)
class GridSpec:
    """Cell-centred regular grid; ``(x0, y0)`` is the lower-left corner."""

    x0: float
    y0: float
    nx: int
    ny: int
    cell_km: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("nx and ny must be at least 1")
        if not self.cell_km > 0:
            raise ValueError("cell_km must be positive")

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """``x0,y0,nx,ny[,cell_km]``."""
        parts = [p.strip() for p in text.split(",")]
        if len(parts) not in (4, 5):
            raise SchemaError(f"grid spec needs x0,y0,nx,ny[,cell_km], got {text!r}")
        try:
            x0, y0 = float(parts[0]), float(parts[1])
            nx, ny = int(parts[2]), int(parts[3])
            cell = float(parts[4]) if len(parts) == 5 else 1.0
            return cls(x0, y0, nx, ny, cell)
        except ValueError as exc:
            raise SchemaError(f"bad grid spec {text!r}: {exc}") from None

    def centres(self) -> np.ndarray:
        """(ny * nx, 2) centres, rows ordered north to south as in the raster."""
        xs = self.x0 + (np.arange(self.nx) + 0.5) * self.cell_km
        ys = self.y0 + (self.ny - np.arange(self.ny) - 0.5) * self.cell_km
        X, Y = np.meshgrid(xs, ys)
        return np.column_stack([X.ravel(), Y.ravel()])


def write_ascii_grid(path, values: np.ndarray, grid: GridSpec, nodata: float = NODATA) -> None:
    v = np.asarray(values, dtype=float).reshape(grid.ny, grid.nx)
    lines = [
        f"ncols {grid.nx}",
        f"nrows {grid.ny}",
        f"xllcorner {float(grid.x0)!r}",
        f"yllcorner {float(grid.y0)!r}",
        f"cellsize {float(grid.cell_km)!r}",
        f"NODATA_value {float(nodata)!r}",
    ]
    for row in v:
        lines.append(" ".join(repr(float(x)) if np.isfinite(x) else repr(float(nodata)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_ascii_grid(path) -> tuple[np.ndarray, GridSpec]:
    text = Path(path).read_text().split("\n")
    head = {}
    for line in text[:6]:
        k, v = line.split()
        head[k.lower()] = v
    try:
        grid = GridSpec(float(head["xllcorner"]), float(head["yllcorner"]), int(head["ncols"]),
                        int(head["nrows"]), float(head["cellsize"]))
        nodata = float(head.get("nodata_value", NODATA))
    except KeyError as exc:
        raise SchemaError(f"{path}: missing raster header {exc}") from None
    data = np.array([[float(x) for x in ln.split()] for ln in text[6:] if ln.strip()])
    if data.shape != (grid.ny, grid.nx):
        raise SchemaError(f"{path}: raster body is {data.shape}, header says {(grid.ny, grid.nx)}")
    data[data == nodata] = np.nan
    return data, grid
