"""Command-line interface: fit, predict, validate, reconstruct, simulate.

Exit codes: 0 success, 2 schema or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as bio
from .evaluation import SETTINGS, run_validation
from .inference import (
    FitResult,
    InitializationError,
    correlation_ranges,
    fit_at,
    optimize,
    predict,
    predict_latent,
)
from .mesh import GeometryError, Mesh, OutOfDomainError, build_mesh, mesh_from_text, mesh_to_text
from .model import ModelKind, ModelSpec, ObservationTable, ParameterDomainError, Problem, SchemaError
from .preprocess import TransformDomainError
from .simulate import SimulationConfig, covariate_table, simulate

log = logging.getLogger("bispde")

EXIT_OK, EXIT_SCHEMA, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    pass


def _lambda_arg(value: str):
    if value.lower() == "auto":
        return "auto"
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError("--lambda takes a number or 'auto'") from None


def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="flat key = value config file")
    if data:
        p.add_argument("--stations", help="station CSV")
        p.add_argument("--obs", help="observation CSV")
        p.add_argument("--lambda", dest="lam", type=_lambda_arg,
                       help="Box-Cox lambda for humidity, or 'auto'")
        p.add_argument("--max-edge", type=float, help="largest mesh edge (km)")
        p.add_argument("--extension", type=float, help="mesh extension beyond the stations (km)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bispde", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="posterior mode of the hyperparameters")
    _add_common(p)
    p.add_argument("--model", help="um, bmth or bmht")
    p.add_argument("--max-iter", type=int)

    p = sub.add_parser("predict", help="predictive mean and sd at target locations")
    p.add_argument("--fit", required=True, help="directory written by 'fit'")
    p.add_argument("--targets", required=True,
                   help="CSV with x_km,y_km,year,field,elevation_m,dist_ocean_m")
    p.add_argument("--out", help="output CSV (default: stdout)")

    p = sub.add_parser("validate", help="hold-out validation of several models")
    _add_common(p)
    p.add_argument("--model", help="comma list of models")
    p.add_argument("--setting", help="comma list of settings among h, t, ht")
    p.add_argument("--exclude-years", help="comma list of years dropped from scoring")

    p = sub.add_parser("reconstruct", help="posterior mean and sd rasters")
    p.add_argument("--fit", required=True)
    p.add_argument("--grid", help="x0,y0,nx,ny[,cell_km]; defaults to the elevation raster grid")
    p.add_argument("--elevation", required=True, help="ESRI-ASCII elevation raster (m)")
    p.add_argument("--distance", required=True, help="ESRI-ASCII distance-to-ocean raster (m)")
    p.add_argument("--years", help="comma list (default: all fitted years)")
    p.add_argument("--diff", help="second fit directory; also write mean differences")
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="synthetic station data in the ingestion schema")
    _add_common(p, data=False)
    p.add_argument("--model", default="bmth")
    p.add_argument("--theta", help="comma list of hyperparameters")
    p.add_argument("--years", default="2005,2006,2007,2008,2009")
    p.add_argument("--n-t", type=int, default=120)
    p.add_argument("--n-h", type=int, default=60)
    p.add_argument("--domain", type=float, default=300.0)
    p.add_argument("--max-edge", type=float, default=24.0)
    p.add_argument("--extension", type=float, default=40.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.66)
    p.add_argument("--grid", help="also write truth and covariate rasters on this grid")
    p.add_argument("--noise-free", action="store_true")
    return ap


def _config(args) -> bio.RunConfig:
    cfg = bio.RunConfig.read(args.config) if getattr(args, "config", None) else bio.RunConfig()
    over = {}
    for name in ("stations", "seed", "out", "max_edge", "extension"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if getattr(args, "obs", None):
        over["observations"] = args.obs
    if getattr(args, "lam", None) is not None:
        over["lam"] = str(args.lam)
    if getattr(args, "max_iter", None) is not None:
        over["max_iter"] = args.max_iter
    return cfg.update(**over)


def _dataset(cfg: bio.RunConfig) -> bio.Dataset:
    if not cfg.stations or not cfg.observations:
        raise UsageError("station and observation files are required (--stations, --obs)")
    lam = "auto" if cfg.lam == "auto" else float(cfg.lam)
    return bio.load_dataset(cfg.stations, cfg.observations, lam)


def _mesh(ds: bio.Dataset, cfg: bio.RunConfig) -> Mesh:
    return build_mesh(ds.locations(), cfg.max_edge, cfg.extension)


def _years(cfg: bio.RunConfig, ds: bio.Dataset) -> tuple[int, ...]:
    return cfg.years or ds.years


def _outdir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def fit_report(fit: FitResult, lam) -> dict:
    spec = fit.spec
    items: dict = {
        "model": spec.kind.value,
        "years": spec.years,
        "lambda": "none" if lam is None else float(lam),
        "log_posterior": float(fit.log_post_at_mode),
        "converged": fit.converged,
        "message": fit.message.replace("\n", " "),
    }
    for n, v, s in zip(fit.param_names, fit.theta_hat, fit.std_devs):
        items[f"theta.{n}"] = float(v)
        items[f"sd.{n}"] = float(s)
    for n, v, s in zip(spec.beta_names(), fit.beta_hat, fit.beta_sd):
        items[f"beta.{n}"] = float(v)
        items[f"beta_sd.{n}"] = float(s)
    items.update({k: float(v) for k, v in correlation_ranges(fit).items()})
    return items


def cmd_fit(args) -> int:
    cfg = _config(args)
    if args.model:
        cfg = cfg.update(model=args.model)
    ds = _dataset(cfg)
    mesh = _mesh(ds, cfg)
    spec = ModelSpec(ModelKind.parse(cfg.model), _years(cfg, ds), **cfg.spec_kwargs())
    fit = optimize(Problem(ds.obs, mesh, spec), max_iter=cfg.max_iter, gtol=cfg.gtol)
    if not fit.converged:
        log.warning("optimiser did not converge: %s", fit.message)
    out = _outdir(cfg.out)
    (out / "fit.txt").write_text(bio.format_kv(fit_report(fit, ds.lam)))
    (out / "trace.txt").write_text(fit.trace_text())
    (out / "mesh.txt").write_text(mesh_to_text(mesh))
    bio.write_manifest(out / "manifest.txt", "fit", cfg, ds.manifest)
    print(f"fit written to {out}")
    return EXIT_OK


def load_fit(fit_dir) -> tuple[FitResult, bio.Dataset]:
    """Rebuild a fitted model from a 'fit' output directory."""
    d = Path(fit_dir)
    man = bio.parse_kv((d / "manifest.txt").read_text())
    rep = bio.parse_kv((d / "fit.txt").read_text())
    cfg = bio.RunConfig.from_mapping(
        {k.split(".", 1)[1]: v for k, v in man.items() if k.startswith("config.")}
    )
    lam = rep["lambda"]
    ds = bio.load_dataset(cfg.stations, cfg.observations, "auto" if lam == "none" else float(lam))
    mesh = mesh_from_text((d / "mesh.txt").read_text())
    kind = ModelKind.parse(rep["model"])
    years = tuple(int(y) for y in rep["years"].split(","))
    spec = ModelSpec(kind, years, **cfg.spec_kwargs())
    theta = np.array([float(rep[f"theta.{n}"]) for n in kind.param_names])
    return fit_at(Problem(ds.obs, mesh, spec), theta), ds


def _read_targets(path) -> ObservationTable:
    rows = list(bio.iter_rows(path, ("x_km", "y_km", "year", "field", "elevation_m", "dist_ocean_m")))
    recs = []
    for ln, r in rows:
        where = f"{path}:{ln}"
        f = r["field"].strip().upper()
        if f not in ("T", "H"):
            raise SchemaError(f"{where}: field must be T or H")
        recs.append((
            r.get("station_id") or f"t{ln}", int(r["year"]), f, 0.0,
            *(bio.parse_float(r[c], c, where) for c in ("x_km", "y_km", "elevation_m", "dist_ocean_m")),
        ))
    return ObservationTable(*zip(*recs)) if recs else ObservationTable.empty()


def cmd_predict(args) -> int:
    fit, _ = load_fit(args.fit)
    targets = _read_targets(args.targets)
    mu, sd = predict(fit, targets)
    lines = ["station_id,year,field,mean,sd"]
    for i in range(len(targets)):
        lines.append(f"{targets.station_id[i]},{targets.year[i]},{targets.field[i]},{float(mu[i])!r},{float(sd[i])!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _config(args)
    if args.model:
        cfg = cfg.update(models=tuple(m.strip() for m in args.model.split(",")))
    if args.setting:
        cfg = cfg.update(settings=tuple(s.strip() for s in args.setting.split(",")))
    if args.exclude_years is not None:
        cfg = cfg.update(exclude_years=bio.parse_int_list(args.exclude_years))
    settings = tuple(s.upper() for s in cfg.settings)
    bad = [s for s in settings if s not in SETTINGS]
    if bad:
        raise UsageError(f"unknown settings {bad}")
    ds = _dataset(cfg)
    mesh = _mesh(ds, cfg)
    res = run_validation(
        ds.obs, mesh, _years(cfg, ds),
        models=[ModelKind.parse(m) for m in cfg.models],
        settings=settings,
        seed=cfg.seed,
        exclude_years=cfg.exclude_years,
        n_test=cfg.n_test,
        spec_kwargs=cfg.spec_kwargs(),
        fit_kwargs={"max_iter": cfg.max_iter, "gtol": cfg.gtol},
        backtransform_lambda=ds.lam if cfg.score_raw_humidity else None,
    )
    out = _outdir(cfg.out)
    (out / "scores.csv").write_text(res.table.to_csv())
    (out / "predictions.csv").write_text(res.predictions_csv())
    bio.write_manifest(out / "manifest.txt", "validate", cfg,
                       {**ds.manifest, "failed_cells": len(res.failures)})
    sys.stdout.write(res.table.to_csv())
    return EXIT_NUMERIC if res.failures and not res.fits else EXIT_OK


def reconstruct_rasters(fit: FitResult, grid: bio.GridSpec, elevation, distance, year, field_):
    """Posterior mean and sd of the noise-free linear predictor on a grid.

    Cells outside the mesh or with missing covariates are NaN.
    """
    pts = grid.centres()
    elev, dist = np.asarray(elevation, float).ravel(), np.asarray(distance, float).ravel()
    ok = fit.problem.mesh.contains(pts) & np.isfinite(elev) & np.isfinite(dist)
    mean = np.full(len(pts), np.nan)
    sd = np.full(len(pts), np.nan)
    if ok.any():
        p = pts[ok]
        n = len(p)
        tab = ObservationTable([f"g{i}" for i in range(n)], [year] * n, [field_] * n, np.zeros(n),
                               p[:, 0], p[:, 1], elev[ok], dist[ok])
        m, s = predict_latent(fit, tab)
        mean[ok], sd[ok] = m, s
    return mean.reshape(grid.ny, grid.nx), sd.reshape(grid.ny, grid.nx), int(np.sum(~ok))


def cmd_reconstruct(args) -> int:
    fit, ds = load_fit(args.fit)
    elev, g_e = bio.read_ascii_grid(args.elevation)
    dist, g_d = bio.read_ascii_grid(args.distance)
    grid = bio.GridSpec.parse(args.grid) if args.grid else g_e
    if g_e != grid or g_d != grid:
        raise SchemaError("covariate rasters must match the requested grid")
    years = bio.parse_int_list(args.years) if args.years else fit.spec.years
    other = load_fit(args.diff)[0] if args.diff else None
    out = _outdir(args.out)
    masked = 0
    for yr in years:
        for f in ("T", "H"):
            mean, sd, nm = reconstruct_rasters(fit, grid, elev, dist, yr, f)
            masked = max(masked, nm)
            bio.write_ascii_grid(out / f"mean_{f}_{yr}.asc", mean, grid)
            bio.write_ascii_grid(out / f"sd_{f}_{yr}.asc", sd, grid)
            if other is not None:
                m2, _, _ = reconstruct_rasters(other, grid, elev, dist, yr, f)
                bio.write_ascii_grid(out / f"diff_{f}_{yr}.asc", mean - m2, grid)
    print(f"rasters written to {out}; {masked} cells masked")
    return EXIT_OK


def cmd_simulate(args) -> int:
    years = bio.parse_int_list(args.years)
    kind = ModelKind.parse(args.model)
    theta = tuple(float(v) for v in args.theta.split(",")) if args.theta else None
    scfg = SimulationConfig(
        kind=kind, theta=theta, years=years, n_T=args.n_t, n_H=args.n_h, domain_km=args.domain,
        max_edge=args.max_edge, extension=args.extension, noise_free=args.noise_free,
        lam=args.lam, seed=args.seed or 0,
    )
    sim = simulate(scfg)
    out = _outdir(args.out or "sim")
    bio.write_stations(out / "stations.csv", sim.stations)
    bio.write_observations(out / "observations.csv", sim.raw)
    (out / "mesh.txt").write_text(mesh_to_text(sim.mesh))
    truth = {f"theta.{n}": float(v) for n, v in zip(kind.param_names, sim.theta)}
    truth.update({f"beta.{n}": float(v) for n, v in zip(sim.spec.beta_names(), sim.beta)})
    (out / "truth.txt").write_text(bio.format_kv(truth))
    if args.grid:
        grid = bio.GridSpec.parse(args.grid)
        c = grid.centres()
        tab = covariate_table(c, years[0], "T")
        bio.write_ascii_grid(out / "elevation.asc", tab.elevation_m, grid)
        bio.write_ascii_grid(out / "distance.asc", tab.dist_ocean_m, grid)
        for yr in years:
            for f in ("T", "H"):
                bio.write_ascii_grid(out / f"truth_{f}_{yr}.asc", sim.truth(grid, yr, f), grid)
    cfg = bio.RunConfig(seed=scfg.seed, lam=repr(scfg.lam), max_edge=scfg.max_edge,
                        extension=scfg.extension, model=kind.value, years=years, out=str(out))
    bio.write_manifest(out / "manifest.txt", "simulate", cfg,
                       {"n_T": scfg.n_T, "n_H": scfg.n_H, "noise_free": scfg.noise_free})
    print(f"simulation written to {out}")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "validate": cmd_validate,
    "reconstruct": cmd_reconstruct,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (SchemaError, TransformDomainError, OutOfDomainError, GeometryError, UsageError,
            ParameterDomainError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (np.linalg.LinAlgError, InitializationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
