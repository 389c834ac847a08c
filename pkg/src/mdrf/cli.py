"""Command-line entry point: simulate -> train -> evaluate -> export-grid.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numeric failure.  ``MDRF_THREADS`` caps the torch thread count.
"""

from __future__ import annotations

import json
import math
import os
import platform
import sys
import time
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__, baseline, oracle, physics
from .autodiff import NumericError
from .config import ConfigError, RunConfig, json_schema, load_config
from .ensemble import FusedPredictor, train_ensemble
from .files import FormatError, TimeAxis, read_observations, to_geo, write_observations, write_rows
from .geometry import Domain2D, Domain3D, Normalizer, OutOfDomainError, domain_from_dict
from .network import density_from_state, load_snapshot, save_snapshot
from .report import Region, compare
from .sampling import collocation
from .training import Predictor, Problem2D, TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def configure_threads() -> int:
    raw = os.environ.get("MDRF_THREADS")
    if raw is None:
        n = os.cpu_count() or 1
    else:
        try:
            n = int(raw)
        except ValueError:
            raise CliError(f"MDRF_THREADS must be a positive integer, got {raw!r}", EXIT_USAGE) from None
        if n < 1:
            raise CliError(f"MDRF_THREADS must be a positive integer, got {raw!r}", EXIT_USAGE)
    torch.set_num_threads(n)
    return n


def _parse_mask(values) -> tuple[oracle.RoundedRect, ...]:
    rects = []
    for v in values:
        try:
            parts = [float(s) for s in v.split(",")]
        except ValueError:
            raise click.BadParameter(f"expected cx,cz,half_x,half_z[,radius], got {v!r}", param_hint="--mask") from None
        if len(parts) not in (4, 5):
            raise click.BadParameter(f"expected cx,cz,half_x,half_z[,radius], got {v!r}", param_hint="--mask")
        try:
            rects.append(oracle.RoundedRect(*parts))
        except ValueError as exc:
            raise click.BadParameter(str(exc), param_hint="--mask") from None
    return tuple(rects)


def _writable(path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {path.parent}: {exc}", EXIT_IO) from None


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="mdrf")
def cli():
    """Reconstruct physical fields from sparse observations."""


@cli.command("simulate")
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Observation CSV to write.")
@click.option("--n", "n", required=True, type=int, help="Number of sample points.")
@click.option("--seed", required=True, type=int)
@click.option("--noise-sd", default=0.0, show_default=True, type=float, help="Gaussian noise standard deviation.")
@click.option("--mask", multiple=True, help="Rounded rectangle cx,cz,half_x,half_z[,radius]; repeatable (2d).")
@click.option("--mode", type=click.Choice(["2d", "3d"]), default="2d", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Take domain and time axis from a run config.")
@click.option("--with-pressure", is_flag=True, help="Also emit pressure records.")
def cmd_simulate(out, n, seed, noise_sd, mask, mode, config_path, with_pressure):
    """Sample synthetic observations from the analytic fixtures."""
    configure_threads()
    if n < 1:
        raise click.BadParameter("must be >= 1", param_hint="--n")
    if noise_sd < 0:
        raise click.BadParameter("must be >= 0", param_hint="--noise-sd")
    cfg = load_config(config_path) if config_path else None
    if cfg is not None and cfg.mode != mode:
        raise CliError(f"--mode {mode} does not match config mode {cfg.mode}", EXIT_USAGE)
    rects = _parse_mask(mask)
    if mode == "2d":
        domain = cfg.build_domain() if cfg else Domain2D()
        if cfg and not rects:
            rects = cfg.build_region().rects
        variables = ("tau", "v", "w", "p") if with_pressure else oracle.DEFAULT_OBSERVED
        params = cfg.build_constants().taylor_green() if cfg else oracle.TaylorGreenParams()
        obs = oracle.generate_observations(n, seed, variables, noise_sd, oracle.DataRegion(domain, rects), params)
        r_e, ta = 0.0, None
    else:
        if rects:
            raise click.BadParameter("masks apply to 2d mode only", param_hint="--mask")
        domain = cfg.build_domain() if cfg else Domain3D()
        variables = ("tau", "sal", "v_theta", "v_phi") + (("p",) if with_pressure else ())
        obs = oracle.generate_sphere_observations(domain, n, seed, variables, noise_sd)
        r_e = domain.r_e
        ta = TimeAxis(cfg.data.time_epoch, cfg.data.time_unit_seconds) if cfg else TimeAxis()
    _writable(out)
    try:
        write_observations(out, obs, mode, r_e, ta)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}", EXIT_IO) from None
    click.echo(f"wrote {len(obs)} records to {out}")


def _manifest(cfg: RunConfig, threads: int, wall: float, extra: dict) -> dict:
    return {
        "config_sha256": cfg.digest(),
        "seeds": {"sampling": cfg.sampling.seed, "training": cfg.training.seed},
        "threads": threads,
        "wall_time_s": wall,
        "versions": {"mdrf": __version__, "torch": torch.__version__, "numpy": np.__version__, "python": platform.python_version()},
        **extra,
    }


@cli.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--data", "data_path", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path))
def cmd_train(config_path, data_path, out_dir):
    """Fit a model and write snapshot, trace CSV and run manifest."""
    threads = configure_threads()
    cfg = _read_config(config_path)
    domain = cfg.build_domain()
    constants = cfg.build_constants()
    ta = TimeAxis(cfg.data.time_epoch, cfg.data.time_unit_seconds)
    obs = _read_obs(data_path, cfg.mode, getattr(domain, "r_e", 0.0), ta)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out_dir}: {exc}", EXIT_IO) from None
    net, tcfg = cfg.build_network(), cfg.build_train()
    t0 = time.perf_counter()
    extra = {"config": json.loads(cfg.canonical_json())}
    try:
        if cfg.mode == "2d":
            colloc = collocation(domain, cfg.sampling.n_interior, cfg.sampling.n_per_piece, cfg.sampling.seed, cfg.sampling.mode)
            region = cfg.build_region()
            prob = Problem2D(domain, constants, colloc, obs, data_measure=region.measure())
            params, trace = train(net, prob, tcfg)
            save_snapshot(out_dir / "snapshot.json", params, prob.normalizer, "2d", extra)
            (out_dir / "trace.csv").write_text(trace.to_csv(), encoding="utf-8", newline="")
            files = ["snapshot.json", "trace.csv"]
        else:
            fp = train_ensemble(
                net, domain, constants, obs, tcfg, cfg.build_ensemble(),
                n_interior=cfg.sampling.n_interior, n_per_piece=cfg.sampling.n_per_piece,
                sample_seed=cfg.sampling.seed, pole_margin=cfg.ensemble.pole_margin,
            )
            data = fp.to_dict()
            data["extra"] = extra
            (out_dir / "snapshot.json").write_text(json.dumps(data) + "\n", encoding="utf-8")
            files = ["snapshot.json"]
            for k, sl in enumerate(fp.learners):
                (out_dir / f"trace_{k}.csv").write_text(sl.trace.to_csv(), encoding="utf-8", newline="")
                files.append(f"trace_{k}.csv")
    except TrainingDiverged as exc:
        (out_dir / "trace.csv").write_text(exc.trace.to_csv(), encoding="utf-8", newline="")
        raise CliError(f"{exc} (trace kept in {out_dir / 'trace.csv'})", EXIT_NUMERIC) from None
    except NumericError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    except OSError as exc:
        raise CliError(f"cannot write outputs: {exc}", EXIT_IO) from None
    except Exception as exc:
        cause = getattr(exc, "cause", None)
        if isinstance(cause, TrainingDiverged):
            (out_dir / "trace.csv").write_text(cause.trace.to_csv(), encoding="utf-8", newline="")
        if isinstance(cause, NumericError):
            raise CliError(str(exc), EXIT_NUMERIC) from None
        raise
    wall = time.perf_counter() - t0
    manifest = _manifest(cfg, threads, wall, {"files": files, "data": str(data_path)})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    click.echo(f"trained in {wall:.1f}s; outputs in {out_dir}")


def _read_config(path: Path) -> RunConfig:
    try:
        return load_config(path)
    except FileNotFoundError:
        raise CliError(f"config not found: {path}", EXIT_IO) from None
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from None
    except ConfigError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_USAGE) from None


def _read_obs(path: Path, mode: str, r_e: float, ta: TimeAxis):
    try:
        return read_observations(path, mode, r_e, ta)
    except FileNotFoundError:
        raise CliError(f"data not found: {path}", EXIT_IO) from None
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
    except FormatError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None


class _Loaded:
    """A snapshot on disk turned into a predictor plus its run context."""

    def __init__(self, path: Path):
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CliError(f"snapshot not found: {path}", EXIT_IO) from None
        except (OSError, UnicodeDecodeError) as exc:
            raise CliError(f"cannot read snapshot {path}: {exc}", EXIT_IO) from None
        except json.JSONDecodeError as exc:
            raise CliError(f"snapshot {path} is not JSON: {exc}", EXIT_USAGE) from None
        try:
            self.config = RunConfig.model_validate(data.get("extra", {})["config"])
        except Exception:
            raise CliError(f"snapshot {path} lacks a valid embedded config", EXIT_USAGE) from None
        self.mode = self.config.mode
        self.domain = self.config.build_domain()
        try:
            if data.get("format") == "mdrf-ensemble":
                self.predictor = FusedPredictor.from_dict(data)
            else:
                from .network import params_from_snapshot

                params, nz, mode = params_from_snapshot(data)
                if mode != self.mode:
                    raise ValueError(f"snapshot mode {mode} != config mode {self.mode}")
                self.predictor = Predictor(params, nz, mode)
        except Exception as exc:
            raise CliError(f"snapshot/spec mismatch: {exc}", EXIT_USAGE) from None


@cli.command("evaluate")
@click.option("--snapshot", "snap_path", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--truth", required=True, help="'oracle' or a labelled observation CSV.")
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--region", type=click.Choice(["whole", "data", "custom"]), default="whole", show_default=True)
@click.option("--custom-mask", multiple=True, help="Rounded rectangle for --region custom (2d).")
@click.option("--n-points", default=100_000, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def cmd_evaluate(snap_path, truth, report_path, region, custom_mask, n_points, seed):
    """Compare a snapshot against ground truth and write a report."""
    configure_threads()
    ld = _Loaded(snap_path)
    cfg = ld.config
    if n_points < 2:
        raise click.BadParameter("must be >= 2", param_hint="--n-points")
    regions = []
    if region == "data":
        if cfg.mode != "2d" or not cfg.data.mask:
            raise CliError("--region data needs a 2d config with data.mask", EXIT_USAGE)
        dr = cfg.build_region()
        regions.append(Region("data", dr.contains, "union of the configured data rectangles"))
    elif region == "custom":
        rects = _parse_mask(custom_mask)
        if not rects or cfg.mode != "2d":
            raise CliError("--region custom needs at least one --custom-mask in 2d mode", EXIT_USAGE)
        dr = oracle.DataRegion(ld.domain, rects)
        regions.append(Region("custom", dr.contains, "user rectangles " + "; ".join(custom_mask)))
    variables = ("tau", "v", "w", "p") if cfg.mode == "2d" else ("tau", "sal", "w", "v_theta", "v_phi", "p")
    model = {"model": ld.predictor}
    try:
        if truth == "oracle":
            if cfg.mode == "2d":
                tg = cfg.build_constants().taylor_green()
                truth_fn = lambda p: oracle.exact(p, tg)
            else:
                truth_fn = lambda p: oracle.sphere_fields(p, ld.domain.r_e)
            rep = compare(model, truth_fn, ld.domain, variables, regions, n_points=n_points, seed=seed)
            rep.write(report_path)
        else:
            ta = TimeAxis(cfg.data.time_epoch, cfg.data.time_unit_seconds)
            obs = _read_obs(Path(truth), cfg.mode, getattr(ld.domain, "r_e", 0.0), ta)
            _labelled_report(ld, obs, regions, report_path)
    except OutOfDomainError as exc:
        raise CliError(f"truth points outside the trained domain: {exc}", EXIT_USAGE) from None
    except OSError as exc:
        raise CliError(f"cannot write report: {exc}", EXIT_IO) from None
    click.echo(f"report written to {report_path}")


def _labelled_report(ld: _Loaded, obs, regions, report_path: Path) -> None:
    rows = []
    all_regions = [("whole", lambda p: np.ones(len(p), dtype=bool))] + [(r.name, r.contains) for r in regions]
    for var in obs.variables:
        pts, val = obs.select(var)
        pred = ld.predictor(pts)
        for name, fn in all_regions:
            m = np.asarray(fn(pts), dtype=bool)
            if var not in pred or not m.any():
                rows.append({"model": "model", "region": name, "var": var, "rmse": None, "n": int(m.sum())})
                continue
            err = pred[var][m] - val[m]
            rows.append({"model": "model", "region": name, "var": var, "rmse": float(np.sqrt(np.mean(err**2))), "n": int(m.sum())})
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps({"header": {"truth": "labelled set"}, "region_rmse": rows}, indent=1) + "\n", encoding="utf-8")
    write_rows(
        report_path.with_name(f"{report_path.stem}_region_rmse.csv"),
        ("model", "region", "var", "rmse", "n"),
        ([r["model"], r["region"], r["var"], "" if r["rmse"] is None else repr(r["rmse"]), r["n"]] for r in rows),
    )


def _parse_shape(text: str, n: int, name: str) -> list[int]:
    try:
        parts = [int(s) for s in text.lower().split("x")]
    except ValueError:
        raise click.BadParameter(f"expected {n} or {n + 1} counts joined by 'x'", param_hint=name) from None
    if len(parts) not in (n, n + 1) or min(parts) < 1:
        raise click.BadParameter(f"expected {n} or {n + 1} positive counts joined by 'x'", param_hint=name)
    return parts


def _parse_bounds(text: str | None, coords) -> dict[str, tuple[float, float]]:
    out = {}
    if not text:
        return out
    for item in text.split(","):
        try:
            name, rng = item.split("=")
            lo, hi = (float(s) for s in rng.split(":"))
        except ValueError:
            raise click.BadParameter(f"expected name=lo:hi items, got {item!r}", param_hint="--bounds") from None
        if name not in coords:
            raise click.BadParameter(f"unknown coordinate {name!r}", param_hint="--bounds")
        out[name] = (lo, hi)
    return out


@cli.command("export-grid")
@click.option("--snapshot", "snap_path", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--out", "out", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--grid", help="2d grid NXxNZ[xNT].")
@click.option("--grid-3d", "grid3d", help="3d grid NRxNTHETAxNPHI.")
@click.option("--time", "time_", help="ISO-8601 time of a 3d grid (or model time t in 2d with NXxNZ).")
@click.option("--bounds", help="Override ranges, e.g. x=0:1,z=0:1 or r=..:..,theta=..:..")
@click.option("--allow-extrapolation", is_flag=True, help="Permit grids outside the trained domain.")
def cmd_export_grid(snap_path, out, grid, grid3d, time_, bounds, allow_extrapolation):
    """Evaluate a snapshot on a regular grid and write a CSV."""
    configure_threads()
    ld = _Loaded(snap_path)
    cfg, dom = ld.config, ld.domain
    coords = dom.coords
    rng = {c: (dom.range_of(c).lo, dom.range_of(c).hi) for c in coords}
    rng.update(_parse_bounds(bounds, coords))
    if cfg.mode == "2d":
        if not grid or grid3d:
            raise click.BadParameter("2d snapshots take --grid NXxNZ[xNT]", param_hint="--grid")
        shape = _parse_shape(grid, 2, "--grid")
        if len(shape) == 3:
            ts = np.linspace(*rng["t"], shape[2])
        else:
            ts = np.array([float(time_)]) if time_ else np.array([rng["t"][0]])
        axes = [np.linspace(*rng["x"], shape[0]), np.linspace(*rng["z"], shape[1]), ts]
    else:
        if not grid3d or grid:
            raise click.BadParameter("3d snapshots take --grid-3d NRxNTHETAxNPHI", param_hint="--grid-3d")
        shape = _parse_shape(grid3d, 3, "--grid-3d")[:3]
        if not time_:
            raise click.BadParameter("3d export needs --time", param_hint="--time")
        ta = TimeAxis(cfg.data.time_epoch, cfg.data.time_unit_seconds)
        try:
            t = ta.to_t(time_)
        except FormatError as exc:
            raise click.BadParameter(str(exc), param_hint="--time") from None
        phi_hi = rng["phi"][1]
        periodic = getattr(dom, "phi_periodic", False) and "phi" not in _parse_bounds(bounds, coords)
        phis = np.linspace(rng["phi"][0], phi_hi, shape[2], endpoint=not periodic)
        axes = [np.linspace(*rng["r"], shape[0]), np.linspace(*rng["theta"], shape[1]), phis, np.array([t])]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(coords))
    inside = dom.contains(pts)
    if not inside.all() and not allow_extrapolation:
        raise CliError(
            f"{int((~inside).sum())} grid points lie outside the trained domain; pass --allow-extrapolation to proceed",
            EXIT_USAGE,
        )
    try:
        pred = ld.predictor(pts, check=not allow_extrapolation)
    except OutOfDomainError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    if cfg.mode == "2d":
        header = ("x", "z", "t", "tau", "v", "w", "p")
        cols = [pts[:, 0], pts[:, 1], pts[:, 2]] + [pred[f] for f in ("tau", "v", "w", "p")]
    else:
        c = cfg.build_constants()
        # density with the configured (or learned, for single learners) expansion coefficients
        beta = _betas(ld, c)
        rho = density_from_state(pred["tau"], pred["sal"], beta[0], beta[1], c.rho0, c.tau0, c.sigma0)
        depth, lat, lon = to_geo(pts, dom.r_e)
        header = ("depth_m", "lat_deg", "lon_deg", "time_iso8601", "tau", "sal", "w", "v_theta", "v_phi", "p", "rho")
        ta = TimeAxis(cfg.data.time_epoch, cfg.data.time_unit_seconds)
        stamp = ta.to_iso(pts[0, 3])
        cols = [depth, lat, lon, [stamp] * len(pts)] + [pred[f] for f in ("tau", "sal", "w", "v_theta", "v_phi", "p")] + [np.asarray(rho)]
    for k, col in enumerate(cols):
        if not isinstance(col, list) and not np.all(np.isfinite(col)):
            raise CliError(f"non-finite values in column {header[k]}", EXIT_NUMERIC)
    rows = ([v if isinstance(v, str) else repr(float(v)) for v in row] for row in zip(*cols))
    _writable(out)
    try:
        write_rows(out, header, rows)
    except OSError as exc:
        raise CliError(f"cannot write {out}: {exc}", EXIT_IO) from None
    click.echo(f"wrote {len(pts)} grid rows to {out}")


def _betas(ld: _Loaded, c) -> tuple[float, float]:
    pred = ld.predictor
    learners = getattr(pred, "learners", None)
    if learners:
        vals = [sl.params.pde_values() for sl in learners]
        bt = np.mean([v.get("beta_tau", c.beta_tau) for v in vals])
        bs = np.mean([v.get("beta_sigma", c.beta_sigma) for v in vals])
        return float(bt), float(bs)
    return c.beta_tau, c.beta_sigma


@cli.command("schema")
def cmd_schema():
    """Print the JSON schema of run configurations."""
    click.echo(json.dumps(json_schema(), indent=1))


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="mdrf", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except CliError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.code
    except ConfigError as exc:
        click.echo(f"error: invalid config: {exc}", err=True)
        return EXIT_USAGE
    except FormatError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        click.echo(f"error: numeric failure: {exc}", err=True)
        return EXIT_NUMERIC
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
