"""Command-line front end.

Every command reads one JSON run configuration (``--config``), applies the
command-line overrides, validates the result, writes it to
``<out>/config.json`` and then computes.  Outputs depend only on that
resolved configuration, so reruns reproduce every byte (timing columns are
``nan`` unless ``--timing`` is given).

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .geometry import GridSpec, ImageGrid, ScanGeometry, Sinogram, default_geometry
from .io_persist import read_volume, write_json, write_volume
from .linop import compose, op_norm
from .pdhg import ConvergenceLog, DivergenceError, StepConfig, solve
from .phantom import (PhantomSpec, add_poisson_noise, analytic_sinogram, builtin_phantoms,
                      phantom_grid, rasterize)
from .problems import (DTVConfig, HighResConfig, build_dtv_2d, build_dtv_3d, data_discrepancy,
                       dtv_theta, fbp_first_iterate, gradient_descent_lsq, solve_lsq_tik,
                       two_stage_pipeline)
from .tomo_ops import blur_sinogram, make_gaussian_blur, make_hanning_sqrt_filter, make_projector

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_VEC = {"type": "array", "items": _NONNEG, "minItems": 2, "maxItems": 3}

SHAPE_SCHEMA = {
    "type": "object",
    "required": ["kind", "center", "semi_axes", "value"],
    "properties": {
        "kind": {"enum": ["ellipse", "half_ellipse", "rectangle", "ellipsoid", "box"]},
        "center": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 3},
        "semi_axes": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 3},
        "rotation": _NUM,
        "value": _NUM,
    },
    "additionalProperties": False,
}

RUN_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "phantom": {"oneOf": [
            {"type": "string"},
            {"type": "object", "required": ["shapes", "bounds"],
             "properties": {"name": {"type": "string"},
                            "shapes": {"type": "array", "items": SHAPE_SCHEMA},
                            "bounds": {"type": "array", "minItems": 2, "maxItems": 3,
                                       "items": {"type": "array", "items": _NUM,
                                                 "minItems": 2, "maxItems": 2}}},
             "additionalProperties": False}]},
        "data": {"type": "string"},
        "truth": {"type": "string"},
        "grid": {"type": "object", "required": ["dims"],
                 "properties": {"dims": {"type": "array", "items": {"type": "integer", "minimum": 2},
                                         "minItems": 2, "maxItems": 3},
                                "spacing": {"oneOf": [_POS, {"type": "array", "items": _POS}]},
                                "origin": {"type": "array", "items": _NUM}},
                 "additionalProperties": False},
        "geometry": {"type": "object",
                     "properties": {"n_views": {"type": "integer", "minimum": 1},
                                    "arc_half_angle": _NONNEG,
                                    "n_bins": {"type": "integer", "minimum": 2},
                                    "source_factor": _POS, "detector_factor": _POS,
                                    "source_radius": _POS, "detector_radius": _NONNEG,
                                    "bin_width": _POS, "n_rows": {"type": "integer", "minimum": 0},
                                    "row_height": _POS, "row_origin": _NUM, "angle_offset": _NUM},
                     "additionalProperties": False},
        "supersample": {"type": "integer", "minimum": 1},
        "data_model": {"enum": ["analytic", "discrete"]},
        "noise": {"oneOf": [{"type": "null"},
                            {"type": "object", "required": ["fluence"],
                             "properties": {"fluence": _POS}, "additionalProperties": False}]},
        "data_blur": {"oneOf": [{"type": "null"}, _NONNEG, _VEC]},
        "dtv": {"type": "object", "required": ["alphas", "epsilon"],
                "properties": {"alphas": {"type": "object",
                                          "propertyNames": {"enum": ["x", "y", "a", "b", "l1"]},
                                          "additionalProperties": _NONNEG},
                               "epsilon": _NONNEG,
                               "c": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                               "theta_a": {"type": ["number", "null"]},
                               "theta_b": {"type": ["number", "null"]},
                               "d": {"oneOf": [{"type": "null"}, _VEC]},
                               "ramp": {"type": "boolean"}},
                "additionalProperties": False},
        "steps": {"type": "object", "required": ["beta"],
                  "properties": {"beta": _POS, "gamma": {"type": "number", "minimum": 1},
                                 "rho": {"type": "number", "minimum": 1, "exclusiveMaximum": 2}},
                  "additionalProperties": False},
        "n_iter": {"type": "integer", "minimum": 1},
        "log_every": {"type": "integer", "minimum": 1},
        "data_target": {"type": ["number", "null"]},
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "method": {"enum": ["dtv", "lsq-tik", "gd-first-iterate", "two-stage"]},
        "lsq_tik": {"type": "object",
                    "properties": {"alpha": {"type": ["number", "null"], "exclusiveMinimum": 0},
                                   "target": {"type": ["number", "null"], "exclusiveMinimum": 0}},
                    "additionalProperties": False},
        "gd": {"type": "object",
               "properties": {"step": {"type": ["number", "null"], "exclusiveMinimum": 0},
                              "c": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
               "additionalProperties": False},
        "two_stage": {"type": "object", "required": ["factors", "d", "prior_d"],
                      "properties": {"factors": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                                     "d": _VEC, "prior_d": _VEC,
                                     "alpha_tik": _POS, "n_iter": {"type": "integer", "minimum": 1},
                                     "zero_init": {"type": "boolean"}},
                      "additionalProperties": False},
        "sweep": {"type": "object", "required": ["axis", "values"],
                  "properties": {"axis": {"enum": ["beta", "gamma", "rho"]},
                                 "values": {"type": "array", "items": _POS, "minItems": 1},
                                 "target": {"type": ["number", "null"]}},
                  "additionalProperties": False},
        "dtv_theta": {"type": "object",
                      "properties": {"volume": {"type": "string"}, "reference": {"type": "string"},
                                     "thetas": {"type": "array", "items": _NUM, "minItems": 1}},
                      "additionalProperties": False},
    },
    "additionalProperties": False,
}

DEFAULTS = {
    "supersample": 1,
    "data_model": "analytic",
    "noise": None,
    "data_blur": None,
    "n_iter": 1000,
    "log_every": 10,
    "data_target": None,
    "seed": 0,
    "out": "run",
    "method": "dtv",
}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


def validate_config(cfg: dict):
    """Schema check plus cross-field rules; raises :class:`ConfigError`
    naming the offending field path."""
    errors = sorted(jsonschema.Draft202012Validator(RUN_SCHEMA).iter_errors(cfg),
                    key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
                 for e in errors]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines))
    if "phantom" not in cfg and "data" not in cfg:
        raise ConfigError("phantom: give a phantom or a data path")
    if isinstance(cfg.get("phantom"), str) and cfg["phantom"] not in builtin_phantoms():
        raise ConfigError(f"phantom: unknown builtin {cfg['phantom']!r} "
                          f"(have {sorted(builtin_phantoms())})")
    if "dtv" in cfg:
        try:
            DTVConfig.from_dict(cfg["dtv"])
        except ValueError as err:
            raise ConfigError(f"dtv: {err}") from None


def resolve_config(cfg: dict, overrides: dict) -> dict:
    """Defaults, then the file, then command-line flags."""
    out = copy.deepcopy(DEFAULTS)
    out.update(copy.deepcopy(cfg))
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("beta", "gamma", "rho"):
            out.setdefault("steps", {"beta": 1.0})[key] = value
        else:
            out[key] = value
    validate_config(out)
    return out


def load_phantom(cfg: dict) -> PhantomSpec | None:
    ph = cfg.get("phantom")
    if ph is None:
        return None
    if isinstance(ph, str):
        return builtin_phantoms()[ph]
    return PhantomSpec.from_dict(ph)


def make_grid(cfg: dict, ph: PhantomSpec | None) -> GridSpec:
    if "grid" not in cfg:
        raise ConfigError("grid: missing")
    g = cfg["grid"]
    if "spacing" in g:
        return GridSpec(tuple(g["dims"]), g["spacing"] if np.isscalar(g["spacing"]) else tuple(g["spacing"]),
                        None if g.get("origin") is None else tuple(g["origin"]))
    if ph is None:
        raise ConfigError("grid/spacing: required when no phantom fixes the field of view")
    if len(g["dims"]) != ph.ndim:
        raise ConfigError("grid/dims: dimensionality differs from the phantom")
    return phantom_grid(ph, g["dims"])


def make_geometry(cfg: dict, grid: GridSpec) -> ScanGeometry:
    g = dict(cfg.get("geometry", {}))
    if "source_radius" in g:
        try:
            return ScanGeometry(**g)
        except TypeError as err:
            raise ConfigError(f"geometry: {err}") from None
    offset = g.pop("angle_offset", 0.0)
    geom = default_geometry(grid, **g)
    return geom if offset == 0 else ScanGeometry(**{**geom.to_dict(), "angle_offset": offset})


def simulate(cfg: dict):
    """``(grid, geometry, sinogram, truth)`` from the configuration.

    Data come from ``data`` when given.  Otherwise they are the phantom's
    exact line integrals (``data_model = "analytic"``) or the projector
    applied to the rasterized phantom (``"discrete"``, model-consistent
    data), optionally blurred along the detector and made noisy.
    """
    ph = load_phantom(cfg)
    grid = make_grid(cfg, ph)
    if "data" in cfg:
        sino = read_volume(cfg["data"])
        if not isinstance(sino, Sinogram):
            raise ConfigError("data: file does not hold a sinogram")
        geom = sino.geometry
    else:
        geom = make_geometry(cfg, grid)
        if cfg["data_model"] == "discrete":
            img = rasterize(ph, grid, cfg["supersample"])
            sino = Sinogram(geom, make_projector(grid, geom).apply(img.values))
        else:
            sino = analytic_sinogram(ph, geom)
        if cfg.get("data_blur"):
            sino = sino.with_values(blur_sinogram(sino.values, geom, cfg["data_blur"]))
        if cfg.get("noise"):
            sino = add_poisson_noise(sino, cfg["noise"]["fluence"], cfg["seed"])
    truth = None
    if "truth" in cfg:
        truth = read_volume(cfg["truth"])
    elif ph is not None:
        truth = rasterize(ph, grid, cfg["supersample"])
    if truth is not None and truth.grid.dims != grid.dims:
        raise ConfigError("truth: grid differs from the reconstruction grid")
    return grid, geom, sino, truth


# ---------------------------------------------------------------- commands


def _rmse(a, b) -> float:
    return float(np.sqrt(np.mean((np.asarray(a).ravel() - np.asarray(b).ravel()) ** 2)))


def _prepare_out(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg)
    return out


def cmd_phantom(cfg: dict, timing: bool = False) -> int:
    out = _prepare_out(cfg)
    ph = load_phantom(cfg)
    if ph is None:
        raise ConfigError("phantom: required by the phantom command")
    if not ph.shapes:
        warnings.warn("phantom has no shapes; writing all-zero volumes", stacklevel=2)
    grid, geom, sino, truth = simulate(cfg)
    write_volume(out / "phantom.vol", truth)
    write_volume(out / "sino.vol", sino)
    return EXIT_OK


def _dtv_config(cfg: dict) -> DTVConfig:
    if "dtv" not in cfg:
        raise ConfigError("dtv: required by this method")
    return DTVConfig.from_dict(cfg["dtv"])


def _step_config(cfg: dict) -> StepConfig:
    s = cfg.get("steps")
    if s is None:
        raise ConfigError("steps: required by this method")
    return StepConfig(s["beta"], s.get("gamma", 1.0), s.get("rho", 1.0))


def _run_dtv(cfg, grid, geom, sino, truth):
    dcfg = _dtv_config(cfg)
    build = build_dtv_3d if grid.ndim == 3 else build_dtv_2d
    problem = build(geom, grid, sino.values, dcfg)
    image_op = None
    if grid.ndim == 3 and dcfg.d is not None and max(dcfg.d) > 0:
        image_op = make_gaussian_blur(grid, dcfg.d)
    return solve(problem, _step_config(cfg), cfg["n_iter"], truth=truth,
                 log_every=cfg["log_every"], data_target=cfg.get("data_target"),
                 image_op=image_op)


def cmd_reconstruct(cfg: dict, timing: bool = False) -> int:
    out = _prepare_out(cfg)
    grid, geom, sino, truth = simulate(cfg)
    method = cfg["method"]
    metrics = {"method": method}
    g = sino.ravel()
    if method == "dtv":
        try:
            state, log = _run_dtv(cfg, grid, geom, sino, truth)
        except DivergenceError as err:
            if err.log is not None:
                err.log.to_csv(out / "log.csv", timing=timing)
            if err.state is not None:
                write_volume(out / "partial.vol", ImageGrid(grid, np.nan_to_num(err.state.x)))
            write_json(out / "metrics.json", {**metrics, "error": str(err)})
            raise
        log.to_csv(out / "log.csv", timing=timing)
        write_volume(out / "recon.vol", ImageGrid(grid, state.x))
        metrics.update(n_iter=log.iters[-1], data_rmse=log.data_rmse[-1])
        if truth is not None:
            metrics["image_rmse"] = log.image_rmse[-1]
        if timing:
            metrics["elapsed_seconds"] = log.elapsed[-1]
    elif method == "lsq-tik":
        lt = cfg.get("lsq_tik", {})
        if lt.get("alpha") is None and lt.get("target") is None:
            raise ConfigError("lsq_tik: give alpha or target")
        img, alpha, disc = solve_lsq_tik(geom, grid, g, lt.get("alpha"), lt.get("target"))
        write_volume(out / "recon.vol", img)
        metrics.update(alpha_tik=alpha, data_discrepancy=disc)
        if truth is not None:
            metrics["image_rmse"] = _rmse(img.values, truth.values)
    elif method == "gd-first-iterate":
        gd = cfg.get("gd", {})
        X = make_projector(grid, geom)
        R = make_hanning_sqrt_filter(geom, gd.get("c", cfg.get("dtv", {}).get("c", 0.5)))
        step = gd.get("step")
        if step is None:
            step = 1.0 / op_norm(compose(R, X)) ** 2
        f1 = gradient_descent_lsq(X, R, g, None, step, 1)
        direct = fbp_first_iterate(X, R, g, step)
        write_volume(out / "recon.vol", ImageGrid(grid, f1))
        scale = float(np.max(np.abs(direct))) or 1.0
        metrics.update(step=step, max_rel_diff_direct=float(np.max(np.abs(f1 - direct))) / scale)
        if truth is not None:
            metrics["image_rmse"] = _rmse(f1, truth.values)
    elif method == "two-stage":
        ts = cfg.get("two_stage")
        if ts is None:
            raise ConfigError("two_stage: required by this method")
        dcfg = _dtv_config(cfg)
        hr = HighResConfig(tuple(ts["d"]), tuple(ts["prior_d"]), ts.get("alpha_tik", 0.05),
                           ts.get("n_iter", 10), dcfg.c, dcfg.ramp)
        res = two_stage_pipeline(geom, g, grid, dcfg, ts["factors"], hr, _step_config(cfg),
                                 cfg["n_iter"], zero_init=ts.get("zero_init", False), truth=truth)
        write_volume(out / "low.vol", res.low)
        write_volume(out / "prior.vol", res.prior)
        write_volume(out / "high.vol", res.high)
        if res.log is not None:
            res.log.to_csv(out / "log.csv", timing=timing)
        ph = load_phantom(cfg)
        if ph is not None:
            hi_truth = rasterize(ph, res.high.grid, cfg["supersample"])
            metrics["image_rmse_high"] = _rmse(res.high.values, hi_truth.values)
    write_json(out / "metrics.json", metrics)
    return EXIT_OK


def _sweep_one(args):
    cfg, timing = args
    try:
        grid, geom, sino, truth = simulate(cfg)
        state, log = _run_dtv(cfg, grid, geom, sino, truth)
    except DivergenceError as err:
        return {"status": "diverged", "message": str(err), "log": err.log}
    except (ValueError, FloatingPointError) as err:
        return {"status": "failed", "message": str(err), "log": None}
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg)
    log.to_csv(out / "log.csv", timing=timing)
    write_volume(out / "recon.vol", ImageGrid(grid, state.x))
    return {"status": "ok", "message": "", "log": log}


def cmd_sweep(cfg: dict, timing: bool = False, threads: int = 1) -> int:
    out = _prepare_out(cfg)
    sw = cfg.get("sweep")
    if sw is None:
        raise ConfigError("sweep: required by the sweep command")
    _dtv_config(cfg)
    jobs = []
    for i, v in enumerate(sw["values"]):
        run = copy.deepcopy(cfg)
        run.pop("sweep")
        run["steps"][sw["axis"]] = v
        run["out"] = str(out / f"run{i:03d}_{sw['axis']}_{v:g}")
        run["method"] = "dtv"
        _step_config(run)
        jobs.append((run, timing))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    target = sw.get("target")
    rows = []
    for v, res in zip(sw["values"], results):
        log: ConvergenceLog | None = res["log"]
        final = log.data_rmse[-1] if log is not None and len(log) else math.nan
        hit = ""
        if target is not None and log is not None:
            hit = next((str(k) for k, d in zip(log.iters, log.data_rmse) if d <= target), "")
        rows.append((v, final, hit, res["status"]))
        if res["status"] != "ok":
            print(f"sweep {sw['axis']}={v:g}: {res['status']}: {res['message']}", file=sys.stderr)
    with open(out / "summary.csv", "w") as fh:
        fh.write(f"{sw['axis']},final_data_rmse,iters_to_target,status\n")
        for v, final, hit, status in rows:
            fh.write(f"{v:.17g},{final:.17g},{hit},{status}\n")
    return EXIT_OK


def cmd_dtv_theta(cfg: dict, timing: bool = False) -> int:
    out = _prepare_out(cfg)
    dt = cfg.get("dtv_theta", {})
    if "volume" not in dt:
        raise ConfigError("dtv_theta/volume: required")
    vol = read_volume(dt["volume"])
    ref = read_volume(dt["reference"]) if "reference" in dt else None
    for name, v in (("volume", vol), ("reference", ref)):
        if v is not None and (not isinstance(v, ImageGrid) or v.grid.ndim != 2):
            raise ConfigError(f"dtv_theta/{name}: DTV(theta) needs a 2-D image")
    thetas = dt.get("thetas", list(np.linspace(-90.0, 90.0, 37)))
    with open(out / "dtv_theta.csv", "w") as fh:
        fh.write("theta,dtv" + (",dtv_reference" if ref is not None else "") + "\n")
        for th in thetas:
            row = f"{th:.17g},{dtv_theta(vol, th):.17g}"
            if ref is not None:
                row += f",{dtv_theta(ref, th):.17g}"
            fh.write(row + "\n")
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="noise seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("--timing", action="store_true",
                        help="record wall-clock times (outputs are then not reproducible)")
    common.add_argument("--n-iter", dest="n_iter", type=int)
    common.add_argument("--beta", type=float)
    common.add_argument("--gamma", type=float)
    common.add_argument("--rho", type=float)

    p = argparse.ArgumentParser(prog="stackpdhg", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="rasterize a phantom and simulate data")
    r = sub.add_parser("reconstruct", parents=[common], help="run one reconstruction")
    r.add_argument("--method", choices=["dtv", "lsq-tik", "gd-first-iterate", "two-stage"])
    s = sub.add_parser("sweep", parents=[common], help="DTV solves over one step parameter")
    s.add_argument("--axis", choices=["beta", "gamma", "rho"])
    s.add_argument("--values", type=float, nargs="+")
    t = sub.add_parser("dtv-theta", parents=[common], help="DTV(theta) curve of a 2-D volume")
    t.add_argument("--volume")
    t.add_argument("--reference")
    t.add_argument("--thetas", type=float, nargs="+")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        overrides = {"seed": args.seed, "out": args.out, "n_iter": args.n_iter,
                     "beta": args.beta, "gamma": args.gamma, "rho": args.rho}
        if args.command == "reconstruct":
            overrides["method"] = args.method
        if args.command == "sweep" and (args.axis or args.values):
            sw = dict(raw.get("sweep", {}))
            if args.axis:
                sw["axis"] = args.axis
            if args.values:
                sw["values"] = args.values
            overrides["sweep"] = sw
        if args.command == "dtv-theta":
            dt = dict(raw.get("dtv_theta", {}))
            for key in ("volume", "reference", "thetas"):
                if getattr(args, key) is not None:
                    dt[key] = getattr(args, key)
            overrides["dtv_theta"] = dt
        cfg = resolve_config(raw, overrides)
        if args.command == "phantom":
            return cmd_phantom(cfg, args.timing)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, args.timing)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.timing, max(1, args.threads))
        return cmd_dtv_theta(cfg, args.timing)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError, RuntimeError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        # bad geometry, unreadable volumes and the like
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
