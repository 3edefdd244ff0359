"""Command-line driver: simulate, run the estimator, evaluate, ablate.

Settings are layered: command-line flag, then the scenario file's ``run``
section, then the built-in default.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .errors import MclivoError
from .evaluation import TrajectoryFile, ate_rmse, write_ply, write_tum
from .pipeline import RunConfig, RunResult, run_estimator, shared_simulation
from .sim import Simulation, read_scenario_data, scenario_from_dict

RUN_DEFAULTS = {"cams": None, "migration": True, "adaptive_cov": True, "vision": True,
                "lidar_weight_scale": 1.0, "epochs": None, "seed": None}


class ConfigError(MclivoError):
    pass


@dataclass
class Report:
    metrics: dict
    result: RunResult
    ate: float
    wall: float


def _as_bool(value, key):
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.lower() in ("on", "true", "yes", "1"):
        return True
    if isinstance(value, str) and value.lower() in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected on/off, got {value!r}")


def resolve(scenario_ref, overrides: dict | None = None):
    """Scenario plus run settings after applying file and flag layers."""
    data = dict(read_scenario_data(scenario_ref))
    run_sec = data.pop("run", None) or {}
    if not isinstance(run_sec, dict):
        raise ConfigError("run section must be a mapping")
    bad = set(run_sec) - set(RUN_DEFAULTS)
    if bad:
        raise ConfigError(f"unknown run keys: {sorted(bad)}")
    settings = dict(RUN_DEFAULTS)
    settings.update(run_sec)
    settings.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(settings) - set(RUN_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown settings: {sorted(unknown)}")
    sc = scenario_from_dict(data)
    if settings["seed"] is not None:
        sc = replace(sc, seed=int(settings["seed"]))
    for key in ("migration", "adaptive_cov", "vision"):
        settings[key] = _as_bool(settings[key], key)
    cams = settings["cams"]
    if cams is not None and not 0 <= int(cams) <= sc.rig.cameras:
        raise ConfigError(f"--cams {cams} outside 0..{sc.rig.cameras}")
    cfg = RunConfig(sc, n_cams=None if cams is None else int(cams),
                    migration=settings["migration"], adaptive_cov=settings["adaptive_cov"],
                    vision=settings["vision"],
                    lidar_weight_scale=float(settings["lidar_weight_scale"]),
                    max_epochs=None if settings["epochs"] is None else int(settings["epochs"]))
    return cfg


def evaluate_run(cfg: RunConfig, sim: Simulation, res: RunResult):
    ts, gp, gR = sim.gt_trajectory()
    m = len(res.times)
    est = TrajectoryFile.from_rotations(res.times, res.est_p, res.est_R)
    gt = TrajectoryFile.from_rotations(ts[:m], gp[:m], gR[:m])
    return est, gt, ate_rmse(est, gt)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "on" if v else "off"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def build_metrics(cfg: RunConfig, res: RunResult, ate: float, gt: TrajectoryFile) -> dict:
    sc = cfg.scenario
    ep = res.epochs
    n_cams = len(cfg.cam_ids)
    m = {
        "scenario": sc.name,
        "scenario_digest": sc.digest(),
        "seed": sc.seed,
        "cams": n_cams,
        "migration": cfg.migration,
        "adaptive_cov": cfg.adaptive_cov,
        "vision": cfg.vision,
        "lidar_weight_scale": cfg.lidar_weight_scale,
        "epochs": len(ep),
        "duration_s": float(res.times[-1] - res.times[0]),
        "trajectory_length_m": float(np.sum(np.linalg.norm(np.diff(gt.p, axis=0), axis=1))),
        "ate_rmse_m": ate,
        "migration_events": res.migration_events,
        "colored_points": res.colored_points,
        "map_points": len(res.color_xyz),
        "map_voxels": len(res.vmap.voxels),
        "visual_points_final": len(res.vmap.visual_points),
        "iterations_mean": float(np.mean([e.iterations for e in ep])) if ep else 0.0,
        "lidar_rows_mean": float(np.mean([e.lidar_rows for e in ep])) if ep else 0.0,
        "intra_rows_mean": float(np.mean([e.intra_rows for e in ep])) if ep else 0.0,
        "migration_rows_mean": float(np.mean([e.migration_rows for e in ep])) if ep else 0.0,
    }
    for c in cfg.cam_ids:
        vals = [e.alphas[c] for e in ep if c in e.alphas]
        m[f"alpha_mean_cam{c}"] = float(np.mean(vals)) if vals else 1.0
    for key in ("frames", "photo_setups", "photo_evals", "spawned", "colorize_calls",
                "colored_observations", "lidar_evals", "singular_updates"):
        m[f"count_{key}"] = int(res.counters.get(key, 0))
    return m


def run(cfg: RunConfig, out: Path | None = None, progress=None) -> Report:
    t0 = time.perf_counter()
    sim = shared_simulation(cfg.scenario)
    res = run_estimator(cfg, sim, progress)
    est, gt, ate = evaluate_run(cfg, sim, res)
    metrics = build_metrics(cfg, res, ate, gt)
    wall = time.perf_counter() - t0
    if out is not None:
        write_outputs(Path(out), est, gt, res, metrics, wall)
    return Report(metrics, res, ate, wall)


def write_outputs(out: Path, est, gt, res: RunResult, metrics: dict, wall: float) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "est.txt", est)
    write_tum(out / "gt.txt", gt)
    write_ply(out / "map.ply", res.color_xyz, res.color_rgb, res.color_voxel, res.color_nobs)
    with open(out / "metrics.txt", "w") as fh:
        for k, v in metrics.items():
            fh.write(f"{k}={_fmt(v)}\n")
    cams = sorted({c for e in res.epochs for c in e.alphas})
    with open(out / "epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "t", "iterations", "lidar_rows", "intra_rows", "migration_rows",
                    "migration_events", "visual_points"] + [f"alpha_cam{c}" for c in cams])
        for e in res.epochs:
            w.writerow([e.epoch, f"{e.t:.6f}", e.iterations, e.lidar_rows, e.intra_rows,
                        e.migration_rows, e.events, e.visual_points]
                       + [_fmt(e.alphas.get(c, float("nan"))) for c in cams])
    with open(out / "migrations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "point_id", "src_cam", "dst_cam"])
        for ev in res.events:
            w.writerow([f"{ev.t:.6f}", ev.point_id, ev.src, ev.dst])
    # wall-clock numbers vary between runs, so they stay out of metrics.txt
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "seconds"])
        for e in res.epochs:
            w.writerow([e.epoch, f"{e.seconds:.6f}"])
        w.writerow(["total", f"{wall:.6f}"])


# --- ablation ------------------------------------------------------------------

GRID_KEYS = {"cams", "migration", "adaptive_cov", "vision", "lidar_weight_scale", "epochs"}


def parse_grid(spec: str) -> list:
    """Ablation rows from a YAML file or an inline ``key=a,b;key=c`` product.

    A YAML file holds a list of mappings, each with an optional ``name``.
    """
    path = Path(spec)
    if path.is_file():
        rows = yaml.safe_load(path.read_text())
        if not isinstance(rows, list) or not all(isinstance(r, dict) for r in rows):
            raise ConfigError("grid file must be a list of mappings")
        out = []
        for r in rows:
            r = dict(r)
            name = str(r.pop("name", "")) or _row_name(r)
            out.append((name, r))
    else:
        axes = []
        for part in filter(None, (p.strip() for p in spec.split(";"))):
            if "=" not in part:
                raise ConfigError(f"bad grid term {part!r}; expected key=v1,v2")
            key, vals = part.split("=", 1)
            axes.append([(key.strip(), v.strip()) for v in vals.split(",") if v.strip()])
        out = [(_row_name(dict(combo)), dict(combo)) for combo in itertools.product(*axes)]
    for _, r in out:
        bad = set(r) - GRID_KEYS
        if bad:
            raise ConfigError(f"unknown grid keys: {sorted(bad)}")
    if len(out) < 2:
        raise ConfigError("an ablation needs at least two configurations")
    return out


def _row_name(r: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in r.items()) or "default"


def _coerce(r: dict) -> dict:
    out = {}
    for k, v in r.items():
        if k in ("cams", "epochs"):
            out[k] = int(v)
        elif k == "lidar_weight_scale":
            out[k] = float(v)
        else:
            out[k] = v
    return out


ABLATION_FIELDS = ["config", "status", "ate_rmse_m", "migration_events", "colored_points",
                   "mean_epoch_s", "error"]


def ablate(scenario_ref, grid: list, base_overrides: dict | None = None,
           out: Path | None = None) -> list:
    rows = []
    for name, r in grid:
        overrides = dict(base_overrides or {})
        overrides.update(_coerce(r))
        try:
            cfg = resolve(scenario_ref, overrides)
            sub = None if out is None else Path(out) / _safe(name)
            rep = run(cfg, sub)
            times = [e.seconds for e in rep.result.epochs]
            rows.append({"config": name, "status": "ok", "ate_rmse_m": _fmt(rep.ate),
                         "migration_events": rep.metrics["migration_events"],
                         "colored_points": rep.metrics["colored_points"],
                         "mean_epoch_s": f"{np.mean(times):.4f}" if times else "",
                         "error": ""})
        except (MclivoError, ValueError) as exc:
            rows.append({"config": name, "status": "error", "ate_rmse_m": "",
                         "migration_events": "", "colored_points": "", "mean_epoch_s": "",
                         "error": f"{type(exc).__name__}: {exc}"})
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_ablation_csv(Path(out) / "ablation.csv", rows)
    return rows


def write_ablation_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        w.writerows(rows)


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


# --- entry point ------------------------------------------------------------------

def _add_run_flags(p):
    p.add_argument("--cams", type=int, help="use the first N rig cameras (default: all)")
    p.add_argument("--no-migration", dest="migration", action="store_const", const=False)
    p.add_argument("--no-adaptive-cov", dest="adaptive_cov", action="store_const", const=False)
    p.add_argument("--no-vision", dest="vision", action="store_const", const=False)
    p.add_argument("--lidar-weight-scale", type=float,
                   help="multiply the LiDAR noise the filter assumes (default 1)")
    p.add_argument("--epochs", type=int, help="stop after N epochs")
    p.add_argument("--seed", type=int, help="override the scenario seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mclivo", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate, estimate and evaluate one configuration")
    p.add_argument("--scenario", default="corridor", help="YAML file or built-in name")
    _add_run_flags(p)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("ablate", help="run a grid of configurations on one seed")
    p.add_argument("--scenario", default="corridor")
    p.add_argument("--grid", required=True,
                   help="YAML list of configs, or inline e.g. 'cams=1,4;migration=on,off'")
    _add_run_flags(p)
    p.add_argument("--out", default="ablation")

    p = sub.add_parser("simulate", help="write the simulated sensor streams to disk")
    p.add_argument("--scenario", default="corridor")
    p.add_argument("--dump", required=True, help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--cams", type=int)
    p.add_argument("--seed", type=int)
    return ap


def _flag_overrides(args) -> dict:
    keys = ("cams", "migration", "adaptive_cov", "vision", "lidar_weight_scale", "epochs", "seed")
    return {k: getattr(args, k, None) for k in keys}


def _progress(e) -> None:
    if e.epoch % 50 == 0:
        print(f"epoch {e.epoch} t={e.t:.1f}s", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = resolve(args.scenario, _flag_overrides(args))
            rep = run(cfg, Path(args.out), None if args.quiet else _progress)
            print(f"ate_rmse_m={_fmt(rep.ate)} migration_events={rep.metrics['migration_events']} "
                  f"colored_points={rep.metrics['colored_points']} out={args.out}")
        elif args.command == "ablate":
            grid = parse_grid(args.grid)
            base = {k: v for k, v in _flag_overrides(args).items() if v is not None}
            rows = ablate(args.scenario, grid, base, Path(args.out))
            w = csv.DictWriter(sys.stdout, fieldnames=ABLATION_FIELDS)
            w.writeheader()
            w.writerows(rows)
            if any(r["status"] != "ok" for r in rows):
                return 3
        elif args.command == "simulate":
            cfg = resolve(args.scenario, {"seed": args.seed, "cams": args.cams})
            sim = Simulation(cfg.scenario)
            sim.dump(args.dump, cfg.cam_ids, args.epochs)
            print(f"wrote {args.dump}")
    except (MclivoError, ValueError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
