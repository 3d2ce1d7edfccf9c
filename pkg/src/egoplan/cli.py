"""Command-line front end.

Every subcommand prints a one-line JSON status on stdout when it succeeds.
On failure it prints a JSON error record on stderr and exits with

* 2  invalid input (arguments, config, files, unsafe endpoints),
* 3  the planner found no safe path,
* 4  simulated errors left the reachable-set tube.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .disturbance import (CalibrationError, QueryGrid, build_field, coverage, fit_params, load_field,
                          load_samples, point_variance, save_field)
from .kinodynamic import NoPathError, UnsafeEndpointError, save_path_csv
from .planner import plan
from .reachability import NotHurwitzError, UnsafeCommandError
from .scenarios import make_scenario
from .simulation import (check_containment, collisions, compare_margins, format_table, save_comparison,
                         save_traces_csv, simulate)
from .suites import SUITES, load_suite
from .trajectory_opt import build_tube, load_spline, save_commands_csv, save_spline
from .voxel_map import MapFormatError, classify_surfaces, load_map, save_map

log = logging.getLogger("egoplan")

EXIT_OK, EXIT_VALIDATION, EXIT_NO_PATH, EXIT_CONTAINMENT = 0, 2, 3, 4


class CommandFailure(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandFailure(EXIT_VALIDATION, "UsageError", message)


def _out(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _status(command: str, **info) -> None:
    print(json.dumps({"status": "ok", "command": command, **info}, sort_keys=True))


# -- subcommands ---------------------------------------------------------------

def cmd_scenario(args, cfg: RunConfig) -> int:
    params = {"resolution": args.resolution}
    if args.kind == "walls":
        params["d"] = args.d
    elif args.kind == "narrow":
        params.update(gap=args.gap, gap_offset=args.gap_offset)
    else:
        params.update(seed=args.seed, n_obstacles=args.n_obstacles)
    vmap = make_scenario(args.kind, **params)
    save_map(vmap, _out(args.output))
    _status("scenario", output=str(args.output), dims=list(vmap.dims), occupied=int(vmap.occupancy.sum()))
    return EXIT_OK


def cmd_field(args, cfg: RunConfig) -> int:
    vmap = load_map(args.map)
    grid = QueryGrid.covering(vmap, cfg.field.resolution)
    fld = build_field(vmap, classify_surfaces(vmap), cfg.field.params, grid)
    summary = args.summary or Path(args.output).with_suffix(".json")
    save_field(fld, _out(args.output), _out(summary))
    _status("field", output=str(args.output), summary=str(summary), dims=list(grid.dims))
    return EXIT_OK


def cmd_calibrate(args, cfg: RunConfig) -> int:
    vmap = load_map(args.map)
    labels = classify_surfaces(vmap)
    samples = load_samples(args.samples)
    params = fit_params(samples, vmap, labels, args.target, base=cfg.field.params, seed=cfg.sim.seed)
    cfg.field.params = params
    dump_config(cfg, _out(args.output))
    pos = np.array([s.position for s in samples])
    obs = np.array([s.variance for s in samples])
    cov = coverage(point_variance(vmap, labels, params, pos), obs)
    _status("calibrate", output=str(args.output), coverage=cov, samples=len(samples))
    return EXIT_OK


def cmd_plan(args, cfg: RunConfig) -> int:
    vmap = load_map(args.map)
    fld = load_field(args.field)
    pcfg = cfg.planner_config()
    res = plan(vmap, fld, cfg.error_system(), args.start, args.goal, pcfg, args.margin, Q0=cfg.initial_shape())
    out = _outdir(args.output)
    save_spline(res.spline, out / "trajectory.txt")
    save_commands_csv(res.spline, pcfg.command_dt, out / "commands.csv")
    save_path_csv(res.path, out / "path.csv")
    res.tube.save_csv(out / "tube.csv")
    metrics = res.metrics()
    metrics["timings"] = res.timings
    metrics["margin"] = args.margin
    (out / "plan.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    if not res.safe:
        raise CommandFailure(EXIT_NO_PATH, "UnsafeResidual",
                             f"optimized trajectory keeps {metrics['unsafe_samples']} unsafe samples",
                             output=str(out))
    _status("plan", output=str(out), **{k: metrics[k] for k in ("length", "time", "jerk2", "collision_cost")})
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    vmap = load_map(args.map)
    fld = load_field(args.field)
    spline = load_spline(args.trajectory)
    sim_cfg = cfg.sim_config()
    pcfg = cfg.planner_config()
    sys_ = cfg.error_system()
    Q0 = cfg.initial_shape()
    tube = build_tube(spline, fld, sys_, pcfg.synced_optimizer(), Q0)
    cmds = spline.commands(pcfg.command_dt)
    traces = simulate(cmds, fld, sys_, sim_cfg, Q0=Q0, k_sigma=pcfg.k_sigma)
    report = check_containment(traces, tube)
    hits = collisions(traces, vmap, sys_, pcfg.vehicle_radius, sim_cfg.substeps)
    out = _outdir(args.output)
    summary = {"containment": report.to_dict(), "collisions": int(hits.sum()),
               "sim": {"rate": sim_cfg.rate, "substeps": sim_cfg.substeps, "law": sim_cfg.law,
                       "trials": sim_cfg.trials, "seed": sim_cfg.seed}}
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if args.traces:
        save_traces_csv(traces, out / "traces.csv")
    if report.n_violations:
        raise CommandFailure(EXIT_CONTAINMENT, "ContainmentViolation",
                             f"{report.n_violations} error samples left the tube", output=str(out))
    _status("simulate", output=str(out), violations=0, collisions=int(hits.sum()),
            max_mahalanobis=report.max_mahalanobis)
    return EXIT_OK


def cmd_compare(args, cfg: RunConfig) -> int:
    suite = load_suite(args.suite, args.cache, None if args.cache else cfg.field.params)
    methods = {"adaptive": None}
    methods.update({f"fixed-{m:g}": m for m in args.margins})
    totals, rows = compare_margins(suite, methods, cfg.error_system(), cfg.planner_config(), cfg.sim_config(),
                                   Q0=cfg.initial_shape())
    out = _outdir(args.output)
    save_comparison(totals, rows, out / "comparison.csv", out / "summary.json")
    table = format_table(totals)
    (out / "table.txt").write_text(table + "\n")
    log.info("\n%s", table)
    _status("compare", output=str(out), suite=args.suite,
            jerk2={k: v.jerk2 for k, v in totals.items()}, failures={k: v.failures for k, v in totals.items()})
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _point(text):
    return np.array([float(v) for v in text], dtype=float)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="RunConfig YAML (defaults when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config entry, e.g. --set sim.trials=1000")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="egoplan", description="Disturbance-aware planning with reachable-set tubes.")
    p.add_argument("--version", action="version", version=f"egoplan {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("scenario", parents=[common], help="generate a synthetic map")
    s.add_argument("kind", choices=["walls", "narrow", "room"])
    s.add_argument("--d", type=float, default=1.0, help="wall interval (walls)")
    s.add_argument("--gap", type=float, default=1.0, help="doorway width (narrow)")
    s.add_argument("--gap-offset", type=float, default=0.0, help="doorway center y (narrow)")
    s.add_argument("--seed", type=int, default=0, help="obstacle layout seed (room)")
    s.add_argument("--n-obstacles", type=int, default=6, help="obstacle count (room)")
    s.add_argument("--resolution", type=float, default=0.1)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("field", parents=[common], help="build the disturbance field of a map")
    s.add_argument("map")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--summary", help="JSON summary path (default: output with .json)")
    s.set_defaults(func=cmd_field)

    s = sub.add_parser("calibrate", parents=[common], help="fit field constants to hover samples")
    s.add_argument("map")
    s.add_argument("samples", help="CSV with x,y,z,var_x,var_y,var_z")
    s.add_argument("--target", type=float, default=0.85, help="coverage target")
    s.add_argument("-o", "--output", required=True, help="RunConfig YAML with the fitted constants")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("plan", parents=[common], help="plan a trajectory from rest to rest")
    s.add_argument("map")
    s.add_argument("field")
    s.add_argument("--start", nargs=3, required=True, metavar=("X", "Y", "Z"))
    s.add_argument("--goal", nargs=3, required=True, metavar=("X", "Y", "Z"))
    s.add_argument("--margin", type=float, default=None, help="fixed clearance instead of the tube")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", parents=[common], help="Monte-Carlo check of a planned trajectory")
    s.add_argument("map")
    s.add_argument("field")
    s.add_argument("trajectory", help="spline file written by plan")
    s.add_argument("--trials", type=int, help="shorthand for --set sim.trials=N")
    s.add_argument("--seed", type=int, help="shorthand for --set sim.seed=N")
    s.add_argument("--law", help="shorthand for --set sim.law=NAME")
    s.add_argument("--traces", action="store_true", help="also write every trial to traces.csv")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("compare", parents=[common], help="adaptive tube versus fixed margins")
    s.add_argument("--suite", required=True, choices=sorted(SUITES))
    s.add_argument("--margins", type=float, nargs="+", default=[0.2, 0.4])
    s.add_argument("--trials", type=int, help="shorthand for --set sim.trials=N")
    s.add_argument("--seed", type=int, help="shorthand for --set sim.seed=N")
    s.add_argument("--law", help="shorthand for --set sim.law=NAME")
    s.add_argument("--cache", help="directory caching suite maps and fields")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.set_defaults(func=cmd_compare)
    return p


def _error_record(command, code, kind, message, **extra) -> str:
    return json.dumps({"status": "error", "command": command, "exit_code": code, "error": kind,
                       "message": message, **extra}, sort_keys=True)


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = list(args.overrides)
        for key in ("trials", "seed", "law"):
            if getattr(args, key, None) is not None:
                overrides.append(f"sim.{key}={getattr(args, key)}")
        cfg = load_config(args.config, overrides)
        if command in ("plan",):
            args.start, args.goal = _point(args.start), _point(args.goal)
        return args.func(args, cfg)
    except CommandFailure as exc:
        code, kind, msg, extra = exc.code, exc.kind, str(exc), exc.extra
    except NoPathError as exc:
        code, kind, msg, extra = EXIT_NO_PATH, type(exc).__name__, str(exc), {"explored": exc.explored}
    except (ConfigError, MapFormatError, UnsafeEndpointError, UnsafeCommandError, NotHurwitzError,
            CalibrationError, FileNotFoundError, ValueError) as exc:
        code, kind, msg, extra = EXIT_VALIDATION, type(exc).__name__, str(exc), {}
    print(_error_record(command, code, kind, msg, **extra), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
