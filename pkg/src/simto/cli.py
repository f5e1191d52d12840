"""Command-line entry point: ``simto <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 infeasible design, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig
from .extract import EmptyLoadError, read_loads_csv
from .fem import DensityField, FemError
from .grasp.mesh import InfeasibleDesign, MeshingError, mesh_from_density
from .grasp.sim import SimulationError, grasp_outcome, simulate
from .loop import SOLID_THRESHOLD, feasible, load_object, run
from .metrics import (
    EVALUATION_POSES,
    evaluation_config,
    evaluation_protocol,
    pareto_front,
    results_row,
    write_results_csv,
)
from .sweep import SweepGrid, SweepSettings, aggregate, execute_sweep, plan, write_aggregate
from .topopt import OptimizationError, baseline_loads, input_displacement, optimize

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("simto")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. sim.E_g=4.6e5 (repeatable)")
    p.add_argument("--seed", type=int, help="simulation seed (sim.seed)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="simto", description="Simulation-driven topology optimization of soft fingers.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("optimize", help="topology-optimize for explicit loads")
    _common(p)
    p.add_argument("--loads", help="loads CSV (node_id, x, y, fx, fy, magnitude)")
    p.add_argument("--baseline", action="store_true", help="use the single -y dummy load at the free corner")
    p.add_argument("--max-iters", type=int, help="optimizer iteration cap (topopt.max_iterations)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="simulate one grasp of a design")
    _common(p)
    p.add_argument("--design", help="design CSV; omitted means the all-solid domain")
    p.add_argument("--object", default="curvy_ball", help="shape name or polygon file")
    p.add_argument("--trace", help="write the trace as JSON lines")

    p = sub.add_parser("run", help="run the simulate/extract/optimize loop")
    _common(p)
    p.add_argument("--object", default="curvy_ball")
    p.add_argument("--out", required=True)
    p.add_argument("--run-id", default="0")

    p = sub.add_parser("sweep", help="run a parameter sweep")
    _common(p)
    p.add_argument("--out", help="sweep directory (required unless --dry-run)")
    p.add_argument("--objects", nargs="+", default=["curvy_ball"])
    p.add_argument("--moduli-g", nargs="+", type=float, help="gripper moduli, MPa")
    p.add_argument("--moduli-o", nargs="+", type=float, help="object moduli, MPa")
    p.add_argument("--volume-fractions", nargs="+", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--dry-run", action="store_true", help="print the planned cells and exit")

    p = sub.add_parser("evaluate", help="grasp a design over poses, seeds and objects")
    _common(p)
    p.add_argument("--design", required=True)
    p.add_argument("--objects", nargs="+", required=True)
    p.add_argument("--in-domain", help="object the design was optimized for")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--poses", type=int, default=len(EVALUATION_POSES), help="use the first N protocol poses")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="results CSV")

    p = sub.add_parser("pareto", help="Pareto front of (diversity, lift_time) points")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--points", help="CSV with diversity and lift_time columns")
    src.add_argument("--sweep", help="sweep directory to aggregate")

    p = sub.add_parser("render", help="density images and scatter data")
    _common(p)
    p.add_argument("--design", help="design CSV to render")
    p.add_argument("--sweep", help="sweep directory: render every feasible design plus scatter CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--png", action="store_true", help="also write PNG images")
    p.add_argument("--scale", type=int, default=4, help="PNG pixels per element")

    sub.add_parser("config", help="print the default configuration")
    return ap


def _load_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"sim.seed={args.seed}")
    if getattr(args, "max_iters", None) is not None:
        overrides.append(f"topopt.max_iterations={args.max_iters}")
    cfg = RunConfig.load(args.config, overrides)
    cfg.validate()
    return cfg


def _read_design(path, cfg: RunConfig) -> DensityField:
    if not Path(path).is_file():
        raise UsageError(f"design file {path} not found")
    rho = io.read_design_csv(path, cfg.tree["domain"]["element_size"])
    cfg.tree["domain"]["nelx"], cfg.tree["domain"]["nely"] = rho.grid.nelx, rho.grid.nely
    return rho


def _emit(obj) -> None:
    print(json.dumps(io.to_jsonable(obj), sort_keys=True))


def cmd_optimize(args) -> int:
    cfg = _load_config(args)
    if args.baseline == bool(args.loads):
        raise UsageError("give exactly one of --loads or --baseline")
    domain = cfg.domain
    if args.loads:
        if not Path(args.loads).is_file():
            raise UsageError(f"loads file {args.loads} not found")
        loads = read_loads_csv(args.loads)
    else:
        loads = baseline_loads(domain.grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rho, history = optimize(domain, loads, cfg.topopt)
    io.write_design_csv(out / "design.csv", rho)
    io.write_pgm(out / "design.pgm", rho)
    io.write_log_csv(out / "log.csv", history)
    result = {"iterations": len(history), "converged": history.converged,
              "objective": history.records[-1].objective if history.records else None,
              "volume_fraction": rho.volume_fraction}
    if args.baseline and len(history):
        U = input_displacement(domain, loads, rho, cfg.topopt)
        n = domain.grid.nearest_node(loads.loads[0].position)
        result["output_uy"] = float(U[2 * n + 1])
    _emit(result)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    if args.design:
        rho = _read_design(args.design, cfg)
    else:
        rho = DensityField.uniform(cfg.grid, 1.0)
    domain = cfg.domain
    ok, reasons = feasible(rho, domain)
    if not ok:
        _emit({"feasible": False, "reasons": reasons})
        return EXIT_INFEASIBLE
    finger = mesh_from_density(rho, SOLID_THRESHOLD, domain)
    obj = load_object(args.object, cfg.loop.object_spacing)
    trace = simulate(finger, obj, (cfg.loop.pose_gripper, cfg.loop.pose_object), cfg.sim)
    if args.trace:
        trace.to_jsonl(args.trace)
    success, lift, stress = grasp_outcome(trace)
    _emit({"success": success, "lift_time": lift, "peak_stress": stress})
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    obj = load_object(args.object, cfg.loop.object_spacing)
    run_dir = Path(args.out) / f"run_{args.run_id}"
    result = run(cfg.domain, obj, cfg.sim, cfg.topopt, cfg.loop, run_dir,
                 meta={"object": args.object, "run_id": args.run_id})
    _emit({"status": result.status, "iterations": len(result.records) - 1,
           "simulate_calls": result.simulate_calls, "run_dir": str(run_dir),
           "lift_times": [r.lift_time for r in result.records],
           "feasible": [r.feasible for r in result.records]})
    return EXIT_NUMERICAL if result.status == "error" else EXIT_OK


def _sweep_grid(args) -> SweepGrid:
    kw = {"objects": tuple(args.objects)}
    if args.moduli_g:
        kw["moduli_g"] = tuple(v * 1e6 for v in args.moduli_g)
    if args.moduli_o:
        kw["moduli_o"] = tuple(v * 1e6 for v in args.moduli_o)
    if args.volume_fractions:
        kw["volume_fractions"] = tuple(args.volume_fractions)
    return SweepGrid(**kw)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    grid = _sweep_grid(args)
    cells = plan(grid)
    if args.dry_run:
        for c in cells:
            print(c.run_id)
        print(f"{len(cells)} planned runs ({grid.runs_per_object} per object)")
        return EXIT_OK
    if not args.out:
        raise UsageError("--out is required unless --dry-run is given")
    settings = SweepSettings(cfg.grid, cfg.sim, cfg.topopt, cfg.loop, cfg.sim.seed)
    s = execute_sweep(grid, args.out, settings, args.workers)
    _emit({"attempted": s.attempted, "completed": s.completed, "skipped": s.skipped, "failed": s.failed,
           "feasible_designs": s.feasible, "infeasible_designs": s.infeasible, "errored_designs": s.errored})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    rho = _read_design(args.design, cfg)
    domain = cfg.domain
    ok, reasons = feasible(rho, domain)
    if not ok:
        _emit({"feasible": False, "reasons": reasons})
        return EXIT_INFEASIBLE
    if not 1 <= args.poses <= len(EVALUATION_POSES) or args.seeds < 1:
        raise UsageError("--poses must lie in [1, 7] and --seeds must be >= 1")
    finger = mesh_from_density(rho, SOLID_THRESHOLD, domain)
    objects = {name: load_object(name, cfg.loop.object_spacing) for name in args.objects}
    if args.in_domain and args.in_domain not in objects:
        raise UsageError("--in-domain must be one of --objects")
    summary = evaluation_protocol(finger, objects, evaluation_config(cfg.sim), args.seeds,
                                  EVALUATION_POSES[:args.poses], args.in_domain, args.workers)
    per_obj = ([summary.in_domain] if summary.in_domain else []) + summary.out_domain
    report = {o.object: {"trials": o.n, "success_rate": o.success_rate, "stress_mean": o.stress[0],
                         "stress_std": o.stress[1]} for o in per_obj}
    report["out_domain"] = {"trials": summary.out_domain_trials, "success_rate": summary.out_domain_success}
    if args.out:
        sim = cfg.sim
        row = results_row(args.in_domain or "", Path(args.design).stem, sim.E_g, sim.E_o,
                          rho.volume_fraction, 0, summary)
        write_results_csv(args.out, [row])
    _emit(report)
    return EXIT_OK


def cmd_pareto(args) -> int:
    if args.sweep:
        rep = aggregate(args.sweep)
        write_aggregate(args.sweep, rep)
        _emit({"designs": len(rep.rows), "front": sum(r["on_front"] for r in rep.rows),
               "feasible": rep.feasible, "infeasible": rep.infeasible, "errored": rep.errored,
               "skipped_records": rep.skipped_records})
        return EXIT_OK
    if not Path(args.points).is_file():
        raise UsageError(f"points file {args.points} not found")
    with open(args.points, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError("points file has no rows")
    try:
        pts = [(float(r["diversity"]), float(r["lift_time"])) for r in rows]
    except (KeyError, ValueError) as exc:
        raise UsageError(f"points file needs numeric diversity and lift_time columns ({exc})") from exc
    front = pareto_front(pts)
    _emit({"front": front, "points": [pts[i] for i in front]})
    return EXIT_OK


def _png(path, rho: DensityField, scale: int) -> None:
    from PIL import Image

    img = np.rint(rho.image()[::-1] * 255).astype(np.uint8)
    img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    Image.fromarray(img, mode="L").save(path)


def cmd_render(args) -> int:
    cfg = _load_config(args)
    if bool(args.design) == bool(args.sweep):
        raise UsageError("give exactly one of --design or --sweep")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.design:
        rho = _read_design(args.design, cfg)
        stem = Path(args.design).stem
        io.write_pgm(out / f"{stem}.pgm", rho)
        if args.png:
            _png(out / f"{stem}.png", rho, args.scale)
        _emit({"images": 1})
        return EXIT_OK
    rep = aggregate(args.sweep)
    write_aggregate(out, rep)
    n = 0
    if rep.population is not None:
        for rho, meta in zip(rep.population.designs, rep.population.metadata):
            stem = f"{meta['run']}_iter{meta['iteration']}"
            io.write_pgm(out / f"{stem}.pgm", rho)
            if args.png:
                _png(out / f"{stem}.png", rho, args.scale)
            n += 1
    _emit({"images": n, "scatter": str(out / "population.csv")})
    return EXIT_OK


def cmd_config(args) -> int:
    print(json.dumps(RunConfig.load().tree, indent=2))
    return EXIT_OK


COMMANDS = {
    "optimize": cmd_optimize,
    "simulate": cmd_simulate,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "pareto": cmd_pareto,
    "render": cmd_render,
    "config": cmd_config,
}


def _cap_threads() -> None:
    n = os.environ.get("SIMTO_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def main(argv=None) -> int:
    _cap_threads()
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError, EmptyLoadError) as exc:
        print(f"simto {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleDesign, MeshingError) as exc:
        print(f"simto {args.command}: infeasible design: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SimulationError, OptimizationError, FemError, FloatingPointError) as exc:
        print(f"simto {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
