"""Parameter sweep over gripper modulus, object modulus and volume fraction, then aggregation.

Runs are resumable: rerunning with the same --out skips finished cells.

    python3 scripts/sweep.py --out results/sweep --objects curvy_ball star --workers 8
    python3 scripts/sweep.py --out results/sweep --quick   # 2 x 2 x 2 grid on a coarse domain
"""
import argparse
import json

from simto.fem import GridSpec
from simto.grasp.sim import SimConfig
from simto.loop import LoopConfig
from simto.sweep import SweepGrid, SweepSettings, aggregate, execute_sweep, write_aggregate
from simto.topopt import TopOptConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/sweep")
    ap.add_argument("--objects", nargs="+", default=["curvy_ball"])
    ap.add_argument("--workers", type=int)
    ap.add_argument("--quick", action="store_true", help="small grid and coarse mesh for a smoke run")
    args = ap.parse_args()

    if args.quick:
        grid = SweepGrid(moduli_g=(0.46e6, 1.39e6), moduli_o=(0.46e6, 1.39e6), volume_fractions=(0.25, 0.3),
                         objects=tuple(args.objects))
        settings = SweepSettings(grid=GridSpec(30, 14, 5.0), sim=SimConfig(t=2.0, N_t=80),
                                 topopt=TopOptConfig(max_iterations=40),
                                 loop=LoopConfig(max_simto_iterations=4, object_spacing=6.0))
    else:
        grid = SweepGrid(objects=tuple(args.objects))
        settings = SweepSettings()
    s = execute_sweep(grid, args.out, settings, args.workers)
    print(json.dumps({"attempted": s.attempted, "completed": s.completed, "skipped": s.skipped,
                      "failed": s.failed, "feasible": s.feasible, "infeasible": s.infeasible}, indent=2))
    rep = aggregate(args.out)
    pop, front = write_aggregate(args.out, rep)
    print(f"{len(rep.rows)} scored designs -> {pop}; Pareto front -> {front}")


if __name__ == "__main__":
    main()
