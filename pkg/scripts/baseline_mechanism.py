"""Full-scale baseline gripper: 150 x 70 grid, one -y dummy load, v_f = 0.3.

Writes design.csv, design.pgm, log.csv and a summary.json with the output-node
y-displacement under the input force.

    python3 scripts/baseline_mechanism.py --out results/baseline
"""
import argparse
import json
import time
from pathlib import Path

from simto import io
from simto.fem import GridSpec
from simto.topopt import DesignDomain, TopOptConfig, baseline_loads, input_displacement, optimize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/baseline")
    ap.add_argument("--nelx", type=int, default=150)
    ap.add_argument("--nely", type=int, default=70)
    ap.add_argument("--volume-fraction", type=float, default=0.3)
    ap.add_argument("--max-iters", type=int, default=100)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    domain = DesignDomain.default(GridSpec(args.nelx, args.nely, 1.0), args.volume_fraction)
    loads = baseline_loads(domain.grid)
    cfg = TopOptConfig(max_iterations=args.max_iters)
    t0 = time.perf_counter()
    rho, log = optimize(domain, loads, cfg)
    U = input_displacement(domain, loads, rho, cfg)
    uy = float(U[2 * domain.grid.nearest_node(loads.loads[0].position) + 1])
    io.write_design_csv(out / "design.csv", rho)
    io.write_pgm(out / "design.pgm", rho)
    io.write_log_csv(out / "log.csv", log)
    summary = {"iterations": len(log), "converged": log.converged,
               "final_max_change": log.records[-1].max_change, "objective": log.records[-1].objective,
               "output_uy": uy, "volume_fraction": rho.volume_fraction, "seconds": time.perf_counter() - t0}
    io.dump_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
