"""Desk-scale loop on the default 60 x 28 grid with the disc-with-bumps object.

    python3 scripts/end_to_end.py --out results/e2e [--object star] [--set sim.E_g=4.6e5]
"""
import argparse
import sys

from simto.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/e2e")
    ap.add_argument("--object", default="curvy_ball")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args()
    argv = ["run", "--object", args.object, "--out", args.out, "--seed", str(args.seed)]
    for item in args.overrides:
        argv += ["--set", item]
    sys.exit(cli(argv))


if __name__ == "__main__":
    main()
