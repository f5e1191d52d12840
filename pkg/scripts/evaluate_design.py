"""Grasp one design over the seven evaluation poses and five seeds per object.

    python3 scripts/evaluate_design.py results/e2e/run_0/iter_3/design.csv --in-domain curvy_ball
"""
import argparse
import sys

from simto.cli import main as cli

OBJECTS = ["curvy_ball", "star", "gear", "hourglass", "spiky_ball"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("design")
    ap.add_argument("--in-domain", default="curvy_ball")
    ap.add_argument("--objects", nargs="+", default=OBJECTS)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out", default="results/evaluation.csv")
    args = ap.parse_args()
    argv = ["evaluate", "--design", args.design, "--objects", *args.objects, "--in-domain", args.in_domain,
            "--out", args.out]
    if args.workers:
        argv += ["--workers", str(args.workers)]
    sys.exit(cli(argv))


if __name__ == "__main__":
    main()
