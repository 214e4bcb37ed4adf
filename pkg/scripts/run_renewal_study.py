"""Renewal functions of both tilted walks against their closed forms.

Runs the `walk` subcommand for the zero-drift tilt of the critical lattice
model and the drift-up tilt of the two-point model, at a budget where the
method agreement (VisitCount vs LadderDuality) resolves well below 1%.
"""

import argparse
import sys
from pathlib import Path

from kbrw.cli import main


def run(out: Path, replicas: int, seed: int) -> int:
    jobs = [
        ("critical_star", ["--model", "critical-lattice", "--tilt", "star",
                           "--cr-reference", "1.0"]),
        ("two_point_plus", ["--model", "two-point", "--tilt", "plus"]),
    ]
    for name, extra in jobs:
        argv = ["walk", "--grid", "0:9:1", "--replicas", str(replicas),
                "--seed", str(seed), "--out", str(out / name)] + extra
        print(f"-> kbrw {' '.join(argv)}")
        code = main(argv)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/renewal"))
    ap.add_argument("--replicas", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=910)
    args = ap.parse_args()
    sys.exit(run(args.out, args.replicas, args.seed))
