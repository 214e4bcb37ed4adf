"""Crossing probabilities deep in the tree, spine estimator vs forward MC.

For each model the `spine` subcommand estimates P(H(t) > 0) at t and 2t
under the crossing-line change of measure, with a naive forward forest at
the shallow level as the overlap check.  The gaussian walk has no closed
renewal form, so its run carries a table budget; the lattice model uses the
exact one.  Scaled values (t e^{rho t} P critical, e^{rho t} P subcritical)
land in the summaries.
"""

import argparse
import sys
from pathlib import Path

from kbrw.cli import main


def run(out: Path, replicas: int, naive: int, table: int, seed: int) -> int:
    jobs = [
        ("critical-gaussian", "0.5", ["--renewal-grid", "0:16:0.5",
                                      "--renewal-replicas", str(table)]),
        ("two-point", "0.0", []),
    ]
    for model, x, extra in jobs:
        for t, fwd in (("4", str(naive)), ("8", "0")):
            argv = ["spine", "--model", model, "--x", x, "--t", t,
                    "--replicas", str(replicas), "--band-eps", "1e-4",
                    "--naive-replicas", fwd, "--seed", str(seed),
                    "--out", str(out / f"{model}_t{t}")] + extra
            print(f"-> kbrw {' '.join(argv)}")
            code = main(argv)
            if code != 0:
                return code
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/survival"))
    ap.add_argument("--replicas", type=int, default=30_000)
    ap.add_argument("--naive-replicas", type=int, default=1_000_000)
    ap.add_argument("--renewal-replicas", type=int, default=300_000,
                    help="budget of the gaussian renewal table")
    ap.add_argument("--seed", type=int, default=920)
    args = ap.parse_args()
    sys.exit(run(args.out, args.replicas, args.naive_replicas,
                 args.renewal_replicas, args.seed))
