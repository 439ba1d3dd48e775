#!/usr/bin/env python3
"""Template/fusion grid and aggregator quadrant on the synthetic dataset.

Wraps `scngait ablate` with a smaller default dataset so the 16 cells finish
in reasonable time on a laptop.
"""

import argparse
import os
import sys

os.environ.setdefault("OPENBLAS_THREAD_TIMEOUT", "5")

from scngait.cli import main as cli


def run(out, iterations, seed, subjects):
    data = os.path.join(out, "data")
    if not os.path.isdir(data):
        rc = cli(["synth", "--out", data, "--seed", str(seed),
                  f"synth.subjects={subjects}", "synth.sequences=6"])
        if rc:
            return rc
    return cli([
        "ablate", "--out", out, "--seed", str(seed),
        f"data.root={data}", f"synth.subjects={subjects}",
        f"train.iterations={iterations}",
    ])


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--iterations", type=int, default=400)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--subjects", type=int, default=8)
    args = ap.parse_args()
    sys.exit(run(args.out, args.iterations, args.seed, args.subjects))
