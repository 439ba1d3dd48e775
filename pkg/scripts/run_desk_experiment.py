#!/usr/bin/env python3
"""Generate the synthetic dataset, train the desk-scale model, and evaluate.

The defaults reproduce the shipped desk regime end to end:

    python scripts/run_desk_experiment.py --out runs/desk
"""

import argparse
import os
import sys

os.environ.setdefault("OPENBLAS_THREAD_TIMEOUT", "5")

from scngait.cli import main as cli


def run(out: str, iterations: int, seed: int) -> int:
    data = os.path.join(out, "data")
    if not os.path.isdir(data):
        rc = cli(["synth", "--out", data, "--seed", str(seed)])
        if rc:
            return rc
    rc = cli([
        "train", "--out", os.path.join(out, "train"), "--seed", str(seed),
        f"data.root={data}", f"train.iterations={iterations}",
    ])
    if rc:
        return rc
    ckpt = os.path.join(out, "train", f"ckpt_{iterations}.scn")
    return cli([
        "eval", "--checkpoint", ckpt, "--out", os.path.join(out, "eval"),
        "--seed", str(seed), f"data.root={data}",
    ])


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--iterations", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    sys.exit(run(args.out, args.iterations, args.seed))
