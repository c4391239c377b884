#!/usr/bin/env python3
"""Compare the three mixing modes on the predator-prey grid."""

import argparse
import sys

from mixrts.cli import main as cli


def run(args):
    means = {}
    for mode in ("mixrts", "vdn", "independent"):
        finals = []
        for seed in range(1, args.seeds + 1):
            name = f"grid-{mode}-seed{seed}"
            code = cli([
                "train", "--env", "grid", "--steps", str(args.steps),
                "--seed", str(seed), "--lr", str(args.lr), "--mixer", mode,
                "--depth-agent", "2", "--depth-mix", "2",
                "--h-agent", "16", "--h-mix", "8",
                "--out", args.out, "--run-name", name,
            ])
            if code != 0:
                return code
            curve = open(f"{args.out}/{name}/curve.csv").read().splitlines()
            finals.append(float(curve[-1].split(",")[2]))
        means[mode] = sum(finals) / len(finals)
        print(f"{mode}: per-seed {finals} mean {means[mode]:.3f}")
    print(f"summary: {means}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=30000)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--lr", type=float, default=0.002)
    parser.add_argument("--out", default="runs/grid")
    sys.exit(run(parser.parse_args()))
