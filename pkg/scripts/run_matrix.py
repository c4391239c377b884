#!/usr/bin/env python3
"""Train on the coordination matrix game over several seeds and summarize
final greedy returns."""

import argparse
import sys

from mixrts.cli import main as cli


def run(args):
    finals = []
    for seed in range(1, args.seeds + 1):
        code = cli([
            "train", "--env", "matrix", "--steps", str(args.steps),
            "--seed", str(seed), "--lr", str(args.lr),
            "--depth-agent", "2", "--depth-mix", "2",
            "--h-agent", "16", "--h-mix", "8",
            "--out", args.out, "--run-name", f"matrix-seed{seed}",
        ])
        if code != 0:
            return code
        curve = open(f"{args.out}/matrix-seed{seed}/curve.csv").read().splitlines()
        finals.append(float(curve[-1].split(",")[2]))
    print(f"final greedy returns over {args.seeds} seeds: {finals}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=20000)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--lr", type=float, default=0.02)
    parser.add_argument("--out", default="runs/matrix")
    sys.exit(run(parser.parse_args()))
