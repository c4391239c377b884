#!/usr/bin/env python3
"""Recurrent cells versus memoryless trees on the signal-recall game.

Trains the full model and the non-recurrent baseline on the same seeds
and prints their final greedy returns side by side; the baseline cannot
beat 1.0 of 2.0 in expectation.
"""

import argparse
import sys

from mixrts.cli import main as cli


def run(args):
    rows = []
    for seed in range(1, args.seeds + 1):
        finals = {}
        for label, extra in (
            ("recurrent", ["--agent-trees", "rtc", "--mixer", "mixrts"]),
            ("memoryless", ["--agent-trees", "sdt", "--mixer", "independent"]),
        ):
            name = f"memory-{label}-seed{seed}"
            code = cli([
                "train", "--env", "memory", "--steps", str(args.steps),
                "--seed", str(seed), "--lr", str(args.lr),
                "--depth-agent", "2", "--depth-mix", "2",
                "--h-agent", "16", "--h-mix", "8",
                "--out", args.out, "--run-name", name, *extra,
            ])
            if code != 0:
                return code
            curve = open(f"{args.out}/{name}/curve.csv").read().splitlines()
            finals[label] = float(curve[-1].split(",")[2])
        rows.append((seed, finals["recurrent"], finals["memoryless"]))
    print("seed  recurrent  memoryless")
    for seed, rec, mem in rows:
        print(f"{seed:>4}  {rec:>9.3f}  {mem:>10.3f}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=30000)
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--lr", type=float, default=0.01)
    parser.add_argument("--out", default="runs/memory")
    sys.exit(run(parser.parse_args()))
