#!/usr/bin/env python3
"""Time the moment loss (kernel form against explicit flattening) and write bench.csv.

Usage: python3 scripts/run_benchmark.py [--out runs/bench.csv]
"""
import argparse
import sys

from cloth import cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/bench.csv")
    ap.add_argument("--repeats", default="5")
    args = ap.parse_args()
    return cli.main(["bench", "--p", "2,8,16", "--q", "1,2,3", "--repeats", args.repeats, "--out", args.out])


if __name__ == "__main__":
    sys.exit(main())
