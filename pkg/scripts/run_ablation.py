#!/usr/bin/env python3
"""Train the loss-group ablation rows on the synthetic benchmark for several seeds.

Usage: python3 scripts/run_ablation.py [--rows 1,2,7] [--seeds 0,1,2] [--out runs/ablation]
"""
import argparse
import json
import os
import sys
import tempfile

from cloth import cli, runconfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", default="1,2,7")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    doc = runconfig.default_document(0)
    doc["out"] = args.out
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "run.json")
        with open(path, "w") as fh:
            json.dump(doc, fh)
        return cli.main(["ablate", "--config", path, "--rows", args.rows, "--seeds", args.seeds])


if __name__ == "__main__":
    sys.exit(main())
