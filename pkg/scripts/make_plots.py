#!/usr/bin/env python3
"""Loss and transport-estimate curves (SVG) for a finished ``cloth train`` run directory.

Usage: python3 scripts/make_plots.py RUN_DIR
"""
import os
import sys

from cloth import plot

FIGURES = {
    "losses.svg": ["L_C", "L_D", "L_t", "L_ent", "L_HMM"],
    "w_est.svg": ["W_est"],
    "accuracy.svg": ["src_acc", "tgt_acc"],
}


def main(argv):
    if len(argv) != 1:
        print(__doc__.strip(), file=sys.stderr)
        return 2
    run = argv[0]
    for name, columns in FIGURES.items():
        out = os.path.join(run, name)
        plot.export_plot(os.path.join(run, "metrics.csv"), columns, out)
        print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
