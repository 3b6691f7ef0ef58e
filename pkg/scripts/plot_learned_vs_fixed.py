#!/usr/bin/env python3
"""Hemisphere SVG of a trained direction set against the electrostatic design.

Usage: python scripts/plot_learned_vs_fixed.py learned.csv fixed.csv out.svg
"""
import sys

from qsample.cli import plot_dirs_svg
from qsample.sphere import load_directions_csv


def main(argv) -> int:
    if len(argv) != 3:
        print(__doc__, file=sys.stderr)
        return 1
    learned, fixed, out = argv
    svg = plot_dirs_svg([load_directions_csv(fixed), load_directions_csv(learned)])
    with open(out, "wb") as f:
        f.write(svg)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
