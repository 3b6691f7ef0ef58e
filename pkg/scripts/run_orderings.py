#!/usr/bin/env python3
"""Run the standard learned-vs-fixed benchmark and print the result tables.

Signal space: validation PSNR of the jointly trained pipeline against the
fixed electrostatic design at several acceleration factors, plus the
no-reconstruction identity floor.  Tractography space: mean per-bundle
Bhattacharyya distance of no-reconstruction tractograms.

Usage: python scripts/run_orderings.py [--out-dir OUT] [--afs 3 5 10]
"""
import argparse
import sys
import time
from pathlib import Path

from qsample.experiments import (
    BenchmarkConfig,
    build_benchmark_data,
    run_signal_benchmark,
    run_tract_benchmark,
    write_signal_reports,
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="benchmark_out")
    parser.add_argument("--afs", type=float, nargs="+", default=[3.0, 5.0, 10.0])
    parser.add_argument("--tract-afs", type=float, nargs="+", default=[5.0, 10.0])
    parser.add_argument("--epochs", type=int, default=None)
    args = parser.parse_args(argv)

    cfg = BenchmarkConfig() if args.epochs is None else BenchmarkConfig(epochs=args.epochs)
    print("building the standard phantom set ...", file=sys.stderr)
    data = build_benchmark_data(cfg)

    print("\nsignal space (validation PSNR, dB; higher is better)")
    print(f"{'AF':>4} {'learned':>9} {'fixed':>9} {'identity':>9}")
    learned_dirs = {}
    for af in args.afs:
        t0 = time.time()
        arms = run_signal_benchmark(data, af)
        learned_dirs[af] = arms["learned"].dirs
        write_signal_reports(Path(args.out_dir), af, arms)
        print(
            f"{af:>4g} {arms['learned'].psnr_db:>9.3f} {arms['fixed'].psnr_db:>9.3f} "
            f"{arms['identity'].psnr_db:>9.3f}   ({time.time()-t0:.0f}s)"
        )

    print("\ntractography space (mean bundle BD, no reconstruction; lower is better)")
    print(f"{'AF':>4} {'learned':>9} {'fixed':>9}")
    for af in args.tract_afs:
        if af not in learned_dirs:
            arms = run_signal_benchmark(data, af)
            learned_dirs[af] = arms["learned"].dirs
        t0 = time.time()
        bd = run_tract_benchmark(data, af, learned_dirs[af])
        print(f"{af:>4g} {bd['learned']:>9.4f} {bd['fixed']:>9.4f}   ({time.time()-t0:.0f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
