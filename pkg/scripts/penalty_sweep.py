#!/usr/bin/env python3
"""Penalty-formulation sweep over eps = 1e-2 .. 1e-5.

Trains one database per penalty parameter, benchmarks each, and prints the
effectivity growth against eps (the O(1/sqrt(eps)) trend) together with the
stabilization-event counts from the training traces.
"""

import argparse
import os
import sys

import numpy as np

from stokes_rb import workbench as wb


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/penalty")
    parser.add_argument("--tol", type=float, default=1e-2)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--eps", type=float, nargs="*", default=[1e-2, 1e-3, 1e-4, 1e-5])
    args = parser.parse_args()

    setup = wb.build_truth_setup(wb.RunConfig(seed=args.seed))
    summary = []
    for eps in args.eps:
        config = wb.RunConfig(eps=eps, tol=args.tol, seed=args.seed)
        db, trace, _ = wb.train_database(config, setup)
        out = os.path.join(args.out, f"eps{eps:g}")
        wb.write_training_artifacts(out, config, db, trace)
        bench = wb.run_benchmark(db, setup, samples=config.bench_samples, seed=config.seed)
        bench.to_csv(os.path.join(out, "bench"))
        eta = float(np.max(bench.max_effectivity[-1]))
        summary.append((eps, db.n_x + db.n_y, trace.stabilization_events(), eta))
        print(f"eps={eps:g}: N_Z={summary[-1][1]} stab_events={summary[-1][2]} "
              f"max effectivity at final N: {eta:.1f}")

    print("\neps, N_Z, stabilization events, max effectivity")
    for row in summary:
        print(f"{row[0]:g}, {row[1]}, {row[2]}, {row[3]:.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
