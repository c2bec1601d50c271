"""Mean speedup of online replication over a static node-balance plan.

The static plan is solved on the first iteration only; later iterations
drift away from it. Sweeps the prediction accuracy and the broadcast cap.
"""

import argparse
import csv
import dataclasses
import logging
import sys

from moeplace import pipeline
from moeplace.core import MODEL_PRESETS, make_mesh
from moeplace.dynamic import DynamicPolicy, dynamic_simulate, mean_speedup
from moeplace.trace import TraceGenConfig, generate_trace


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="deepseek", choices=sorted(MODEL_PRESETS))
    ap.add_argument("--hw", default="5TF:50GBps")
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--batch", type=int, default=4096)
    ap.add_argument("--iterations", type=int, default=3)
    ap.add_argument("--drift", type=float, default=0.25)
    ap.add_argument("--accuracy", type=float, nargs="+", default=[0.0, 0.5, 0.9, 1.0])
    ap.add_argument("--kmax", type=int, nargs="+", default=[1, 2, 5])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    model = dataclasses.replace(MODEL_PRESETS[args.model], num_layers=args.layers)
    trace = generate_trace(TraceGenConfig(model, batch=args.batch, iterations=args.iterations,
                                          skew=1.0, drift=args.drift, seed=args.seed))
    mesh = make_mesh(4, 4, args.hw)
    static = pipeline.plan("node", trace.select_iterations([0]), model, mesh,
                           seed=args.seed).placement
    w = csv.writer(sys.stdout)
    w.writerow(["accuracy", "kmax", "mean_speedup", "mean_k", "guarded_steps"])
    for a in args.accuracy:
        for kmax in args.kmax:
            reps = dynamic_simulate(trace, static, DynamicPolicy(accuracy=a, max_broadcasts=kmax),
                                    model, mesh)
            w.writerow([a, kmax, f"{mean_speedup(reps):.4f}",
                        f"{sum(r.k for r in reps) / len(reps):.2f}",
                        sum(r.guard_applied for r in reps)])


if __name__ == "__main__":
    main()
