"""Normalized MoE-layer latency of every strategy across hardware profiles.

Prints one CSV row per (model, profile, strategy). Latency is the simulated
compute plus aggregation time summed over layers, divided by TP's.
"""

import argparse
import csv
import dataclasses
import logging
import sys

from moeplace import pipeline
from moeplace.core import HARDWARE_PROFILES, MODEL_PRESETS, make_mesh
from moeplace.trace import TraceGenConfig, generate_trace


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--models", nargs="+", default=["mixtral", "deepseek", "qwen"])
    ap.add_argument("--profiles", nargs="+", default=list(HARDWARE_PROFILES))
    ap.add_argument("--mesh", type=int, nargs=2, default=(4, 4), metavar=("ROWS", "COLS"))
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--batch", type=int, default=512)
    ap.add_argument("--skew", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    w = csv.writer(sys.stdout)
    w.writerow(["model", "hw", "strategy", "t_comp_s", "t_comm_s", "simulated_s", "normalized_tbt"])
    for name in args.models:
        model = dataclasses.replace(MODEL_PRESETS[name], num_layers=args.layers)
        trace = generate_trace(TraceGenConfig(model, batch=args.batch, iterations=1,
                                              skew=args.skew, seed=args.seed))
        for hw in args.profiles:
            mesh = make_mesh(*args.mesh, hw)
            rows = {}
            for s in pipeline.STRATEGIES:
                res = pipeline.plan(s, trace, model, mesh, seed=args.seed, threads=args.threads)
                evals = pipeline.evaluate(res.placement, res.mapping, trace, model, mesh,
                                          seed=pipeline.component_seed(args.seed, "simulate"))
                rows[s] = pipeline.totals(evals)
            tp = rows["tp"]["simulated_s"]
            for s, t in rows.items():
                w.writerow([name, hw, s, f"{t['t_comp_s']:.6g}", f"{t['t_comm_s']:.6g}",
                            f"{t['simulated_s']:.6g}", f"{t['simulated_s'] / tp:.4f}"])
            sys.stdout.flush()


if __name__ == "__main__":
    main()
