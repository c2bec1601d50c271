"""Makespan gain of the cluster-to-node mapping search over identity.

Runs on node-balance placements of a generated trace and, with --planted,
on an instance whose two hot cluster pairs sit far apart under identity.
"""

import argparse
import csv
import dataclasses
import logging
import sys

import numpy as np

from moeplace import pipeline
from moeplace.core import MODEL_PRESETS, ModelSpec, make_mesh
from moeplace.planner import optimize_mapping
from moeplace.trace import TraceGenConfig, generate_trace


def planted(seed):
    rng = np.random.default_rng(seed)
    tokens = np.concatenate([np.tile([[0, 3]], (200, 1)), np.tile([[1, 2]], (200, 1)),
                             np.array([rng.choice(16, 2, replace=False) for _ in range(100)])])
    return ModelSpec("toy", 16, 2, 256, 256, 1), tokens, np.eye(16)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="deepseek", choices=sorted(MODEL_PRESETS))
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--budget", type=int, nargs="+", default=[50, 100, 200])
    ap.add_argument("--planted", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    mesh = make_mesh(4, 4)
    cases = []
    if args.planted:
        model, tokens, P = planted(args.seed)
        cases.append(("planted", model, tokens, P))
    else:
        model = dataclasses.replace(MODEL_PRESETS[args.model], num_layers=args.layers)
        trace = generate_trace(TraceGenConfig(model, batch=args.batch, iterations=1, skew=1.0,
                                              seed=args.seed))
        plan = pipeline.plan("node", trace, model, mesh, seed=args.seed)
        for l in range(trace.num_layers):
            cases.append((f"layer{l}", model, trace.layer_tokens(l), plan.placement.layer(l)))

    w = csv.writer(sys.stdout)
    w.writerow(["case", "budget", "identity_s", "best_s", "gain", "evaluations"])
    for name, model, tokens, P in cases:
        for budget in args.budget:
            res = optimize_mapping(P, tokens, mesh, model, eval_budget=budget, seed=args.seed)
            w.writerow([name, budget, f"{res.identity_objective_s:.6g}", f"{res.objective_s:.6g}",
                        f"{res.identity_objective_s / res.objective_s:.4f}", res.evaluations])
            sys.stdout.flush()


if __name__ == "__main__":
    main()
