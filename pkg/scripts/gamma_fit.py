"""Fit gamma against the simulator over several sampling seeds and print R^2."""

import argparse
import csv
import dataclasses
import logging
import sys

from moeplace import pipeline
from moeplace.core import MODEL_PRESETS, make_mesh
from moeplace.trace import TraceGenConfig, generate_trace


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="deepseek", choices=sorted(MODEL_PRESETS))
    ap.add_argument("--mesh", type=int, nargs=2, default=(4, 4), metavar=("ROWS", "COLS"))
    ap.add_argument("--hw", default="5TF:50GBps")
    ap.add_argument("--batch", type=int, default=512)
    ap.add_argument("--samples", type=int, default=pipeline.CALIBRATION_SAMPLES)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--scatter", help="write the samples of the first seed to this CSV")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    model = dataclasses.replace(MODEL_PRESETS[args.model], num_layers=1)
    trace = generate_trace(TraceGenConfig(model, batch=args.batch, iterations=1, skew=1.0))
    mesh = make_mesh(*args.mesh, args.hw)
    w = csv.writer(sys.stdout)
    w.writerow(["seed", "gamma", "r_squared", "samples"])
    for seed in range(args.seeds):
        fit, samples = pipeline.calibrate(trace.layer_tokens(0), model, mesh,
                                          seed=pipeline.component_seed(seed, "calibrate"),
                                          num_samples=args.samples)
        w.writerow([seed, f"{fit.gamma:.4f}", f"{fit.r_squared:.4f}", fit.sample_count])
        if seed == 0 and args.scatter:
            with open(args.scatter, "w", newline="") as fh:
                sw = csv.writer(fh)
                sw.writerow(["t_comm_hat_s", "t_comm_sim_s", "tokens", "split_propensity"])
                for s in samples:
                    sw.writerow([s.t_comm_hat_s, s.t_comm_sim_s, s.tokens, s.split_propensity])


if __name__ == "__main__":
    main()
