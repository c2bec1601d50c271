"""Command line: trace generation, calibration, planning, simulation and reports.

Every JSON output carries a ``config`` block with the fully resolved inputs,
so any run can be repeated from its own output. Failures print a JSON error
envelope on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import re
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import netsim, pipeline
from .core import (DEFAULT_HOP_LATENCY_S, MODEL_PRESETS, MeshSpec, ModelSpec, NodeMapping,
                   derive_stats, load_mapping, load_placement, validate_placement, write_mapping,
                   write_placement)
from .dynamic import DynamicPolicy, dynamic_simulate, mean_speedup
from .trace import TraceGenConfig, generate_trace, load_trace, write_trace

log = logging.getLogger("moeplace")

_HW_RE = re.compile(r"^(?P<tf>[0-9.]+)TF:(?P<gb>[0-9.]+)GBps(?::(?P<ns>[0-9.]+)ns)?$")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# ---------------------------------------------------------------- parsing helpers

def parse_mesh(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text.strip())
    if not m:
        raise CliError(f"bad mesh {text!r}; expected RxC such as 4x4")
    return int(m.group(1)), int(m.group(2))


def parse_hw(text: str) -> tuple[float, float, float]:
    """'5TF:50GBps[:10ns]' -> (FLOP/s, B/s, per-hop latency s)."""
    m = _HW_RE.fullmatch(text.strip())
    if not m:
        raise CliError(f"bad hardware profile {text!r}; expected <tflops>TF:<GBps>GBps[:<alpha_ns>ns]")
    alpha = float(m.group("ns")) * 1e-9 if m.group("ns") else DEFAULT_HOP_LATENCY_S
    return float(m.group("tf")) * 1e12, float(m.group("gb")) * 1e9, alpha


def resolve_model(name: str, layers: Optional[int] = None) -> ModelSpec:
    if name in MODEL_PRESETS:
        model = MODEL_PRESETS[name]
    else:
        path = Path(name)
        if not path.exists():
            raise CliError(f"unknown model {name!r}; presets: {', '.join(MODEL_PRESETS)}")
        model = ModelSpec(**json.loads(path.read_text()))
    if layers is not None:
        model = dataclasses.replace(model, num_layers=layers)
    return model


def resolve_mesh(mesh: str, hw: str) -> MeshSpec:
    rows, cols = parse_mesh(mesh)
    comp, bw, alpha = parse_hw(hw)
    return MeshSpec(rows, cols, bw, alpha, comp)


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _out_path(args, default_name: str) -> Path:
    path = Path(args.output) if getattr(args, "output", None) else Path(default_name)
    if not path.is_absolute():
        path = Path(args.out_dir) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _side_path(args, name: str) -> Path:
    path = Path(args.out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(_jsonable(doc), indent=1, sort_keys=True))


def _write_csv(path: Path, rows: list[dict], fields: Optional[list[str]] = None) -> None:
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _base_config(args, **extra) -> dict:
    cfg = {"command": args.command, "seed": args.seed, "threads": args.threads}
    for key in ("trace", "placement", "mapping", "mesh", "hw", "strategy", "gamma"):
        if hasattr(args, key):
            cfg[key] = getattr(args, key)
    cfg.update(extra)
    return cfg


def _load_inputs(args):
    trace = load_trace(args.trace)
    model = resolve_model(args.model)
    if trace.num_experts != model.num_experts or trace.experts_per_token != model.experts_per_token:
        raise CliError(f"trace ({trace.num_experts} experts, {trace.experts_per_token} per token) "
                       f"does not match model {model.name!r}")
    if trace.num_layers != model.num_layers:
        model = dataclasses.replace(model, num_layers=trace.num_layers)
    return trace, model, resolve_mesh(args.mesh, args.hw)


def _resolve_gamma(args, trace, model, mesh) -> tuple[float, Optional[dict]]:
    if args.gamma == "auto":
        fit, samples = pipeline.calibrate(trace.layer_tokens(0), model, mesh,
                                          seed=pipeline.component_seed(args.seed, "calibrate"))
        return fit.gamma, {"gamma": fit.gamma, "r_squared": fit.r_squared,
                           "samples": fit.sample_count}
    try:
        g = float(args.gamma)
    except ValueError:
        raise CliError(f"--gamma must be 'auto' or a number, got {args.gamma!r}") from None
    if g <= 0:
        raise CliError("--gamma must be positive")
    return g, None


# ---------------------------------------------------------------- tables shared with report

def scatter_rows(samples) -> list[dict]:
    return [{"sample": k, "t_comm_hat_s": s["t_comm_hat_s"], "t_comm_sim_s": s["t_comm_sim_s"],
             "tokens": s["tokens"]} for k, s in enumerate(samples)]


def node_load_rows(per_node: dict) -> list[dict]:
    rows = []
    for strategy, loads in per_node.items():
        for node, v in enumerate(loads):
            rows.append({"strategy": strategy, "node": node, "compute_s": v})
    return rows


# ---------------------------------------------------------------- commands

def cmd_gen_trace(args) -> dict:
    model = resolve_model(args.model, args.layers)
    cfg = TraceGenConfig(model, batch=args.batch, iterations=args.iterations, skew=args.skew,
                         affinity_strength=args.affinity, layer_locality=args.locality,
                         drift=args.drift, seed=pipeline.component_seed(args.seed, "trace"))
    trace = generate_trace(cfg)
    path = _out_path(args, "trace.jsonl")
    config = _base_config(args, model=model, generator=dataclasses.asdict(cfg))
    write_trace(path, trace, {"config": _jsonable(config)})
    return {"output": str(path), "config": config}


def cmd_calibrate(args) -> dict:
    trace, model, mesh = _load_inputs(args)
    if not 0 <= args.layer < trace.num_layers:
        raise CliError(f"--layer {args.layer} outside trace with {trace.num_layers} layers")
    fit, samples = pipeline.calibrate(trace.layer_tokens(args.layer), model, mesh,
                                      seed=pipeline.component_seed(args.seed, "calibrate"),
                                      num_samples=args.samples)
    doc = {"kind": "calibration", "gamma": fit.gamma, "r_squared": fit.r_squared,
           "sample_count": fit.sample_count, "samples": [dataclasses.asdict(s) for s in samples],
           "config": _base_config(args, model=model, mesh=mesh, layer=args.layer)}
    path = _out_path(args, "calibration.json")
    _write_json(path, doc)
    _write_csv(_side_path(args, "gamma_scatter.csv"), scatter_rows(doc["samples"]))
    return {"output": str(path), "gamma": fit.gamma, "r_squared": fit.r_squared}


def cmd_plan(args) -> dict:
    trace, model, mesh = _load_inputs(args)
    gamma, calib = _resolve_gamma(args, trace, model, mesh)
    res = pipeline.plan(args.strategy, trace, model, mesh, gamma, seed=args.seed,
                        threads=args.threads, search_budget=args.search_budget,
                        mapping_budget=args.mapping_budget)
    problems = validate_placement(res.placement, model, mesh)
    if problems:
        raise CliError("emitted placement is invalid: " + "; ".join(problems[:5]))
    config = _base_config(args, model=model, mesh=mesh, gamma_value=gamma, calibration=calib,
                          search_budget=args.search_budget, mapping_budget=args.mapping_budget)
    path = _out_path(args, "placement.json")
    write_placement(path, res.placement, {"config": _jsonable(config), "plan": _jsonable(res.summary())})
    map_path = Path(args.mapping_out) if args.mapping_out else path.with_name(path.stem + ".mapping.json")
    write_mapping(map_path, res.mapping, mesh, {"config": _jsonable(config)})
    return {"output": str(path), "mapping": str(map_path), "gamma": gamma}


def cmd_simulate(args) -> dict:
    trace, model, mesh = _load_inputs(args)
    placement = load_placement(args.placement)
    mapping = load_mapping(args.mapping) if args.mapping else NodeMapping.identity(mesh.num_nodes)
    if placement.num_nodes != mesh.num_nodes or len(mapping.perm) != mesh.num_nodes:
        raise CliError("placement/mapping node count does not match the mesh")
    gamma = float(args.gamma) if args.gamma not in (None, "auto") else 1.0
    evals = pipeline.evaluate(placement, mapping, trace, model, mesh, gamma,
                              seed=pipeline.component_seed(args.seed, "simulate"))
    busy = np.sum([e.link_busy_s for e in evals if e.link_busy_s is not None], axis=0) \
        if any(e.link_busy_s is not None for e in evals) else np.zeros(mesh.num_nodes * 4)
    span = sum(e.sim_comm_s for e in evals)
    report = netsim.SimReport(span, np.asarray(busy), np.zeros(mesh.num_nodes),
                              np.zeros(mesh.num_nodes), np.zeros(0))
    heat = netsim.link_heatmap_rows(report, mesh)
    loads = np.sum([e.per_node_compute_s for e in evals], axis=0)
    doc = {"kind": "simulation", "strategy_tag": placement.strategy_tag,
           "totals": pipeline.totals(evals),
           "layers": [{"layer": e.layer, "t_comp_s": e.t_comp_s, "t_comm_hat_s": e.t_comm_hat_s,
                       "sim_comm_s": e.sim_comm_s, "analytical_s": e.analytical_s,
                       "simulated_s": e.simulated_s} for e in evals],
           "node_loads": {placement.strategy_tag: loads}, "heatmap": heat,
           "config": _base_config(args, model=model, mesh=mesh)}
    path = _out_path(args, "simulation.json")
    _write_json(path, doc)
    _write_csv(_side_path(args, "link_heatmap.csv"), heat)
    _write_csv(_side_path(args, "node_loads.csv"), node_load_rows(doc["node_loads"]))
    return {"output": str(path), **doc["totals"]}


def dynamic_rows(reports) -> list[dict]:
    return [{"iteration": r.iteration, "layer": r.layer, "k": r.k,
             "static_latency_s": r.static_latency_s, "dynamic_latency_s": r.dynamic_latency_s,
             "static_max_load_s": r.static_max_load_s, "dynamic_max_load_s": r.dynamic_max_load_s,
             "t_pre_b_s": r.t_pre_b_s, "budget_s": r.budget_s} for r in reports]


def cmd_dynamic_sim(args) -> dict:
    trace, model, mesh = _load_inputs(args)
    placement = load_placement(args.placement)
    if args.mapping:
        # the dynamic latency model is topology-free; the mapping is only checked and recorded
        if len(load_mapping(args.mapping).perm) != mesh.num_nodes:
            raise CliError("mapping node count does not match the mesh")
    gamma = float(args.gamma)
    policy = DynamicPolicy(accuracy=args.accuracy, enabled=args.enable_dynamic == "on",
                           max_broadcasts=args.max_broadcasts)
    reports = dynamic_simulate(trace, placement, policy, model, mesh, gamma)
    rows = dynamic_rows(reports)
    doc = {"kind": "dynamic", "mean_speedup": mean_speedup(reports), "steps": rows,
           "broadcasts": [r.broadcasts for r in reports],
           "config": _base_config(args, model=model, mesh=mesh, policy=policy)}
    path = _out_path(args, "dynamic.json")
    _write_json(path, doc)
    _write_csv(_side_path(args, "dynamic_pairs.csv"), rows)
    return {"output": str(path), "mean_speedup": doc["mean_speedup"]}


def compare_tables(results: list[dict]) -> tuple[list[dict], list[dict]]:
    """Normalized TBT rows (TP = 1 per hardware profile) and decomposed latency rows."""
    norm, decomp = [], []
    for r in results:
        tp = r["tp_totals"]
        norm.append({"hw": r["hw"], "strategy": r["strategy"],
                     "simulated_s": r["totals"]["simulated_s"],
                     "normalized_tbt": r["totals"]["simulated_s"] / tp["simulated_s"],
                     "analytical_s": r["totals"]["analytical_s"],
                     "normalized_analytical": r["totals"]["analytical_s"] / tp["analytical_s"]})
        decomp.append({"hw": r["hw"], "strategy": r["strategy"],
                       "compute_s": r["totals"]["t_comp_s"], "comm_s": r["totals"]["t_comm_s"]})
    return norm, decomp


def cmd_compare(args) -> dict:
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if len(strategies) < 2:
        raise CliError("compare needs at least two strategies")
    for s in strategies:
        if s not in pipeline.STRATEGIES:
            raise CliError(f"unknown strategy {s!r}")
    hws = args.hw_list or [args.hw]
    results, node_loads = [], {}
    cache = {}
    for hw in hws:
        args.hw = hw
        trace, model, mesh = _load_inputs(args)
        gamma, calib = _resolve_gamma(args, trace, model, mesh)
        for s in dict.fromkeys(["tp"] + strategies):
            res = pipeline.plan(s, trace, model, mesh, gamma, seed=args.seed, threads=args.threads,
                                search_budget=args.search_budget, mapping_budget=args.mapping_budget)
            evals = pipeline.evaluate(res.placement, res.mapping, trace, model, mesh, gamma,
                                      seed=pipeline.component_seed(args.seed, "simulate"))
            cache[(hw, s)] = (pipeline.totals(evals), evals)
            node_loads[f"{hw}/{s}"] = np.sum([e.per_node_compute_s for e in evals], axis=0)
        for s in strategies:
            results.append({"hw": hw, "strategy": s, "gamma": gamma, "calibration": calib,
                            "totals": cache[(hw, s)][0], "tp_totals": cache[(hw, "tp")][0]})
    norm, decomp = compare_tables(results)
    doc = {"kind": "compare", "normalized_tbt": norm, "decomposed": decomp,
           "node_loads": node_loads,
           "config": _base_config(args, hw=hws, strategies=strategies, model=args.model,
                                  search_budget=args.search_budget,
                                  mapping_budget=args.mapping_budget)}
    path = _out_path(args, "compare.json")
    _write_json(path, doc)
    _write_csv(_side_path(args, "normalized_tbt.csv"), norm)
    _write_csv(_side_path(args, "decomposed_latency.csv"), decomp)
    return {"output": str(path), "normalized_tbt": norm}


def cmd_report(args) -> dict:
    inputs = [p for p in (args.calibration, args.compare, args.simulation, args.dynamic) if p]
    if not inputs:
        raise CliError("report needs at least one input (--calibration, --compare, "
                       "--simulation, --dynamic)")
    missing = [p for p in inputs if not Path(p).exists()]
    if missing:
        raise CliError("missing inputs: " + ", ".join(missing))
    written = []

    def emit(name, rows):
        path = _side_path(args, name)
        _write_csv(path, rows)
        written.append(str(path))

    if args.calibration:
        doc = json.loads(Path(args.calibration).read_text())
        emit("report/gamma_scatter.csv", scatter_rows(doc["samples"]))
    if args.compare:
        doc = json.loads(Path(args.compare).read_text())
        emit("report/speedup.csv", [
            {**r, "speedup_vs_tp": 1.0 / r["normalized_tbt"]} for r in doc["normalized_tbt"]])
        emit("report/decomposed_latency.csv", doc["decomposed"])
        emit("report/node_loads.csv", node_load_rows(doc["node_loads"]))
    if args.simulation:
        doc = json.loads(Path(args.simulation).read_text())
        emit("report/link_heatmap.csv", doc["heatmap"])
        emit("report/sim_node_loads.csv", node_load_rows(doc["node_loads"]))
    if args.dynamic:
        doc = json.loads(Path(args.dynamic).read_text())
        emit("report/dynamic_pairs.csv", doc["steps"])
    index = _side_path(args, "report/index.json")
    _write_json(index, {"kind": "report", "files": written,
                        "config": _base_config(args, inputs=inputs)})
    return {"output": str(index), "files": written}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="moeplace", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out-dir", default=".")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, placement=False):
        sp.add_argument("--trace", required=True)
        sp.add_argument("--model", default="deepseek")
        sp.add_argument("--mesh", default="4x4")
        sp.add_argument("--hw", default="5TF:50GBps")
        sp.add_argument("-o", "--output")
        if placement:
            sp.add_argument("--placement", required=True)
            sp.add_argument("--mapping")

    g = sub.add_parser("gen-trace", help="generate a seeded synthetic trace")
    g.add_argument("--model", default="deepseek")
    g.add_argument("--layers", type=int, help="override the model's layer count")
    g.add_argument("--batch", type=int, default=512)
    g.add_argument("--iterations", type=int, default=4)
    g.add_argument("--skew", type=float, default=1.0)
    g.add_argument("--affinity", type=float, default=0.3)
    g.add_argument("--locality", type=float, default=0.3)
    g.add_argument("--drift", type=float, default=0.0)
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_gen_trace)

    c = sub.add_parser("calibrate", help="fit gamma against the simulator")
    common(c)
    c.add_argument("--samples", type=int, default=pipeline.CALIBRATION_SAMPLES)
    c.add_argument("--layer", type=int, default=0)
    c.set_defaults(func=cmd_calibrate)

    pl = sub.add_parser("plan", help="build a placement")
    common(pl)
    pl.add_argument("--strategy", choices=pipeline.STRATEGIES, default="node-link")
    pl.add_argument("--gamma", default="1.0", help="'auto' or a positive number")
    pl.add_argument("--search-budget", type=int, default=400)
    pl.add_argument("--mapping-budget", type=int, default=200)
    pl.add_argument("--mapping-out")
    pl.set_defaults(func=cmd_plan)

    s = sub.add_parser("simulate", help="simulate a placement on a trace")
    common(s, placement=True)
    s.add_argument("--gamma", default="1.0")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("dynamic-sim", help="static vs dynamic replication per layer")
    common(d, placement=True)
    d.add_argument("--accuracy", type=float, default=0.9)
    d.add_argument("--enable-dynamic", choices=("on", "off"), default="on")
    d.add_argument("--max-broadcasts", type=int)
    d.add_argument("--gamma", type=float, default=1.0)
    d.set_defaults(func=cmd_dynamic_sim)

    cm = sub.add_parser("compare", help="plan and evaluate several strategies")
    common(cm)
    cm.add_argument("--strategies", default="tp,ep,hybrid-cb,node,node-link")
    cm.add_argument("--hw-list", nargs="+", help="several hardware profiles (overrides --hw)")
    cm.add_argument("--gamma", default="1.0")
    cm.add_argument("--search-budget", type=int, default=400)
    cm.add_argument("--mapping-budget", type=int, default=200)
    cm.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", help="export figure data from earlier outputs")
    r.add_argument("--calibration")
    r.add_argument("--compare")
    r.add_argument("--simulation")
    r.add_argument("--dynamic")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        t0 = time.perf_counter()
        result = args.func(args)
        result["wall_time_s"] = time.perf_counter() - t0
        print(json.dumps(_jsonable(result)))
        return 0
    except Exception as exc:   # every failure becomes an envelope
        log.debug("command failed", exc_info=True)
        env = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(env), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
