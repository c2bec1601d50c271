"""Glue shared by the command line, the experiment scripts and the tests.

Calibration sampling, planning for every strategy and trace-driven
evaluation live here so that each entry point runs the same code.
"""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import netsim, perfmodel
from .core import (ActivationTrace, LayerStats, MeshSpec, ModelSpec, NodeMapping, Placement,
                   TraceStats, derive_stats)
from .planner import (DEFAULT_REGIONS, NodeBalanceProblem, baseline_ep, baseline_hybrid_cb,
                      baseline_tp, optimize_mapping, solve_node_balance)

log = logging.getLogger(__name__)

STRATEGIES = ("tp", "ep", "hybrid-cb", "node", "node-link")
CALIBRATION_SAMPLES = 50


def component_seed(seed: int, name: str) -> int:
    """Derive an independent seed for a named component from the run seed."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------- calibration

@dataclass(frozen=True)
class CalibrationSample:
    t_comm_hat_s: float
    t_comm_sim_s: float
    tokens: int
    split_propensity: float


def random_placement(rng: np.random.Generator, E: int, D: int) -> np.ndarray:
    """Each expert is kept whole with probability 1 - q, otherwise split evenly
    over a random number of nodes; q itself is drawn per placement."""
    q = rng.random()
    P = np.zeros((E, D))
    for i in range(E):
        w = 1 if rng.random() > q else int(rng.integers(1, D + 1))
        P[i, rng.choice(D, w, replace=False)] = 1.0 / w
    return P


def calibration_samples(tokens: np.ndarray, model: ModelSpec, mesh: MeshSpec,
                        num_samples: int = CALIBRATION_SAMPLES, seed: int = 0,
                        dst_samples: int = 3, min_tokens: int = 16,
                        chunk_bytes: int = netsim.DEFAULT_CHUNK_BYTES) -> list[CalibrationSample]:
    """Pairs of (estimated, simulated) aggregation time over random placements.

    Each sample draws a random placement and a random token subset whose size
    is log-uniform in [min_tokens, N]; the simulated time is the makespan
    averaged over ``dst_samples`` aggregation-point draws.
    """
    tokens = np.asarray(tokens)
    N = len(tokens)
    lo = min(min_tokens, N)
    rng = np.random.default_rng(seed)
    out = []
    for k in range(num_samples):
        n = int(np.exp(rng.uniform(np.log(lo), np.log(N)))) if N > lo else N
        sub = tokens[np.sort(rng.choice(N, n, replace=False))]
        stats = derive_stats(ActivationTrace(sub[None, None], model.num_experts)).layer(0)
        P = random_placement(rng, model.num_experts, mesh.num_nodes)
        q = float(np.mean([(row > 0).sum() > 1 for row in P]))
        _, t_hat = perfmodel.comm_estimate(P, stats, n, model, mesh)
        sims = [netsim.simulate(netsim.build_tasks(sub, P, None, model, seed=1000 * k + s),
                                mesh, chunk_bytes).makespan_s for s in range(dst_samples)]
        out.append(CalibrationSample(t_hat, float(np.mean(sims)), n, q))
    return out


def calibrate(tokens: np.ndarray, model: ModelSpec, mesh: MeshSpec, seed: int = 0,
              num_samples: int = CALIBRATION_SAMPLES, **kw
              ) -> tuple[perfmodel.GammaFit, list[CalibrationSample]]:
    samples = calibration_samples(tokens, model, mesh, num_samples, seed, **kw)
    fit = perfmodel.calibrate_gamma((s.t_comm_hat_s, s.t_comm_sim_s) for s in samples)
    return fit, samples


# ---------------------------------------------------------------- planning

@dataclass
class PlanResult:
    strategy: str
    placement: Placement
    mapping: NodeMapping
    solve_reports: list = field(default_factory=list)
    layer_mappings: list = field(default_factory=list)   # node-link only, folded into P

    def summary(self) -> dict:
        doc = {"strategy": self.strategy, "strategy_tag": self.placement.strategy_tag,
               "layers": self.placement.num_layers}
        if self.solve_reports:
            doc["solve"] = [{"status": r.solver_status, "objective_s": r.objective_value_s,
                             "bound_s": r.relaxation_bound_s, "cap_scale": r.cap_scale,
                             "wall_time_s": r.wall_time_s, "notes": list(r.notes)}
                            for r in self.solve_reports]
        if self.layer_mappings:
            doc["layer_mappings"] = [m.tolist() for m in self.layer_mappings]
        return doc


def _solve_layer(args):
    stats, batch, model, mesh, gamma, budget = args
    return solve_node_balance(NodeBalanceProblem(stats, batch, model, mesh, gamma,
                                                 search_budget=budget))


def plan(strategy: str, trace: ActivationTrace, model: ModelSpec, mesh: MeshSpec,
         gamma: float = 1.0, seed: int = 0, threads: int = 1, search_budget: int = 400,
         mapping_budget: int = 200, stats: Optional[TraceStats] = None) -> PlanResult:
    """Build a placement for every layer of ``trace`` with the named strategy."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    if trace.num_experts != model.num_experts or trace.experts_per_token != model.experts_per_token:
        raise ValueError("trace and model disagree on expert counts")
    D = mesh.num_nodes
    stats = stats or derive_stats(trace)
    if strategy == "tp":
        P = baseline_tp(model, D).layer(0)
        return PlanResult(strategy, Placement.stack([P] * trace.num_layers, "TP"),
                          NodeMapping.identity(D))
    if strategy == "ep":
        return PlanResult(strategy, baseline_ep(model, D, stats), NodeMapping.identity(D))
    if strategy == "hybrid-cb":
        regions = DEFAULT_REGIONS.get(model.name, min(8, D))
        p, m = baseline_hybrid_cb(model, mesh, stats, regions)
        return PlanResult(strategy, p, m)

    jobs = [(stats.layer(l), trace.batch, model, mesh, gamma, search_budget)
            for l in range(trace.num_layers)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            reports = list(ex.map(_solve_layer, jobs))
    else:
        reports = [_solve_layer(j) for j in jobs]
    mats = [r.placement.layer(0) for r in reports]
    if strategy == "node":
        return PlanResult(strategy, Placement.stack(mats, "NODE_BALANCE"),
                          NodeMapping.identity(D), reports)

    # node-link: one permutation per layer, applied to the columns of that layer
    perms, physical = [], []
    for l, P in enumerate(mats):
        res = optimize_mapping(P, trace.layer_tokens(l), mesh, model, mapping_budget,
                               seed=component_seed(seed, f"mapping/{l}"))
        perm = res.mapping.perm
        Pp = np.zeros_like(P)
        Pp[:, perm] = P
        perms.append(perm)
        physical.append(Pp)
        log.info("layer %d: mapping makespan %.4g s (identity %.4g s)", l, res.objective_s,
                 res.identity_objective_s)
    return PlanResult(strategy, Placement.stack(physical, "NODE_LINK_BALANCE"),
                      NodeMapping.identity(D), reports, perms)


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class LayerEval:
    layer: int
    t_comp_s: float
    t_comm_hat_s: float
    t_comm_linear_s: float
    sim_comm_s: float                  # simulated one-way aggregation (or all-reduce) time
    analytical_s: float                # t_comp + 2 gamma t_hat
    simulated_s: float                 # t_comp + 2 * simulated comm
    per_node_compute_s: np.ndarray
    link_busy_s: Optional[np.ndarray] = None


def _physical(P: np.ndarray, mapping: NodeMapping) -> np.ndarray:
    Pp = np.zeros_like(P)
    Pp[:, mapping.perm] = P
    return Pp


def evaluate(placement: Placement, mapping: NodeMapping, trace: ActivationTrace,
             model: ModelSpec, mesh: MeshSpec, gamma: float = 1.0, seed: int = 0,
             layers: Optional[Sequence[int]] = None,
             chunk_bytes: int = netsim.DEFAULT_CHUNK_BYTES) -> list[LayerEval]:
    """Analytical and simulated latency per layer on the full trace batch of that layer.

    TP is recognised by its strategy tag and costed as a ring all-reduce.
    """
    stats = derive_stats(trace)
    B = trace.iterations * trace.batch
    layers = range(trace.num_layers) if layers is None else layers
    is_tp = placement.strategy_tag == "TP"
    out = []
    for l in layers:
        P = np.asarray(placement.layer(l), dtype=float)
        ls: LayerStats = stats.layer(l)
        per_comp, t_comp = perfmodel.compute_time(P, ls, B, model, mesh)
        link_busy = None
        if is_tp:
            bd = perfmodel.tp_overhead(P, ls, B, model, mesh)
            t_hat, t_lin = bd.t_comm_hat_s, bd.t_comm_hat_s
            sim = netsim.simulate_ring_allreduce(mesh, model.bytes_per_activation * B * model.hidden_size)
            analytical = bd.t_node_overhead_s
        else:
            _, t_hat = perfmodel.comm_estimate(P, ls, B, model, mesh)
            t_lin = perfmodel.linearized_comm(P, ls, B, model, mesh)
            tasks = netsim.build_tasks(trace.layer_tokens(l), _physical(P, mapping), None, model,
                                       seed=component_seed(seed, f"dst/{l}"))
            rep = netsim.simulate(tasks, mesh, chunk_bytes)
            sim, link_busy = rep.makespan_s, rep.per_link_busy_s
            analytical = t_comp + 2.0 * gamma * t_hat
        out.append(LayerEval(l, t_comp, t_hat, t_lin, sim, analytical, t_comp + 2.0 * sim,
                             per_comp, link_busy))
    return out


def totals(evals: Sequence[LayerEval]) -> dict:
    return {"t_comp_s": float(sum(e.t_comp_s for e in evals)),
            "t_comm_s": float(sum(2.0 * e.sim_comm_s for e in evals)),
            "analytical_s": float(sum(e.analytical_s for e in evals)),
            "simulated_s": float(sum(e.simulated_s for e in evals))}
