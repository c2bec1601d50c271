"""Online expert replication and load-aware token dispatch.

While layer l-1 executes, the hottest experts predicted for layer l are
broadcast to every node. Tokens of layer l that activate a broadcast expert
are then dispatched to the least-loaded node among those already taking part
in the token, so no extra aggregation traffic is created. Broadcast cost
follows an alpha-beta model with pipelined chunks; replicas are dropped once
the layer finishes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import EPS_PLACE, ActivationTrace, MeshSpec, ModelSpec, Placement

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DynamicPolicy:
    accuracy: float = 0.9
    alpha: Optional[float] = None        # per-hop latency (s); defaults to the mesh value
    beta: Optional[float] = None         # s/byte; defaults to 1 / link bandwidth
    bytes_per_weight: int = 4
    enabled: bool = True
    max_broadcasts: Optional[int] = None
    broadcast_bytes: Optional[float] = None   # message size override; defaults to one expert

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        if (self.alpha is not None and self.alpha < 0) or (self.beta is not None and self.beta < 0):
            raise ValueError("alpha and beta must be nonnegative")
        if self.max_broadcasts is not None and self.max_broadcasts < 0:
            raise ValueError("max_broadcasts must be >= 0")
        if self.broadcast_bytes is not None and self.broadcast_bytes <= 0:
            raise ValueError("broadcast_bytes must be positive")

    def resolved(self, mesh: MeshSpec) -> tuple[float, float]:
        alpha = mesh.per_hop_latency_s if self.alpha is None else self.alpha
        beta = 1.0 / mesh.link_bandwidth_Bps if self.beta is None else self.beta
        return alpha, beta

    def expert_bytes(self, model: ModelSpec) -> int:
        return model.expert_bytes(self.bytes_per_weight)

    def message_bytes(self, model: ModelSpec) -> float:
        return float(self.expert_bytes(model) if self.broadcast_bytes is None else self.broadcast_bytes)


@dataclass
class DynamicStepReport:
    iteration: int
    layer: int
    budget_s: float                      # latency of the layer the broadcast overlaps with
    k: int
    chunk_bytes: float
    t_pre_b_s: float
    broadcasts: list[tuple[int, int]] = field(default_factory=list)   # (expert, selected node)
    static_latency_s: float = 0.0
    dynamic_latency_s: float = 0.0
    static_max_load_s: float = 0.0
    dynamic_max_load_s: float = 0.0
    static_comm_bytes: float = 0.0
    dynamic_comm_bytes: float = 0.0
    guard_applied: bool = False          # dispatch result was worse than static and discarded

    @property
    def speedup(self) -> float:
        return self.static_latency_s / self.dynamic_latency_s if self.dynamic_latency_s > 0 else 1.0


def predict_frequencies(f_next: np.ndarray, accuracy: float, experts_per_token: int) -> np.ndarray:
    """Blend of the true next-layer frequencies and the uniform prior e/E."""
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError("accuracy must lie in [0, 1]")
    f_next = np.asarray(f_next, dtype=float)
    return accuracy * f_next + (1.0 - accuracy) * experts_per_token / len(f_next)


def priority_scores(P: np.ndarray, f_hat: np.ndarray, model: ModelSpec, mesh: MeshSpec
                    ) -> tuple[np.ndarray, tuple[int, int]]:
    """prio[i, c] = 2 P[i, c] f_hat[i] IS / comp, and the pick on the most loaded node."""
    P = np.asarray(P, dtype=float)
    f_hat = np.asarray(f_hat, dtype=float)
    scores = 2.0 * P * f_hat[:, None] * model.intermediate_size / mesh.node_compute_flops
    node = int(np.argmax(f_hat @ P))
    expert = int(np.argmax(scores[:, node]))
    return scores, (expert, node)


def t_pre_b(c: float, k: int, alpha: float, beta: float, D: int, size: float) -> float:
    """Cost of k pipelined broadcasts of ``size`` bytes in chunks of c bytes."""
    sq = math.sqrt(D)
    return alpha * (2.0 * sq + size / c) + k * beta * (size + 2.0 * c * sq)


def optimal_chunk(alpha: float, beta: float, k: int, D: int, h: int, IS: int,
                  bytes_per_element: float = 1.0) -> tuple[float, float, float]:
    """(c_star, lower bound, t_pre_b at c_star); the message is h*IS*bytes_per_element bytes."""
    if min(alpha, beta, k, D, h, IS, bytes_per_element) <= 0:
        raise ValueError("optimal_chunk inputs must be positive")
    S = h * IS * bytes_per_element
    sq = math.sqrt(D)
    c_star = math.sqrt(alpha * S / (2.0 * beta * k * sq))
    bound = S * beta * k + 2.0 * alpha * sq + 2.0 * math.sqrt(2.0 * sq * beta * k * alpha * S)
    return c_star, bound, t_pre_b(c_star, k, alpha, beta, D, S)


def _broadcast_cost(k: int, policy: DynamicPolicy, mesh: MeshSpec, model: ModelSpec
                    ) -> tuple[float, float]:
    alpha, beta = policy.resolved(mesh)
    S = policy.message_bytes(model)
    if alpha <= 0 or beta <= 0:
        # degenerate cost model: one term vanishes, any chunk size works
        return S, t_pre_b(S, k, alpha, beta, mesh.num_nodes, S)
    c, _, t = optimal_chunk(alpha, beta, k, mesh.num_nodes, S, 1)
    return c, t


def broadcast_budget(prev_layer_latency_s: float, policy: DynamicPolicy, mesh: MeshSpec,
                     model: ModelSpec, k_max: Optional[int] = None) -> int:
    """Largest k whose optimally chunked broadcast fits in the previous layer's latency."""
    if prev_layer_latency_s < 0:
        raise ValueError("latency must be nonnegative")
    k_max = model.num_experts if k_max is None else k_max
    if policy.max_broadcasts is not None:
        k_max = min(k_max, policy.max_broadcasts)

    def fits(k):
        return _broadcast_cost(k, policy, mesh, model)[1] <= prev_layer_latency_s

    # t_pre_b(c_star(k), k) grows with k, so bisection is exact
    if k_max < 1 or not fits(1):
        return 0
    lo, hi = 1, k_max
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def dispatch(token_expert_sets: Sequence[Sequence[int]], replica_map: Mapping[int, Sequence[int]],
             node_loads: Sequence[float], unit: float = 1.0,
             allowed: Optional[Sequence[Sequence[int]]] = None) -> list[dict[int, int]]:
    """Greedy least-loaded assignment of each (token, expert) to a replica holder.

    Returns one {expert: node} dict per token. ``node_loads`` is the starting
    load per node; each assignment adds ``unit``. When ``allowed`` is given,
    token t may only use nodes in ``allowed[t]``.
    """
    loads = np.array(node_loads, dtype=float)
    out = []
    for t, experts in enumerate(token_expert_sets):
        choice = {}
        for i in experts:
            cands = sorted(replica_map.get(int(i), ()))
            if allowed is not None:
                ok = set(allowed[t])
                cands = [c for c in cands if c in ok]
            if not cands:
                raise ValueError(f"unplaced expert {int(i)}")
            c = min(cands, key=lambda n: (loads[n], n))
            loads[c] += unit
            choice[int(i)] = c
        out.append(choice)
    return out


def _token_latency(work: np.ndarray, involved: np.ndarray, model: ModelSpec, mesh: MeshSpec,
                   gamma: float) -> tuple[float, float, float, float]:
    """(latency, max load, total comm bytes, t_comm_hat) of one layer step.

    ``work`` is the per-node compute time; ``involved`` the (N, D) bool matrix
    of nodes doing work for each token. Every involved node of a token that
    spans more than one node sends one partial result.
    """
    size = model.hidden_size * model.bytes_per_activation
    multi = involved.sum(axis=1) > 1
    per_node = involved[multi].sum(axis=0) * size
    t_hat = float(per_node.max()) / mesh.link_bandwidth_Bps if per_node.size else 0.0
    t_comp = float(work.max())
    return t_comp + 2.0 * gamma * t_hat, t_comp, float(per_node.sum()), t_hat


def _static_step(P: np.ndarray, tokens: np.ndarray, unit: float):
    Z = P > EPS_PLACE
    involved = Z[tokens].any(axis=1)
    counts = np.bincount(tokens.ravel(), minlength=P.shape[0])
    work = counts @ P * unit
    return work, involved


def _dynamic_step(P: np.ndarray, tokens: np.ndarray, unit: float, broadcast: Sequence[int],
                  static_involved: np.ndarray):
    E, D = P.shape
    bset = np.zeros(E, dtype=bool)
    bset[list(broadcast)] = True
    # work of non-broadcast experts stays on its static shares
    counts = np.bincount(tokens.ravel(), minlength=E).astype(float)
    counts[bset] = 0.0
    work = counts @ P * unit
    involved = np.zeros_like(static_involved)
    Z = P > EPS_PLACE
    fixed_tokens = np.where(bset[tokens], -1, tokens)
    for t in range(len(tokens)):
        ids = fixed_tokens[t][fixed_tokens[t] >= 0]
        if len(ids):
            involved[t] = Z[ids].any(axis=0)
    everywhere = {int(i): range(D) for i in broadcast}
    sel_rows = np.flatnonzero(bset[tokens].any(axis=1))
    sets = [[int(i) for i in tokens[t] if bset[i]] for t in sel_rows]
    allowed = [np.flatnonzero(static_involved[t]).tolist() for t in sel_rows]
    choices = dispatch(sets, everywhere, work, unit, allowed)
    for t, ch in zip(sel_rows, choices):
        for i, c in ch.items():
            work[c] += unit
            involved[t, c] = True
    return work, involved


def dynamic_simulate(trace: ActivationTrace, placement: Placement, policy: DynamicPolicy,
                     model: ModelSpec, mesh: MeshSpec, gamma: float = 1.0
                     ) -> list[DynamicStepReport]:
    """Replay the trace layer by layer with and without online replication.

    Steps run over (iteration, layer) in order. The broadcast budget of a step
    is the dynamic latency of the step before it; the first step gets none.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    D = mesh.num_nodes
    if placement.num_nodes != D:
        raise ValueError("placement and mesh disagree on node count")
    if placement.num_experts != trace.num_experts:
        raise ValueError("placement and trace disagree on expert count")
    unit = model.flops_per_token() / mesh.node_compute_flops
    e, E = trace.experts_per_token, trace.num_experts
    reports = []
    prev = 0.0
    for it in range(trace.iterations):
        for layer in range(trace.num_layers):
            P = np.asarray(placement.layer(layer), dtype=float)
            tokens = trace.experts[it, layer].astype(np.int64)
            work_s, inv_s = _static_step(P, tokens, unit)
            lat_s, max_s, bytes_s, _ = _token_latency(work_s, inv_s, model, mesh, gamma)

            k = broadcast_budget(prev, policy, mesh, model) if policy.enabled else 0
            picks: list[tuple[int, int]] = []
            if k:
                f_next = np.bincount(tokens.ravel(), minlength=E) / len(tokens)
                f_hat = predict_frequencies(f_next, policy.accuracy, e)
                Pw = P.copy()
                for _ in range(k):
                    scores, (i, c) = priority_scores(Pw, f_hat, model, mesh)
                    if picks and i in {p[0] for p in picks}:
                        col = scores[:, c].copy()
                        col[[p[0] for p in picks]] = -1.0
                        i = int(np.argmax(col))
                        if col[i] <= 0:
                            break
                    picks.append((i, c))
                    Pw[i] = 1.0 / D
            chunk, cost = _broadcast_cost(len(picks), policy, mesh, model) if picks else (0.0, 0.0)
            rep = DynamicStepReport(it, layer, prev, len(picks), chunk, cost, picks,
                                    static_latency_s=lat_s, static_max_load_s=max_s,
                                    static_comm_bytes=bytes_s)
            if picks:
                work_d, inv_d = _dynamic_step(P, tokens, unit, [p[0] for p in picks], inv_s)
                lat_d, max_d, bytes_d, _ = _token_latency(work_d, inv_d, model, mesh, gamma)
                if lat_d > lat_s or max_d > max_s:
                    rep.guard_applied = True
                    lat_d, max_d, bytes_d = lat_s, max_s, bytes_s
            else:
                lat_d, max_d, bytes_d = lat_s, max_s, bytes_s
            rep.dynamic_latency_s, rep.dynamic_max_load_s, rep.dynamic_comm_bytes = lat_d, max_d, bytes_d
            reports.append(rep)
            prev = lat_d
    return reports


def mean_speedup(reports: Sequence[DynamicStepReport]) -> float:
    return float(np.mean([r.speedup for r in reports])) if reports else 1.0
