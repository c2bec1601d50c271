"""Analytical latency model for one MoE layer.

All functions take a single-layer placement matrix ``P`` of shape (E, D) and
the matching :class:`LayerStats`. Times are in seconds, volumes in bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .core import EPS_PLACE, LayerStats, MeshSpec, ModelSpec


@dataclass(frozen=True)
class LatencyBreakdown:
    t_comp_s: float
    t_comm_hat_s: float
    t_comm_s: float
    t_node_overhead_s: float
    per_node_compute_s: np.ndarray
    per_node_send_bytes: np.ndarray


@dataclass(frozen=True)
class GammaFit:
    gamma: float
    r_squared: float
    sample_count: int


def node_loads(P: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Per-node activation load sum_i P[i, c] * f_i (fraction of the batch)."""
    return np.asarray(f, dtype=float) @ np.asarray(P, dtype=float)


def compute_time(P, stats: LayerStats, B: int, model: ModelSpec, mesh: MeshSpec
                 ) -> tuple[np.ndarray, float]:
    per_node = node_loads(P, stats.f) * B * model.flops_per_token() / mesh.node_compute_flops
    return per_node, float(per_node.max())


def send_indicator(P, stats: LayerStats) -> np.ndarray:
    """(G, D) matrix: node c holds part of group g and does not hold all of g in full."""
    P = np.asarray(P, dtype=float)
    M, _ = stats.group_matrix()
    size = M.sum(axis=1, keepdims=True)
    holds_any = (M @ (P > EPS_PLACE)) > 0
    holds_all = (M @ (P >= 1.0 - EPS_PLACE)) >= size - 0.5
    return holds_any & ~holds_all


def comm_estimate(P, stats: LayerStats, B: int, model: ModelSpec, mesh: MeshSpec
                  ) -> tuple[np.ndarray, float]:
    """Per-node send volume and the linear estimate max_c volume_c / BW."""
    _, fg = stats.group_matrix()
    send = send_indicator(P, stats)
    per_node = (fg @ send) * model.bytes_per_activation * B * model.hidden_size
    return per_node, float(per_node.max()) / mesh.link_bandwidth_Bps


def linearized_comm(P, stats: LayerStats, B: int, model: ModelSpec, mesh: MeshSpec) -> float:
    """Sum-of-indicators form used inside the optimizer: K * max_c sum_g f_g sum_{i in g} Z_ic."""
    Z = (np.asarray(P) > EPS_PLACE).astype(float)
    if Z.shape[1] == 1:
        return 0.0
    return comm_unit(B, model, mesh) * float((stats.group_weight() @ Z).max())


def comm_unit(B: int, model: ModelSpec, mesh: MeshSpec) -> float:
    return model.bytes_per_activation * B * model.hidden_size / mesh.link_bandwidth_Bps


def compute_unit(B: int, model: ModelSpec, mesh: MeshSpec) -> float:
    """Seconds of compute per unit of activation load on one node."""
    return B * model.flops_per_token() / mesh.node_compute_flops


def calibrate_gamma(samples: Iterable[tuple[float, float]]) -> GammaFit:
    """Least-squares slope through the origin of simulated vs estimated time."""
    arr = np.asarray(list(samples), dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("calibration needs at least two samples")
    x, y = arr[:, 0], arr[:, 1]
    sxx = float(x @ x)
    if sxx == 0.0:
        raise ValueError("degenerate calibration set")
    gamma = float(x @ y) / sxx
    ss_res = float(((y - gamma * x) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return GammaFit(gamma, r2, int(arr.shape[0]))


def ring_allreduce_time(B: int, h: int, mesh: MeshSpec, bytes_per_activation: int = 4) -> float:
    return bytes_per_activation * B * h / mesh.link_bandwidth_Bps


def rcc(model: ModelSpec, mesh: MeshSpec, D: int) -> float:
    return (mesh.link_bandwidth_Bps * model.intermediate_size * model.experts_per_token
            / (2.0 * D * mesh.node_compute_flops))


def load_cap(model: ModelSpec, mesh: MeshSpec, D: int) -> float:
    """Upper bound on a node's activation load sum_i P_ic f_i."""
    return (1.0 / rcc(model, mesh, D) + 1.0) * model.experts_per_token / D


def node_overhead(P, stats: LayerStats, B: int, model: ModelSpec, mesh: MeshSpec,
                  gamma: float) -> LatencyBreakdown:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    per_comp, t_comp = compute_time(P, stats, B, model, mesh)
    per_send, t_hat = comm_estimate(P, stats, B, model, mesh)
    t_comm = gamma * t_hat
    return LatencyBreakdown(t_comp, t_hat, t_comm, t_comp + 2.0 * t_comm, per_comp, per_send)


def tp_overhead(P, stats: LayerStats, B: int, model: ModelSpec, mesh: MeshSpec) -> LatencyBreakdown:
    """TP is costed as one ring all-reduce (gamma = 1) instead of the all-to-all estimator."""
    per_comp, t_comp = compute_time(P, stats, B, model, mesh)
    t_hat = 0.0 if mesh.num_nodes == 1 else ring_allreduce_time(
        B, model.hidden_size, mesh, model.bytes_per_activation)
    per_send = np.full(P.shape[1], t_hat * mesh.link_bandwidth_Bps)
    return LatencyBreakdown(t_comp, t_hat, t_hat, t_comp + 2.0 * t_hat, per_comp, per_send)


def linearized_overhead(P, stats: LayerStats, B: int, model: ModelSpec, mesh: MeshSpec,
                        gamma: float) -> float:
    _, t_comp = compute_time(P, stats, B, model, mesh)
    return t_comp + 2.0 * gamma * linearized_comm(P, stats, B, model, mesh)
