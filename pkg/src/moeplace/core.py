"""Domain types, presets, trace statistics and file formats.

Everything here is immutable after construction. Arrays held by the
dataclasses are marked read-only so they can be shared between workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

SCHEMA_VERSION = 1
EPS_PLACE = 1e-9
DEFAULT_GROUP_CAP = 1024

STRATEGY_TAGS = ("TP", "EP", "HYBRID_CB", "NODE_BALANCE", "NODE_LINK_BALANCE", "CUSTOM")


class TraceError(ValueError):
    pass


class PlacementError(ValueError):
    pass


def _frozen(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MeshSpec:
    rows: int
    cols: int
    link_bandwidth_Bps: float
    per_hop_latency_s: float
    node_compute_flops: float
    node_memory_bytes: Optional[float] = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"mesh must be at least 1x1, got {self.rows}x{self.cols}")
        if self.link_bandwidth_Bps <= 0 or self.node_compute_flops <= 0:
            raise ValueError("bandwidth and compute throughput must be positive")
        if self.per_hop_latency_s < 0:
            raise ValueError("per-hop latency must be nonnegative")
        if self.node_memory_bytes is not None and self.node_memory_bytes <= 0:
            raise ValueError("node memory must be positive when given")

    @property
    def num_nodes(self) -> int:
        return self.rows * self.cols

    def coord(self, node: int) -> tuple[int, int]:
        """Node id -> (x, y) = (col, row)."""
        return node % self.cols, node // self.cols

    def node_id(self, x: int, y: int) -> int:
        if not (0 <= x < self.cols and 0 <= y < self.rows):
            raise ValueError(f"coordinate ({x}, {y}) outside {self.rows}x{self.cols} mesh")
        return y * self.cols + x

    def with_hardware(self, **changes) -> "MeshSpec":
        return MeshSpec(**{**self.__dict__, **changes})


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_experts: int
    experts_per_token: int
    hidden_size: int
    intermediate_size: int
    num_layers: int
    bytes_per_activation: int = 4

    def __post_init__(self):
        for attr in ("num_experts", "experts_per_token", "hidden_size",
                     "intermediate_size", "num_layers", "bytes_per_activation"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be a positive integer")
        if self.experts_per_token > self.num_experts:
            raise ValueError(
                f"experts_per_token={self.experts_per_token} exceeds num_experts={self.num_experts}")

    def expert_bytes(self, bytes_per_weight: int = 4) -> int:
        # gate, up and down projections
        return 3 * self.hidden_size * self.intermediate_size * bytes_per_weight

    def flops_per_token(self) -> float:
        return 2.0 * self.hidden_size * self.intermediate_size


MODEL_PRESETS: dict[str, ModelSpec] = {
    "mixtral": ModelSpec("mixtral", 8, 2, 4096, 14336, 32),
    "deepseek": ModelSpec("deepseek", 64, 6, 2048, 1408, 27),
    "qwen": ModelSpec("qwen", 64, 8, 3584, 2560, 28),
}

# (compute FLOP/s, link bandwidth B/s)
HARDWARE_PROFILES: dict[str, tuple[float, float]] = {
    "2.5TF:75GBps": (2.5e12, 75e9),
    "5TF:50GBps": (5e12, 50e9),
    "10TF:25GBps": (10e12, 25e9),
}
DEFAULT_HOP_LATENCY_S = 10e-9


def make_mesh(rows: int, cols: int, profile: str = "5TF:50GBps",
              per_hop_latency_s: float = DEFAULT_HOP_LATENCY_S,
              node_memory_bytes: Optional[float] = None) -> MeshSpec:
    comp, bw = HARDWARE_PROFILES[profile]
    return MeshSpec(rows, cols, bw, per_hop_latency_s, comp, node_memory_bytes)


@dataclass(frozen=True)
class ActivationTrace:
    """Expert ids per (iteration, layer, token, slot).

    ``experts`` has shape (iterations, layers, batch, experts_per_token).
    """

    experts: np.ndarray
    num_experts: int

    def __post_init__(self):
        arr = np.asarray(self.experts)
        if arr.ndim != 4:
            raise TraceError("trace array must have shape (iterations, layers, batch, e)")
        if arr.size == 0:
            raise TraceError("empty trace")
        if arr.shape[3] > self.num_experts:
            raise TraceError("expert-set size exceeds num_experts")
        if arr.min() < 0 or arr.max() >= self.num_experts:
            raise TraceError("expert id out of range")
        srt = np.sort(arr, axis=-1)
        if np.any(srt[..., 1:] == srt[..., :-1]):
            raise TraceError("duplicate expert id")
        object.__setattr__(self, "experts", _frozen(arr, np.int32))

    @property
    def iterations(self) -> int:
        return self.experts.shape[0]

    @property
    def num_layers(self) -> int:
        return self.experts.shape[1]

    @property
    def batch(self) -> int:
        return self.experts.shape[2]

    @property
    def experts_per_token(self) -> int:
        return self.experts.shape[3]

    def layer_tokens(self, layer: int) -> np.ndarray:
        """All tokens of one layer across iterations, shape (iterations*batch, e)."""
        return self.experts[:, layer].reshape(-1, self.experts_per_token)

    def select_iterations(self, idx) -> "ActivationTrace":
        return ActivationTrace(self.experts[idx].reshape(-1, *self.experts.shape[1:]),
                               self.num_experts)

    def select_layers(self, idx) -> "ActivationTrace":
        sub = self.experts[:, idx]
        if sub.ndim == 3:
            sub = sub[:, None]
        return ActivationTrace(sub, self.num_experts)

    def __eq__(self, other):
        if not isinstance(other, ActivationTrace):
            return NotImplemented
        return (self.num_experts == other.num_experts
                and self.experts.shape == other.experts.shape
                and bool(np.array_equal(self.experts, other.experts)))

    __hash__ = None


@dataclass(frozen=True)
class LayerStats:
    f: np.ndarray                      # (E,) activation frequency per expert
    groups: tuple[tuple[tuple[int, ...], float], ...]
    affinity: np.ndarray               # (E, E), affinity[i, j] = P(j active | i active)
    coverage: float                    # fraction of tokens covered by retained groups
    num_distinct_groups: int
    experts_per_token: int

    @property
    def num_experts(self) -> int:
        return len(self.f)

    @property
    def renormalization(self) -> float:
        return 1.0 / self.coverage

    def group_weight(self) -> np.ndarray:
        """Per-expert sum of f_g over retained groups containing the expert."""
        w = np.zeros(self.num_experts)
        for g, fg in self.groups:
            w[list(g)] += fg
        return w

    def group_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Membership matrix (G, E) and frequency vector (G,)."""
        M = np.zeros((len(self.groups), self.num_experts))
        fg = np.empty(len(self.groups))
        for k, (g, freq) in enumerate(self.groups):
            M[k, list(g)] = 1.0
            fg[k] = freq
        return M, fg


@dataclass(frozen=True)
class TraceStats:
    layers: tuple[LayerStats, ...]
    overlap: np.ndarray                # (L-1,) adjacent-layer overlap fraction
    batch: int

    def layer(self, idx: int) -> LayerStats:
        return self.layers[idx]

    def averaged(self) -> LayerStats:
        """Layer-averaged statistics (frequencies and groups pooled across layers)."""
        L = len(self.layers)
        f = sum(ls.f for ls in self.layers) / L
        pooled: dict[tuple[int, ...], float] = {}
        for ls in self.layers:
            for g, fg in ls.groups:
                pooled[g] = pooled.get(g, 0.0) + fg / L
        groups = tuple(sorted(pooled.items(), key=lambda kv: (-kv[1], kv[0])))
        aff = sum(ls.affinity for ls in self.layers) / L
        return LayerStats(_frozen(f), groups, _frozen(aff),
                          float(np.mean([ls.coverage for ls in self.layers])),
                          len(groups), self.layers[0].experts_per_token)


def _layer_stats(tokens: np.ndarray, num_experts: int, group_cap: int) -> LayerStats:
    n, e = tokens.shape
    onehot = np.zeros((n, num_experts))
    np.put_along_axis(onehot, tokens.astype(np.int64), 1.0, axis=1)
    counts = onehot.sum(axis=0)
    f = counts / n

    co = onehot.T @ onehot
    affinity = np.zeros_like(co)
    active = counts > 0
    affinity[active] = co[active] / counts[active, None]

    uniq, gcounts = np.unique(np.sort(tokens, axis=1), axis=0, return_counts=True)
    order = sorted(range(len(uniq)), key=lambda k: (-gcounts[k], tuple(uniq[k])))
    kept = order[:group_cap]
    coverage = gcounts[kept].sum() / n
    total_kept = gcounts[kept].sum()
    groups = tuple((tuple(int(x) for x in uniq[k]), float(gcounts[k] / total_kept))
                   for k in kept)
    return LayerStats(_frozen(f), groups, _frozen(affinity), float(coverage), len(uniq), e)


def derive_stats(trace: ActivationTrace, group_cap: int = DEFAULT_GROUP_CAP) -> TraceStats:
    if group_cap < 1:
        raise ValueError("group_cap must be >= 1")
    if trace.experts.size == 0:
        raise TraceError("empty trace")
    layers = tuple(_layer_stats(trace.layer_tokens(l), trace.num_experts, group_cap)
                   for l in range(trace.num_layers))
    e = trace.experts_per_token
    overlaps = []
    for l in range(trace.num_layers - 1):
        a = trace.layer_tokens(l)
        b = trace.layer_tokens(l + 1)
        shared = (a[:, :, None] == b[:, None, :]).any(axis=2).sum(axis=1)
        overlaps.append(float(shared.mean() / e))
    return TraceStats(layers, _frozen(np.array(overlaps, dtype=float)), trace.batch)


def stats_from_frequencies(f: Sequence[float], experts_per_token: int,
                           groups: Optional[Iterable[tuple[Iterable[int], float]]] = None) -> LayerStats:
    """Build LayerStats directly from frequencies (singleton groups unless given)."""
    f = np.asarray(f, dtype=float)
    E = len(f)
    if groups is None:
        total = f.sum()
        groups = [((i,), f[i] / total) for i in range(E) if f[i] > 0]
    groups = tuple((tuple(sorted(int(x) for x in g)), float(fg)) for g, fg in groups)
    aff = np.zeros((E, E))
    for i in range(E):
        if f[i] > 0:
            aff[i, i] = 1.0
    return LayerStats(_frozen(f), groups, _frozen(aff), 1.0, len(groups), experts_per_token)


@dataclass(frozen=True)
class Placement:
    """Per-layer placement matrices, P has shape (layers, E, D)."""

    P: np.ndarray
    strategy_tag: str = "CUSTOM"

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim == 2:
            P = P[None]
        if P.ndim != 3:
            raise PlacementError("placement must have shape (layers, E, D)")
        if self.strategy_tag not in STRATEGY_TAGS:
            raise PlacementError(f"unknown strategy tag {self.strategy_tag!r}")
        object.__setattr__(self, "P", _frozen(P))

    @property
    def num_layers(self) -> int:
        return self.P.shape[0]

    @property
    def num_experts(self) -> int:
        return self.P.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.P.shape[2]

    @property
    def Z(self) -> np.ndarray:
        return self.P > EPS_PLACE

    def layer(self, idx: int) -> np.ndarray:
        # single-layer placements apply to every layer
        return self.P[idx if self.num_layers > 1 else 0]

    @classmethod
    def stack(cls, mats: Sequence[np.ndarray], strategy_tag: str) -> "Placement":
        return cls(np.stack([np.asarray(m, dtype=float) for m in mats]), strategy_tag)

    def __eq__(self, other):
        if not isinstance(other, Placement):
            return NotImplemented
        return self.strategy_tag == other.strategy_tag and bool(np.array_equal(self.P, other.P))

    __hash__ = None


def validate_placement(p: Placement, model: ModelSpec, mesh: MeshSpec,
                       bytes_per_weight: int = 4, tol: float = 1e-9) -> list[str]:
    """Return violated invariants; an empty list means the placement is valid."""
    violations = []
    E, D = model.num_experts, mesh.num_nodes
    for l in range(p.num_layers):
        P = p.P[l]
        if P.shape != (E, D):
            raise PlacementError(f"layer {l}: expected shape ({E}, {D}), got {P.shape}")
        bad = np.argwhere((P < -tol) | (P > 1 + tol))
        for i, c in bad:
            violations.append(f"layer {l}: entry out of [0,1] at expert {i}, node {c}")
        sums = P.sum(axis=1)
        for i in np.flatnonzero(np.abs(sums - 1.0) > tol):
            violations.append(f"layer {l}: row sum ≠ 1 for expert {i} ({sums[i]:.6g})")
        if mesh.node_memory_bytes is not None:
            used = (P > EPS_PLACE).sum(axis=0) * model.expert_bytes(bytes_per_weight)
            for c in np.flatnonzero(used > mesh.node_memory_bytes):
                violations.append(f"layer {l}: memory capacity exceeded on node {c}")
    return violations


@dataclass(frozen=True)
class NodeMapping:
    """perm[logical cluster] = physical node id (row-major)."""

    perm: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64)
        if perm.ndim != 1 or sorted(perm.tolist()) != list(range(len(perm))):
            raise ValueError("mapping must be a permutation of 0..D-1")
        object.__setattr__(self, "perm", _frozen(perm))

    @classmethod
    def identity(cls, num_nodes: int) -> "NodeMapping":
        return cls(np.arange(num_nodes))

    def coords(self, mesh: MeshSpec) -> list[tuple[int, int]]:
        """Physical (row, col) of each logical cluster."""
        return [(int(p) // mesh.cols, int(p) % mesh.cols) for p in self.perm]

    def __eq__(self, other):
        if not isinstance(other, NodeMapping):
            return NotImplemented
        return bool(np.array_equal(self.perm, other.perm))

    __hash__ = None


# ---------------------------------------------------------------- file formats

def placement_to_dict(p: Placement, extra: Optional[dict] = None) -> dict:
    doc = {"schema": SCHEMA_VERSION, "kind": "placement", "strategy_tag": p.strategy_tag,
           "num_experts": p.num_experts, "num_nodes": p.num_nodes,
           "layers": [{"layer": l, "P": p.P[l].ravel().tolist()} for l in range(p.num_layers)]}
    if extra:
        doc.update(extra)
    return doc


def placement_from_dict(doc: dict) -> Placement:
    if doc.get("schema") != SCHEMA_VERSION:
        raise PlacementError(f"unsupported schema {doc.get('schema')!r}")
    E, D = int(doc["num_experts"]), int(doc["num_nodes"])
    mats = []
    for entry in sorted(doc["layers"], key=lambda d: d["layer"]):
        flat = np.asarray(entry["P"], dtype=float)
        if flat.size != E * D:
            raise PlacementError(f"layer {entry['layer']}: expected {E * D} entries, got {flat.size}")
        mats.append(flat.reshape(E, D))
    return Placement.stack(mats, doc["strategy_tag"])


def write_placement(path, p: Placement, extra: Optional[dict] = None) -> None:
    Path(path).write_text(json.dumps(placement_to_dict(p, extra)))


def load_placement(path) -> Placement:
    return placement_from_dict(json.loads(Path(path).read_text()))


def write_mapping(path, mapping: NodeMapping, mesh: MeshSpec, extra: Optional[dict] = None) -> None:
    doc = {"schema": SCHEMA_VERSION, "kind": "mapping", "rows": mesh.rows, "cols": mesh.cols,
           "perm": mapping.perm.tolist()}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc))


def load_mapping(path) -> NodeMapping:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema {doc.get('schema')!r}")
    return NodeMapping(doc["perm"])
