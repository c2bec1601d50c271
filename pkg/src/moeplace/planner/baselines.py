"""Baseline placements: tensor parallel, expert parallel, hybrid compute-balanced."""

from __future__ import annotations

import numpy as np

from ..core import LayerStats, MeshSpec, ModelSpec, NodeMapping, Placement, TraceStats

# sub-region counts used for the hybrid baseline
DEFAULT_REGIONS = {"mixtral": 2, "deepseek": 8, "qwen": 8}


def _layers(stats) -> list[LayerStats]:
    if isinstance(stats, TraceStats):
        return list(stats.layers)
    return [stats]


def lpt_assign(f: np.ndarray, num_bins: int) -> np.ndarray:
    """Longest-processing-time: hottest expert first onto the least-loaded bin.

    Ties go to the lower expert id / lower bin id.
    """
    order = sorted(range(len(f)), key=lambda i: (-f[i], i))
    load = np.zeros(num_bins)
    owner = np.empty(len(f), dtype=np.int64)
    for i in order:
        b = int(np.argmin(load))
        owner[i] = b
        load[b] += f[i]
    return owner


def baseline_tp(model: ModelSpec, D: int) -> Placement:
    if D < 1:
        raise ValueError("D must be >= 1")
    return Placement(np.full((1, model.num_experts, D), 1.0 / D), "TP")


def baseline_ep(model: ModelSpec, D: int, stats) -> Placement:
    mats = []
    for ls in _layers(stats):
        P = np.zeros((model.num_experts, D))
        P[np.arange(model.num_experts), lpt_assign(ls.f, D)] = 1.0
        mats.append(P)
    return Placement.stack(mats, "EP")


def region_shape(mesh: MeshSpec, num_regions: int) -> tuple[int, int]:
    """Most square (height, width) rectangle tiling the mesh into num_regions pieces."""
    if num_regions < 1 or mesh.num_nodes % num_regions:
        raise ValueError(f"{num_regions} regions do not divide a {mesh.rows}x{mesh.cols} mesh")
    size = mesh.num_nodes // num_regions
    best = None
    for h in range(1, mesh.rows + 1):
        if size % h or mesh.rows % h:
            continue
        w = size // h
        if mesh.cols % w:
            continue
        cand = (abs(h - w), h, w)
        if best is None or cand < best:
            best = cand
    if best is None:
        raise ValueError(f"no rectangular tiling of a {mesh.rows}x{mesh.cols} mesh into "
                         f"{num_regions} regions")
    return best[1], best[2]


def region_mapping(mesh: MeshSpec, num_regions: int) -> NodeMapping:
    """Logical clusters [k*r, (k+1)*r) occupy the k-th rectangle (row-major tiles)."""
    h, w = region_shape(mesh, num_regions)
    perm = []
    for ty in range(mesh.rows // h):
        for tx in range(mesh.cols // w):
            for y in range(ty * h, (ty + 1) * h):
                for x in range(tx * w, (tx + 1) * w):
                    perm.append(y * mesh.cols + x)
    return NodeMapping(perm)


def baseline_hybrid_cb(model: ModelSpec, mesh: MeshSpec, stats, num_regions: int
                       ) -> tuple[Placement, NodeMapping]:
    mapping = region_mapping(mesh, num_regions)
    D = mesh.num_nodes
    r = D // num_regions
    mats = []
    for ls in _layers(stats):
        P = np.zeros((model.num_experts, D))
        for i, reg in enumerate(lpt_assign(ls.f, num_regions)):
            P[i, reg * r:(reg + 1) * r] = 1.0 / r
        mats.append(P)
    return Placement.stack(mats, "HYBRID_CB"), mapping
