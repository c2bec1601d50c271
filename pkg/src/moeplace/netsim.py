"""Discrete-event simulator for all-to-all traffic on a 2D mesh.

Model: chunk-level store-and-forward over XY routes. Every directed mesh link
serves one chunk at a time for ``size / BW + per_hop_latency`` seconds; a
chunk enters link k+1 only after leaving link k. Contention on a link is
first-come-first-served on ready time, ties broken by (task id, chunk index).
Injection and ejection ports are not modeled (infinite local bandwidth).

Coordinates are (x, y) = (col, row); node id = row * cols + col. XY routing
moves along x first.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .core import EPS_PLACE, MeshSpec, ModelSpec, NodeMapping

DEFAULT_CHUNK_BYTES = 4096
DIRECTIONS = ("E", "W", "S", "N")   # +x, -x, +y, -y
_STEP = {0: (1, 0), 1: (-1, 0), 2: (0, 1), 3: (0, -1)}


@dataclass(frozen=True)
class CommTask:
    id: int
    src: int
    dst: int
    bytes: int
    release_time_s: float = 0.0


@dataclass
class LinkSchedule:
    """Busy intervals [start, end) per directed link id."""
    intervals: dict[int, list[tuple[float, float]]] = field(default_factory=dict)


@dataclass(frozen=True)
class SimReport:
    makespan_s: float
    per_link_busy_s: np.ndarray        # (D * 4,) indexed by link id
    per_node_sent_bytes: np.ndarray
    per_node_received_bytes: np.ndarray
    task_completion_times: np.ndarray  # aligned with the input task list
    schedule: Optional[LinkSchedule] = None

    def busy_by_link(self, mesh: MeshSpec) -> dict[tuple[int, int], float]:
        out = {}
        for lid in np.flatnonzero(self.per_link_busy_s):
            u, v = link_endpoints(mesh, int(lid))
            out[(u, v)] = float(self.per_link_busy_s[lid])
        return out


def link_id(node: int, direction: int) -> int:
    return node * 4 + direction


def link_endpoints(mesh: MeshSpec, lid: int) -> tuple[int, int]:
    node, d = divmod(lid, 4)
    x, y = mesh.coord(node)
    dx, dy = _STEP[d]
    return node, mesh.node_id(x + dx, y + dy)


def link_exists(mesh: MeshSpec, lid: int) -> bool:
    node, d = divmod(lid, 4)
    x, y = mesh.coord(node)
    dx, dy = _STEP[d]
    return 0 <= x + dx < mesh.cols and 0 <= y + dy < mesh.rows


@lru_cache(maxsize=None)
def _xy_link_ids(rows: int, cols: int, src: tuple[int, int], dst: tuple[int, int]) -> tuple[int, ...]:
    (x, y), (tx, ty) = src, dst
    for cx, cy in (src, dst):
        if not (0 <= cx < cols and 0 <= cy < rows):
            raise ValueError(f"coordinate ({cx}, {cy}) outside {rows}x{cols} mesh")
    links = []
    while x != tx:
        d = 0 if tx > x else 1
        links.append(link_id(y * cols + x, d))
        x += 1 if d == 0 else -1
    while y != ty:
        d = 2 if ty > y else 3
        links.append(link_id(y * cols + x, d))
        y += 1 if d == 2 else -1
    return tuple(links)


def xy_path(src: tuple[int, int], dst: tuple[int, int], mesh: MeshSpec
            ) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Directed links from src to dst as ((x, y), (x', y')) pairs, x hops first."""
    out = []
    for lid in _xy_link_ids(mesh.rows, mesh.cols, tuple(src), tuple(dst)):
        u, v = link_endpoints(mesh, lid)
        out.append((mesh.coord(u), mesh.coord(v)))
    return out


def route_links(mesh: MeshSpec, src: int, dst: int) -> tuple[int, ...]:
    return _xy_link_ids(mesh.rows, mesh.cols, mesh.coord(src), mesh.coord(dst))


def simulate(tasks: Sequence[CommTask], mesh: MeshSpec, chunk_bytes: int = DEFAULT_CHUNK_BYTES,
             record_schedule: bool = False) -> SimReport:
    if chunk_bytes < 1:
        raise ValueError("chunk_bytes must be >= 1")
    D = mesh.num_nodes
    bw, alpha = mesh.link_bandwidth_Bps, mesh.per_hop_latency_s
    link_free = np.zeros(D * 4).tolist()
    busy = [0.0] * (D * 4)
    sent = np.zeros(D)
    recv = np.zeros(D)
    completion = np.zeros(len(tasks))
    schedule = LinkSchedule() if record_schedule else None

    paths: list[tuple[int, ...]] = []
    heap = []
    for k, t in enumerate(tasks):
        if not (0 <= t.src < D and 0 <= t.dst < D):
            raise ValueError(f"task {t.id}: node outside mesh")
        completion[k] = t.release_time_s
        paths.append(())
        if t.src == t.dst or t.bytes <= 0:
            continue
        paths[k] = route_links(mesh, t.src, t.dst)
        sent[t.src] += t.bytes
        recv[t.dst] += t.bytes
        n_chunks = -(-t.bytes // chunk_bytes)
        for c in range(n_chunks):
            heap.append((t.release_time_s, t.id, c, 0, k))
    heapq.heapify(heap)

    pop, push = heapq.heappop, heapq.heappush
    while heap:
        ready, tid, c, hop, k = pop(heap)
        task = tasks[k]
        size = min(chunk_bytes, task.bytes - c * chunk_bytes)
        lid = paths[k][hop]
        free = link_free[lid]
        start = ready if ready > free else free
        dur = size / bw + alpha
        end = start + dur
        link_free[lid] = end
        busy[lid] += dur
        if schedule is not None:
            schedule.intervals.setdefault(lid, []).append((start, end))
        if hop + 1 < len(paths[k]):
            push(heap, (end, tid, c, hop + 1, k))
        elif end > completion[k]:
            completion[k] = end

    makespan = float(completion.max()) if len(tasks) else 0.0
    return SimReport(makespan, np.array(busy), sent, recv, completion, schedule)


def token_node_sets(tokens: np.ndarray, P: np.ndarray) -> np.ndarray:
    """(N, D) bool: logical nodes holding any share of any expert a token activates."""
    Z = np.asarray(P) > EPS_PLACE
    tokens = np.asarray(tokens)
    unplaced = ~Z[np.unique(tokens)].any(axis=1)
    if unplaced.any():
        raise ValueError("unplaced expert")
    return Z[tokens].any(axis=1)


def build_tasks(tokens: np.ndarray, P: np.ndarray, mapping: Optional[NodeMapping],
                model: ModelSpec, seed: int) -> list[CommTask]:
    """Aggregation traffic of one layer.

    Every node holding a share of a token's experts produces one partial
    result of ``h * bytes_per_activation`` bytes for that token. The
    aggregation point is drawn uniformly from those nodes; all others send
    to it. ``tokens`` is the (N, e) array of expert ids for the layer.
    """
    P = np.asarray(P)
    D = P.shape[1]
    perm = np.arange(D) if mapping is None else mapping.perm
    S = token_node_sets(tokens, P)
    counts = S.sum(axis=1)
    rng = np.random.default_rng(seed)
    pick = np.minimum((rng.random(len(S)) * counts).astype(np.int64), counts - 1)
    # index of the pick-th True in each row
    csum = np.cumsum(S, axis=1)
    dst = (csum <= pick[:, None]).sum(axis=1)
    size = model.hidden_size * model.bytes_per_activation

    tasks = []
    tok_idx, node_idx = np.nonzero(S)
    keep = node_idx != dst[tok_idx]
    for t, c in zip(tok_idx[keep].tolist(), node_idx[keep].tolist()):
        tasks.append(CommTask(len(tasks), int(perm[c]), int(perm[dst[t]]), size))
    return tasks


def ring_order(mesh: MeshSpec) -> list[int]:
    """Node ids along a ring embedded in the mesh.

    A Hamiltonian cycle is used when one dimension is even; otherwise the
    boustrophedon order over rows, whose closing step is routed with XY.
    """
    R, C = mesh.rows, mesh.cols

    def cycle(r, c, at):
        order = [at(x, 0) for x in range(c)]
        for y in range(1, r):
            xs = range(c - 1, 0, -1) if y % 2 == 1 else range(1, c)
            order += [at(x, y) for x in xs]
        order += [at(0, y) for y in range(r - 1, 0, -1)]
        return order

    if R >= 2 and C >= 2 and R % 2 == 0:
        return cycle(R, C, lambda x, y: y * C + x)
    if R >= 2 and C >= 2 and C % 2 == 0:
        return cycle(C, R, lambda x, y: x * C + y)
    order = []
    for y in range(R):
        xs = range(C) if y % 2 == 0 else range(C - 1, -1, -1)
        order += [y * C + x for x in xs]
    return order


def simulate_ring_allreduce(mesh: MeshSpec, message_bytes: int, chunk_count: int = 1) -> float:
    """Ring all-reduce: 2(D-1) steps, each node forwarding M/D bytes to its ring successor."""
    D = mesh.num_nodes
    if D == 1 or message_bytes <= 0:
        return 0.0
    order = ring_order(mesh)
    step_bytes = math.ceil(message_bytes / D)
    chunk = max(1, math.ceil(step_bytes / max(1, chunk_count)))
    total = 0.0
    for _ in range(2 * (D - 1)):
        tasks = [CommTask(k, order[k], order[(k + 1) % D], step_bytes, 0.0) for k in range(D)]
        total += simulate(tasks, mesh, chunk).makespan_s
    return total


def link_heatmap_rows(report: SimReport, mesh: MeshSpec) -> list[dict]:
    """One row per (row, col, direction); nonexistent boundary links carry exists=0."""
    span = report.makespan_s
    rows = []
    for node in range(mesh.num_nodes):
        x, y = mesh.coord(node)
        for d, name in enumerate(DIRECTIONS):
            lid = link_id(node, d)
            b = float(report.per_link_busy_s[lid])
            rows.append({"row": y, "col": x, "direction": name,
                         "exists": int(link_exists(mesh, lid)), "busy_s": b,
                         "utilization": b / span if span > 0 else 0.0})
    return rows
