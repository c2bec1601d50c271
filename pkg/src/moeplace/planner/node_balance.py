"""Node-balance placement: mixed-integer program over split fractions P and activity Z.

    min  t_comp + 2 * gamma * t_comm
    s.t. Z_ic >= P_ic,   sum_c P_ic = 1
         t_comp >= a * sum_i f_i P_ic                       (per node)
         t_comm >= K * sum_g f_g sum_{i in g} Z_ic           (per node)
         eps_load <= sum_i f_i P_ic <= (1 / R_CC + 1) * e / D

with a = B * 2h * IS / comp and K = bytes * B * h / BW. The program is
solved in units of ``a``. The default backend relaxes Z, rounds, repairs,
re-solves P for the fixed Z and then runs a budgeted local search over Z.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

from ..core import EPS_PLACE, LayerStats, MeshSpec, ModelSpec, Placement
from .. import perfmodel
from .baselines import DEFAULT_REGIONS, baseline_ep, baseline_hybrid_cb, baseline_tp

log = logging.getLogger(__name__)

EPS_LOAD = 1e-6
BRUTE_FORCE_LIMIT = 12
GRID_STEP = 64
GRID_MAX_POINTS = 5_000_000


@dataclass(frozen=True)
class NodeBalanceProblem:
    stats: LayerStats
    batch: int
    model: ModelSpec
    mesh: MeshSpec
    gamma: float = 1.0
    num_nodes: Optional[int] = None
    eps_load: float = EPS_LOAD
    search_budget: int = 400

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if len(self.stats.f) != self.model.num_experts:
            raise ValueError("stats and model disagree on the number of experts")
        if not self.stats.groups:
            raise ValueError("stats carry no expert groups")

    @property
    def D(self) -> int:
        return self.num_nodes or self.mesh.num_nodes

    @property
    def compute_unit(self) -> float:
        return perfmodel.compute_unit(self.batch, self.model, self.mesh)

    @property
    def comm_weight(self) -> float:
        """Objective weight of the per-node sum_i w_i Z_ic term, in compute units."""
        if self.D == 1:
            return 0.0   # nothing leaves a single node
        K = perfmodel.comm_unit(self.batch, self.model, self.mesh)
        return 2.0 * self.gamma * K / self.compute_unit

    @property
    def load_cap(self) -> float:
        return perfmodel.load_cap(self.model, self.mesh, self.D)


@dataclass
class SolveReport:
    placement: Placement
    objective_value_s: float
    solver_status: str                 # optimal | feasible | fallback
    wall_time_s: float
    gap: Optional[float] = None
    relaxation_bound_s: Optional[float] = None
    cap_scale: float = 1.0
    mode: str = "exact-lp"
    t_comp_s: float = 0.0
    t_comm_linear_s: float = 0.0       # sum-of-indicators form used by the optimizer
    t_comm_hat_s: float = 0.0          # any-holder form of the analytical estimator
    evaluations: int = 0
    notes: list = field(default_factory=list)


class _FixedZSolver:
    """Optimal P for a fixed activity pattern Z; results cached per pattern."""

    def __init__(self, prob: NodeBalanceProblem, cap: float):
        self.prob = prob
        self.f = np.asarray(prob.stats.f, dtype=float)
        self.w = prob.stats.group_weight()
        self.cap = cap
        self.cache: dict[bytes, Optional[tuple[float, np.ndarray]]] = {}
        self.calls = 0

    def objective(self, P: np.ndarray) -> float:
        """Objective in compute units with Z derived from P."""
        Z = P > EPS_PLACE
        return float((self.f @ P).max() + self.prob.comm_weight * (self.w @ Z).max())

    def solve(self, Z: np.ndarray) -> Optional[tuple[float, np.ndarray]]:
        key = np.packbits(Z).tobytes()
        if key in self.cache:
            return self.cache[key]
        self.calls += 1
        res = self._solve(Z)
        self.cache[key] = res
        return res

    def _solve(self, Z):
        E, D = Z.shape
        if not Z.any(axis=1).all():
            return None
        if self.prob.eps_load > 0 and not ((self.f[:, None] * Z).sum(axis=0) > 0).all():
            return None
        ii, cc = np.nonzero(Z)
        n = len(ii)
        # variables: P entries on the support, then t
        c = np.zeros(n + 1)
        c[-1] = 1.0
        A_eq = sp.csr_matrix((np.ones(n), (ii, np.arange(n))), shape=(E, n + 1))
        load = sp.csr_matrix((self.f[ii], (cc, np.arange(n))), shape=(D, n + 1))
        t_col = sp.csr_matrix((-np.ones(D), (np.arange(D), np.full(D, n))), shape=(D, n + 1))
        A_ub = sp.vstack([load + t_col, load, -load]).tocsr()
        b_ub = np.concatenate([np.zeros(D), np.full(D, self.cap), np.full(D, -self.prob.eps_load)])
        res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=np.ones(E),
                      bounds=[(0, 1)] * n + [(0, None)], method="highs")
        if res.status == 2:
            return None
        if res.status != 0:
            raise RuntimeError(f"fixed-Z LP did not converge: status {res.status}, {res.message}")
        P = np.zeros((E, D))
        P[ii, cc] = np.clip(res.x[:n], 0.0, 1.0)
        P = _clean(P)
        return self.objective(P), P


def _clean(P: np.ndarray) -> np.ndarray:
    """Zero out solver dust and renormalize rows to sum to one."""
    P = np.where(P > EPS_PLACE, P, 0.0)
    return P / P.sum(axis=1, keepdims=True)


def _relaxation(prob: NodeBalanceProblem, cap: float, integral: bool = False,
                time_limit: Optional[float] = None):
    """Continuous relaxation (or the full MILP when ``integral``)."""
    E, D = prob.model.num_experts, prob.D
    f = np.asarray(prob.stats.f, dtype=float)
    w = prob.stats.group_weight()
    nP = E * D
    n = 2 * nP + 2
    iT, iC = 2 * nP, 2 * nP + 1
    idx = np.arange(nP).reshape(E, D)

    c = np.zeros(n)
    c[iT] = 1.0
    c[iC] = prob.comm_weight

    rows, cols, vals = [], [], []
    r = 0
    # P - Z <= 0
    for i in range(E):
        for k in range(D):
            rows += [r, r]
            cols += [idx[i, k], nP + idx[i, k]]
            vals += [1.0, -1.0]
            r += 1
    ub = [0.0] * (E * D)
    lb = [-np.inf] * (E * D)
    for k in range(D):
        # load - T <= 0
        rows += [r] * (E + 1)
        cols += list(idx[:, k]) + [iT]
        vals += list(f) + [-1.0]
        ub.append(0.0)
        lb.append(-np.inf)
        r += 1
        # w . Z - C <= 0
        rows += [r] * (E + 1)
        cols += list(nP + idx[:, k]) + [iC]
        vals += list(w) + [-1.0]
        ub.append(0.0)
        lb.append(-np.inf)
        r += 1
        # eps_load <= load <= cap
        rows += [r] * E
        cols += list(idx[:, k])
        vals += list(f)
        ub.append(cap)
        lb.append(prob.eps_load)
        r += 1
    for i in range(E):
        rows += [r] * D
        cols += list(idx[i])
        vals += [1.0] * D
        ub.append(1.0)
        lb.append(1.0)
        r += 1
    A = sp.csr_matrix((vals, (rows, cols)), shape=(r, n))
    lo = np.zeros(n)
    hi = np.concatenate([np.ones(2 * nP), [np.inf, np.inf]])
    integrality = np.zeros(n)
    if integral:
        integrality[nP:2 * nP] = 1
    options = {"mip_rel_gap": 1e-9} if integral else {}
    if time_limit:
        options["time_limit"] = time_limit
    res = milp(c, constraints=LinearConstraint(A, lb, ub), bounds=Bounds(lo, hi),
               integrality=integrality, options=options)
    return res, nP


def _starting_patterns(prob: NodeBalanceProblem) -> list[tuple[str, np.ndarray]]:
    model, D = prob.model, prob.D
    starts = [("tp", baseline_tp(model, D).layer(0) > EPS_PLACE),
              ("ep", baseline_ep(model, D, prob.stats).layer(0) > EPS_PLACE)]
    regions = DEFAULT_REGIONS.get(model.name)
    if regions and D == prob.mesh.num_nodes and D % regions == 0:
        try:
            cb, _ = baseline_hybrid_cb(model, prob.mesh, prob.stats, regions)
            starts.append(("hybrid-cb", cb.layer(0) > EPS_PLACE))
        except ValueError:
            pass
    return starts


def _round_and_repair(Zrel: np.ndarray, Prel: np.ndarray, f: np.ndarray) -> np.ndarray:
    Z = Zrel >= 0.5
    empty = ~Z.any(axis=1)
    Z[empty, Prel[empty].argmax(axis=1)] = True
    # every node needs some active load (eps_load lower bound)
    active = f > 0
    for c in np.flatnonzero(~(Z[active].any(axis=0))):
        cand = np.flatnonzero(active)
        i = cand[np.argmax(Prel[cand, c])]
        Z[i, c] = True
    return Z


def _repair_caps(solver: _FixedZSolver, Z: np.ndarray) -> Optional[tuple[np.ndarray, tuple]]:
    """Grow Z greedily until the fixed-Z program becomes feasible."""
    f = solver.f
    Z = Z.copy()
    for _ in range(Z.size):
        res = solver.solve(Z)
        if res is not None:
            return Z, res
        # put the hottest expert of the node holding the most exclusive load onto the
        # node with the least exclusive load
        excl = (f[:, None] * Z / Z.sum(axis=1, keepdims=True)).sum(axis=0)
        src, dst = int(np.argmax(excl)), int(np.argmin(excl))
        cand = [i for i in np.argsort(-f) if Z[i, src] and not Z[i, dst]]
        if not cand:
            cand = [i for i in np.argsort(-f) if not Z[i, dst]]
        if not cand:
            return None
        Z[cand[0], dst] = True
    return None


def _neighbours(Z: np.ndarray, P: np.ndarray, f: np.ndarray, w: np.ndarray):
    """Z patterns near the incumbent, most promising first."""
    E, D = Z.shape
    load = f @ P
    comm = w @ Z
    hot = int(np.argmax(load))
    chatty = int(np.argmax(comm))
    cool = [int(c) for c in np.argsort(load, kind="stable")]
    quiet = [int(c) for c in np.argsort(comm, kind="stable")]
    targets = list(dict.fromkeys(cool[:3] + quiet[:3]))

    def flip(pairs):
        Zn = Z.copy()
        for (i, c, v) in pairs:
            Zn[i, c] = v
        return Zn

    # drop a share from the communication bottleneck
    for i in np.argsort(-w * Z[:, chatty]):
        if Z[i, chatty] and Z[i].sum() > 1:
            yield flip([(i, chatty, False)])
    # split or move load off the compute bottleneck
    for i in np.argsort(-(f * P[:, hot])):
        if not Z[i, hot] or f[i] == 0:
            continue
        for d in targets:
            if d == hot or Z[i, d]:
                continue
            yield flip([(i, d, True)])
            yield flip([(i, hot, False), (i, d, True)])
    # pairwise swaps between the hot node and cool nodes
    for i in np.flatnonzero(Z[:, hot]):
        for d in cool[:3]:
            if d == hot:
                continue
            for j in np.flatnonzero(Z[:, d] & ~Z[:, hot]):
                if Z[i, d] or f[j] >= f[i]:
                    continue
                yield flip([(i, hot, False), (i, d, True), (j, d, False), (j, hot, True)])
    # exhaustive single flips as the last resort
    for i in range(E):
        for c in range(D):
            if Z[i, c] and Z[i].sum() == 1:
                continue
            yield flip([(i, c, not Z[i, c])])
    # exchange a share: drop (i, c) and add (j, c), which moves the split to another expert
    for i, c in zip(*np.nonzero(Z)):
        if Z[i].sum() == 1:
            continue
        for j in range(E):
            if j != i and not Z[j, c]:
                yield flip([(i, c, False), (j, c, True)])


def _local_search(solver: _FixedZSolver, Z: np.ndarray, res: tuple, budget: int
                  ) -> tuple[np.ndarray, tuple, int]:
    obj, P = res
    Z = P > EPS_PLACE
    used = 0
    improved = True
    while improved and used < budget:
        improved = False
        seen = set()
        for Zn in _neighbours(Z, P, solver.f, solver.w):
            key = np.packbits(Zn).tobytes()
            if key in seen:
                continue
            seen.add(key)
            cached = key in solver.cache
            cand = solver.solve(Zn)
            if not cached:
                used += 1
            if cand is not None and cand[0] < obj * (1 - 1e-12) - 1e-15:
                obj, P = cand
                Z = P > EPS_PLACE
                improved = True
                break
            if used >= budget:
                break
    return Z, (obj, P), used


def _report(prob, P, status, t0, bound_units, cap_scale, mode, evaluations, notes) -> SolveReport:
    model, mesh, B = prob.model, prob.mesh, prob.batch
    t_comp = perfmodel.compute_time(P, prob.stats, B, model, mesh)[1]
    lin = perfmodel.linearized_comm(P, prob.stats, B, model, mesh)
    _, t_hat = perfmodel.comm_estimate(P, prob.stats, B, model, mesh)
    obj = t_comp + 2.0 * prob.gamma * lin
    bound = None if bound_units is None else bound_units * prob.compute_unit
    gap = None if bound is None else max(0.0, (obj - bound) / obj) if obj > 0 else 0.0
    return SolveReport(Placement(P[None], "NODE_BALANCE"), obj, status, time.perf_counter() - t0,
                       gap, bound, cap_scale, mode, t_comp, prob.gamma * lin, t_hat,
                       evaluations, list(notes))


def solve_node_balance(prob: NodeBalanceProblem, backend: str = "heuristic",
                       time_limit: Optional[float] = None) -> SolveReport:
    """Solve one layer. ``backend`` is "heuristic" (default) or "milp" (HiGHS branch and bound)."""
    t0 = time.perf_counter()
    notes = []
    cap = prob.load_cap
    cap_scale = 1.0
    total = float(np.sum(prob.stats.f))
    if cap * prob.D < total:
        cap_scale = total / (cap * prob.D) * (1 + 1e-9)
        cap *= cap_scale
        notes.append(f"load cap relaxed by factor {cap_scale:.6g}")

    if backend == "milp":
        res, nP = _relaxation(prob, cap, integral=True, time_limit=time_limit)
        if res.x is None:
            raise RuntimeError(f"MILP solve failed: {res.message}")
        E, D = prob.model.num_experts, prob.D
        P = _clean(np.clip(res.x[:nP].reshape(E, D), 0, 1))
        # HiGHS stops within an absolute gap; polish the pattern with exact LPs
        solver = _FixedZSolver(prob, cap)
        start = solver.solve(P > EPS_PLACE) or (solver.objective(P), P)
        _, (obj_units, P), _ = _local_search(solver, P > EPS_PLACE, start, prob.search_budget)
        status = "optimal" if res.status == 0 else "feasible"
        if cap_scale > 1:
            status = "fallback"
        bound = getattr(res, "mip_dual_bound", None)
        return _report(prob, P, status, t0, bound, cap_scale, "milp", solver.calls + 1, notes)
    if backend != "heuristic":
        raise ValueError(f"unknown backend {backend!r}")

    res, nP = _relaxation(prob, cap)
    if res.status != 0:
        raise RuntimeError(f"relaxation did not converge: status {res.status}, {res.message}")
    E, D = prob.model.num_experts, prob.D
    Prel = res.x[:nP].reshape(E, D)
    Zrel = res.x[nP:2 * nP].reshape(E, D)
    bound = float(res.fun)

    solver = _FixedZSolver(prob, cap)
    Zr = _round_and_repair(Zrel, Prel, solver.f)
    rounded_unchanged = bool(np.all(np.minimum(np.abs(Zrel), np.abs(Zrel - 1)) < 1e-9))

    candidates = []
    repaired = _repair_caps(solver, Zr)
    if repaired is not None:
        candidates.append(("relaxation", repaired[1]))
    for name, Zs in _starting_patterns(prob):
        r = solver.solve(Zs)
        if r is not None:
            candidates.append((name, r))
        else:
            notes.append(f"start {name} infeasible under the load cap")
    if not candidates:
        raise RuntimeError("no feasible starting pattern; load cap repair failed")
    candidates.sort(key=lambda kv: kv[1][0])

    best = candidates[0][1]
    budget = prob.search_budget
    used_total = 0
    tried = []
    for name, start in candidates:
        if any(np.array_equal(start[1] > EPS_PLACE, t) for t in tried):
            continue
        tried.append(start[1] > EPS_PLACE)
        _, cand, used = _local_search(solver, start[1] > EPS_PLACE, start,
                                      max(1, (budget - used_total)))
        used_total += used
        if cand[0] < best[0]:
            best = cand
        if used_total >= budget:
            break

    obj_units, P = best
    if cap_scale > 1:
        status = "fallback"
    elif rounded_unchanged and obj_units <= bound * (1 + 1e-9) + 1e-15:
        status = "optimal"
    else:
        status = "feasible"
    log.debug("node balance: %d fixed-Z solves, objective %.6g (bound %.6g)",
              solver.calls, obj_units, bound)
    return _report(prob, P, status, t0, bound, cap_scale, "exact-lp", solver.calls, notes)


def _grid_rows(support: np.ndarray, step: int) -> np.ndarray:
    """All rows on the 1/step grid supported on ``support`` that sum to one."""
    k = len(support)
    rows = []
    for cut in itertools.combinations(range(step + k - 1), k - 1):
        parts = np.diff([-1, *cut, step + k - 1]) - 1
        rows.append(parts)
    return np.asarray(rows, dtype=float) / step


def _grid_fixed_z(prob: NodeBalanceProblem, Z: np.ndarray, cap: float):
    f = np.asarray(prob.stats.f, dtype=float)
    E, D = Z.shape
    loads = np.zeros((1, D))
    row_opts = []
    for i in range(E):
        sup = np.flatnonzero(Z[i])
        g = _grid_rows(sup, GRID_STEP)
        r = np.zeros((len(g), D))
        r[:, sup] = g
        row_opts.append(r)
        if len(loads) * len(r) > GRID_MAX_POINTS:
            raise ValueError("grid search too large for this pattern")
        loads = (loads[:, None, :] + f[i] * r[None, :, :]).reshape(-1, D)
    feasible = (loads.max(axis=1) <= cap + 1e-12) & (loads.min(axis=1) >= prob.eps_load)
    if not feasible.any():
        return None
    cand = np.where(feasible, loads.max(axis=1), np.inf)
    k = int(np.argmin(cand))
    # decode the mixed-radix index back into rows
    P = np.zeros((E, D))
    for i in range(E - 1, -1, -1):
        k, j = divmod(k, len(row_opts[i]))
        P[i] = row_opts[i][j]
    return P


def brute_force_node_balance(prob: NodeBalanceProblem, grid: bool = False) -> SolveReport:
    """Enumerate every activity pattern and solve each fixed-pattern program.

    Exact LP sub-solves by default; ``grid=True`` searches P on a 1/64 grid.
    """
    E, D = prob.model.num_experts, prob.D
    if E * D > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to E*D <= {BRUTE_FORCE_LIMIT}, got {E * D}")
    t0 = time.perf_counter()
    cap = prob.load_cap
    total = float(np.sum(prob.stats.f))
    cap_scale = 1.0
    if cap * D < total:
        cap_scale = total / (cap * D) * (1 + 1e-9)
        cap *= cap_scale
    solver = _FixedZSolver(prob, cap)
    best = None
    count = 0
    for bits in itertools.product((False, True), repeat=E * D):
        Z = np.array(bits).reshape(E, D)
        if not Z.any(axis=1).all():
            continue
        count += 1
        if grid:
            P = _grid_fixed_z(prob, Z, cap)
            res = None if P is None else (solver.objective(P), P)
        else:
            res = solver.solve(Z)
        if res is not None and (best is None or res[0] < best[0] - 1e-15):
            best = res
    if best is None:
        raise RuntimeError("no feasible pattern")
    status = "fallback" if cap_scale > 1 else "optimal"
    return _report(prob, best[1], status, t0, None, cap_scale, "grid" if grid else "exact-lp",
                   count, [])


def objective_units(prob: NodeBalanceProblem, P: np.ndarray) -> float:
    return perfmodel.linearized_overhead(P, prob.stats, prob.batch, prob.model, prob.mesh,
                                         prob.gamma) / prob.compute_unit


def within_cap(prob: NodeBalanceProblem, P: np.ndarray, tol: float = 1e-9) -> bool:
    load = perfmodel.node_loads(P, prob.stats.f)
    return bool(load.max() <= prob.load_cap * (1 + tol) and load.min() >= prob.eps_load * (1 - tol))
