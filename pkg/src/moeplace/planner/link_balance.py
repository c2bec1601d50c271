"""Logical-cluster to physical-node mapping by surrogate-guided search.

The objective is the simulated makespan of one layer's aggregation traffic,
averaged over a fixed set of destination samplings. Candidates are random
keys (argsort gives the permutation) and swaps of the incumbent; a Gaussian
process over placement features ranks them by expected improvement. A
pairwise-swap hill climb spends whatever budget is left.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Matern, WhiteKernel

from ..core import MeshSpec, ModelSpec, NodeMapping
from .. import netsim

log = logging.getLogger(__name__)


@dataclass
class MappingResult:
    mapping: NodeMapping
    report: netsim.SimReport          # simulation of the first dst sampling under ``mapping``
    objective_s: float                # mean makespan over dst samplings
    identity_objective_s: float
    evaluations: int
    exhaustive: bool = False
    history: list = field(default_factory=list)

    def __iter__(self):
        yield self.mapping
        yield self.report


class _Evaluator:
    def __init__(self, task_sets, mesh: MeshSpec, chunk_bytes: int):
        self.mesh = mesh
        self.chunk = chunk_bytes
        self.task_sets = task_sets
        self.cache: dict[tuple, float] = {}
        D = mesh.num_nodes
        # logical traffic matrix and route incidence for the link-load features
        self.traffic = np.zeros((D, D))
        for ts in task_sets:
            for t in ts:
                self.traffic[t.src, t.dst] += t.bytes / len(task_sets)
        inc = np.zeros((D * D, D * 4))
        for a in range(D):
            for b in range(D):
                for lid in netsim.route_links(mesh, a, b):
                    inc[a * D + b, lid] = 1.0
        self.incidence = inc
        self.history: list[tuple[tuple, float]] = []

    def physical(self, tasks, perm):
        return [netsim.CommTask(t.id, int(perm[t.src]), int(perm[t.dst]), t.bytes, t.release_time_s)
                for t in tasks]

    def __call__(self, perm) -> float:
        key = tuple(int(p) for p in perm)
        if key not in self.cache:
            spans = [netsim.simulate(self.physical(ts, perm), self.mesh, self.chunk).makespan_s
                     for ts in self.task_sets]
            self.cache[key] = float(np.mean(spans))
            self.history.append((key, self.cache[key]))
        return self.cache[key]

    def link_load(self, perm) -> np.ndarray:
        D = len(perm)
        phys = np.zeros((D, D))
        phys[np.ix_(perm, perm)] = self.traffic
        return phys.ravel() @ self.incidence

    def features(self, perm) -> np.ndarray:
        mesh = self.mesh
        load = self.link_load(perm) / mesh.link_bandwidth_Bps
        xs = (np.asarray(perm) % mesh.cols) / max(1, mesh.cols - 1)
        ys = (np.asarray(perm) // mesh.cols) / max(1, mesh.rows - 1)
        return np.concatenate([[load.max(), np.sort(load)[-4:].mean(), load.sum() / len(load)],
                               xs, ys])


_REFIT_EVERY = 10


def _keys_to_perm(keys: np.ndarray) -> np.ndarray:
    return np.argsort(keys, kind="stable")


def _swap(perm, a, b):
    p = np.array(perm)
    p[a], p[b] = p[b], p[a]
    return p


def _neighbour_swaps(perm, mesh: MeshSpec, ev: _Evaluator):
    """Swaps touching the clusters that feed the most loaded link, adjacent pairs first."""
    D = len(perm)
    inv = np.empty(D, dtype=np.int64)
    inv[perm] = np.arange(D)
    load = ev.link_load(perm)
    hot_link = int(np.argmax(load))
    u, v = netsim.link_endpoints(mesh, hot_link)
    focus = [int(inv[u]), int(inv[v])]
    # clusters with the heaviest traffic
    volume = ev.traffic.sum(axis=0) + ev.traffic.sum(axis=1)
    focus += [int(c) for c in np.argsort(-volume, kind="stable")[:4]]
    focus = list(dict.fromkeys(focus))
    pairs = []
    for a in focus:
        for b in range(D):
            if a != b:
                pa, pb = perm[a], perm[b]
                hops = abs(pa % mesh.cols - pb % mesh.cols) + abs(pa // mesh.cols - pb // mesh.cols)
                pairs.append((hops, a, b))
    pairs.sort()
    seen = set()
    for _, a, b in pairs:
        key = (min(a, b), max(a, b))
        if key not in seen:
            seen.add(key)
            yield _swap(perm, a, b)
    for a, b in itertools.combinations(range(D), 2):
        if (a, b) not in seen:
            yield _swap(perm, a, b)


def optimize_mapping(P: np.ndarray, tokens: np.ndarray, mesh: MeshSpec, model: ModelSpec,
                     eval_budget: int = 200, seed: int = 0, dst_samples: int = 2,
                     chunk_bytes: int = netsim.DEFAULT_CHUNK_BYTES,
                     bo_fraction: float = 0.6) -> MappingResult:
    """Search cluster->node permutations minimizing simulated makespan.

    ``P`` is the (E, D) logical placement of the layer and ``tokens`` its
    (N, e) expert ids. The identity mapping is always evaluated first, so
    the result is never worse than identity. When the budget covers every
    permutation the search is exhaustive.
    """
    if eval_budget < 1:
        raise ValueError("eval_budget must be >= 1")
    D = mesh.num_nodes
    rng = np.random.default_rng([seed, 0xB0])
    task_sets = [netsim.build_tasks(tokens, P, None, model, seed=int(s))
                 for s in np.random.default_rng([seed, 0xD5]).integers(0, 2**31, dst_samples)]
    ev = _Evaluator(task_sets, mesh, chunk_bytes)

    identity = np.arange(D)
    best_perm, best = identity, ev(identity)
    identity_obj = best

    exhaustive = math.factorial(D) <= eval_budget
    if exhaustive:
        for perm in itertools.permutations(range(D)):
            val = ev(np.array(perm))
            if val < best:
                best_perm, best = np.array(perm), val
    else:
        best_perm, best = _bayes_search(ev, mesh, rng, eval_budget, bo_fraction, best_perm, best)
        best_perm, best = _hill_climb(ev, mesh, eval_budget, best_perm, best)

    mapping = NodeMapping(best_perm)
    report = netsim.simulate(ev.physical(task_sets[0], best_perm), mesh, chunk_bytes)
    return MappingResult(mapping, report, best, identity_obj, len(ev.cache), exhaustive,
                         list(ev.history))


def _bayes_search(ev, mesh, rng, budget, fraction, best_perm, best):
    D = mesh.num_nodes
    n_bo = max(1, int(budget * fraction))
    n_init = min(n_bo, max(4, n_bo // 5))
    X, y = [ev.features(best_perm)], [best]
    for _ in range(n_init - 1):
        perm = _keys_to_perm(rng.random(D))
        val = ev(perm)
        X.append(ev.features(perm))
        y.append(val)
        if val < best:
            best_perm, best = perm, val

    kernel = ConstantKernel(1.0) * Matern(length_scale=1.0, nu=2.5) + WhiteKernel(1e-3)
    step = 0
    while len(ev.cache) < n_bo:
        # hyperparameters are refit every few steps; in between the last kernel is reused
        refit = step % _REFIT_EVERY == 0
        gp = GaussianProcessRegressor(kernel=kernel, normalize_y=True,
                                      optimizer="fmin_l_bfgs_b" if refit else None,
                                      random_state=0)
        Xa = np.array(X)
        scale = Xa.std(axis=0) + 1e-12
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            gp.fit(Xa / scale, np.array(y))
        kernel = gp.kernel_
        step += 1
        pool = [_keys_to_perm(rng.random(D)) for _ in range(32)]
        for _ in range(96):
            a, b = rng.choice(D, 2, replace=False)
            pool.append(_swap(best_perm, a, b))
        pool = [p for p in pool if tuple(int(v) for v in p) not in ev.cache]
        if not pool:
            break
        F = np.array([ev.features(p) for p in pool]) / scale
        mu, sd = gp.predict(F, return_std=True)
        sd = np.maximum(sd, 1e-12)
        z = (best - mu) / sd
        ei = (best - mu) * norm.cdf(z) + sd * norm.pdf(z)
        perm = pool[int(np.argmax(ei))]
        val = ev(perm)
        X.append(ev.features(perm))
        y.append(val)
        if val < best:
            best_perm, best = perm, val
    return best_perm, best


def _hill_climb(ev, mesh, budget, best_perm, best):
    improved = True
    while improved and len(ev.cache) < budget:
        improved = False
        for cand in _neighbour_swaps(best_perm, mesh, ev):
            if len(ev.cache) >= budget:
                break
            val = ev(cand)
            if val < best:
                best_perm, best = cand, val
                improved = True
                break
    return best_perm, best
