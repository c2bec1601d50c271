import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize_scalar

from moeplace.core import ActivationTrace, MeshSpec, ModelSpec, Placement, derive_stats, make_mesh
from moeplace.dynamic import (DynamicPolicy, broadcast_budget, dispatch, dynamic_simulate,
                              mean_speedup, optimal_chunk, predict_frequencies, priority_scores,
                              t_pre_b)
from moeplace.planner import baseline_ep
from moeplace.trace import TraceGenConfig, generate_trace


# ---------------------------------------------------------------- prediction

def test_predict_exact_and_uninformed():
    f = np.array([0.6, 0.3, 0.1, 0.0])
    np.testing.assert_allclose(predict_frequencies(f, 1.0, 1), f)
    np.testing.assert_allclose(predict_frequencies(f, 0.0, 2), [0.5] * 4)


def test_predict_convex_combination():
    np.testing.assert_allclose(predict_frequencies([1.0, 0.0], 0.5, 1), [0.75, 0.25])


def test_predict_rejects_bad_accuracy():
    with pytest.raises(ValueError):
        predict_frequencies([1.0], 1.5, 1)
    with pytest.raises(ValueError):
        DynamicPolicy(accuracy=-0.1)


# ---------------------------------------------------------------- priority

def test_priority_plug_in():
    model = ModelSpec("m", 2, 1, 1, 4, 1)
    mesh = MeshSpec(1, 2, 1.0, 0.0, 2.0)
    P = np.array([[1.0, 0.0], [0.0, 1.0]])
    scores, _ = priority_scores(P, np.array([0.5, 0.5]), model, mesh)
    assert scores[0, 0] == pytest.approx(2.0)
    assert scores[0, 1] == 0.0


def test_priority_selects_from_most_loaded_node():
    model = ModelSpec("m", 3, 1, 1, 1, 1)
    mesh = MeshSpec(1, 2, 1.0, 0.0, 1.0)
    # loads under f_hat: node 0 = 0.4 + 0.3 = 0.7, node 1 = 0.3
    P = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    f_hat = np.array([0.4, 0.3, 0.3])
    scores, (i, c) = priority_scores(P, f_hat, model, mesh)
    loads = f_hat @ P
    np.testing.assert_allclose(loads, [0.7, 0.3])
    assert c == int(np.argmax(loads)) == 0
    assert i == int(np.argmax(scores[:, 0])) == 0
    # expert 2 scores as high as expert 1 overall but lives on the cool node
    assert scores[2, 1] == pytest.approx(scores[1, 0])


# ---------------------------------------------------------------- chunking

def test_optimal_chunk_examples():
    c, bound, t = optimal_chunk(1.0, 1.0, 1, 16, 128, 1)
    assert c == pytest.approx(4.0)
    assert t == pytest.approx(bound, rel=1e-12)
    c2, _, _ = optimal_chunk(2.0, 1.0, 2, 16, 64, 1)
    assert c2 == pytest.approx(math.sqrt(8.0))


def test_quadrupling_k_halves_chunk():
    c1 = optimal_chunk(0.3, 0.01, 2, 9, 32, 8)[0]
    c4 = optimal_chunk(0.3, 0.01, 8, 9, 32, 8)[0]
    assert c4 == pytest.approx(c1 / 2)


@pytest.mark.parametrize("bad", [(0, 1, 1, 4, 8, 8), (1, 0, 1, 4, 8, 8), (1, 1, 0, 4, 8, 8),
                                 (1, 1, 1, 4, -8, 8)])
def test_optimal_chunk_rejects_nonpositive(bad):
    with pytest.raises(ValueError):
        optimal_chunk(*bad)


def test_chunk_matches_numeric_minimizer():
    # bounded scalar minimization over (0, S] as the oracle
    for alpha, beta, k, D, S in [(1, 1, 1, 16, 128), (2, 1, 2, 16, 64), (1e-8, 2e-11, 3, 16, 2**20)]:
        c, _, _ = optimal_chunk(alpha, beta, k, D, S, 1)
        res = minimize_scalar(lambda x: t_pre_b(x, k, alpha, beta, D, S), bounds=(1e-9 * S, S),
                              method="bounded", options={"xatol": 1e-10 * S})
        assert c == pytest.approx(res.x, rel=1e-3)


@given(alpha=st.floats(1e-9, 1e2), beta=st.floats(1e-12, 1e1), k=st.integers(1, 64),
       D=st.sampled_from([4, 9, 16, 32, 64]), S=st.floats(1.0, 1e9))
def test_bound_identity(alpha, beta, k, D, S):
    c, bound, t = optimal_chunk(alpha, beta, k, D, S, 1)
    assert t == pytest.approx(bound, rel=1e-9)
    # nearby chunk sizes are no better
    for x in (0.9 * c, 1.1 * c):
        assert t_pre_b(x, k, alpha, beta, D, S) >= t * (1 - 1e-12)


# ---------------------------------------------------------------- budget

def _policy_model():
    model = ModelSpec("m", 64, 2, 128, 1, 1)
    mesh = MeshSpec(4, 4, 1e3, 1.0, 1.0)
    return model, mesh


def test_budget_zero_latency():
    model, mesh = _policy_model()
    assert broadcast_budget(0.0, DynamicPolicy(alpha=1.0, beta=1e-3, broadcast_bytes=128), mesh,
                            model) == 0


def test_budget_between_first_two_costs():
    model, mesh = _policy_model()
    pol = DynamicPolicy(alpha=1.0, beta=1e-3, broadcast_bytes=128)
    t1 = optimal_chunk(1.0, 1e-3, 1, 16, 128, 1)[2]
    t2 = optimal_chunk(1.0, 1e-3, 2, 16, 128, 1)[2]
    assert t1 < t2
    assert broadcast_budget(t1, pol, mesh, model) == 1
    assert broadcast_budget(0.5 * (t1 + t2), pol, mesh, model) == 1
    assert broadcast_budget(t1 * (1 - 1e-9), pol, mesh, model) == 0


def test_budget_bisection_equals_scan():
    model, mesh = _policy_model()
    pol = DynamicPolicy(alpha=1.0, beta=1e-3, broadcast_bytes=128)
    for prev in (10.0, 9.0, 11.5, 12.0, 30.0):
        scan = 0
        for k in range(1, 65):
            if optimal_chunk(1.0, 1e-3, k, 16, 128, 1)[2] <= prev:
                scan = k
        assert broadcast_budget(prev, pol, mesh, model, k_max=64) == scan


def test_budget_respects_max_broadcasts():
    model, mesh = _policy_model()
    pol = DynamicPolicy(alpha=1.0, beta=1e-3, broadcast_bytes=128, max_broadcasts=2)
    assert broadcast_budget(1e6, pol, mesh, model) == 2


def test_budget_rejects_negative_latency():
    model, mesh = _policy_model()
    with pytest.raises(ValueError):
        broadcast_budget(-1.0, DynamicPolicy(), mesh, model)


# ---------------------------------------------------------------- dispatch

def test_dispatch_prefers_lower_load():
    out = dispatch([[7]], {7: [0, 2]}, [5.0, 0.0, 3.0])
    assert out == [{7: 2}]


def test_dispatch_tie_lowest_id():
    assert dispatch([[1]], {1: [3, 1]}, [0.0] * 4) == [{1: 1}]


def test_dispatch_balanced_split_by_enumeration():
    out = dispatch([[0]] * 8, {0: [0, 1]}, [0.0, 0.0])
    counts = np.bincount([d[0] for d in out], minlength=2)
    # oracle: enumerate all 2^8 assignments and take the smallest max count
    best = min(max(bin(m).count("1"), 8 - bin(m).count("1")) for m in range(256))
    assert counts.max() == best == 4
    assert counts.tolist() == [4, 4]


def test_dispatch_never_leaves_replica_set():
    rng = np.random.default_rng(0)
    rmap = {i: sorted(rng.choice(6, rng.integers(1, 4), replace=False).tolist()) for i in range(5)}
    tokens = [rng.choice(5, 2, replace=False).tolist() for _ in range(40)]
    for tok, ch in zip(tokens, dispatch(tokens, rmap, rng.random(6))):
        for i in tok:
            assert ch[i] in rmap[i]


def test_dispatch_unplaced_expert():
    with pytest.raises(ValueError, match="unplaced expert"):
        dispatch([[3]], {3: []}, [0.0])


def test_dispatch_respects_allowed_sets():
    out = dispatch([[0], [0]], {0: [0, 1, 2]}, [0.0, 0.0, 0.0], allowed=[[2], [1, 2]])
    assert out == [{0: 2}, {0: 1}]


# ---------------------------------------------------------------- simulation

def _hotspot_case():
    """Two iterations of one layer; the second piles every token onto expert 0."""
    E, D = 8, 4
    model = ModelSpec("hot", E, 2, 64, 64, 1)
    mesh = MeshSpec(1, D, 1e12, 1e-9, 1e9)
    rng = np.random.default_rng(4)
    N = 64
    warm = np.array([rng.choice(E, 2, replace=False) for _ in range(N)])
    others = rng.integers(1, E, N)
    hot = np.stack([np.zeros(N, dtype=int), others], axis=1)
    trace = ActivationTrace(np.stack([warm, hot])[:, None], E)
    P = np.zeros((E, D))
    P[np.arange(E), np.arange(E) % D] = 1.0
    return trace, Placement(P, "EP"), model, mesh


def test_disabled_policy_equals_static():
    trace, placement, model, mesh = _hotspot_case()
    reps = dynamic_simulate(trace, placement, DynamicPolicy(enabled=False), model, mesh)
    assert len(reps) == 2
    for r in reps:
        assert r.k == 0 and not r.broadcasts
        assert r.dynamic_latency_s == r.static_latency_s
    assert mean_speedup(reps) == 1.0


def test_hotspot_max_load_strictly_decreases():
    trace, placement, model, mesh = _hotspot_case()
    pol = DynamicPolicy(accuracy=1.0, alpha=1e-15, beta=1e-18)
    reps = dynamic_simulate(trace, placement, pol, model, mesh)
    shifted = reps[1]
    assert shifted.k >= 1
    assert 0 in [i for i, _ in shifted.broadcasts]
    assert not shifted.guard_applied
    # oracle: static per-node load from token counts
    unit = model.flops_per_token() / mesh.node_compute_flops
    P = placement.layer(0)
    static = np.bincount(trace.experts[1, 0].ravel(), minlength=8) @ P * unit
    assert shifted.static_max_load_s == pytest.approx(static.max())
    assert shifted.dynamic_max_load_s < shifted.static_max_load_s
    assert shifted.dynamic_latency_s < shifted.static_latency_s


def test_uninformed_reports_are_well_formed():
    trace, placement, model, mesh = _hotspot_case()
    pol = DynamicPolicy(accuracy=0.0, alpha=1e-15, beta=1e-18)
    reps = dynamic_simulate(trace, placement, pol, model, mesh)
    for r in reps:
        assert r.k == len(r.broadcasts)
        assert r.static_latency_s > 0 and r.dynamic_latency_s > 0
        assert r.dynamic_comm_bytes <= r.static_comm_bytes
        assert len({i for i, _ in r.broadcasts}) == r.k


def _generated_case(seed=0):
    model = ModelSpec("gen", 16, 2, 256, 256, 2)
    trace = generate_trace(TraceGenConfig(model, batch=256, iterations=3, skew=1.2, drift=0.3,
                                          seed=seed))
    mesh = make_mesh(2, 2)
    placement = baseline_ep(model, 4, derive_stats(trace.select_iterations([0])))
    return trace, placement, model, mesh


def test_comm_never_increases_and_full_knowledge_never_hurts():
    trace, placement, model, mesh = _generated_case()
    pol = DynamicPolicy(accuracy=1.0, alpha=1e-12, beta=1e-15)
    reps = dynamic_simulate(trace, placement, pol, model, mesh)
    assert any(r.k > 0 for r in reps)
    for r in reps:
        assert r.dynamic_comm_bytes <= r.static_comm_bytes
        assert r.dynamic_max_load_s <= r.static_max_load_s * (1 + 1e-12)
        assert r.dynamic_latency_s <= r.static_latency_s * (1 + 1e-12)


def test_unlimited_broadcast_list_scheduling_bound():
    trace, placement, model, mesh = _generated_case(1)
    pol = DynamicPolicy(accuracy=1.0, alpha=1e-15, beta=1e-18)
    reps = dynamic_simulate(trace, placement, pol, model, mesh)
    for r in reps[1:]:
        assert r.k > 0
        assert r.dynamic_max_load_s <= r.static_max_load_s * (1 + 1e-12)


def test_dynamic_simulate_deterministic():
    trace, placement, model, mesh = _generated_case(2)
    pol = DynamicPolicy(accuracy=0.9, alpha=1e-12, beta=1e-15)
    a = dynamic_simulate(trace, placement, pol, model, mesh)
    b = dynamic_simulate(trace, placement, pol, model, mesh)
    assert a == b


def test_dynamic_simulate_validates_inputs():
    trace, placement, model, mesh = _generated_case()
    with pytest.raises(ValueError):
        dynamic_simulate(trace, placement, DynamicPolicy(), model, make_mesh(1, 2))
    with pytest.raises(ValueError):
        dynamic_simulate(trace, placement, DynamicPolicy(), model, mesh, gamma=0.0)
