import itertools

import numpy as np
import pytest

from moeplace import perfmodel
from moeplace.core import (MODEL_PRESETS, MeshSpec, ModelSpec, make_mesh, stats_from_frequencies,
                           validate_placement)
from moeplace.planner import (baseline_ep, baseline_hybrid_cb, baseline_tp, lpt_assign,
                              region_mapping, region_shape)


def test_tp_uniform():
    p = baseline_tp(ModelSpec("t", 2, 1, 1, 1, 1), 2)
    assert p.strategy_tag == "TP"
    np.testing.assert_array_equal(p.layer(0), [[0.5, 0.5], [0.5, 0.5]])


@pytest.mark.parametrize("E,D", [(1, 1), (3, 7), (64, 16)])
def test_tp_rows_sum_to_one(E, D):
    p = baseline_tp(ModelSpec("t", E, 1, 1, 1, 1), D)
    np.testing.assert_allclose(p.layer(0).sum(axis=1), 1.0)


def test_tp_compute_is_perfectly_balanced():
    model = ModelSpec("t", 6, 3, 5, 7, 1)
    mesh = MeshSpec(2, 2, 1.0, 0.0, 3.0)
    s = stats_from_frequencies([0.9, 0.6, 0.5, 0.5, 0.3, 0.2], 3)
    B = 11
    _, t = perfmodel.compute_time(baseline_tp(model, 4).layer(0), s, B, model, mesh)
    assert t == pytest.approx(2 * B * 3 * 5 * 7 / (4 * 3.0))


def test_ep_forced_two_experts():
    model = ModelSpec("t", 2, 1, 1, 1, 1)
    s = stats_from_frequencies([0.75, 0.25], 1)
    P = baseline_ep(model, 2, s).layer(0)
    np.testing.assert_allclose(perfmodel.node_loads(P, s.f), [0.75, 0.25])


def test_ep_lpt_is_optimal_on_small_case():
    f = np.array([0.4, 0.3, 0.2, 0.1])
    owner = lpt_assign(f, 2)
    loads = np.bincount(owner, weights=f, minlength=2)
    np.testing.assert_allclose(loads, [0.5, 0.5])
    assert set(np.flatnonzero(owner == owner[0])) == {0, 3}
    best = min(max(np.bincount(a, weights=f, minlength=2))
               for a in itertools.product([0, 1], repeat=4))
    assert loads.max() == pytest.approx(best)


def test_ep_entries_are_binary_and_handle_more_nodes_than_experts():
    model = ModelSpec("t", 3, 1, 1, 1, 1)
    s = stats_from_frequencies([0.5, 0.3, 0.2], 1)
    P = baseline_ep(model, 5, s).layer(0)
    assert set(np.unique(P)) <= {0.0, 1.0}
    np.testing.assert_array_equal(P.sum(axis=1), 1.0)


def test_hybrid_limits():
    model = ModelSpec("t", 8, 2, 1, 1, 1)
    mesh = MeshSpec(2, 2, 1.0, 0.0, 1.0)
    s = stats_from_frequencies(np.linspace(0.5, 0.1, 8) * 2 / np.linspace(0.5, 0.1, 8).sum(), 2)
    one, _ = baseline_hybrid_cb(model, mesh, s, 1)
    np.testing.assert_allclose(one.layer(0), baseline_tp(model, 4).layer(0))
    full, mapping = baseline_hybrid_cb(model, mesh, s, 4)
    ep = baseline_ep(model, 4, s).layer(0)
    np.testing.assert_array_equal(full.layer(0), ep)


def test_hybrid_deepseek_structure():
    model = MODEL_PRESETS["deepseek"]
    mesh = make_mesh(4, 4)
    rng = np.random.default_rng(0)
    f = rng.dirichlet(np.ones(64)) * 6
    p, mapping = baseline_hybrid_cb(model, mesh, stats_from_frequencies(f, 6), 8)
    P = p.layer(0)
    assert p.strategy_tag == "HYBRID_CB"
    assert validate_placement(p, model, mesh) == []
    for row in P:
        nz = np.flatnonzero(row)
        assert len(nz) == 2 and np.allclose(row[nz], 0.5)
        assert nz[0] // 2 == nz[1] // 2              # same region block
        a, b = (mesh.coord(int(mapping.perm[c])) for c in nz)
        assert abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1  # contiguous on the mesh


def test_region_tiling():
    mesh = MeshSpec(4, 4, 1.0, 0.0, 1.0)
    assert region_shape(mesh, 8) in {(2, 1), (1, 2)}
    assert region_shape(mesh, 4) == (2, 2)
    perm = region_mapping(mesh, 4).perm.tolist()
    assert perm[:4] == [0, 1, 4, 5]
    with pytest.raises(ValueError):
        region_shape(mesh, 3)
    with pytest.raises(ValueError):
        baseline_hybrid_cb(ModelSpec("t", 2, 1, 1, 1, 1), mesh, stats_from_frequencies([0.5, 0.5], 1), 5)
