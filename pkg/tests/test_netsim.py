import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from moeplace import netsim, perfmodel
from moeplace.core import ActivationTrace, MeshSpec, ModelSpec, NodeMapping, derive_stats
from moeplace.netsim import CommTask, simulate


def grid(rows, cols, bw=1.0, alpha=0.0):
    return MeshSpec(rows, cols, bw, alpha, 1.0)


def test_xy_path_goes_x_first():
    path = netsim.xy_path((0, 0), (2, 1), grid(4, 4))
    nodes = [path[0][0]] + [v for _, v in path]
    assert nodes == [(0, 0), (1, 0), (2, 0), (2, 1)]


def test_xy_path_empty_for_same_node():
    assert netsim.xy_path((1, 1), (1, 1), grid(4, 4)) == []


def test_hop_count_is_manhattan_on_4x4():
    m = grid(4, 4)
    coords = [(x, y) for y in range(4) for x in range(4)]
    for a, b in itertools.product(coords, coords):
        path = netsim.xy_path(a, b, m)
        assert len(path) == abs(a[0] - b[0]) + abs(a[1] - b[1])
        # consecutive unit steps ending at b
        pos = a
        for u, v in path:
            assert u == pos and abs(u[0] - v[0]) + abs(u[1] - v[1]) == 1
            pos = v
        assert pos == b
    assert len(netsim.xy_path((3, 0), (0, 2), m)) == 5


def test_xy_path_rejects_outside_coordinates():
    with pytest.raises(ValueError):
        netsim.xy_path((0, 0), (4, 0), grid(4, 4))


def test_single_task_one_hop():
    rep = simulate([CommTask(0, 0, 1, 8)], grid(1, 2, bw=8), chunk_bytes=8)
    assert rep.makespan_s == pytest.approx(1.0)


def test_two_tasks_serialize_on_shared_link():
    tasks = [CommTask(0, 0, 1, 8), CommTask(1, 0, 1, 8)]
    rep = simulate(tasks, grid(1, 2, bw=8), chunk_bytes=8, record_schedule=True)
    assert rep.makespan_s == pytest.approx(2.0)
    assert rep.schedule.intervals[netsim.link_id(0, 0)] == [(0.0, 1.0), (1.0, 2.0)]


def test_chunks_pipeline_over_two_hops():
    rep = simulate([CommTask(0, 0, 2, 8)], grid(1, 3, bw=4), chunk_bytes=4, record_schedule=True)
    assert rep.makespan_s == pytest.approx(3.0)
    l1, l2 = netsim.link_id(0, 0), netsim.link_id(1, 0)
    assert rep.schedule.intervals[l1] == [(0.0, 1.0), (1.0, 2.0)]
    assert rep.schedule.intervals[l2] == [(1.0, 2.0), (2.0, 3.0)]


def test_hop_latency_counts_per_hop():
    rep = simulate([CommTask(0, 0, 2, 8)], grid(1, 3, bw=8, alpha=0.5), chunk_bytes=8)
    assert rep.makespan_s == pytest.approx(2 * (1.0 + 0.5))


def test_release_time_delays_start():
    rep = simulate([CommTask(0, 0, 1, 8, release_time_s=2.0)], grid(1, 2, bw=8), 8)
    assert rep.makespan_s == pytest.approx(3.0)


def test_self_and_empty_tasks_cost_nothing():
    rep = simulate([CommTask(0, 1, 1, 100), CommTask(1, 0, 1, 0)], grid(1, 2, bw=8))
    assert rep.makespan_s == 0.0 and not rep.per_link_busy_s.any()


@st.composite
def task_sets(draw):
    rows, cols = draw(st.integers(1, 3)), draw(st.integers(1, 4))
    D = rows * cols
    n = draw(st.integers(0, 12))
    tasks = [CommTask(k, draw(st.integers(0, D - 1)), draw(st.integers(0, D - 1)),
                      draw(st.integers(0, 40)), draw(st.sampled_from([0.0, 0.5, 3.0])))
             for k in range(n)]
    chunk = draw(st.integers(1, 16))
    bw = draw(st.sampled_from([1.0, 3.0, 8.0]))
    return tasks, rows, cols, chunk, bw


@given(task_sets(), st.sampled_from([0.0, 0.25]))
def test_simulator_invariants(data, alpha):
    tasks, rows, cols, chunk, bw = data
    m = grid(rows, cols, bw=bw, alpha=alpha)
    rep = simulate(tasks, m, chunk, record_schedule=True)
    demand = sum(t.bytes * len(netsim.route_links(m, t.src, t.dst)) / bw
                 for t in tasks if t.src != t.dst)
    assert rep.per_link_busy_s.sum() >= demand - 1e-9
    if alpha == 0:
        assert rep.per_link_busy_s.sum() == pytest.approx(demand, abs=1e-9)
    assert rep.per_node_sent_bytes.sum() == rep.per_node_received_bytes.sum()
    if tasks:
        assert rep.makespan_s == pytest.approx(rep.task_completion_times.max())
    for lid, iv in rep.schedule.intervals.items():
        iv = sorted(iv)
        assert all(a[1] <= b[0] + 1e-12 for a, b in zip(iv, iv[1:]))
        assert rep.per_link_busy_s[lid] <= rep.makespan_s + 1e-9
    if len(tasks):
        assert rep.makespan_s >= rep.per_link_busy_s.max() - 1e-9
    for t, done in zip(tasks, rep.task_completion_times):
        if t.src != t.dst and t.bytes > 0 and chunk >= t.bytes:
            hops = len(netsim.route_links(m, t.src, t.dst))
            assert done >= t.release_time_s + hops * (t.bytes / bw + alpha) - 1e-9


@given(task_sets())
def test_doubling_bandwidth_halves_makespan(data):
    tasks, rows, cols, chunk, bw = data
    tasks = [CommTask(t.id, t.src, t.dst, t.bytes) for t in tasks]
    a = simulate(tasks, grid(rows, cols, bw=bw), chunk).makespan_s
    b = simulate(tasks, grid(rows, cols, bw=2 * bw), chunk).makespan_s
    assert b == pytest.approx(a / 2, rel=1e-12, abs=1e-15)


@given(task_sets())
def test_simulation_is_deterministic(data):
    tasks, rows, cols, chunk, bw = data
    a = simulate(tasks, grid(rows, cols, bw=bw), chunk)
    b = simulate(list(tasks), grid(rows, cols, bw=bw), chunk)
    assert a.makespan_s == b.makespan_s
    np.testing.assert_array_equal(a.per_link_busy_s, b.per_link_busy_s)
    np.testing.assert_array_equal(a.task_completion_times, b.task_completion_times)


def test_build_tasks_single_node_is_empty():
    model = ModelSpec("t", 2, 2, 4, 4, 1)
    assert netsim.build_tasks(np.array([[0, 1]] * 5), np.ones((2, 1)), None, model, 0) == []


def test_build_tasks_two_holders_gives_one_task():
    model = ModelSpec("t", 2, 2, 4, 4, 1)
    for seed in range(6):
        tasks = netsim.build_tasks(np.array([[0, 1]]), np.eye(2), None, model, seed)
        assert len(tasks) == 1
        t = tasks[0]
        assert {t.src, t.dst} == {0, 1} and t.bytes == 4 * 4
    dsts = {netsim.build_tasks(np.array([[0, 1]]), np.eye(2), None, model, s)[0].dst
            for s in range(20)}
    assert dsts == {0, 1}


def test_build_tasks_applies_mapping():
    model = ModelSpec("t", 2, 2, 4, 4, 1)
    tok = np.array([[0, 1]])
    plain = netsim.build_tasks(tok, np.eye(3)[:2], None, model, 1)[0]
    mapped = netsim.build_tasks(tok, np.eye(3)[:2], NodeMapping([2, 0, 1]), model, 1)[0]
    perm = [2, 0, 1]
    assert (mapped.src, mapped.dst) == (perm[plain.src], perm[plain.dst])


def test_build_tasks_unplaced_expert():
    model = ModelSpec("t", 2, 1, 4, 4, 1)
    P = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError, match="unplaced expert"):
        netsim.build_tasks(np.array([[1]]), P, None, model, 0)


def test_task_bytes_match_volume_ledger():
    rng = np.random.default_rng(5)
    E, D, e, h = 6, 4, 2, 8
    model = ModelSpec("t", E, e, h, 4, 1)
    toks = np.array([rng.choice(E, e, replace=False) for _ in range(100)])
    P = rng.dirichlet(np.ones(D), size=E) * (rng.random((E, D)) < 0.4)
    P[np.arange(E), rng.integers(0, D, E)] += 0.2
    P /= P.sum(axis=1, keepdims=True)
    tasks = netsim.build_tasks(toks, P, None, model, seed=3)
    size = h * model.bytes_per_activation
    # per-token enumeration: every holder of the token's experts produces one partial,
    # all but the aggregation point ship it
    multi = 0
    for row in toks:
        holders = set(np.flatnonzero((P[row] > 1e-9).any(axis=0)))
        multi += len(holders) > 1
    stats = derive_stats(ActivationTrace(toks[None, None], E)).layer(0)
    per_node, _ = perfmodel.comm_estimate(P, stats, len(toks), model, grid(1, D))
    assert sum(t.bytes for t in tasks) == pytest.approx(per_node.sum() - multi * size)


def test_ring_single_node_is_free():
    assert netsim.simulate_ring_allreduce(grid(1, 1), 1 << 20) == 0.0


def test_ring_four_nodes_hand_schedule():
    assert netsim.simulate_ring_allreduce(grid(2, 2, bw=1.0), 16) == pytest.approx(24.0)


@pytest.mark.parametrize("rows,cols", [(2, 2), (4, 4), (2, 3), (3, 4), (1, 5), (3, 3)])
def test_ring_order_visits_every_node_once(rows, cols):
    order = netsim.ring_order(grid(rows, cols))
    assert sorted(order) == list(range(rows * cols))
    if rows % 2 == 0 or cols % 2 == 0:
        m = grid(rows, cols)
        for a, b in zip(order, order[1:] + order[:1]):
            assert len(netsim.route_links(m, a, b)) == 1


def test_heatmap_rows():
    m = grid(3, 4)
    rep = simulate([CommTask(0, 0, 11, 64)], m, 16)
    rows = netsim.link_heatmap_rows(rep, m)
    assert len(rows) == 3 * 4 * 4
    # boundary links: 2 * (rows + cols) directions point off the mesh
    assert sum(1 - r["exists"] for r in rows) == 2 * (3 + 4)
    assert sum(r["busy_s"] for r in rows) == pytest.approx(rep.per_link_busy_s.sum())


def test_busy_by_link_uses_endpoints():
    m = grid(1, 2, bw=8)
    rep = simulate([CommTask(0, 1, 0, 8)], m, 8)
    assert rep.busy_by_link(m) == {(1, 0): 1.0}
