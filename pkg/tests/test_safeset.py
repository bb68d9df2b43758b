import numpy as np
import pytest

from lmpckit.core import (ConfigurationError, GoalRegion, angle_dist,
                          stage_costs_batch, Trajectory)
from lmpckit.envs import make_env
from lmpckit.safeset import (DensityModel, EuclideanMetric, SafeSetStore,
                             StateIndex, WrappedAngleMetric,
                             goal_conditioned_prefixes, is_safe,
                             metric_for_env)

GOAL = GoalRegion(id="g", projection="position",
                  center=np.array([0.0, 0.0]), radius=3.0)


def make_traj(states, goal, iteration=0):
    states = np.asarray(states, dtype=float)
    T = len(states) - 1
    n = states.shape[1]
    return Trajectory(states, np.zeros((T, n)), np.zeros((T, n)),
                      stage_costs_batch(goal, states[:-1]),
                      goal_id=goal.id, iteration=iteration, seed=0)


def test_density_matches_linear_scan_oracle():
    gen = np.random.default_rng(0)
    states = gen.normal(0, 20, size=(400, 4))
    alpha = 2.0
    model = DensityModel(states, GOAL, alpha)
    queries = gen.normal(0, 25, size=(1000, 4))
    got = model.is_safe_batch(queries)
    want = np.empty(1000, dtype=bool)
    for i, q in enumerate(queries):
        near = np.any(np.linalg.norm(states - q, axis=1) <= alpha)
        want[i] = near or np.linalg.norm(q[:2]) <= GOAL.radius
    assert np.array_equal(got, want)


def test_density_goal_short_circuit():
    model = DensityModel(np.empty((0, 4)), GOAL, alpha=1.0)
    assert is_safe(model, np.array([0.0, 0.0, 50.0, 50.0]))
    assert not is_safe(model, np.array([10.0, 0.0, 0.0, 0.0]))


def test_density_empty_without_goal_rejected():
    with pytest.raises(ConfigurationError):
        DensityModel(np.empty((0, 4)), None, alpha=1.0)
    with pytest.raises(ConfigurationError):
        DensityModel(np.zeros((3, 4)), GOAL, alpha=0.0)


def test_density_boundary_inclusive():
    model = DensityModel(np.array([[10.0, 0.0, 0.0, 0.0]]), None, alpha=2.0)
    assert is_safe(model, np.array([12.0, 0.0, 0.0, 0.0]))
    assert not is_safe(model, np.array([12.0001, 0.0, 0.0, 0.0]))


def test_wrapped_metric_against_brute_force():
    metric = WrappedAngleMetric(angle_index=0)
    gen = np.random.default_rng(1)
    pts = np.column_stack([gen.uniform(0, 2 * np.pi, 200),
                           gen.uniform(-8, 8, 200)])
    queries = np.column_stack([gen.uniform(0, 2 * np.pi, 100),
                               gen.uniform(-8, 8, 100)])
    index = StateIndex(pts, metric)
    dist, _ = index.nearest(queries)
    for i, q in enumerate(queries):
        d = np.sqrt(angle_dist(pts[:, 0], q[0]) ** 2 + (pts[:, 1] - q[1]) ** 2)
        assert np.isclose(dist[i], d.min(), atol=1e-9)


def test_metric_for_env():
    assert isinstance(metric_for_env(make_env("pendulum")), WrappedAngleMetric)
    m = metric_for_env(make_env("pointmass"))
    assert isinstance(m, EuclideanMetric)
    assert not isinstance(m, WrappedAngleMetric)


def test_store_monotone_inclusion():
    store = SafeSetStore(4)
    gen = np.random.default_rng(2)
    seen = []
    for j in range(5):
        block = gen.normal(0, 5, size=(17, 4))
        store.add_states("g", j, block)
        seen.append(block)
        upto_now = store.states("g", j)[0]
        want = np.concatenate(seen)
        assert np.array_equal(upto_now, want)
        if j > 0:
            prev = store.states("g", j - 1)[0]
            # exact set inclusion: every earlier row appears unchanged
            assert np.array_equal(upto_now[: len(prev)], prev)


def test_store_slices_by_iteration():
    store = SafeSetStore(2)
    store.add_states("g", 0, np.array([[0.0, 0.0]]))
    store.add_states("g", 2, np.array([[1.0, 1.0]]))
    assert store.size("g", 0) == 1
    assert store.size("g", 1) == 1
    assert store.size("g", 2) == 2
    assert store.size("other") == 0


def test_store_rejects_dim_mismatch():
    store = SafeSetStore(4)
    with pytest.raises(Exception):
        store.add_states("g", 0, np.zeros((3, 2)))


def test_store_csv_roundtrip(tmp_path):
    store = SafeSetStore(4)
    gen = np.random.default_rng(3)
    store.add_states("a", 0, gen.normal(0, 5, size=(10, 4)))
    store.add_states("a", 2, gen.normal(0, 5, size=(4, 4)))
    store.add_states("b", 1, gen.normal(0, 5, size=(6, 4)))
    path = tmp_path / "ss.csv"
    store.save_csv(path)
    back = SafeSetStore.load_csv(path)
    for gid in ("a", "b"):
        s0, i0 = store.states(gid)
        s1, i1 = back.states(gid)
        assert np.array_equal(s0, s1)
        assert np.array_equal(i0, i1)


def test_from_store_respects_up_to():
    store = SafeSetStore(4)
    store.add_states(GOAL.id, 0, np.array([[20.0, 0.0, 0.0, 0.0]]))
    store.add_states(GOAL.id, 1, np.array([[40.0, 0.0, 0.0, 0.0]]))
    m0 = DensityModel.from_store(store, GOAL, alpha=1.0, up_to_iteration=0)
    m1 = DensityModel.from_store(store, GOAL, alpha=1.0, up_to_iteration=1)
    q = np.array([40.0, 0.0, 0.0, 0.0])
    assert not is_safe(m0, q)
    assert is_safe(m1, q)


def test_prefixes_match_first_entry_scan():
    new_goal = GoalRegion(id="h", projection="position",
                          center=np.array([5.0, 5.0]), radius=2.0)
    gen = np.random.default_rng(4)
    trajs = []
    for k in range(30):
        states = gen.normal(0, 6, size=(21, 4))
        trajs.append(make_traj(states, GOAL, iteration=k % 3))
    prefixes = goal_conditioned_prefixes(trajs, new_goal)
    # brute-force oracle
    want = []
    for traj in trajs:
        hit = None
        for t, s in enumerate(traj.states):
            if np.linalg.norm(s[:2] - new_goal.center) <= new_goal.radius:
                hit = t
                break
        if hit is not None:
            want.append((traj, hit))
    assert len(prefixes) == len(want)
    for p, (orig, k) in zip(prefixes, want):
        assert np.array_equal(p.states, orig.states[: k + 1])
        assert p.goal_id == new_goal.id
        assert p.iteration == orig.iteration
        # last state inside, no earlier state inside
        inside = new_goal.contains(p.states)
        assert inside[-1]
        assert not np.any(inside[:-1])
        assert np.array_equal(p.stage_costs,
                              stage_costs_batch(new_goal, p.states[:-1]))


def test_prefixes_skip_nonintersecting():
    far = GoalRegion(id="far", projection="position",
                     center=np.array([1e6, 1e6]), radius=1.0)
    trajs = [make_traj(np.zeros((5, 4)), GOAL)]
    assert goal_conditioned_prefixes(trajs, far) == []
