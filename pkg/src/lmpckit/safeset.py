"""Sample-based safe sets, the tophat nearest-neighbor density model used as
the MPC terminal membership test, and goal-conditioned prefix extraction.

The density query must be exact: the spatial index (cKDTree) returns exact
nearest neighbors.  For the pendulum, the angle coordinate is wrapped by
replicating stored points at theta +/- 2*pi before indexing, which makes the
tree's Euclidean metric coincide with the wrapped metric for queries with
theta in [0, 2*pi).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import (ConfigurationError, ContractError, GoalRegion, TWO_PI,
                   Trajectory, cost_to_go_labels, stage_costs_batch)


# ---------------------------------------------------------------------------
# State-space metrics
# ---------------------------------------------------------------------------

class EuclideanMetric:
    """Plain Euclidean metric over raw state coordinates."""

    def replicate(self, points: np.ndarray):
        """Return (index_points, original_indices) for tree construction."""
        return points, np.arange(len(points))

    def pair_dist(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """All-pairs distances, shape (len(a), len(b))."""
        return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


class WrappedAngleMetric(EuclideanMetric):
    """Euclidean metric with the given coordinate treated as a wrapped angle."""

    def __init__(self, angle_index: int = 0):
        self.angle_index = angle_index

    def replicate(self, points: np.ndarray):
        shifts = []
        idx = []
        for k in (-1.0, 0.0, 1.0):
            p = points.copy()
            p[:, self.angle_index] += k * TWO_PI
            shifts.append(p)
            idx.append(np.arange(len(points)))
        return np.concatenate(shifts), np.concatenate(idx)

    def pair_dist(self, a, b):
        diff = a[:, None, :] - b[None, :, :]
        ai = self.angle_index
        diff[..., ai] = np.abs(np.mod(diff[..., ai] + np.pi, TWO_PI) - np.pi)
        return np.linalg.norm(diff, axis=-1)


def metric_for_env(env) -> EuclideanMetric:
    if getattr(env, "name", "") == "pendulum":
        return WrappedAngleMetric(0)
    return EuclideanMetric()


class StateIndex:
    """Exact nearest-neighbor index over a fixed point set under a metric."""

    def __init__(self, points: np.ndarray, metric: EuclideanMetric):
        self.points = np.asarray(points, dtype=float)
        self.metric = metric
        index_points, self._orig = metric.replicate(self.points)
        self._tree = cKDTree(index_points)

    def __len__(self):
        return len(self.points)

    def nearest(self, queries: np.ndarray):
        """(distances, original indices) of exact nearest neighbors."""
        q = np.atleast_2d(queries)
        dist, idx = self._tree.query(q, k=1)
        return dist, self._orig[idx]

    def within(self, queries: np.ndarray, radius: float):
        """List of original-index arrays of points within `radius`."""
        q = np.atleast_2d(queries)
        hits = self._tree.query_ball_point(q, radius)
        return [self._orig[np.asarray(h, dtype=int)] if len(h) else
                np.empty(0, dtype=int) for h in hits]


# ---------------------------------------------------------------------------
# Safe set store
# ---------------------------------------------------------------------------

class SafeSetStore:
    """Per-(goal, iteration) collections of visited states.

    Collections only grow within a goal: the states visible at iteration j are
    a subset of those visible at any later iteration.
    """

    def __init__(self, state_dim: int):
        self.state_dim = state_dim
        self._data: dict[str, dict[int, list[np.ndarray]]] = {}

    def goals(self):
        return list(self._data)

    def iterations(self, goal_id: str):
        return sorted(self._data.get(goal_id, {}))

    def add_states(self, goal_id: str, iteration: int, states: np.ndarray) -> None:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.size == 0:
            return
        if states.shape[1] != self.state_dim:
            raise ContractError("state dimension mismatch")
        self._data.setdefault(goal_id, {}).setdefault(iteration, []).append(states)

    def add_rollouts(self, goal_id: str, iteration: int,
                     trajs: list[Trajectory]) -> None:
        """Append every visited state of the given closed-loop rollouts."""
        for traj in trajs:
            if traj.goal_id != goal_id:
                raise ContractError(
                    f"trajectory logged under {traj.goal_id!r}, expected {goal_id!r}")
            self.add_states(goal_id, iteration, traj.states)

    def states(self, goal_id: str, up_to_iteration: int | None = None):
        """(states, iteration_ids) in (iteration, insertion) order."""
        blocks, iters = [], []
        for j in self.iterations(goal_id):
            if up_to_iteration is not None and j > up_to_iteration:
                continue
            for arr in self._data[goal_id][j]:
                blocks.append(arr)
                iters.append(np.full(len(arr), j, dtype=int))
        if not blocks:
            return (np.empty((0, self.state_dim)), np.empty(0, dtype=int))
        return np.concatenate(blocks), np.concatenate(iters)

    def size(self, goal_id: str, up_to_iteration: int | None = None) -> int:
        return len(self.states(goal_id, up_to_iteration)[0])

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["goal_id", "iteration"]
                       + [f"state_{i}" for i in range(self.state_dim)])
            for goal_id in self._data:
                states, iters = self.states(goal_id)
                for s, j in zip(states, iters):
                    w.writerow([goal_id, j] + ["%.17g" % v for v in s])

    @classmethod
    def load_csv(cls, path) -> "SafeSetStore":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:]
        n = sum(c.startswith("state_") for c in header)
        store = cls(n)
        for r in body:
            store.add_states(r[0], int(r[1]), np.array([float(v) for v in r[2:2 + n]]))
        return store


# ---------------------------------------------------------------------------
# Tophat density model
# ---------------------------------------------------------------------------

class DensityModel:
    """Tophat kernel density over a safe-set slice, with the goal region
    short-circuiting membership (the goal is part of the safe set by
    definition, so no goal states need to be sampled)."""

    def __init__(self, states: np.ndarray, goal: GoalRegion | None,
                 alpha: float, metric: EuclideanMetric | None = None,
                 delta: float = 0.0):
        if alpha <= 0:
            raise ConfigurationError("kernel width alpha must be positive")
        states = np.asarray(states, dtype=float)
        if states.size == 0 and goal is None:
            raise ConfigurationError("empty density model with no goal region")
        self.alpha = float(alpha)
        self.delta = float(delta)
        self.goal = goal
        self.metric = metric or EuclideanMetric()
        self._index = StateIndex(states, self.metric) if states.size else None

    @classmethod
    def from_store(cls, store: SafeSetStore, goal: GoalRegion, alpha: float,
                   metric=None, up_to_iteration: int | None = None,
                   delta: float = 0.0) -> "DensityModel":
        states, _ = store.states(goal.id, up_to_iteration)
        return cls(states, goal, alpha, metric=metric, delta=delta)

    def density(self, x) -> np.ndarray:
        """Tophat density: 1 within alpha of a stored state or inside the
        goal region, else 0."""
        q = np.atleast_2d(np.asarray(x, dtype=float))
        hit = np.zeros(len(q), dtype=bool)
        if self._index is not None:
            dist, _ = self._index.nearest(q)
            hit |= dist <= self.alpha
        if self.goal is not None:
            hit |= self.goal.contains(q)
        return hit.astype(float)

    def is_safe_batch(self, x) -> np.ndarray:
        return self.density(x) > self.delta

    def is_safe(self, x) -> bool:
        return bool(self.is_safe_batch(x)[0])


def is_safe(model: DensityModel, x) -> bool:
    return model.is_safe(x)


# ---------------------------------------------------------------------------
# Goal-conditioned prefixes
# ---------------------------------------------------------------------------

def goal_conditioned_prefixes(trajs: list[Trajectory],
                              new_goal: GoalRegion) -> list[Trajectory]:
    """Prefixes of trajectories up to and including their first state inside
    `new_goal`, relabelled with the new goal's indicator costs.  Trajectories
    that never enter the new goal contribute nothing."""
    out = []
    for traj in trajs:
        inside = new_goal.contains(traj.states)
        if not np.any(inside):
            continue
        k = int(np.argmax(inside))
        if k == 0:
            # Single-state prefix: the start is already in the new goal.
            states = traj.states[:1]
            controls = traj.controls[:0]
            dists = traj.disturbances[:0]
            costs = np.empty(0)
        else:
            states = traj.states[:k + 1]
            controls = traj.controls[:k]
            dists = traj.disturbances[:k]
            costs = stage_costs_batch(new_goal, states[:-1])
        out.append(Trajectory(states, controls, dists, costs,
                              goal_id=new_goal.id, iteration=traj.iteration,
                              seed=traj.seed))
    return out
