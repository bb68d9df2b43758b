"""Shared domain types: goal regions, logged trajectories, seeded random streams.

Everything downstream (environments, safe sets, planners, the experiment
runner) builds on the types here.  All types are immutable value objects and
safe for concurrent reads; streams are single-owner.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TWO_PI = 2.0 * np.pi


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class ConfigurationError(ValueError):
    """Raised for invalid or incomplete configuration."""


def wrap_angle(theta):
    """Wrap angles to [0, 2*pi)."""
    return np.mod(theta, TWO_PI)


def angle_dist(a, b):
    """Absolute angular distance wrapped to [0, pi]."""
    return np.abs(np.mod(np.asarray(a) - np.asarray(b) + np.pi, TWO_PI) - np.pi)


# ---------------------------------------------------------------------------
# Seeded random streams
# ---------------------------------------------------------------------------

def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit sub-seed from a (seed, label) pair."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class RngStream:
    """A labelled, reproducible random stream.

    Identical (seed, label) pairs yield bit-identical draw sequences.  A
    stream has a single logical owner; fork sub-streams with :meth:`child`.
    """

    seed: int
    label: str

    def __post_init__(self):
        self._gen = np.random.default_rng(derive_seed(self.seed, self.label))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, sublabel: str) -> "RngStream":
        return RngStream(self.seed, f"{self.label}/{sublabel}")


# ---------------------------------------------------------------------------
# Goal regions
# ---------------------------------------------------------------------------

def _project_position(states):
    return np.asarray(states)[..., :2]


def _project_identity(states):
    return np.asarray(states)


def _chain_points(angles):
    """Joint positions of a planar unit-link chain, shape (..., L, 2)."""
    cum = np.cumsum(np.asarray(angles), axis=-1)
    return np.stack([np.cumsum(np.cos(cum), axis=-1),
                     np.cumsum(np.sin(cum), axis=-1)], axis=-1)


def _project_end_effector(states):
    return _chain_points(states)[..., -1, :]


def _project_angle(states):
    return wrap_angle(np.asarray(states)[..., :1])


PROJECTIONS: dict[str, Callable] = {
    "position": _project_position,
    "identity": _project_identity,
    "end_effector": _project_end_effector,
    "angle": _project_angle,
}


@dataclass(frozen=True)
class GoalRegion:
    """A goal set: a ball of `radius` around `center` in a projected feature
    space.  The "angle" projection uses wrapped angular distance (radians)."""

    id: str
    projection: str
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if self.projection not in PROJECTIONS:
            raise ConfigurationError(f"unknown projection {self.projection!r}")
        if not self.radius > 0:
            raise ConfigurationError("goal radius must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))

    @property
    def wrapped(self) -> bool:
        return self.projection == "angle"

    def distance(self, states) -> np.ndarray:
        """Feature-space distance from each state to the goal center."""
        states = np.asarray(states, dtype=float)
        feat = PROJECTIONS[self.projection](states)
        if feat.shape[-1] != self.center.shape[-1]:
            raise ContractError(
                f"projected feature dim {feat.shape[-1]} != center dim {self.center.shape[-1]}")
        if self.wrapped:
            return angle_dist(feat[..., 0], self.center[0])
        return np.linalg.norm(feat - self.center, axis=-1)

    def contains(self, states) -> np.ndarray:
        return self.distance(states) <= self.radius


def goal_contains(goal: GoalRegion, x) -> bool:
    """True iff the projected state lies within the goal radius."""
    return bool(goal.contains(np.asarray(x, dtype=float)))


def stage_cost(goal: GoalRegion, x, u=None) -> float:
    """Indicator task cost: 0 inside the goal region, 1 outside.

    The control argument is accepted for interface compatibility but ignored.
    """
    return 0.0 if goal_contains(goal, x) else 1.0


def stage_costs_batch(goal: GoalRegion, states) -> np.ndarray:
    """Vectorized indicator cost over a batch of states."""
    return (~goal.contains(states)).astype(float)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """A logged closed-loop rollout.

    states has length T+1, controls/disturbances/stage_costs length T, where
    stage_costs[t] is the indicator cost of states[t] against goal_id.
    """

    states: np.ndarray        # (T+1, n)
    controls: np.ndarray      # (T, m)
    disturbances: np.ndarray  # (T, k)
    stage_costs: np.ndarray   # (T,)
    goal_id: str
    iteration: int
    seed: int

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        self.disturbances = np.asarray(self.disturbances, dtype=float)
        self.stage_costs = np.asarray(self.stage_costs, dtype=float)
        T = len(self.controls)
        if len(self.states) != T + 1 or len(self.disturbances) != T \
                or len(self.stage_costs) != T:
            raise ContractError("inconsistent trajectory lengths")
        if not np.all(np.isfinite(self.states)):
            raise ContractError("non-finite states in trajectory")

    @property
    def horizon(self) -> int:
        return len(self.controls)

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.stage_costs))


def cost_to_go_labels(traj: Trajectory, goal: GoalRegion) -> np.ndarray:
    """Monte-Carlo cost-to-go labels: suffix sums of the indicator cost.

    label[t] = sum of indicator costs over states t..T, where the final state
    contributes its own indicator only (no bootstrap past the horizon).
    Satisfies label[t] - label[t+1] == stage_costs[t] exactly.
    """
    if len(traj.states) == 0:
        raise ContractError("empty trajectory")
    costs = np.concatenate([traj.stage_costs,
                            [stage_cost(goal, traj.states[-1])]])
    return np.cumsum(costs[::-1])[::-1]


# ---------------------------------------------------------------------------
# Trajectory CSV serialization
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    # %.17g round-trips float64 exactly
    return "%.17g" % x


def trajectory_header(n: int, m: int, k: int) -> list[str]:
    cols = ["iteration", "t"]
    cols += [f"state_{i}" for i in range(n)]
    cols += [f"control_{i}" for i in range(m)]
    cols += [f"disturbance_{i}" for i in range(k)]
    cols += ["stage_cost", "goal_id", "seed"]
    return cols


def save_trajectory_csv(traj: Trajectory, path) -> None:
    """One CSV row per timestep; the final state row leaves control,
    disturbance and stage_cost blank."""
    n = traj.states.shape[1]
    m = traj.controls.shape[1]
    k = traj.disturbances.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(trajectory_header(n, m, k))
        for t in range(traj.horizon + 1):
            row = [traj.iteration, t]
            row += [_fmt(v) for v in traj.states[t]]
            if t < traj.horizon:
                row += [_fmt(v) for v in traj.controls[t]]
                row += [_fmt(v) for v in traj.disturbances[t]]
                row += [_fmt(traj.stage_costs[t])]
            else:
                row += [""] * (m + k + 1)
            row += [traj.goal_id, traj.seed]
            w.writerow(row)


def load_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    n = sum(c.startswith("state_") for c in header)
    m = sum(c.startswith("control_") for c in header)
    k = sum(c.startswith("disturbance_") for c in header)
    T = len(body) - 1
    states = np.array([[float(v) for v in r[2:2 + n]] for r in body])
    controls = np.array([[float(v) for v in r[2 + n:2 + n + m]]
                         for r in body[:T]]).reshape(T, m)
    disturbances = np.array([[float(v) for v in r[2 + n + m:2 + n + m + k]]
                             for r in body[:T]]).reshape(T, k)
    stage = np.array([float(r[2 + n + m + k]) for r in body[:T]])
    goal_id = body[0][-2]
    seed = int(body[0][-1])
    iteration = int(body[0][0])
    return Trajectory(states, controls, disturbances, stage,
                      goal_id=goal_id, iteration=iteration, seed=seed)
