"""Scripted suboptimal demonstrators for the navigation and reacher tasks.

The navigation demonstrator follows waypoints over the obstacle and then
switches to stabilizing linear feedback near the goal; the reacher
demonstrator regulates toward a fixed joint configuration solved once by
damped-least-squares IK.  Both add Gaussian action noise and clip to the
control bounds, so demos are deliberately suboptimal but constraint
satisfying and goal reaching.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError, GoalRegion, RngStream, Trajectory, \
    stage_costs_batch
from .envs import PointMassEnv, ReacherEnv, forward_kinematics


@dataclass
class DemoSpec:
    count: int = 100
    noise_scale: float = 0.15
    retry_budget: int = 20


class NavigationWaypointPolicy:
    """Proportional waypoint follower over the obstacle, then linear feedback
    to the goal center."""

    def __init__(self, env: PointMassEnv, goal: GoalRegion,
                 noise_scale: float, gen: np.random.Generator):
        cx, cy = env.obstacle_center
        hx, hy = env.obstacle_half_extents
        margin = 4.0
        self.waypoints = [
            np.array([cx - hx - 2.0, cy + hy + margin]),
            np.array([cx + hx + 2.0, cy + hy + margin]),
        ]
        self.goal_center = np.asarray(goal.center, dtype=float)
        self.wp_index = 0
        self.switch_radius = 7.0
        self.kp = 0.06
        self.kd = 0.24
        self.kp_goal = 0.16
        self.kd_goal = 0.95
        self.noise_scale = noise_scale
        self.gen = gen

    def __call__(self, x, t):
        p, v = x[:2], x[2:]
        if self.wp_index < len(self.waypoints):
            target = self.waypoints[self.wp_index]
            if np.linalg.norm(p - target) < self.switch_radius:
                self.wp_index += 1
                return self(x, t)
            f = self.kp * (target - p) - self.kd * v
        else:
            f = self.kp_goal * (self.goal_center - p) - self.kd_goal * v
        f = f + self.gen.normal(0.0, self.noise_scale, size=2)
        return f


def _reacher_ik(env: ReacherEnv, target: np.ndarray,
                guess: np.ndarray, iters: int = 300) -> np.ndarray:
    """Damped-least-squares IK for the planar chain (deterministic)."""
    theta = guess.astype(float).copy()
    lam = 0.5
    for _ in range(iters):
        pts = env.link_points(theta)
        ee = pts[-1]
        err = target - ee
        if np.linalg.norm(err) < 1e-10:
            break
        # Jacobian of the end effector w.r.t. absolute joint angles
        J = np.zeros((2, env.num_links))
        for i in range(env.num_links):
            pivot = pts[i]
            r = ee - pivot
            J[0, i] = -r[1]
            J[1, i] = r[0]
        JT = J.T
        step = JT @ np.linalg.solve(J @ JT + lam * np.eye(2), err)
        theta += np.clip(step, -0.2, 0.2)
    return theta


class ReacherJointPathPolicy:
    """Slow proportional regulation toward a fixed goal joint configuration."""

    def __init__(self, env: ReacherEnv, goal: GoalRegion,
                 noise_scale: float, gen: np.random.Generator):
        guess = np.full(env.num_links, -0.35)
        self.theta_star = _reacher_ik(env, np.asarray(goal.center, float), guess)
        self.goal = goal
        self.rate = 0.024    # per-joint step size while approaching
        self.delay = 12      # idle steps before moving, spreads out arrival times
        self.kp_hold = 1.0   # full correction: holds the goal under noise
        self.hold_radius = 0.9 * goal.radius
        # noise_scale is relative to the per-joint control bound
        self.noise_scale = noise_scale * env.control_high[0]
        self.gen = gen

    def __call__(self, x, t):
        near = self.goal.distance(x[None])[0] < self.hold_radius
        if near:
            return self.kp_hold * (self.theta_star - x)
        if t < self.delay:
            return self.gen.normal(0.0, self.noise_scale, size=len(x))
        u = np.clip(self.theta_star - x, -self.rate, self.rate)
        return u + self.gen.normal(0.0, self.noise_scale, size=len(x))


DEMO_POLICIES = {
    "pointmass": NavigationWaypointPolicy,
    "reacher": ReacherJointPathPolicy,
}


def demo_rollout(env, policy, x0, goal: GoalRegion, seed: int) -> Trajectory:
    """Roll a demonstrator for the task horizon with real process noise."""
    disturb = RngStream(seed, "disturb")
    x = np.asarray(x0, dtype=float)
    states, controls, dists = [x], [], []
    for t in range(env.horizon):
        u = env.clip_control(np.asarray(policy(x, t), dtype=float))
        w = env.noise.sample(disturb, 1)[0]
        x = env.step(x, u, w)
        controls.append(u)
        dists.append(w)
        states.append(x)
    states = np.asarray(states)
    stage = stage_costs_batch(goal, states[:-1])
    return Trajectory(states, np.asarray(controls), np.asarray(dists), stage,
                      goal_id=goal.id, iteration=0, seed=seed)


def generate_demos(env, spec: DemoSpec, goal: GoalRegion, start_state,
                   rng: RngStream) -> list[Trajectory]:
    """Generate constraint-satisfying, goal-reaching demonstrations.

    A demo that violates constraints or fails to reach (and stay in) the goal
    is resampled up to the retry budget.
    """
    if spec.count < 1:
        raise ConfigurationError("demo count must be >= 1")
    if env.name not in DEMO_POLICIES:
        raise ConfigurationError(f"no demonstrator for environment {env.name!r}")
    demos = []
    for i in range(spec.count):
        ok = False
        for attempt in range(spec.retry_budget):
            sub = rng.child(f"demo{i}/try{attempt}")
            gen = sub.generator
            policy = DEMO_POLICIES[env.name](env, goal, spec.noise_scale, gen)
            traj = demo_rollout(env, policy, start_state, goal, sub.seed)
            reached = bool(goal.contains(traj.states[-1])) \
                and traj.total_cost < env.horizon
            feasible = bool(np.all(env.constraint_ok_batch(traj.states)))
            if reached and feasible:
                demos.append(traj)
                ok = True
                break
        if not ok:
            raise ConfigurationError(
                f"demonstrator failed to produce a valid demo (index {i})")
    return demos
