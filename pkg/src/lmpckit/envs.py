"""Known stochastic dynamics, disturbance sampling and state constraints for
the three benchmark systems: point-mass navigation, a planar 7-link reacher,
and a torque-limited pendulum.

All environments are immutable parameter bundles.  `step_batch` and the
constraint checks are pure functions operating on (B, dim) arrays; `step`
is the single-state convenience wrapper.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (ContractError, GoalRegion, RngStream, TWO_PI,
                   _chain_points, wrap_angle)


@dataclass(frozen=True)
class TruncGaussSpec:
    """N(0, sigma^2 I) conditioned on the box [-sigma, sigma]^dim."""

    sigma: float
    dim: int

    def sample(self, rng: RngStream, count: int = 1) -> np.ndarray:
        """Rejection-sample `count` disturbance vectors, shape (count, dim)."""
        if self.sigma == 0.0:
            return np.zeros((count, self.dim))
        gen = rng.generator
        out = gen.normal(0.0, self.sigma, size=(count, self.dim))
        bad = np.abs(out) > self.sigma
        while np.any(bad):
            out[bad] = gen.normal(0.0, self.sigma, size=int(bad.sum()))
            bad = np.abs(out) > self.sigma
        return out

    def truncated_variance(self) -> float:
        """Per-coordinate variance of the +/- one-sigma truncated Gaussian."""
        from scipy import stats
        return float(self.sigma ** 2 * stats.truncnorm.var(-1.0, 1.0))


def sample_disturbance(env, rng: RngStream) -> np.ndarray:
    """Draw a single disturbance vector for `env`."""
    return env.noise.sample(rng, 1)[0]


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ContractError("non-finite input to step")


@dataclass(frozen=True)
class PointMassEnv:
    """Point mass with linear drag on a plane, axis-aligned box obstacle.

    State (x, y, vx, vy); control (fx, fy) with ||f|| <= force_bound.
    Semi-implicit unit-timestep Euler; truncated-Gaussian noise enters the
    velocity additively after integration (the position components of the
    disturbance vector are unused).
    """

    drag: float = 0.2
    noise: TruncGaussSpec = TruncGaussSpec(0.05, 4)
    force_bound: float = 1.0
    obstacle_center: tuple = (-25.0, 0.0)
    obstacle_half_extents: tuple = (10.0, 10.0)
    horizon: int = 50

    name = "pointmass"
    state_dim = 4
    control_dim = 2

    @property
    def control_low(self):
        return -self.force_bound * np.ones(2)

    @property
    def control_high(self):
        return self.force_bound * np.ones(2)

    def clip_control(self, u: np.ndarray) -> np.ndarray:
        """Clip force to the norm ball of radius force_bound."""
        u = np.asarray(u, dtype=float)
        norm = np.linalg.norm(u, axis=-1, keepdims=True)
        scale = np.where(norm > self.force_bound, self.force_bound / np.maximum(norm, 1e-12), 1.0)
        return u * scale

    def step_batch(self, x, u, w) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = self.clip_control(np.atleast_2d(u))
        w = np.atleast_2d(np.asarray(w, dtype=float))
        _check_finite(x, u, w)
        v_new = x[:, 2:4] + u - self.drag * x[:, 2:4] + w[:, 2:4]
        p_new = x[:, 0:2] + v_new
        return np.concatenate([p_new, v_new], axis=1)

    def step(self, x, u, w) -> np.ndarray:
        return self.step_batch(x, u, w)[0]

    def constraint_ok_batch(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        c = np.asarray(self.obstacle_center)
        h = np.asarray(self.obstacle_half_extents)
        inside = np.all(np.abs(x[:, :2] - c) <= h, axis=1)
        return ~inside

    def constraint_ok(self, x) -> bool:
        return bool(self.constraint_ok_batch(x)[0])


def forward_kinematics(env, theta) -> np.ndarray:
    """End-effector position of the planar unit-link chain, shape (..., 2)."""
    return _chain_points(theta)[..., -1, :]


def _segment_min_dist_sq(p0, p1, c):
    """Squared min distance from point c to segments p0->p1 (broadcasting)."""
    d = p1 - p0
    denom = np.sum(d * d, axis=-1)
    t = np.sum((c - p0) * d, axis=-1) / np.maximum(denom, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    closest = p0 + t[..., None] * d
    return np.sum((closest - c) ** 2, axis=-1)


@dataclass(frozen=True)
class ReacherEnv:
    """Planar kinematic chain of 7 unit links commanded in delta joint angles.

    State: 7 absolute joint angles; next angle = angle + clipped command +
    noise.  A circular obstacle must stay clear of every link segment.
    """

    num_links: int = 7
    noise: TruncGaussSpec = TruncGaussSpec(0.03, 7)
    delta_max: float = 0.15
    obstacle_center: tuple = (2.0, 2.0)
    obstacle_radius: float = 1.0
    horizon: int = 50

    name = "reacher"
    state_dim = 7
    control_dim = 7

    @property
    def control_low(self):
        return -self.delta_max * np.ones(self.num_links)

    @property
    def control_high(self):
        return self.delta_max * np.ones(self.num_links)

    def clip_control(self, u):
        return np.clip(np.asarray(u, dtype=float), -self.delta_max, self.delta_max)

    def step_batch(self, x, u, w) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = self.clip_control(np.atleast_2d(u))
        w = np.atleast_2d(np.asarray(w, dtype=float))
        _check_finite(x, u, w)
        return x + u + w

    def step(self, x, u, w) -> np.ndarray:
        return self.step_batch(x, u, w)[0]

    def link_points(self, x) -> np.ndarray:
        """Chain joint positions including the base, shape (..., L+1, 2)."""
        x = np.asarray(x, dtype=float)
        pts = _chain_points(x)
        base = np.zeros(pts.shape[:-2] + (1, 2))
        return np.concatenate([base, pts], axis=-2)

    def constraint_ok_batch(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        pts = self.link_points(x)                      # (B, L+1, 2)
        c = np.asarray(self.obstacle_center)
        d2 = _segment_min_dist_sq(pts[:, :-1], pts[:, 1:], c)  # (B, L)
        return np.min(d2, axis=-1) > self.obstacle_radius ** 2

    def constraint_ok(self, x) -> bool:
        return bool(self.constraint_ok_batch(x)[0])


@dataclass(frozen=True)
class PendulumEnv:
    """Torque-limited pendulum; angle 0 is upright, increasing
    counterclockwise, wrapped to [0, 2*pi).  Noise enters the angular
    velocity additively after integration; velocity is clipped to
    +/- omega_max.
    """

    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    timestep: float = 0.05
    torque_bound: float = 2.0
    omega_max: float = 8.0
    noise: TruncGaussSpec = TruncGaussSpec(0.5, 1)
    horizon: int = 40

    name = "pendulum"
    state_dim = 2
    control_dim = 1

    @property
    def control_low(self):
        return -self.torque_bound * np.ones(1)

    @property
    def control_high(self):
        return self.torque_bound * np.ones(1)

    def clip_control(self, u):
        return np.clip(np.asarray(u, dtype=float), -self.torque_bound, self.torque_bound)

    def step_batch(self, x, u, w) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = self.clip_control(np.atleast_2d(u))
        w = np.atleast_2d(np.asarray(w, dtype=float))
        _check_finite(x, u, w)
        g, m, l, dt = self.gravity, self.mass, self.length, self.timestep
        theta, omega = x[:, 0], x[:, 1]
        acc = 1.5 * g / l * np.sin(theta) + 3.0 / (m * l ** 2) * u[:, 0]
        omega_new = np.clip(omega + dt * acc + w[:, 0], -self.omega_max, self.omega_max)
        theta_new = wrap_angle(theta + dt * omega_new)
        return np.stack([theta_new, omega_new], axis=1)

    def step(self, x, u, w) -> np.ndarray:
        return self.step_batch(x, u, w)[0]

    def constraint_ok_batch(self, x) -> np.ndarray:
        return np.ones(len(np.atleast_2d(x)), dtype=bool)

    def constraint_ok(self, x) -> bool:
        return True


def state_constraint_ok(env, x) -> bool:
    """Single-state constraint predicate for `env`."""
    return env.constraint_ok(x)


_ENV_CLASSES = {
    "pointmass": PointMassEnv,
    "reacher": ReacherEnv,
    "pendulum": PendulumEnv,
}


def make_env(name: str, **overrides):
    """Build an environment by name with field overrides.

    `noise_sigma` overrides the disturbance scale, keeping the dimension.
    """
    cls = _ENV_CLASSES[name]
    if "noise_sigma" in overrides:
        sigma = overrides.pop("noise_sigma")
        default = cls().noise
        overrides["noise"] = TruncGaussSpec(sigma, default.dim)
    for key in ("obstacle_center", "obstacle_half_extents"):
        if key in overrides and isinstance(overrides[key], list):
            overrides[key] = tuple(overrides[key])
    return cls(**overrides)
