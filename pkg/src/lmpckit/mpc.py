"""Receding-horizon task controller: CEM optimization of open-loop control
sequences against the expected-cost objective with penalty-encoded robust
constraints, plus the closed-loop execution and logging helpers.

Robust constraints are sample-approximated: each candidate sequence is
simulated under S shared disturbance sequences (common random numbers within
one solve), and violations are penalized per violating rollout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (ContractError, GoalRegion, RngStream, Trajectory,
                   stage_costs_batch)
from .safeset import DensityModel
from .value import ValueFunctionBank

CONSTRAINT_PENALTY = 1e8
TERMINAL_PENALTY = 1e6
VAR_FLOOR = 1e-6


@dataclass
class CemParams:
    pop_size: int = 400
    num_elites: int = 40
    num_iters: int = 5
    plan_hor: int = 15
    init_variance: float | None = None   # None -> (control range / 2)^2
    num_noise_rollouts: int = 5          # S disturbance sequences per candidate

    def __post_init__(self):
        if not (0 < self.num_elites <= self.pop_size):
            raise ContractError("need 0 < num_elites <= pop_size")
        if self.num_iters < 1 or self.plan_hor < 1 or self.num_noise_rollouts < 1:
            raise ContractError("num_iters, plan_hor and S must be >= 1")


@dataclass
class PlanResult:
    plan: np.ndarray                 # (H, m)
    objective: float
    stage_term: float
    value_term: float
    terminal_miss_frac: float
    violation_frac: float
    elite_trace: list = field(default_factory=list)


def simulate_batch(env, x0: np.ndarray, U: np.ndarray,
                   W: np.ndarray) -> np.ndarray:
    """Simulate N candidates x S disturbance sequences from a common start.

    U: (N, H, m); W: (S, H, k).  Returns states of shape (H+1, N*S, n) with
    rollout b = candidate * S + sample.
    """
    N, H, _ = U.shape
    S = W.shape[0]
    X = np.tile(np.asarray(x0, dtype=float), (N * S, 1))
    out = np.empty((H + 1,) + X.shape)
    out[0] = X
    for i in range(H):
        u = np.repeat(U[:, i], S, axis=0)
        w = np.tile(W[:, i], (N, 1))
        X = env.step_batch(X, u, w)
        out[i + 1] = X
    return out


class _PenaltyObjective:
    """Shared machinery: simulate, accumulate a running cost, add the
    1e8 state-constraint and 1e6 terminal-safe-set penalties per rollout."""

    def __init__(self, env, density: DensityModel, x0, w_samples):
        self.env = env
        self.density = density
        self.x0 = np.asarray(x0, dtype=float)
        self.w = np.asarray(w_samples, dtype=float)
        self.S = self.w.shape[0]

    def running_cost(self, states):
        """Per-rollout running cost from states (H+1, B, n)."""
        raise NotImplementedError

    def terminal_cost(self, terminal, safe_mask):
        """Per-rollout terminal value (already zeroed where unsafe)."""
        return np.zeros(len(terminal))

    def _components(self, U):
        states = simulate_batch(self.env, self.x0, U, self.w)
        H1, B, n = states.shape
        flat = states[1:].reshape(-1, n)
        ok = self.env.constraint_ok_batch(flat).reshape(H1 - 1, B)
        violated = ~np.all(ok, axis=0)
        terminal = states[-1]
        safe = self.density.is_safe_batch(terminal)
        run = self.running_cost(states)
        val = self.terminal_cost(terminal, safe)
        return run, val, safe, violated

    def __call__(self, U: np.ndarray) -> np.ndarray:
        U = np.asarray(U, dtype=float)
        N = U.shape[0]
        run, val, safe, violated = self._components(U)
        per_rollout = (run + val).reshape(N, self.S)
        miss = (~safe).reshape(N, self.S)
        viol = violated.reshape(N, self.S)
        return (per_rollout.mean(axis=1)
                + CONSTRAINT_PENALTY * viol.mean(axis=1)
                + TERMINAL_PENALTY * miss.mean(axis=1))

    def detail(self, u: np.ndarray) -> dict:
        run, val, safe, violated = self._components(np.asarray(u)[None])
        return {
            "stage_term": float(run.mean()),
            "value_term": float(val.mean()),
            "terminal_miss_frac": float((~safe).mean()),
            "violation_frac": float(violated.mean()),
            "objective": float((run + val).mean()
                               + CONSTRAINT_PENALTY * violated.mean()
                               + TERMINAL_PENALTY * (~safe).mean()),
        }


class MpcObjective(_PenaltyObjective):
    """Expected indicator stage cost over the horizon plus the bank-minimum
    terminal value, averaged over the shared disturbance samples."""

    def __init__(self, env, bank: ValueFunctionBank, density: DensityModel,
                 goal: GoalRegion, x0, w_samples, up_to_iteration: int):
        super().__init__(env, density, x0, w_samples)
        self.bank = bank
        self.goal = goal
        self.up_to_iteration = up_to_iteration

    def running_cost(self, states):
        # stage cost on x_0 .. x_{H-1}
        H1, B, n = states.shape
        flat = states[:-1].reshape(-1, n)
        return stage_costs_batch(self.goal, flat).reshape(H1 - 1, B).sum(axis=0)

    def terminal_cost(self, terminal, safe_mask):
        val = np.zeros(len(terminal))
        if np.any(safe_mask):
            v = self.bank.evaluate(terminal[safe_mask], self.up_to_iteration)
            # A safe terminal outside every member's support carries the most
            # pessimistic in-horizon estimate rather than the penalty.
            v[np.isinf(v)] = self.bank.horizon
            val[safe_mask] = v
        return val


def mpc_objective(env, bank, density, goal, x0, useq, w_samples,
                  up_to_iteration=None) -> float:
    """Objective value of one control sequence (convenience wrapper)."""
    if up_to_iteration is None:
        up_to_iteration = max(bank.iterations(), default=0)
    obj = MpcObjective(env, bank, density, goal, x0, w_samples, up_to_iteration)
    return float(obj(np.asarray(useq)[None])[0])


def cem_optimize(objective, params: CemParams, init_mean: np.ndarray,
                 rng: RngStream, control_low, control_high) -> PlanResult:
    """Cross-entropy optimization over open-loop control sequences.

    Per round: sample pop_size sequences from a per-timestep axis-aligned
    Gaussian truncated to the control box, keep the previous elites in the
    population (so the elite-mean trace is non-increasing on deterministic
    objectives), and refit mean and variance to the num_elites lowest costs.
    Returns the final elite mean.
    """
    H = params.plan_hor
    mean = np.array(init_mean, dtype=float)
    if mean.shape[0] != H:
        raise ContractError("init_mean length must equal plan_hor")
    lb = np.broadcast_to(np.asarray(control_low, dtype=float), mean.shape[1:])
    ub = np.broadcast_to(np.asarray(control_high, dtype=float), mean.shape[1:])
    if params.init_variance is None:
        var0 = ((ub - lb) / 2.0) ** 2
    else:
        var0 = np.broadcast_to(np.asarray(params.init_variance, dtype=float),
                               mean.shape[1:]).astype(float)
    degenerate = np.all(var0 == 0.0)
    var = np.tile(var0, (H, 1))
    gen = rng.generator
    elites = None
    trace = []
    for _ in range(params.num_iters):
        n_new = params.pop_size - (0 if elites is None else len(elites))
        eps = gen.standard_normal((n_new, H, mean.shape[1]))
        cands = np.clip(mean + np.sqrt(var) * eps, lb, ub)
        if elites is not None:
            cands = np.concatenate([elites, cands])
        costs = np.asarray(objective(cands), dtype=float)
        if not np.all(np.isfinite(costs)):
            raise ContractError("objective returned non-finite values")
        order = np.argsort(costs, kind="stable")[:params.num_elites]
        elites = cands[order]
        trace.append(float(costs[order].mean()))
        mean = elites.mean(axis=0)
        var = elites.var(axis=0)
        if not degenerate:
            var = np.maximum(var, VAR_FLOOR)
    plan = mean
    if hasattr(objective, "detail"):
        d = objective.detail(plan)
        result = PlanResult(plan=plan, elite_trace=trace, **d)
    else:
        result = PlanResult(plan=plan, elite_trace=trace,
                            objective=float(np.asarray(objective(plan[None]))[0]),
                            stage_term=np.nan, value_term=np.nan,
                            terminal_miss_frac=np.nan, violation_frac=np.nan)
    return result


def shift_plan(plan: np.ndarray) -> np.ndarray:
    """Warm start: drop the executed first step, repeat the last one."""
    return np.concatenate([plan[1:], plan[-1:]])


class MpcPolicy:
    """Receding-horizon controller: re-solve at every step, execute the first
    control, warm-start the next solve from the shifted plan."""

    def __init__(self, env, bank: ValueFunctionBank, density: DensityModel,
                 goal: GoalRegion, params: CemParams, rng: RngStream,
                 up_to_iteration: int):
        self.env = env
        self.bank = bank
        self.density = density
        self.goal = goal
        self.params = params
        self.rng = rng
        self.up_to_iteration = up_to_iteration
        self.prev_plan = None
        self.last_result: PlanResult | None = None

    def reset(self) -> None:
        self.prev_plan = None
        self.last_result = None

    def _draw_w_samples(self):
        p, noise = self.params, self.env.noise
        flat = noise.sample(self.rng, p.num_noise_rollouts * p.plan_hor)
        return flat.reshape(p.num_noise_rollouts, p.plan_hor, noise.dim)

    def __call__(self, x, t: int) -> np.ndarray:
        p = self.params
        m = self.env.control_dim
        if self.prev_plan is None:
            init_mean = np.zeros((p.plan_hor, m))
        else:
            init_mean = shift_plan(self.prev_plan)
        w_samples = self._draw_w_samples()
        objective = MpcObjective(self.env, self.bank, self.density, self.goal,
                                 x, w_samples, self.up_to_iteration)
        result = cem_optimize(objective, p, init_mean, self.rng,
                              self.env.control_low, self.env.control_high)
        self.prev_plan = result.plan
        self.last_result = result
        return self.env.clip_control(result.plan[0])


def mpc_policy_step(env, bank, density, goal, x, params, rng,
                    warm_start=None, up_to_iteration=None):
    """One-shot policy step (stateless wrapper around MpcPolicy)."""
    if up_to_iteration is None:
        up_to_iteration = max(bank.iterations(), default=0)
    policy = MpcPolicy(env, bank, density, goal, params, rng, up_to_iteration)
    policy.prev_plan = warm_start
    u = policy(x, 0)
    return u, policy.last_result


def rollout_closed_loop(env, policy, x0, T: int, goal: GoalRegion,
                        traj_seed: int, iteration: int = 0) -> Trajectory:
    """Execute `policy` for T steps with freshly sampled real disturbances.

    No early termination: all T steps are logged (post-entry stage costs are
    zero because the goal is invariant).  Disturbances come from the
    dedicated (traj_seed, "disturb") stream so a logged trajectory can be
    re-simulated bit-exactly from its seed and controls.
    """
    if T < 1:
        raise ContractError("T must be >= 1")
    disturb = RngStream(traj_seed, "disturb")
    x = np.asarray(x0, dtype=float)
    states = [x]
    controls, dists = [], []
    for t in range(T):
        u = np.asarray(policy(x, t), dtype=float)
        w = env.noise.sample(disturb, 1)[0]
        x = env.step(x, u, w)
        controls.append(u)
        dists.append(w)
        states.append(x)
    states = np.asarray(states)
    stage = stage_costs_batch(goal, states[:-1])
    return Trajectory(states, np.asarray(controls), np.asarray(dists), stage,
                      goal_id=goal.id, iteration=iteration, seed=traj_seed)


def replay_trajectory(env, traj: Trajectory) -> np.ndarray:
    """Re-simulate a logged trajectory from its seed and logged controls.

    Returns the reconstructed state sequence; bit-equality with the logged
    states verifies deterministic replay.
    """
    disturb = RngStream(traj.seed, "disturb")
    x = traj.states[0]
    states = [x]
    for t in range(traj.horizon):
        w = env.noise.sample(disturb, 1)[0]
        x = env.step(x, traj.controls[t], w)
        states.append(x)
    return np.asarray(states)
