"""Start-state expansion toward a target start, goal-set transfer, and the
optional exploration-augmented safe set.

Expansion alternates with the task phase: candidate starts are drawn
best-first from the safe set under the expansion distance cost, an
exploration control sequence is optimized by CEM to pull the system toward
the target while terminating back inside the safe set, and the candidate is
accepted only if all R noisy rollouts of the optimized sequence end safe.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (ConfigurationError, GoalRegion, RngStream, Trajectory,
                   angle_dist, stage_costs_batch, wrap_angle)
from .envs import forward_kinematics
from .mpc import CemParams, PlanResult, _PenaltyObjective, cem_optimize
from .safeset import DensityModel, SafeSetStore, goal_conditioned_prefixes
from .value import ValueFunctionBank, ValueMemberSpec, fit_iteration_value


# ---------------------------------------------------------------------------
# Expansion distance costs
# ---------------------------------------------------------------------------

def _position_distance(states, target):
    return np.linalg.norm(np.atleast_2d(states)[:, :2] - target[:2], axis=-1)


def _end_effector_distance(states, target):
    ee = forward_kinematics(None, np.atleast_2d(states))
    target_ee = forward_kinematics(None, target)
    return np.linalg.norm(ee - target_ee, axis=-1)


def _angle_distance(states, target):
    return angle_dist(np.atleast_2d(states)[:, 0], target[0])


DISTANCE_COSTS = {
    "position": _position_distance,
    "end_effector": _end_effector_distance,
    "angle": _angle_distance,
}


@dataclass
class ExpansionSpec:
    """Target start state and distance cost for domain expansion."""

    target_start: np.ndarray
    distance: str                 # key in DISTANCE_COSTS
    explore_horizon: int          # H'
    rollouts: int = 5             # acceptance batch R
    max_candidates: int = 25      # rejection budget K per iteration
    # expansion halts once C_E(start, target) falls below this; None means
    # the safe-set kernel width alpha (the angle metric saturates at pi, so
    # wedge-goal tasks need a tighter stop than alpha)
    stop_distance: float | None = None
    # re-solve the exploration problem at every step of the acceptance
    # rollouts instead of executing one open-loop sequence; slower but much
    # better at energy-pumping tasks (swing-up)
    replan: bool = False

    def __post_init__(self):
        self.target_start = np.asarray(self.target_start, dtype=float)
        if self.explore_horizon < 1 or self.rollouts < 1:
            raise ConfigurationError("explore_horizon and rollouts must be >= 1")
        if self.distance not in DISTANCE_COSTS:
            raise ConfigurationError(f"unknown distance cost {self.distance!r}")

    def cost(self, states) -> np.ndarray:
        return DISTANCE_COSTS[self.distance](states, self.target_start)


@dataclass
class ExpansionOutcome:
    candidate_start: np.ndarray
    accepted: bool
    exploration_trajs: list = field(default_factory=list)
    next_start: np.ndarray | None = None
    plan: PlanResult | None = None


class ExplorationObjective(_PenaltyObjective):
    """Sum of the expansion distance cost over the simulated rollout states
    (post-start, terminal included), with the same constraint and terminal
    safe-set penalties as the task objective."""

    def __init__(self, env, density: DensityModel, spec: ExpansionSpec,
                 x0, w_samples):
        super().__init__(env, density, x0, w_samples)
        self.spec = spec

    def running_cost(self, states):
        H1, B, n = states.shape
        flat = states[1:].reshape(-1, n)
        return self.spec.cost(flat).reshape(H1 - 1, B).sum(axis=0)


def select_candidate_start(store: SafeSetStore, goal_id: str,
                           spec: ExpansionSpec,
                           up_to_iteration: int | None = None) -> np.ndarray:
    """The stored safe-set state minimizing the distance cost to the target
    (ties broken by earliest iteration, then insertion order)."""
    states, _ = store.states(goal_id, up_to_iteration)
    if len(states) == 0:
        raise ConfigurationError(f"empty safe set for goal {goal_id!r}")
    costs = spec.cost(states)
    return states[int(np.argmin(costs))]


def exploration_optimize(env, density: DensityModel, spec: ExpansionSpec,
                         x_s, cem: CemParams, rng: RngStream,
                         horizon: int | None = None) -> PlanResult:
    """CEM over H'-length control sequences minimizing the rollout-averaged
    expansion cost subject to the penalty-encoded constraints."""
    if horizon is None:
        horizon = spec.explore_horizon
    params = CemParams(pop_size=cem.pop_size, num_elites=cem.num_elites,
                       num_iters=cem.num_iters, plan_hor=horizon,
                       init_variance=cem.init_variance,
                       num_noise_rollouts=cem.num_noise_rollouts)
    noise = env.noise
    w = noise.sample(rng, params.num_noise_rollouts * params.plan_hor)
    w = w.reshape(params.num_noise_rollouts, params.plan_hor, noise.dim)
    objective = ExplorationObjective(env, density, spec, x_s, w)
    init_mean = np.zeros((params.plan_hor, env.control_dim))
    return cem_optimize(objective, params, init_mean, rng,
                        env.control_low, env.control_high)


def _execute_open_loop(env, plan: np.ndarray, x0, goal: GoalRegion,
                       traj_seed: int, iteration: int) -> Trajectory:
    """Run an optimized open-loop sequence under real noise and log it."""
    disturb = RngStream(traj_seed, "disturb")
    x = np.asarray(x0, dtype=float)
    states, controls, dists = [x], [], []
    for u in plan:
        u = env.clip_control(u)
        w = env.noise.sample(disturb, 1)[0]
        x = env.step(x, u, w)
        controls.append(u)
        dists.append(w)
        states.append(x)
    states = np.asarray(states)
    stage = stage_costs_batch(goal, states[:-1])
    return Trajectory(states, np.asarray(controls), np.asarray(dists), stage,
                      goal_id=goal.id, iteration=iteration, seed=traj_seed)


def _execute_replanned(env, density: DensityModel, spec: ExpansionSpec,
                       cem: CemParams, x0, goal: GoalRegion, traj_seed: int,
                       iteration: int, rng: RngStream) -> Trajectory:
    """Run an exploration rollout that re-solves the remaining-steps problem
    from the current state before every control (shrinking horizon, so the
    final solve still enforces terminal safe-set membership)."""
    disturb = RngStream(traj_seed, "disturb")
    x = np.asarray(x0, dtype=float)
    states, controls, dists = [x], [], []
    for t in range(spec.explore_horizon):
        plan = exploration_optimize(env, density, spec, x, cem,
                                    rng.child(f"t{t}"),
                                    horizon=spec.explore_horizon - t)
        u = env.clip_control(plan.plan[0])
        w = env.noise.sample(disturb, 1)[0]
        x = env.step(x, u, w)
        controls.append(u)
        dists.append(w)
        states.append(x)
    states = np.asarray(states)
    stage = stage_costs_batch(goal, states[:-1])
    return Trajectory(states, np.asarray(controls), np.asarray(dists), stage,
                      goal_id=goal.id, iteration=iteration, seed=traj_seed)


def attempt_expansion(env, store: SafeSetStore, density: DensityModel,
                      goal: GoalRegion, spec: ExpansionSpec, cem: CemParams,
                      rng: RngStream, iteration: int = 0,
                      task_horizon: int | None = None) -> ExpansionOutcome:
    """Best-first candidate search for the next feasible start state.

    Accepts the first candidate whose R noisy open-loop exploration rollouts
    all terminate in the safe set; the next start is drawn uniformly from the
    pooled last-H steps of the accepted rollouts.  On budget exhaustion the
    outcome is not-accepted and the caller keeps its previous start.
    """
    states, _ = store.states(goal.id)
    if len(states) == 0:
        raise ConfigurationError(f"empty safe set for goal {goal.id!r}")
    H = task_horizon if task_horizon is not None else cem.plan_hor
    order = np.argsort(spec.cost(states), kind="stable")[:spec.max_candidates]
    draw = rng.child("next-start")
    last_candidate = states[order[0]]
    for rank, idx in enumerate(order):
        x_s = states[idx]
        last_candidate = x_s
        plan = None
        if not spec.replan:
            plan = exploration_optimize(env, density, spec, x_s, cem,
                                        rng.child(f"cand{rank}/cem"))
        trajs = []
        for r in range(spec.rollouts):
            # per-rollout seed derived from the expansion stream for replay
            seed = _derive_rollout_seed(rng, iteration, rank, r)
            if spec.replan:
                trajs.append(_execute_replanned(
                    env, density, spec, cem, x_s, goal, seed, iteration,
                    rng.child(f"cand{rank}/roll{r}/replan")))
            else:
                trajs.append(_execute_open_loop(env, plan.plan, x_s, goal,
                                                seed, iteration))
        terminals = np.stack([t.states[-1] for t in trajs])
        if np.all(density.is_safe_batch(terminals)):
            tail = max(0, spec.explore_horizon - H)
            pool = np.concatenate([t.states[tail:] for t in trajs])
            next_start = pool[draw.generator.integers(len(pool))]
            return ExpansionOutcome(candidate_start=x_s, accepted=True,
                                    exploration_trajs=trajs,
                                    next_start=next_start, plan=plan)
    return ExpansionOutcome(candidate_start=last_candidate, accepted=False)


def _derive_rollout_seed(rng: RngStream, iteration: int, rank: int, r: int) -> int:
    from .core import derive_seed
    return derive_seed(rng.seed, f"{rng.label}/cand{rank}/roll{r}/iter{iteration}")


def transfer_goal(store: SafeSetStore, bank: ValueFunctionBank,
                  old_goal: GoalRegion, new_goal: GoalRegion,
                  all_trajs: list[Trajectory], value_kind: str,
                  value_spec: ValueMemberSpec, alpha: float, horizon: int,
                  metric, rng: RngStream, feature_fn=None):
    """Rebuild safe set and value bank for `new_goal` from the prefixes of
    prior trajectories that first enter it.

    Returns (new_bank, warning) where warning is True when no trajectory
    intersected the new goal (the new controller domain is the goal region
    alone and must be expanded before the task is feasible).  The old goal's
    store and bank entries are never touched.
    """
    prefixes = goal_conditioned_prefixes(all_trajs, new_goal)
    new_bank = ValueFunctionBank(new_goal, horizon, metric=metric)
    if not prefixes:
        return new_bank, True
    by_iteration: dict[int, list[Trajectory]] = {}
    for p in prefixes:
        by_iteration.setdefault(p.iteration, []).append(p)
    for j, group in sorted(by_iteration.items()):
        for p in group:
            store.add_states(new_goal.id, j, p.states)
        model = fit_iteration_value(group, new_goal, value_spec,
                                    rng.child(f"value/{new_goal.id}/{j}"),
                                    kind=value_kind, alpha=alpha,
                                    metric=metric, feature_fn=feature_fn)
        new_bank.add(j, model)
    return new_bank, False


def augment_with_exploration(store: SafeSetStore, bank: ValueFunctionBank,
                             goal: GoalRegion, density: DensityModel,
                             exploration_trajs: list[Trajectory],
                             task_policy_rollouts: list[Trajectory],
                             value_kind: str, value_spec: ValueMemberSpec,
                             alpha: float, metric, rng: RngStream,
                             iteration: int, feature_fn=None) -> int:
    """Opt-in: add exploration-visited states to the safe set with piecewise
    cost-to-go labels from the composed (exploration + task) rollout.

    Each exploration trajectory is paired positionally with a task-policy
    rollout starting at its terminal state.  Exploration trajectories whose
    terminal state is not safe are rejected.  Returns the number of
    trajectories accepted.
    """
    composed = []
    for exp, task in zip(exploration_trajs, task_policy_rollouts):
        if not density.is_safe(exp.states[-1]):
            continue
        if not np.allclose(task.states[0], exp.states[-1]):
            raise ConfigurationError(
                "task rollout must start at the exploration terminal state")
        states = np.concatenate([exp.states[:-1], task.states])
        controls = np.concatenate([exp.controls, task.controls])
        dists = np.concatenate([exp.disturbances, task.disturbances])
        stage = stage_costs_batch(goal, states[:-1])
        composed.append(Trajectory(states, controls, dists, stage,
                                   goal_id=goal.id, iteration=iteration,
                                   seed=exp.seed))
        store.add_states(goal.id, iteration, exp.states)
    if composed:
        model = fit_iteration_value(composed, goal, value_spec,
                                    rng.child(f"augment/{iteration}"),
                                    kind=value_kind, alpha=alpha,
                                    metric=metric, feature_fn=feature_fn)
        bank.add(iteration, model)
    return len(composed)
