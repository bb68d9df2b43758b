"""Experiment orchestration: the demo -> rollout -> refit -> expand loop,
JSON experiment configs, and CSV/NPZ artifact logging.

An experiment walks a goal schedule. Each learning iteration runs R
closed-loop rollouts from the current start state, grows the safe set and
value bank with the new data, and (if enabled) runs one start-state
expansion step that moves the start toward a target. Goal switches rebuild
the safe set and bank from trajectory prefixes before the task phase.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptation import (ExpansionOutcome, ExpansionSpec, attempt_expansion,
                         transfer_goal)
from .core import (ConfigurationError, GoalRegion, RngStream, Trajectory,
                   derive_seed, save_trajectory_csv)
from .demos import DemoSpec, generate_demos
from .envs import make_env
from .mpc import CemParams, MpcPolicy, rollout_closed_loop
from .safeset import DensityModel, SafeSetStore, metric_for_env
from .value import ValueFunctionBank, ValueMemberSpec, fit_iteration_value


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class GoalStage:
    """One entry of the goal schedule.

    The stage becomes active at iteration `activate_at`, or earlier if
    `switch_when_start_within` is set and the current start state is already
    within that feature-space distance of the goal center.
    """

    goal: GoalRegion
    activate_at: int = 0
    switch_when_start_within: float | None = None
    expansion: ExpansionSpec | None = None


@dataclass
class ExperimentConfig:
    name: str
    env_name: str
    stages: list[GoalStage]
    start_state: np.ndarray
    iterations: int = 10
    rollouts: int = 5                       # R closed-loop rollouts per iteration
    seed: int = 0
    alpha: float = 2.0                      # safe-set kernel width
    env_overrides: dict = field(default_factory=dict)
    demos: DemoSpec | None = None
    cem_task: CemParams = field(default_factory=CemParams)
    cem_exploration: CemParams | None = None
    value_kind: str = "nonparametric"       # or "ensemble"
    value_spec: ValueMemberSpec = field(default_factory=ValueMemberSpec)

    def __post_init__(self):
        self.start_state = np.asarray(self.start_state, dtype=float)
        if not self.stages:
            raise ConfigurationError("at least one goal stage is required")
        acts = [s.activate_at for s in self.stages]
        if acts[0] != 0:
            raise ConfigurationError("first goal stage must activate at 0")
        if any(b <= a for a, b in zip(acts, acts[1:])):
            raise ConfigurationError(
                "stage activation iterations must be strictly increasing")
        if self.iterations < 1 or self.rollouts < 1:
            raise ConfigurationError("iterations and rollouts must be >= 1")
        if self.value_kind not in ("nonparametric", "ensemble"):
            raise ConfigurationError(f"unknown value kind {self.value_kind!r}")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        def goal_d(g: GoalRegion):
            return {"id": g.id, "projection": g.projection,
                    "center": list(map(float, g.center)),
                    "radius": float(g.radius)}

        def stage_d(s: GoalStage):
            d = {"goal": goal_d(s.goal), "activate_at": s.activate_at,
                 "switch_when_start_within": s.switch_when_start_within}
            if s.expansion is not None:
                e = s.expansion
                d["expansion"] = {
                    "target_start": list(map(float, e.target_start)),
                    "distance": e.distance,
                    "explore_horizon": e.explore_horizon,
                    "rollouts": e.rollouts,
                    "max_candidates": e.max_candidates,
                    "stop_distance": e.stop_distance,
                    "replan": e.replan,
                }
            else:
                d["expansion"] = None
            return d

        def cem_d(p: CemParams | None):
            if p is None:
                return None
            return {"pop_size": p.pop_size, "num_elites": p.num_elites,
                    "num_iters": p.num_iters, "plan_hor": p.plan_hor,
                    "init_variance": p.init_variance,
                    "num_noise_rollouts": p.num_noise_rollouts}

        v = self.value_spec
        return {
            "name": self.name,
            "env": {"name": self.env_name, "overrides": dict(self.env_overrides)},
            "stages": [stage_d(s) for s in self.stages],
            "start_state": list(map(float, self.start_state)),
            "iterations": self.iterations,
            "rollouts": self.rollouts,
            "seed": self.seed,
            "alpha": self.alpha,
            "demos": (None if self.demos is None else
                      {"count": self.demos.count,
                       "noise_scale": self.demos.noise_scale,
                       "retry_budget": self.demos.retry_budget}),
            "cem_task": cem_d(self.cem_task),
            "cem_exploration": cem_d(self.cem_exploration),
            "value": {"kind": self.value_kind,
                      "spec": {"ensemble_size": v.ensemble_size,
                               "hidden_units": list(v.hidden_units),
                               "learning_rate": v.learning_rate, "epochs": v.epochs,
                               "batch_size": v.batch_size}},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        def goal_f(g):
            return GoalRegion(id=g["id"], projection=g["projection"],
                              center=np.asarray(g["center"], dtype=float),
                              radius=g["radius"])

        def stage_f(s):
            exp = None
            if s.get("expansion") is not None:
                exp = ExpansionSpec(**s["expansion"])
            return GoalStage(goal=goal_f(s["goal"]),
                             activate_at=s.get("activate_at", 0),
                             switch_when_start_within=s.get(
                                 "switch_when_start_within"),
                             expansion=exp)

        def cem_f(p):
            return None if p is None else CemParams(**p)

        vd = d.get("value", {})
        vs = vd.get("spec", {})
        spec = ValueMemberSpec(
            ensemble_size=vs.get("ensemble_size", 5),
            hidden_units=tuple(vs.get("hidden_units", (500, 500, 500))),
            learning_rate=vs.get("learning_rate", 1e-3), epochs=vs.get("epochs", 10),
            batch_size=vs.get("batch_size", 64))
        demos = None
        if d.get("demos") is not None:
            demos = DemoSpec(**d["demos"])
        return cls(name=d["name"], env_name=d["env"]["name"],
                   env_overrides=dict(d["env"].get("overrides", {})),
                   stages=[stage_f(s) for s in d["stages"]],
                   start_state=np.asarray(d["start_state"], dtype=float),
                   iterations=d.get("iterations", 10),
                   rollouts=d.get("rollouts", 5),
                   seed=d.get("seed", 0), alpha=d.get("alpha", 2.0),
                   demos=demos, cem_task=cem_f(d.get("cem_task")) or CemParams(),
                   cem_exploration=cem_f(d.get("cem_exploration")),
                   value_kind=vd.get("kind", "nonparametric"), value_spec=spec)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class IterationRecord:
    iteration: int
    goal_id: str
    start_state: np.ndarray
    costs: np.ndarray          # R per-rollout trajectory costs
    violations: int            # rollouts with any constraint violation
    safe_set_size: int
    wall_clock: float = 0.0

    @property
    def mean_cost(self) -> float:
        return float(np.mean(self.costs))

    @property
    def std_cost(self) -> float:
        return float(np.std(self.costs))


# ---------------------------------------------------------------------------
# Learning state
# ---------------------------------------------------------------------------

class LearningState:
    """Everything the iteration loop mutates: safe-set store, per-goal value
    banks, the pool of logged task trajectories (transfer source data), the
    active stage, and the current start state."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.env = make_env(cfg.env_name, **cfg.env_overrides)
        self.metric = metric_for_env(self.env)
        self.store = SafeSetStore(self.env.state_dim)
        self.banks: dict[str, ValueFunctionBank] = {}
        self.all_trajs: list[Trajectory] = []
        self.stage_idx = 0
        self.start = np.asarray(cfg.start_state, dtype=float)
        self.transfer_warnings: list[int] = []
        for s in cfg.stages:
            self.banks[s.goal.id] = ValueFunctionBank(
                s.goal, self.env.horizon, metric=self.metric)

    @property
    def stage(self) -> GoalStage:
        return self.cfg.stages[self.stage_idx]

    @property
    def goal(self) -> GoalRegion:
        return self.stage.goal

    def density(self, up_to: int | None) -> DensityModel:
        return DensityModel.from_store(self.store, self.goal, self.cfg.alpha,
                                       metric=self.metric, up_to_iteration=up_to)


def _maybe_switch_goal(state: LearningState, j: int, root: RngStream) -> bool:
    """Advance the goal schedule when the next stage activates at j, or when
    its early-switch distance criterion is met by the current start."""
    cfg = state.cfg
    if state.stage_idx + 1 >= len(cfg.stages):
        return False
    nxt = cfg.stages[state.stage_idx + 1]
    due = j >= nxt.activate_at
    near = (nxt.switch_when_start_within is not None and
            float(nxt.goal.distance(state.start[None])[0])
            <= nxt.switch_when_start_within)
    if not (due or near):
        return False
    old = state.goal
    bank, warn = transfer_goal(
        state.store, state.banks[old.id], old, nxt.goal, state.all_trajs,
        cfg.value_kind, cfg.value_spec, cfg.alpha, state.env.horizon,
        state.metric, root.child(f"transfer/{nxt.goal.id}"))
    state.banks[nxt.goal.id] = bank
    if warn:
        state.transfer_warnings.append(j)
    state.stage_idx += 1
    return True


def seed_with_demos(state: LearningState, root: RngStream) -> list[Trajectory]:
    """Iteration 0: scripted demos populate the safe set and the first value
    bank entry. Without demos the initial safe set is the goal region alone."""
    cfg = state.cfg
    if cfg.demos is None:
        return []
    demos = generate_demos(state.env, cfg.demos, state.goal, state.start,
                           root.child("demos"))
    state.store.add_rollouts(state.goal.id, 0, demos)
    model = fit_iteration_value(demos, state.goal, cfg.value_spec,
                                root.child("value/demo"), kind=cfg.value_kind,
                                alpha=cfg.alpha, metric=state.metric)
    state.banks[state.goal.id].add(0, model)
    state.all_trajs.extend(demos)
    return demos


def run_iteration(state: LearningState, j: int, root: RngStream
                  ) -> tuple[IterationRecord, list[Trajectory],
                             ExpansionOutcome | None]:
    """One learning iteration: optional goal switch, R task rollouts from the
    current start, safe set + value refit, then optional start expansion."""
    cfg = state.cfg
    t0 = time.monotonic()
    _maybe_switch_goal(state, j, root)
    goal = state.goal
    bank = state.banks[goal.id]
    density = state.density(up_to=j - 1)

    trajs = []
    for r in range(cfg.rollouts):
        policy = MpcPolicy(state.env, bank, density, goal, cfg.cem_task,
                           root.child(f"iter{j}/roll{r}/policy"),
                           up_to_iteration=j - 1)
        traj_seed = derive_seed(cfg.seed, f"iter{j}/roll{r}/traj")
        trajs.append(rollout_closed_loop(state.env, policy, state.start,
                                         state.env.horizon, goal, traj_seed,
                                         iteration=j))
    violations = sum(
        int(not np.all(state.env.constraint_ok_batch(t.states))) for t in trajs)

    state.store.add_rollouts(goal.id, j, trajs)
    model = fit_iteration_value(trajs, goal, cfg.value_spec,
                                root.child(f"iter{j}/value"),
                                kind=cfg.value_kind, alpha=cfg.alpha,
                                metric=state.metric)
    bank.add(j, model)
    state.all_trajs.extend(trajs)

    outcome = None
    spec = state.stage.expansion
    stop = cfg.alpha if spec is None or spec.stop_distance is None \
        else spec.stop_distance
    if spec is not None and float(spec.cost(state.start[None])[0]) > stop:
        cem = cfg.cem_exploration or cfg.cem_task
        outcome = attempt_expansion(state.env, state.store,
                                    state.density(up_to=j), goal, spec, cem,
                                    root.child(f"iter{j}/expand"), iteration=j,
                                    task_horizon=cfg.cem_task.plan_hor)
        if outcome.accepted:
            state.start = np.asarray(outcome.next_start, dtype=float)

    record = IterationRecord(
        iteration=j, goal_id=goal.id,
        start_state=np.asarray(trajs[0].states[0]),
        costs=np.array([t.total_cost for t in trajs]),
        violations=violations,
        safe_set_size=state.store.size(goal.id),
        wall_clock=time.monotonic() - t0)
    return record, trajs, outcome


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.17g" % float(x)


def _state_str(x: np.ndarray) -> str:
    return ";".join(_fmt(v) for v in np.asarray(x, dtype=float))


def write_summary_csv(records: list[IterationRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "goal_id", "mean_cost", "std_cost",
                    "violations", "safe_set_size", "start_state"])
        for r in records:
            w.writerow([r.iteration, r.goal_id, _fmt(r.mean_cost),
                        _fmt(r.std_cost), r.violations, r.safe_set_size,
                        _state_str(r.start_state)])


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["iteration"] = int(r["iteration"])
        r["mean_cost"] = float(r["mean_cost"])
        r["std_cost"] = float(r["std_cost"])
        r["violations"] = int(r["violations"])
        r["safe_set_size"] = int(r["safe_set_size"])
        r["start_state"] = np.array([float(v)
                                     for v in r["start_state"].split(";")])
    return rows


def _write_expansion_csv(rows: list[dict], path, state_dim: int) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        header = (["iteration", "accepted", "terminals_safe"]
                  + [f"candidate_{i}" for i in range(state_dim)]
                  + [f"next_start_{i}" for i in range(state_dim)])
        w.writerow(header)
        for r in rows:
            nxt = r["next_start"]
            nxt_cols = ([""] * state_dim if nxt is None
                        else [_fmt(v) for v in nxt])
            w.writerow([r["iteration"], int(r["accepted"]),
                        int(r["terminals_safe"])]
                       + [_fmt(v) for v in r["candidate"]] + nxt_cols)


def _save_value_model(model, kind: str, directory: Path, goal_id: str,
                      j: int) -> None:
    stem = directory / f"goal_{goal_id}_iter{j:03d}"
    if kind == "nonparametric":
        model.save(str(stem) + ".npz")
    else:
        model.save(str(stem))


def run_experiment(cfg: ExperimentConfig, out_dir,
                   progress=None) -> list[IterationRecord]:
    """Run all iterations and write every artifact under out_dir.

    Layout: config.json, summary.csv, trajectories/iterJJJ_rollR.csv,
    expansion.csv, safeset.csv, values/goal_G_iterJJJ.npz. Identical config
    and seed give byte-identical CSVs.
    """
    out = Path(out_dir)
    traj_dir = out / "trajectories"
    val_dir = out / "values"
    for d in (out, traj_dir, val_dir):
        d.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")

    state = LearningState(cfg)
    root = RngStream(cfg.seed, "experiment")
    records: list[IterationRecord] = []
    expansion_rows: list[dict] = []

    demos = seed_with_demos(state, root)
    if demos:
        for r, traj in enumerate(demos):
            save_trajectory_csv(traj, traj_dir / f"iter000_roll{r}.csv")
        records.append(IterationRecord(
            iteration=0, goal_id=state.goal.id, start_state=state.start,
            costs=np.array([t.total_cost for t in demos]),
            violations=0, safe_set_size=state.store.size(state.goal.id)))
        _save_value_model(state.banks[state.goal.id].members[0][1],
                          cfg.value_kind, val_dir, state.goal.id, 0)

    for j in range(1, cfg.iterations + 1):
        record, trajs, outcome = run_iteration(state, j, root)
        records.append(record)
        for r, traj in enumerate(trajs):
            save_trajectory_csv(traj, traj_dir / f"iter{j:03d}_roll{r}.csv")
        _save_value_model(state.banks[record.goal_id].members[-1][1],
                          cfg.value_kind, val_dir, record.goal_id, j)
        if outcome is not None:
            expansion_rows.append({
                "iteration": j, "accepted": outcome.accepted,
                "terminals_safe": outcome.accepted,
                "candidate": outcome.candidate_start,
                "next_start": outcome.next_start})
        if progress is not None:
            progress(record)

    write_summary_csv(records, out / "summary.csv")
    _write_expansion_csv(expansion_rows, out / "expansion.csv",
                         state.env.state_dim)
    state.store.save_csv(out / "safeset.csv")
    return records
