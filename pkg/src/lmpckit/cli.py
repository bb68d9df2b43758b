"""Command line entry point.

Subcommands: run an experiment, generate demos, replay a logged trajectory,
plot a summary CSV, and run the brute-force oracle self-checks.

LMPCKIT_THREADS caps the BLAS thread pool (set before numpy is loaded).
"""
from __future__ import annotations

import os

if "LMPCKIT_THREADS" in os.environ:
    _n = os.environ["LMPCKIT_THREADS"]
    for _v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_v, _n)

import argparse
import sys
from pathlib import Path

import numpy as np

from .core import (ConfigurationError, ContractError, GoalRegion, RngStream,
                   cost_to_go_labels, load_trajectory_csv,
                   save_trajectory_csv, stage_cost)
from .demos import generate_demos
from .envs import make_env
from .mpc import CemParams, cem_optimize, replay_trajectory
from .runner import ExperimentConfig, run_experiment
from .safeset import DensityModel, metric_for_env


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    out = Path(args.out or f"runs/{cfg.name}")

    def progress(rec):
        print(f"iter {rec.iteration:3d} goal {rec.goal_id} "
              f"cost {rec.mean_cost:6.2f} +- {rec.std_cost:5.2f} "
              f"violations {rec.violations} safe-set {rec.safe_set_size}")

    records = run_experiment(cfg, out, progress=progress)
    print(f"wrote {out / 'summary.csv'}")
    if not args.no_plot:
        from .plotting import render_report
        for p in render_report(out / "summary.csv", out):
            print(f"wrote {p}")
    total_viol = sum(r.violations for r in records)
    print(f"done: {len(records)} records, {total_viol} violating rollouts")
    return 0


def _cmd_demos(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.demos is None:
        print("config has no demo section", file=sys.stderr)
        return 2
    env = make_env(cfg.env_name, **cfg.env_overrides)
    goal = cfg.stages[0].goal
    demos = generate_demos(env, cfg.demos, goal, cfg.start_state,
                           RngStream(cfg.seed, "experiment").child("demos"))
    costs = np.array([t.total_cost for t in demos])
    print(f"{len(demos)} demos, cost mean {costs.mean():.2f} "
          f"std {costs.std():.2f} min {costs.min():.0f} max {costs.max():.0f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for r, t in enumerate(demos):
            save_trajectory_csv(t, out / f"demo{r:03d}.csv")
        print(f"wrote {len(demos)} trajectory files to {out}")
    return 0


def _cmd_replay(args) -> int:
    env = make_env(args.env)
    traj = load_trajectory_csv(args.trajectory)
    states = replay_trajectory(env, traj)
    if states.shape == traj.states.shape and np.array_equal(states, traj.states):
        print(f"replay OK: {traj.horizon} steps reproduced bit-exactly")
        return 0
    err = float(np.max(np.abs(states - traj.states)))
    print(f"replay MISMATCH: max state deviation {err:g}", file=sys.stderr)
    return 1


def _cmd_plot(args) -> int:
    from .plotting import render_report
    for p in render_report(args.summary, args.out or Path(args.summary).parent):
        print(f"wrote {p}")
    return 0


def _oracle_density(gen) -> bool:
    env = make_env("pointmass")
    states = gen.normal(0, 20, size=(300, 4))
    goal = GoalRegion(id="g", projection="position",
                      center=np.array([0.0, 0.0]), radius=3.0)
    model = DensityModel(states, goal, alpha=2.0, metric=metric_for_env(env))
    queries = gen.normal(0, 25, size=(1000, 4))
    got = model.is_safe_batch(queries)
    want = np.array([
        bool(np.any(np.linalg.norm(states - q, axis=1) <= 2.0)
             or np.linalg.norm(q[:2]) <= 3.0) for q in queries])
    return bool(np.array_equal(got, want))


def _oracle_labels(gen) -> bool:
    env = make_env("pointmass")
    goal = GoalRegion(id="g", projection="position",
                      center=np.array([0.0, 0.0]), radius=5.0)
    x0 = np.array([-20.0, 0.0, 0.0, 0.0])
    traj = _zero_policy_rollout(env, x0, goal, seed=7)
    labels = cost_to_go_labels(traj, goal)
    want = [sum(traj.stage_costs[t:]) + stage_cost(goal, traj.states[-1])
            for t in range(traj.horizon)]
    want.append(stage_cost(goal, traj.states[-1]))
    return bool(np.array_equal(labels, np.array(want, dtype=float)))


def _zero_policy_rollout(env, x0, goal, seed):
    from .mpc import rollout_closed_loop
    return rollout_closed_loop(env, lambda x, t: np.zeros(env.control_dim),
                               x0, env.horizon, goal, seed)


def _oracle_cem(gen) -> bool:
    target = np.array([[0.3, -0.4], [0.1, 0.6], [-0.5, 0.2]])

    def quad(U):
        return np.sum((U - target) ** 2, axis=(1, 2))

    params = CemParams(pop_size=400, num_elites=40, num_iters=10, plan_hor=3)
    res = cem_optimize(quad, params, np.zeros((3, 2)), RngStream(0, "oracle"),
                       np.full(2, -1.0), np.full(2, 1.0))
    return bool(np.all(np.abs(res.plan - target) < 0.05))


def _oracle_replay(gen) -> bool:
    env = make_env("reacher")
    goal = GoalRegion(id="g", projection="end_effector",
                      center=np.array([3.0, -3.0]), radius=0.5)
    traj = _zero_policy_rollout(env, np.zeros(7), goal, seed=11)
    return bool(np.array_equal(replay_trajectory(env, traj), traj.states))


def _cmd_oracle(args) -> int:
    checks = [("density vs linear scan", _oracle_density),
              ("cost-to-go labels vs suffix sum", _oracle_labels),
              ("CEM vs analytic quadratic minimizer", _oracle_cem),
              ("seeded replay bit-exactness", _oracle_replay)]
    gen = np.random.default_rng(0)
    failed = 0
    for name, fn in checks:
        ok = fn(gen)
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failed += int(not ok)
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lmpckit")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--iterations", type=int, default=None)
    run.add_argument("--no-plot", action="store_true",
                     help="skip SVG rendering after the run")
    run.set_defaults(fn=_cmd_run)

    demos = sub.add_parser("demos", help="generate and inspect demos")
    demos.add_argument("--config", required=True)
    demos.add_argument("--seed", type=int, default=None)
    demos.add_argument("--out", default=None)
    demos.set_defaults(fn=_cmd_demos)

    replay = sub.add_parser("replay",
                            help="re-simulate a logged trajectory CSV")
    replay.add_argument("--trajectory", required=True)
    replay.add_argument("--env", required=True,
                        choices=["pointmass", "reacher", "pendulum"])
    replay.set_defaults(fn=_cmd_replay)

    plot = sub.add_parser("plot", help="render SVGs from a summary CSV")
    plot.add_argument("--summary", required=True)
    plot.add_argument("--out", default=None)
    plot.set_defaults(fn=_cmd_plot)

    oracle = sub.add_parser("oracle", help="run brute-force self checks")
    oracle.set_defaults(fn=_cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, ContractError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
