"""Learning MPC toolkit: sample-based safe sets, goal-conditioned value
functions, a CEM planner, start-state expansion and goal transfer, with a
deterministic experiment runner for three stochastic benchmark tasks."""

from .adaptation import (ExpansionOutcome, ExpansionSpec, attempt_expansion,
                         augment_with_exploration, exploration_optimize,
                         select_candidate_start, transfer_goal)
from .core import (ConfigurationError, ContractError, GoalRegion, RngStream,
                   Trajectory, cost_to_go_labels, goal_contains,
                   load_trajectory_csv, save_trajectory_csv, stage_cost)
from .demos import DemoSpec, generate_demos
from .envs import (PendulumEnv, PointMassEnv, ReacherEnv, forward_kinematics,
                   make_env)
from .mpc import (CemParams, MpcPolicy, PlanResult, cem_optimize,
                  mpc_objective, mpc_policy_step, replay_trajectory,
                  rollout_closed_loop, simulate_batch)
from .runner import (ExperimentConfig, GoalStage, IterationRecord,
                     LearningState, run_experiment, run_iteration)
from .safeset import (DensityModel, SafeSetStore, goal_conditioned_prefixes,
                      is_safe, metric_for_env)
from .value import (NonparametricValue, ProbabilisticEnsembleValue,
                    ValueFunctionBank, ValueMemberSpec, evaluate_V,
                    fit_iteration_value)

__version__ = "0.1.0"
