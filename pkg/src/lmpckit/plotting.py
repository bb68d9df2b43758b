"""Post-hoc plotting: turn the runner's summary CSV into figures.

Kept out of the learning loop so runs never import matplotlib.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .runner import read_summary_csv  # noqa: E402


def plot_learning_curve(summary_csv, out_path) -> str:
    """Mean cost vs iteration with a +-1 std band; one series per goal."""
    rows = read_summary_csv(summary_csv)
    if not rows:
        raise ValueError(f"empty summary file: {summary_csv}")
    fig, ax = plt.subplots(figsize=(6, 4))
    goals = []
    for r in rows:
        if r["goal_id"] not in goals:
            goals.append(r["goal_id"])
    for gid in goals:
        sub = [r for r in rows if r["goal_id"] == gid]
        it = [r["iteration"] for r in sub]
        mean = [r["mean_cost"] for r in sub]
        std = [r["std_cost"] for r in sub]
        ax.plot(it, mean, marker="o", label=f"goal {gid}")
        ax.fill_between(it, [m - s for m, s in zip(mean, std)],
                        [m + s for m, s in zip(mean, std)], alpha=0.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("trajectory cost")
    ax.set_title("mean cost per iteration (shaded: +-1 std over rollouts)")
    ax.legend()
    fig.tight_layout()
    out_path = str(out_path)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_start_states(summary_csv, out_path, dims=(0, 1)) -> str:
    """Start-state drift across iterations (expansion runs)."""
    rows = read_summary_csv(summary_csv)
    if not rows:
        raise ValueError(f"empty summary file: {summary_csv}")
    fig, ax = plt.subplots(figsize=(5, 5))
    xs = [r["start_state"][dims[0]] for r in rows]
    ys = [r["start_state"][dims[1]] for r in rows]
    its = [r["iteration"] for r in rows]
    sc = ax.scatter(xs, ys, c=its, cmap="viridis")
    ax.plot(xs, ys, color="gray", lw=0.5, zorder=0)
    fig.colorbar(sc, ax=ax, label="iteration")
    ax.set_xlabel(f"state[{dims[0]}]")
    ax.set_ylabel(f"state[{dims[1]}]")
    ax.set_title("start state per iteration")
    fig.tight_layout()
    fig.savefig(str(out_path))
    plt.close(fig)
    return str(out_path)


def render_report(summary_csv, out_dir) -> list[str]:
    """Standard figure set next to a run's CSVs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [plot_learning_curve(summary_csv, out_dir / "learning_curve.svg"),
             plot_start_states(summary_csv, out_dir / "start_states.svg")]
    return paths
