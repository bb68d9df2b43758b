"""Per-iteration goal-conditioned value functions fitted on Monte-Carlo
cost-to-go labels, and the bank that returns their pointwise minimum.

Two estimators share one interface:

* ``ProbabilisticEnsembleValue`` -- bootstrapped ensemble of Gaussian-output
  MLPs (swish activations, Adam, maximum-likelihood loss), implemented in
  numpy so training is bit-deterministic given (data, seed).
* ``NonparametricValue`` -- average of labels within the kernel width alpha
  of the query; used for fast deterministic runs and property tests.

A bank query at a state outside every member's support returns ``inf`` (the
out-of-set sentinel); queries inside the goal region return exactly 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import (ConfigurationError, ContractError, GoalRegion, RngStream,
                   Trajectory, cost_to_go_labels)
from .safeset import EuclideanMetric, StateIndex

SENTINEL = np.inf

LOGVAR_MAX = 4.0
LOGVAR_MIN = -6.0


@dataclass(frozen=True)
class ValueMemberSpec:
    """Hyperparameters for one fitted ensemble."""

    ensemble_size: int = 5
    hidden_units: tuple = (500, 500, 500)
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 64


def training_pairs(trajs: list[Trajectory], goal: GoalRegion):
    """(states, cost-to-go labels) pooled over trajectories."""
    xs, ys = [], []
    for traj in trajs:
        if traj.goal_id != goal.id:
            raise ContractError(
                f"trajectory labelled for {traj.goal_id!r}, expected {goal.id!r}")
        xs.append(traj.states)
        ys.append(cost_to_go_labels(traj, goal))
    if not xs:
        raise ConfigurationError("no training trajectories")
    return np.concatenate(xs), np.concatenate(ys)


# ---------------------------------------------------------------------------
# Nonparametric estimator
# ---------------------------------------------------------------------------

class NonparametricValue:
    """Mean cost-to-go label over stored states within alpha of the query."""

    kind = "nonparametric"

    def __init__(self, states: np.ndarray, labels: np.ndarray,
                 alpha: float, metric: EuclideanMetric | None = None):
        states = np.asarray(states, dtype=float)
        labels = np.asarray(labels, dtype=float)
        if len(states) == 0:
            raise ConfigurationError("empty value-training data")
        self.states = states
        self.labels = labels
        self.alpha = float(alpha)
        self.metric = metric or EuclideanMetric()
        self._index = StateIndex(states, self.metric)

    def predict_mean(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(len(X), SENTINEL)
        for i, idx in enumerate(self._index.within(X, self.alpha)):
            if len(idx):
                out[i] = float(np.mean(self.labels[idx]))
        return out

    def save(self, path) -> None:
        np.savez(path, states=self.states, labels=self.labels,
                 alpha=np.array(self.alpha))

    @classmethod
    def load(cls, path, metric=None) -> "NonparametricValue":
        d = np.load(path)
        return cls(d["states"], d["labels"], float(d["alpha"]), metric=metric)


# ---------------------------------------------------------------------------
# Probabilistic ensemble
# ---------------------------------------------------------------------------

def _swish(z):
    return z / (1.0 + np.exp(-z))


def _swish_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class _Mlp:
    """Feed-forward net with swish hidden layers and a (mean, logvar) head."""

    def __init__(self, sizes: list[int], gen: np.random.Generator):
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(gen.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    def forward(self, X):
        h = X
        cache = []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ W + b
            cache.append((h, z))
            h = _swish(z)
        z_out = h @ self.weights[-1] + self.biases[-1]
        cache.append((h, z_out))
        mu = z_out[:, 0]
        raw = z_out[:, 1]
        a = LOGVAR_MAX - _softplus(LOGVAR_MAX - raw)
        logvar = LOGVAR_MIN + _softplus(a - LOGVAR_MIN)
        return mu, logvar, (cache, raw, a)

    def loss_and_grads(self, X, y):
        mu, logvar, (cache, raw, a) = self.forward(X)
        inv_var = np.exp(-logvar)
        err = mu - y
        loss = float(np.mean(0.5 * (logvar + err ** 2 * inv_var)))
        N = len(X)
        dmu = err * inv_var / N
        dlogvar = 0.5 * (1.0 - err ** 2 * inv_var) / N
        draw = dlogvar * _sigmoid(a - LOGVAR_MIN) * _sigmoid(LOGVAR_MAX - raw)
        dz = np.stack([dmu, draw], axis=1)
        grads_w, grads_b = [], []
        for layer in range(len(self.weights) - 1, -1, -1):
            h, z = cache[layer]
            grads_w.append(h.T @ dz)
            grads_b.append(dz.sum(axis=0))
            if layer > 0:
                dh = dz @ self.weights[layer].T
                dz = dh * _swish_grad(cache[layer - 1][1])
        return loss, grads_w[::-1], grads_b[::-1]

    def predict(self, X):
        mu, logvar, _ = self.forward(X)
        return mu, np.exp(logvar)


class _Adam:
    def __init__(self, params, lr):
        self.lr = lr
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, b1=0.9, b2=0.999, eps=1e-8):
        self.t += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + eps)


class ProbabilisticEnsembleValue:
    """Bootstrapped ensemble of Gaussian-output MLPs over cost-to-go."""

    kind = "ensemble"

    def __init__(self, spec: ValueMemberSpec, feature_fn=None):
        self.spec = spec
        self.feature_fn = feature_fn or (lambda x: x)
        self.members: list[_Mlp] = []
        self.epoch_losses: list[list[float]] = []
        self.seed = None

    def fit(self, states: np.ndarray, labels: np.ndarray, rng: RngStream):
        X = self.feature_fn(np.asarray(states, dtype=float))
        y = np.asarray(labels, dtype=float)
        if len(X) == 0:
            raise ConfigurationError("empty value-training data")
        self.seed = (rng.seed, rng.label)
        self.members = []
        self.epoch_losses = []
        spec = self.spec
        for b in range(spec.ensemble_size):
            gen = rng.child(f"member{b}").generator
            boot = gen.integers(0, len(X), size=len(X))
            Xb, yb = X[boot], y[boot]
            net = _Mlp([X.shape[1], *spec.hidden_units, 2], gen)
            opt = _Adam(net.weights + net.biases, spec.learning_rate)
            losses = []
            for _ in range(spec.epochs):
                order = gen.permutation(len(Xb))
                epoch_loss = 0.0
                for start in range(0, len(Xb), spec.batch_size):
                    sel = order[start:start + spec.batch_size]
                    loss, gw, gb = net.loss_and_grads(Xb[sel], yb[sel])
                    opt.step(net.weights + net.biases, gw + gb)
                    epoch_loss += loss * len(sel)
                losses.append(epoch_loss / len(Xb))
            self.members.append(net)
            self.epoch_losses.append(losses)
        return self

    def member_means(self, X: np.ndarray) -> np.ndarray:
        """Per-member mean predictions, shape (B, N)."""
        feats = self.feature_fn(np.atleast_2d(np.asarray(X, dtype=float)))
        return np.stack([m.predict(feats)[0] for m in self.members])

    def predict_mean(self, X: np.ndarray) -> np.ndarray:
        """Bank aggregation: mean of member means."""
        return self.member_means(X).mean(axis=0)

    def predict(self, X: np.ndarray):
        """(mean, variance) of the ensemble mixture; variance is diagnostic."""
        feats = self.feature_fn(np.atleast_2d(np.asarray(X, dtype=float)))
        mus, vs = [], []
        for m in self.members:
            mu, var = m.predict(feats)
            mus.append(mu)
            vs.append(var)
        mus, vs = np.stack(mus), np.stack(vs)
        mean = mus.mean(axis=0)
        var = vs.mean(axis=0) + mus.var(axis=0)
        return mean, var

    def save(self, path_prefix) -> None:
        arrays = {}
        shapes = []
        for b, net in enumerate(self.members):
            member_shapes = []
            for i, (W, bias) in enumerate(zip(net.weights, net.biases)):
                arrays[f"m{b}_W{i}"] = W
                arrays[f"m{b}_b{i}"] = bias
                member_shapes.append(list(W.shape))
            shapes.append(member_shapes)
        np.savez(f"{path_prefix}.npz", **arrays)
        manifest = {
            "kind": self.kind,
            "ensemble_size": self.spec.ensemble_size,
            "hidden_units": list(self.spec.hidden_units),
            "learning_rate": self.spec.learning_rate,
            "epochs": self.spec.epochs,
            "batch_size": self.spec.batch_size,
            "layer_shapes": shapes,
            "seed": list(self.seed) if self.seed else None,
        }
        with open(f"{path_prefix}.json", "w") as f:
            json.dump(manifest, f, indent=2)

    @classmethod
    def load(cls, path_prefix, feature_fn=None) -> "ProbabilisticEnsembleValue":
        with open(f"{path_prefix}.json") as f:
            manifest = json.load(f)
        spec = ValueMemberSpec(
            ensemble_size=manifest["ensemble_size"],
            hidden_units=tuple(manifest["hidden_units"]),
            learning_rate=manifest["learning_rate"],
            epochs=manifest["epochs"],
            batch_size=manifest["batch_size"])
        obj = cls(spec, feature_fn=feature_fn)
        data = np.load(f"{path_prefix}.npz")
        for b, member_shapes in enumerate(manifest["layer_shapes"]):
            net = _Mlp.__new__(_Mlp)
            net.weights = [data[f"m{b}_W{i}"] for i in range(len(member_shapes))]
            net.biases = [data[f"m{b}_b{i}"] for i in range(len(member_shapes))]
            obj.members.append(net)
        return obj


def fit_iteration_value(trajs: list[Trajectory], goal: GoalRegion,
                        spec: ValueMemberSpec, rng: RngStream,
                        kind: str = "ensemble", alpha: float = 1.0,
                        metric=None, feature_fn=None):
    """Fit one iteration's cost-to-go estimator on relabelled rollouts."""
    states, labels = training_pairs(trajs, goal)
    if kind == "nonparametric":
        return NonparametricValue(states, labels, alpha, metric=metric)
    model = ProbabilisticEnsembleValue(spec, feature_fn=feature_fn)
    return model.fit(states, labels, rng)


# ---------------------------------------------------------------------------
# Bank
# ---------------------------------------------------------------------------

class ValueFunctionBank:
    """Map (iteration -> fitted estimator) for one goal; queries return the
    pointwise minimum over iterations, 0 inside the goal, clamped to
    [0, horizon], and the inf sentinel where no member has support."""

    def __init__(self, goal: GoalRegion, horizon: int,
                 metric: EuclideanMetric | None = None):
        self.goal = goal
        self.horizon = horizon
        self.metric = metric or EuclideanMetric()
        # (iteration, model) pairs; an iteration may hold several estimators
        # (e.g. the task estimator plus an exploration-augmented one)
        self.members: list[tuple[int, object]] = []
        self._merged = None  # fast path cache for nonparametric members

    def add(self, iteration: int, model) -> None:
        self.members.append((iteration, model))
        self._merged = None

    def iterations(self):
        return sorted({j for j, _ in self.members})

    def _active(self, up_to_iteration: int):
        return [m for j, m in self.members if j <= up_to_iteration]

    def _build_merged(self):
        pts, labels, member_ids = [], [], []
        for pos, (_, m) in enumerate(self.members):
            pts.append(m.states)
            labels.append(m.labels)
            member_ids.append(np.full(len(m.states), pos, dtype=int))
        points = np.concatenate(pts)
        self._merged = (StateIndex(points, self.metric),
                        np.concatenate(labels), np.concatenate(member_ids))

    def _min_nonparametric(self, X, up_to_iteration, alpha):
        if self._merged is None:
            self._build_merged()
        index, labels, member_ids = self._merged
        member_iter = np.array([j for j, _ in self.members])
        out = np.full(len(X), SENTINEL)
        hits = index.within(X, alpha)
        lens = np.fromiter((len(h) for h in hits), dtype=int, count=len(hits))
        if lens.sum() == 0:
            return out
        flat = np.concatenate([h for h in hits if len(h)])
        q_idx = np.repeat(np.arange(len(X)), lens)
        keep = member_iter[member_ids[flat]] <= up_to_iteration
        flat, q_idx = flat[keep], q_idx[keep]
        if len(flat) == 0:
            return out
        n_bins = len(self.members)
        key = q_idx * n_bins + member_ids[flat]
        size = len(X) * n_bins
        sums = np.bincount(key, weights=labels[flat], minlength=size)
        counts = np.bincount(key, minlength=size)
        means = np.where(counts > 0, sums / np.maximum(counts, 1), SENTINEL)
        out = means.reshape(len(X), n_bins).min(axis=1)
        return out

    def evaluate(self, X, up_to_iteration: int) -> np.ndarray:
        """Bank minimum over iterations <= up_to_iteration at each query."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        active = self._active(up_to_iteration)
        in_goal = self.goal.contains(X)
        if not active:
            values = np.full(len(X), SENTINEL)
        elif (all(m.kind == "nonparametric" for m in active)
              and len({m.alpha for m in active}) == 1):
            values = self._min_nonparametric(X, up_to_iteration, active[0].alpha)
        else:
            values = np.min([m.predict_mean(X) for m in active], axis=0)
        finite = np.isfinite(values)
        values[finite] = np.clip(values[finite], 0.0, self.horizon)
        values[in_goal] = 0.0
        return values


def evaluate_V(bank: ValueFunctionBank, goal_id: str, x,
               up_to_iteration: int) -> float:
    """Scalar bank query; returns the inf sentinel outside all supports."""
    if goal_id != bank.goal.id:
        raise ContractError(f"bank is for goal {bank.goal.id!r}, not {goal_id!r}")
    return float(bank.evaluate(np.atleast_2d(x), up_to_iteration)[0])
