"""Concrete policies and reward models.

The classifier behind the epsilon-greedy and adaptive policies is a
one-vs-all, weighted, L2-regularised logistic regression trained by
deterministic full-batch gradient descent.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .core import (
    EMPTY_HISTORY,
    Features,
    InvalidArgumentError,
    NoDataError,
    RewardEstimator,
    TableEstimator,
    TargetHistory,
    ConstantEstimator,
    as_features,
    context_index,
)

log = logging.getLogger(__name__)

__all__ = [
    "AdaptivePolicy",
    "EpsGreedyPolicy",
    "LabeledExample",
    "LearnerConfig",
    "LinearModel",
    "ModelRewardEstimator",
    "TablePolicy",
    "UniformPolicy",
    "WinStayPolicy",
    "adaptive_policy",
    "eps_greedy_policy",
    "predict_proba",
    "train_logistic_ova",
    "uniform_policy",
]


@dataclass(frozen=True)
class LabeledExample:
    """A supervised example.

    ``labels`` is the set of correct classes for a fully labelled example.
    A partially labelled example instead sets ``observed_action`` and
    ``target``: it then trains only that action's binary classifier.
    """

    context: Features
    labels: frozenset[int] = frozenset()
    weight: float = 1.0
    observed_action: int | None = None
    target: float | None = None

    def __post_init__(self):
        if not self.weight > 0:
            raise InvalidArgumentError(f"example weight must be positive, got {self.weight}")
        if self.observed_action is None and not self.labels:
            raise InvalidArgumentError("fully labelled example needs at least one label")
        if not isinstance(self.labels, frozenset):
            object.__setattr__(self, "labels", frozenset(int(c) for c in self.labels))

    @classmethod
    def partial(cls, context: Features, action: int, reward: float, weight: float = 1.0) -> LabeledExample:
        return cls(as_features(context), frozenset(), weight, int(action), float(reward))


@dataclass(frozen=True)
class LearnerConfig:
    l2: float = 1.0
    iterations: int = 500
    grad_tol: float = 1e-3
    check_monotone: bool = False


@dataclass
class LinearModel:
    """One-vs-all linear scorer: ``score(x, a) = x . weights[:, a] + bias[a]``."""

    weights: np.ndarray  # (d, K)
    bias: np.ndarray  # (K,)
    l2: float = 1.0
    iterations: int = 0
    trained_on: int = 0
    grad_norm: float = float("nan")

    @property
    def n_actions(self) -> int:
        return int(self.bias.size)

    @property
    def n_features(self) -> int:
        return int(self.weights.shape[0])

    def scores(self, context: Features) -> np.ndarray:
        return context.dot(self.weights) + self.bias

    def scores_matrix(self, contexts: Sequence[Features]) -> np.ndarray:
        X = _design_matrix(contexts, self.n_features)
        return np.asarray(X @ self.weights) + self.bias

    def to_dict(self) -> dict[str, Any]:
        sparse_w = []
        for a in range(self.n_actions):
            col = self.weights[:, a]
            sparse_w.append({str(int(i)): float(col[i]) for i in np.flatnonzero(col)})
        return {
            "K": self.n_actions,
            "n_features": self.n_features,
            "lambda": self.l2,
            "iterations": self.iterations,
            "trained_on": self.trained_on,
            "weights": sparse_w,
            "bias": [float(b) for b in self.bias],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LinearModel:
        K = int(d["K"])
        n_features = int(d["n_features"])
        W = np.zeros((n_features, K))
        for a, col in enumerate(d["weights"]):
            for i, v in col.items():
                W[int(i), a] = float(v)
        return cls(W, np.asarray(d["bias"], dtype=np.float64), float(d.get("lambda", 1.0)),
                   int(d.get("iterations", 0)), int(d.get("trained_on", 0)))


def _design_matrix(contexts: Sequence[Features], n_features: int):
    """CSR matrix of contexts truncated to ``n_features`` columns (dense if small)."""
    n = len(contexts)
    lengths = np.fromiter((len(x) for x in contexts), dtype=np.int64, count=n)
    indptr = np.concatenate(([0], np.cumsum(lengths)))
    if indptr[-1]:
        ids = np.concatenate([x.ids for x in contexts])
        vals = np.concatenate([x.values for x in contexts])
    else:
        ids = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    keep = ids < n_features
    if not keep.all():
        row = np.repeat(np.arange(n), lengths)[keep]
        X = sp.csr_matrix((vals[keep], (row, ids[keep])), shape=(n, n_features))
    else:
        X = sp.csr_matrix((vals, ids, indptr), shape=(n, n_features))
    if n * n_features <= 4_000_000 and X.nnz > 0.25 * n * n_features:
        return X.toarray()
    return X


def predict_proba(model: LinearModel, context: Features) -> np.ndarray:
    """Per-class sigmoid probabilities P(a in labels | x); not normalised across classes."""
    return expit(model.scores(as_features(context)))


def _training_arrays(examples: Sequence[LabeledExample], K: int):
    n = len(examples)
    Y = np.zeros((n, K))
    mask = np.zeros((n, K))
    w = np.empty(n)
    for i, ex in enumerate(examples):
        w[i] = ex.weight
        if ex.observed_action is None:
            mask[i, :] = 1.0
            for c in ex.labels:
                if not 0 <= c < K:
                    raise InvalidArgumentError(f"label {c} outside [0, {K})")
                Y[i, c] = 1.0
        else:
            a = ex.observed_action
            if not 0 <= a < K:
                raise InvalidArgumentError(f"action {a} outside [0, {K})")
            mask[i, a] = 1.0
            Y[i, a] = ex.target
    return Y, mask * w[:, None]


def logistic_objective(X, Y, sample_w, W, b, l2):
    """Per-class objectives and gradients.

    For class a, with ``v`` the masked example weights and ``n_a = sum_i v_ia``:
    ``(sum_i v_ia * logloss(y_ia, s_ia) + l2/2 * |W_a|^2) / n_a``, i.e. the
    ``C = 1`` liblinear objective scaled by ``1 / n_a``.  The bias is not
    penalised; classes with no data keep zero weights.
    """
    S = np.asarray(X @ W) + b
    totals = sample_w.sum(axis=0)
    norm = np.divide(1.0, totals, out=np.zeros_like(totals), where=totals > 0)
    V = sample_w * norm
    reg = l2 * norm
    # log(1 + e^s) - y s, computed stably
    losses = np.logaddexp(0.0, S) - Y * S
    obj = (V * losses).sum(axis=0) + 0.5 * reg * (W * W).sum(axis=0)
    G = V * (expit(S) - Y)
    gW = np.asarray(X.T @ G) + reg * W
    gb = G.sum(axis=0)
    return obj, gW, gb


def train_logistic_ova(
    examples: Sequence[LabeledExample],
    K: int,
    config: LearnerConfig = LearnerConfig(),
    n_features: int | None = None,
    init: LinearModel | None = None,
) -> LinearModel:
    """Fit K binary logistic regressions by full-batch gradient descent.

    Each class uses the fixed step ``1 / L`` with
    ``L = l2 / n_a + 0.25 * mean(|x|^2 + 1)`` over the ``n_a`` (weighted)
    examples it trains on.  ``L`` bounds the curvature of the objective in
    :func:`logistic_objective`, so every iteration decreases it.
    """
    if len(examples) == 0:
        raise NoDataError("no training examples")
    if n_features is None:
        n_features = max(ex.context.max_id for ex in examples) + 1
    n_features = max(n_features, 1)
    X = _design_matrix([ex.context for ex in examples], n_features)
    Y, Vw = _training_arrays(examples, K)
    return _fit(X, Y, Vw, K, n_features, config, init, len(examples))


def _row_sq_norms(X) -> np.ndarray:
    if sp.issparse(X):
        return np.asarray(X.multiply(X).sum(axis=1)).ravel()
    return np.einsum("ij,ij->i", X, X)


def _fit(X, Y, Vw, K, n_features, config: LearnerConfig, init, n_examples) -> LinearModel:
    l2 = config.l2
    totals = Vw.sum(axis=0)
    sq = _row_sq_norms(X) + 1.0
    mean_sq = np.divide(sq @ Vw, totals, out=np.ones(K), where=totals > 0)
    norm = np.divide(1.0, totals, out=np.zeros_like(totals), where=totals > 0)
    step = 1.0 / (l2 * norm + 0.25 * mean_sq)
    # The bias rides along as a constant feature; its row is left unpenalised.
    n = X.shape[0]
    if sp.issparse(X):
        X1 = sp.hstack([X, np.ones((n, 1))], format="csr")
    else:
        X1 = np.hstack([X, np.ones((n, 1))])
    reg = np.repeat((l2 * norm)[None, :], n_features + 1, axis=0)
    reg[-1] = 0.0
    W1 = np.zeros((n_features + 1, K))
    if init is not None:
        W1[:-1] = init.weights
        W1[-1] = init.bias
    V = Vw * norm
    X1T = X1.T
    prev = None
    for it in range(config.iterations):
        G = X1 @ W1
        expit(G, out=G)
        G -= Y
        G *= V
        g = X1T @ G
        g += reg * W1
        g *= step
        W1 -= g
        if config.check_monotone:
            obj, _, _ = logistic_objective(X, Y, Vw, W1[:-1], W1[-1], l2)
            if prev is not None and np.any(obj > prev + 1e-12 * np.maximum(1.0, np.abs(prev))):
                raise AssertionError(f"objective increased at iteration {it}")
            prev = obj
    W, b = np.ascontiguousarray(W1[:-1]), W1[-1].copy()
    _, gW, gb = logistic_objective(X, Y, Vw, W, b, l2)
    grad_norm = float(np.sqrt((gW * gW).sum() + (gb * gb).sum()))
    return LinearModel(W, b, l2, config.iterations, n_examples, grad_norm)


def _argmax_lowest(scores: np.ndarray) -> int:
    return int(np.argmax(scores))  # numpy returns the first maximum


class EpsGreedyPolicy:
    """Stationary epsilon-greedy wrapper around a linear classifier.

    The greedy action gets ``1 - eps + eps/K``, every other action ``eps/K``.
    """

    stationary = True

    def __init__(self, model: LinearModel, eps: float = 0.1):
        if not 0.0 <= eps <= 1.0:
            raise InvalidArgumentError(f"eps must lie in [0, 1], got {eps}")
        self.model = model
        self.eps = float(eps)
        self.n_actions = model.n_actions

    def _from_scores(self, scores: np.ndarray) -> np.ndarray:
        K = self.n_actions
        dist = np.full(K, self.eps / K)
        dist[_argmax_lowest(scores)] += 1.0 - self.eps
        return dist

    def action_distribution(self, context: Features, history: TargetHistory = EMPTY_HISTORY) -> np.ndarray:
        return self._from_scores(self.model.scores(context))

    def action_distributions(self, contexts: Sequence[Features]) -> np.ndarray:
        S = self.model.scores_matrix(contexts)
        K = self.n_actions
        out = np.full(S.shape, self.eps / K)
        out[np.arange(S.shape[0]), np.argmax(S, axis=1)] += 1.0 - self.eps
        return out

    def greedy_action(self, context: Features) -> int:
        return _argmax_lowest(self.model.scores(context))

    def to_dict(self) -> dict[str, Any]:
        return {"type": "eps_greedy", "eps": self.eps, "model": self.model.to_dict()}


def eps_greedy_policy(model: LinearModel, eps: float = 0.1) -> EpsGreedyPolicy:
    return EpsGreedyPolicy(model, eps)


class UniformPolicy:
    stationary = True

    def __init__(self, n_actions: int):
        if n_actions < 1:
            raise InvalidArgumentError("need at least one action")
        self.n_actions = int(n_actions)
        self._dist = np.full(self.n_actions, 1.0 / self.n_actions)
        self._dist.setflags(write=False)

    def action_distribution(self, context: Features, history: TargetHistory = EMPTY_HISTORY) -> np.ndarray:
        return self._dist

    def to_dict(self) -> dict[str, Any]:
        return {"type": "uniform", "n_actions": self.n_actions}


def uniform_policy(n_actions: int) -> UniformPolicy:
    return UniformPolicy(n_actions)


class TablePolicy:
    """Stationary policy over one-hot contexts, given as a (contexts x actions) table."""

    stationary = True

    def __init__(self, table):
        table = np.array(table, dtype=np.float64)
        if table.ndim != 2 or np.any(table < 0) or not np.allclose(table.sum(axis=1), 1.0, atol=1e-9):
            raise InvalidArgumentError("policy table rows must be probability vectors")
        table.setflags(write=False)
        self.table = table
        self.n_actions = table.shape[1]

    def action_distribution(self, context: Features, history: TargetHistory = EMPTY_HISTORY) -> np.ndarray:
        return self.table[context_index(context)]

    def action_distributions(self, contexts: Sequence[Features]) -> np.ndarray:
        return self.table[[context_index(x) for x in contexts]]

    def to_dict(self) -> dict[str, Any]:
        return {"type": "table", "table": self.table.tolist()}


class WinStayPolicy:
    """Nonstationary tabular policy: after a rewarded step, lean towards repeating it.

    ``pi(.|x, h) = (1 - stay) * base[x] + stay * onehot(a_last)`` when the last
    history entry has reward 1, else ``base[x]``; depends on ``h`` only through
    its last entry, which keeps exact enumeration cheap.
    """

    stationary = False

    def __init__(self, base, stay: float = 0.5):
        self.base = TablePolicy(base)
        if not 0.0 <= stay <= 1.0:
            raise InvalidArgumentError("stay must lie in [0, 1]")
        self.stay = float(stay)
        self.n_actions = self.base.n_actions
        K = self.n_actions
        nx = self.base.table.shape[0]
        self._mixed = np.empty((nx, K, K))
        for a in range(K):
            self._mixed[:, a, :] = (1.0 - self.stay) * self.base.table
            self._mixed[:, a, a] += self.stay
        self._mixed.setflags(write=False)

    def state_key(self, history: TargetHistory):
        last = history.last()
        if last is None or last[2] < 1.0:
            return None
        return last[1]

    def action_distribution(self, context: Features, history: TargetHistory = EMPTY_HISTORY) -> np.ndarray:
        key = self.state_key(history)
        x = context_index(context)
        if key is None:
            return self.base.table[x]
        return self._mixed[x, key]

    def to_dict(self) -> dict[str, Any]:
        return {"type": "win_stay", "base": self.base.table.tolist(), "stay": self.stay}


class AdaptivePolicy:
    """Epsilon-greedy policy retrained on its own history every ``period`` steps.

    The classifier for history ``h`` is trained on the seed examples plus the
    first ``m = period * floor(min(|h|, horizon) / period)`` history entries,
    each turned into a partially labelled example for its action.  Models are
    cached by (history storage, m), so a sequential run retrains once per
    period and replaying a history reproduces the same distributions.

    With ``warm_start`` the descent for prefix ``m`` starts from the model of
    prefix ``m - period`` instead of zero.  The chain is itself a function of
    the history prefix, so purity is kept while far fewer iterations are
    needed for a converged fit.
    """

    stationary = False

    def __init__(
        self,
        seed_examples: Sequence[LabeledExample],
        n_actions: int,
        period: int = 15,
        horizon: int = 300,
        eps: float = 0.1,
        config: LearnerConfig = LearnerConfig(),
        n_features: int | None = None,
        cache_size: int = 64,
        warm_start: bool = True,
    ):
        if period < 1 or horizon < period:
            raise InvalidArgumentError("need period >= 1 and horizon >= period")
        if not seed_examples:
            raise NoDataError("adaptive policy needs seed examples")
        self.seed_examples = list(seed_examples)
        self.n_actions = int(n_actions)
        self.period = int(period)
        self.horizon = int(horizon)
        self.eps = float(eps)
        self.config = config
        if n_features is None:
            n_features = max(ex.context.max_id for ex in self.seed_examples) + 1
        self.n_features = int(n_features)
        self.cache_size = cache_size
        self.warm_start = bool(warm_start)
        self._seed_X = _design_matrix([ex.context for ex in self.seed_examples], self.n_features)
        self._seed_Y, self._seed_V = _training_arrays(self.seed_examples, self.n_actions)
        self._lock = threading.Lock()
        self._cache: OrderedDict = OrderedDict()
        self.base_model = self._train(EMPTY_HISTORY, 0, None)
        self.trainings = 0

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_lock"] = None
        state["_cache"] = OrderedDict()
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def used_length(self, history: TargetHistory) -> int:
        return self.period * (min(len(history), self.horizon) // self.period)

    def _train(self, history: TargetHistory, m: int, init: LinearModel | None) -> LinearModel:
        if m == 0:
            X, Y, V = self._seed_X, self._seed_Y, self._seed_V
        else:
            entries = history.entries[:m]
            hx = _design_matrix([e[0] for e in entries], self.n_features)
            hy = np.zeros((m, self.n_actions))
            hv = np.zeros((m, self.n_actions))
            for i, (_, a, r) in enumerate(entries):
                hy[i, a] = r
                hv[i, a] = 1.0
            if sp.issparse(self._seed_X) or sp.issparse(hx):
                X = sp.vstack([sp.csr_matrix(self._seed_X), sp.csr_matrix(hx)], format="csr")
            else:
                X = np.vstack([self._seed_X, hx])
            Y = np.vstack([self._seed_Y, hy])
            V = np.vstack([self._seed_V, hv])
        return _fit(X, Y, V, self.n_actions, self.n_features, self.config, init,
                    len(self.seed_examples) + m)

    def model_for(self, history: TargetHistory) -> LinearModel:
        return self._model(history, self.used_length(history))

    def _model(self, history: TargetHistory, m: int) -> LinearModel:
        if m == 0:
            return self.base_model
        store_id, _ = history.storage_key
        key = (store_id, m)
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None and hit[0] is history._store:
                self._cache.move_to_end(key)
                return hit[1]
        init = self._model(history, m - self.period) if self.warm_start else None
        model = self._train(history, m, init)
        with self._lock:
            self.trainings += 1
            self._cache[key] = (history._store, model)
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return model

    def action_distribution(self, context: Features, history: TargetHistory = EMPTY_HISTORY) -> np.ndarray:
        model = self.model_for(history)
        K = self.n_actions
        dist = np.full(K, self.eps / K)
        dist[_argmax_lowest(model.scores(context))] += 1.0 - self.eps
        return dist

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": "adaptive",
            "n_actions": self.n_actions,
            "period": self.period,
            "horizon": self.horizon,
            "eps": self.eps,
            "n_features": self.n_features,
            "learner": {"l2": self.config.l2, "iterations": self.config.iterations},
            "warm_start": self.warm_start,
            "seed_examples": [
                {"x": {str(k): v for k, v in ex.context.to_dict().items()},
                 "labels": sorted(ex.labels), "weight": ex.weight}
                for ex in self.seed_examples
            ],
        }


def adaptive_policy(seed_examples, period: int, horizon: int, eps: float = 0.1,
                    learner_config: LearnerConfig = LearnerConfig(), n_actions: int | None = None,
                    n_features: int | None = None) -> AdaptivePolicy:
    if n_actions is None:
        n_actions = max(max(ex.labels) for ex in seed_examples) + 1
    return AdaptivePolicy(seed_examples, n_actions, period, horizon, eps, learner_config, n_features)


class ModelRewardEstimator(RewardEstimator):
    """Reward model read off the classifier's per-class probabilities."""

    def __init__(self, model: LinearModel):
        self.model = model
        self.n_actions = model.n_actions

    def estimate_all(self, context: Features) -> np.ndarray:
        return expit(self.model.scores(context))

    def estimate(self, context: Features, action: int) -> float:
        return float(self.estimate_all(context)[action])

    def estimate_matrix(self, contexts: Sequence[Features]) -> np.ndarray:
        return expit(self.model.scores_matrix(contexts))

    def to_dict(self) -> dict[str, Any]:
        return {"type": "model", "model": self.model.to_dict()}


def train_reward_model(events, n_actions: int, config: LearnerConfig = LearnerConfig(),
                       n_features: int | None = None) -> ModelRewardEstimator:
    """Fit rhat on logged events; each event trains only its own action's classifier."""
    examples = [LabeledExample.partial(ev.context, ev.action, ev.reward) for ev in events]
    return ModelRewardEstimator(train_logistic_ova(examples, n_actions, config, n_features))


# -- JSON (de)serialisation -------------------------------------------------

def policy_from_dict(d: dict[str, Any]):
    kind = d.get("type")
    if kind == "eps_greedy":
        return EpsGreedyPolicy(LinearModel.from_dict(d["model"]), float(d.get("eps", 0.1)))
    if kind == "uniform":
        return UniformPolicy(int(d["n_actions"]))
    if kind == "table":
        return TablePolicy(d["table"])
    if kind == "win_stay":
        return WinStayPolicy(d["base"], float(d.get("stay", 0.5)))
    if kind == "adaptive":
        learner = d.get("learner", {})
        seeds = [
            LabeledExample(Features.from_dict({int(k): float(v) for k, v in ex["x"].items()}),
                           frozenset(ex["labels"]), float(ex.get("weight", 1.0)))
            for ex in d["seed_examples"]
        ]
        return AdaptivePolicy(seeds, int(d["n_actions"]), int(d["period"]), int(d["horizon"]),
                              float(d.get("eps", 0.1)),
                              LearnerConfig(l2=float(learner.get("l2", 1.0)),
                                            iterations=int(learner.get("iterations", 500))),
                              d.get("n_features"), warm_start=bool(d.get("warm_start", True)))
    raise InvalidArgumentError(f"unknown policy type {kind!r}")


def estimator_from_dict(d: dict[str, Any]) -> RewardEstimator:
    kind = d.get("type")
    if kind == "constant":
        return ConstantEstimator(float(d["value"]), int(d.get("n_actions", 1)))
    if kind == "model":
        return ModelRewardEstimator(LinearModel.from_dict(d["model"]))
    if kind == "table":
        return TableEstimator(d["table"])
    raise InvalidArgumentError(f"unknown reward estimator type {kind!r}")


def estimator_to_dict(rhat: RewardEstimator) -> dict[str, Any]:
    if isinstance(rhat, ConstantEstimator):
        return {"type": "constant", "value": rhat.value, "n_actions": rhat.n_actions}
    if isinstance(rhat, TableEstimator):
        return {"type": "table", "table": rhat.table.tolist()}
    if isinstance(rhat, ModelRewardEstimator):
        return rhat.to_dict()
    raise InvalidArgumentError(f"cannot serialise {type(rhat).__name__}")


def save_json(obj: dict[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_policy(path: str | Path):
    return policy_from_dict(json.loads(Path(path).read_text()))


def load_estimator(path: str | Path) -> RewardEstimator:
    return estimator_from_dict(json.loads(Path(path).read_text()))


def save_model(model: LinearModel, path: str | Path) -> None:
    save_json(model.to_dict(), path)


def load_model(path: str | Path) -> LinearModel:
    return LinearModel.from_dict(json.loads(Path(path).read_text()))
