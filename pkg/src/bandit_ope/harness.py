"""Experiment orchestration: static and adaptive policy-evaluation protocols.

A run is driven by an :class:`ExperimentConfig` (JSON).  Everything shared by
the trials (splits, the target policy, the ground truth) is fixed by the
base seed; each trial derives its own seeds from ``(seed, trial index)``
only, so trials can run in any order or in parallel and the report does
not change.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import BanditOPEError, ConstantEstimator, NoAcceptedSamplesError
from .datagen import (
    SupervisedDataset,
    TinyWorld,
    convert_supervised,
    read_multilabel,
    sample_world_log,
    split_dataset,
    synthetic_multilabel,
)
from .evaluators import (
    dm_evaluate,
    dr_evaluate,
    drns_evaluate,
    ips_evaluate,
    min_propensity,
    rs_evaluate,
    wc_evaluate,
)
from .policies import (
    AdaptivePolicy,
    EpsGreedyPolicy,
    LearnerConfig,
    estimator_from_dict,
    policy_from_dict,
    train_logistic_ova,
    train_reward_model,
    uniform_policy,
)

THREADS_ENV = "BANDIT_OPE_THREADS"
BOOTSTRAP_RESAMPLES = 10_000

__all__ = [
    "ConfigError",
    "EvaluatorSpec",
    "ExperimentConfig",
    "TrialTable",
    "adaptive_ground_truth",
    "run_adaptive_experiment",
    "run_experiment",
    "run_static_experiment",
    "run_tinyworld_experiment",
    "summarize",
]


class ConfigError(BanditOPEError):
    pass


class InsufficientDataError(BanditOPEError):
    pass


@dataclass(frozen=True)
class EvaluatorSpec:
    kind: str  # drns | wc | rs | dm | ips | dr
    q: float = 0.0
    c_max: float = 1.0
    c: float | None = None  # wc / rs cap; None means the minimum logged propensity
    name: str | None = None

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "drns":
            return f"DR-ns(q={self.q:g})"
        return self.kind.upper()

    @classmethod
    def from_obj(cls, obj) -> EvaluatorSpec:
        if isinstance(obj, str):
            obj = {"kind": obj}
        kind = str(obj.get("kind", "")).lower()
        if kind not in {"drns", "wc", "rs", "dm", "ips", "dr"}:
            raise ConfigError(f"unknown evaluator kind {kind!r}")
        return cls(kind, float(obj.get("q", 0.0)), float(obj.get("c_max", 1.0)),
                   None if obj.get("c") is None else float(obj["c"]), obj.get("name"))


DEFAULT_EVALUATORS = (
    EvaluatorSpec("dm"),
    EvaluatorSpec("rs"),
    EvaluatorSpec("wc"),
    EvaluatorSpec("drns", q=0.0),
    EvaluatorSpec("drns", q=0.01),
    EvaluatorSpec("drns", q=0.05),
    EvaluatorSpec("drns", q=0.1),
)


@dataclass
class ExperimentConfig:
    task: str = "static"  # static | adaptive | tinyworld-diagnostic
    dataset: dict = field(default_factory=lambda: {"synthetic": {"n": 8000}})
    world: dict | None = None
    evaluators: tuple[EvaluatorSpec, ...] = DEFAULT_EVALUATORS
    trials: int = 50
    seed: int = 0
    # static: (train, evaluation); adaptive: (seed set, evaluation, ground truth)
    splits: tuple[float, ...] = (0.10, 0.50)
    eps: float = 0.1
    learner: dict = field(default_factory=dict)
    seed_size: int | None = None
    period: int = 15
    horizon: int = 300
    simulations: int = 200
    output: str | None = None

    def __post_init__(self):
        if self.task not in {"static", "adaptive", "tinyworld-diagnostic"}:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.trials < 2:
            raise ConfigError("need at least two trials")
        self.evaluators = tuple(e if isinstance(e, EvaluatorSpec) else EvaluatorSpec.from_obj(e)
                                for e in self.evaluators)
        self.splits = tuple(float(f) for f in self.splits)

    @property
    def learner_config(self) -> LearnerConfig:
        return LearnerConfig(l2=float(self.learner.get("l2", 1.0)),
                             iterations=int(self.learner.get("iterations", 500)))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "evaluators" in d:
            d["evaluators"] = tuple(EvaluatorSpec.from_obj(e) for e in d["evaluators"])
        if "splits" in d:
            d["splits"] = tuple(d["splits"])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def paper_static(cls, **overrides) -> ExperimentConfig:
        """Full-size static protocol (40K examples, 300 trials)."""
        base = dict(task="static", dataset={"synthetic": {"n": 40000}}, trials=300, splits=(0.10, 0.50))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper_adaptive(cls, **overrides) -> ExperimentConfig:
        """Full-size adaptive protocol (400 seed examples, period 15, horizon 300, 50 trials)."""
        base = dict(task="adaptive", dataset={"synthetic": {"n": 40000}}, trials=50, seed_size=400,
                    splits=(0.01, 0.80, 0.19), period=15, horizon=300, simulations=2000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["evaluators"] = [asdict(e) for e in self.evaluators]
        d["splits"] = list(self.splits)
        return d


def load_dataset(spec: dict, seed: int) -> SupervisedDataset:
    if "path" in spec:
        return read_multilabel(spec["path"], spec.get("n_actions"))
    syn = dict(spec.get("synthetic", {}))
    syn.setdefault("seed", seed)
    return synthetic_multilabel(**syn)


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint32)[0])


# -- statistics ----------------------------------------------------------------

def summarize(estimates: Sequence[float], truth: float, seed: int = 0,
              resamples: int = BOOTSTRAP_RESAMPLES) -> dict[str, float]:
    """rmse, |bias|, sample stdev and a percentile-bootstrap 95% CI for the rmse."""
    est = np.asarray(estimates, dtype=np.float64)
    if est.size < 2:
        raise InsufficientDataError("need at least two estimates")
    err2 = (est - truth) ** 2
    rmse = math.sqrt(float(err2.mean()))
    bias = abs(float(est.mean()) - truth)
    stdev = float(est.std(ddof=1))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, est.size, size=(resamples, est.size))
    boot = err2[idx].mean(axis=1)
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return {"rmse": rmse, "bias": bias, "stdev": stdev,
            "ci_lo": math.sqrt(float(lo)), "ci_hi": math.sqrt(float(hi)), "n": int(est.size)}


@dataclass
class TrialTable:
    """Per-trial estimates plus per-evaluator summary statistics.

    Values are reported as losses (``1 - reward``), like classification error.
    A failed cell (no estimate) is ``None`` and is counted, never zero-filled.
    """

    task: str
    truth: float
    evaluators: list[str]
    cells: dict[str, list[dict | None]]
    summary: dict[str, dict[str, Any]]
    config: dict[str, Any]
    extra: dict[str, Any] = field(default_factory=dict)

    def estimates(self, label: str) -> list[float]:
        return [c["loss"] for c in self.cells[label] if c is not None]

    def failures(self, label: str) -> int:
        return sum(c is None for c in self.cells[label])

    def mean_accepted(self, label: str) -> float:
        vals = [c["accepted_count"] for c in self.cells[label] if c is not None and "accepted_count" in c]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "ground_truth_loss": self.truth,
            "evaluators": self.evaluators,
            "summary": self.summary,
            "trials": self.cells,
            "config": self.config,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False,
                          default=_json_default) + "\n"

    def to_text(self) -> str:
        cols = ["evaluator", "rmse", "ci_lo", "ci_hi", "bias", "stdev", "failures"]
        rows = []
        for label in self.evaluators:
            s = self.summary[label]
            rows.append([label] + [_g(s.get(k)) for k in cols[1:6]] + [str(s["failures"])])
        widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
        lines = [" | ".join(c.ljust(w) for c, w in zip(cols, widths))]
        lines.append("-+-".join("-" * w for w in widths))
        lines += [" | ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
        lines.append(f"ground truth loss: {_g(self.truth)}")
        return "\n".join(lines) + "\n"


def _g(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    return f"{v:.6g}"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)


def _summary_rows(cells: dict[str, list[dict | None]], truth: float, seed: int) -> dict[str, dict]:
    out = {}
    for j, (label, col) in enumerate(cells.items()):
        est = [c["loss"] for c in col if c is not None]
        failures = sum(c is None for c in col)
        if len(est) >= 2:
            row: dict[str, Any] = summarize(est, truth, seed=_seed(seed, 7, j))
        else:
            row = {"rmse": None, "bias": None, "stdev": None, "ci_lo": None, "ci_hi": None, "n": len(est)}
        acc = [c["accepted_count"] for c in col if c is not None and "accepted_count" in c]
        row["mean_accepted"] = float(np.mean(acc)) if acc else None
        row["failures"] = failures
        out[label] = row
    return out


# -- trial execution ---------------------------------------------------------

def _run_evaluator(spec: EvaluatorSpec, target_events, rs_events, policy, rhat, seed: int,
                   horizon: int | None) -> dict | None:
    try:
        if spec.kind == "dm":
            return {"loss": 1.0 - dm_evaluate(target_events, policy, rhat)}
        if spec.kind == "ips":
            return {"loss": 1.0 - ips_evaluate(target_events, policy)}
        if spec.kind == "dr":
            return {"loss": 1.0 - dr_evaluate(target_events, policy, rhat)}
        if spec.kind == "drns":
            res = drns_evaluate(target_events, policy, rhat, q=spec.q, c_max=spec.c_max, seed=seed,
                                horizon=horizon)
        elif spec.kind == "wc":
            c = spec.c if spec.c is not None else min_propensity(target_events)
            res = wc_evaluate(target_events, policy, rhat, c, seed=seed, horizon=horizon)
        elif spec.kind == "rs":
            c = spec.c if spec.c is not None else min_propensity(rs_events)
            res = rs_evaluate(rs_events, policy, c, seed=seed, horizon=horizon)
        else:  # pragma: no cover - guarded by EvaluatorSpec
            raise ConfigError(spec.kind)
    except NoAcceptedSamplesError:
        return None
    cell = {"loss": 1.0 - res.estimate, "accepted_count": res.accepted_count, "events_used": res.events_used}
    if res.trajectory_estimates is not None:
        cell["trajectories"] = len(res.trajectory_estimates)
    return cell


# Shared read-only state of the current experiment, installed in each worker.
_CONTEXT: dict[str, Any] = {}


def _install(context: dict[str, Any]) -> None:
    _CONTEXT.clear()
    _CONTEXT.update(context)


def _trial(i: int) -> list[dict | None]:
    ctx = _CONTEXT
    cfg: ExperimentConfig = ctx["config"]
    tseed = _seed(cfg.seed, i)
    if cfg.task == "tinyworld-diagnostic":
        events = sample_world_log(ctx["world"], ctx["n_events"], seed=tseed)
        return [
            _run_evaluator(spec, events, events, ctx["policy"], ctx["rhat"], _seed(tseed, 3, j), None)
            for j, spec in enumerate(cfg.evaluators)
        ]
    events = convert_supervised(ctx["eval_set"], seed=tseed)
    if cfg.task == "adaptive":
        order = np.random.default_rng(_seed(tseed, 1)).permutation(len(events))
        events = [events[k] for k in order]
    half = len(events) // 2
    perm = np.random.default_rng(_seed(tseed, 2)).permutation(len(events))
    train_half = [events[k] for k in sorted(perm[:half].tolist())]
    eval_half = [events[k] for k in sorted(perm[half:].tolist())]
    rhat = train_reward_model(train_half, ctx["n_actions"], cfg.learner_config, ctx["n_features"])
    horizon = cfg.horizon if cfg.task == "adaptive" else None
    return [
        _run_evaluator(spec, eval_half, events, ctx["policy"], rhat, _seed(tseed, 3, j), horizon)
        for j, spec in enumerate(cfg.evaluators)
    ]


def _workers() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        return max(n, 1)
    return os.cpu_count() or 1


def _run_trials(context: dict[str, Any], trials: int) -> list[list[dict | None]]:
    workers = min(_workers(), trials)
    if workers <= 1:
        _install(context)
        try:
            return [_trial(i) for i in range(trials)]
        finally:
            _CONTEXT.clear()
    with ProcessPoolExecutor(max_workers=workers, initializer=_install, initargs=(context,)) as pool:
        return list(pool.map(_trial, range(trials)))


def _assemble(cfg: ExperimentConfig, truth_loss: float, results, extra: dict) -> TrialTable:
    labels = [spec.label for spec in cfg.evaluators]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate evaluator labels: {labels}")
    cells = {label: [results[i][j] for i in range(cfg.trials)] for j, label in enumerate(labels)}
    return TrialTable(cfg.task, truth_loss, labels, cells, _summary_rows(cells, truth_loss, cfg.seed),
                      cfg.to_dict(), extra)


def static_setup(cfg: ExperimentConfig) -> dict[str, Any]:
    data = load_dataset(cfg.dataset, cfg.seed)
    if len(cfg.splits) != 2:
        raise ConfigError("static task needs splits (train, evaluation)")
    train, eval_set = split_dataset(data, cfg.splits, seed=_seed(cfg.seed, 101))
    if len(train) < 2 or len(eval_set) < 4:
        raise ConfigError(f"dataset of {len(data)} examples too small for splits {cfg.splits}")
    model = train_logistic_ova(train.examples, data.n_actions, cfg.learner_config, data.n_features)
    policy = EpsGreedyPolicy(model, cfg.eps)
    return {"config": cfg, "eval_set": eval_set, "policy": policy,
            "n_actions": data.n_actions, "n_features": data.n_features}


def static_ground_truth(policy: EpsGreedyPolicy, eval_set: SupervisedDataset) -> float:
    """Exact average reward of the policy on the fully labelled evaluation set."""
    dists = policy.action_distributions([ex.context for ex in eval_set.examples])
    hits = np.zeros_like(dists)
    for i, ex in enumerate(eval_set.examples):
        hits[i, list(ex.labels)] = 1.0
    return math.fsum((dists * hits).sum(axis=1).tolist()) / len(eval_set)


def run_static_experiment(cfg: ExperimentConfig) -> TrialTable:
    ctx = static_setup(cfg)
    truth = static_ground_truth(ctx["policy"], ctx["eval_set"])
    results = _run_trials(ctx, cfg.trials)
    return _assemble(cfg, 1.0 - truth, results, {"ground_truth_reward": truth})


def adaptive_setup(cfg: ExperimentConfig) -> dict[str, Any]:
    data = load_dataset(cfg.dataset, cfg.seed)
    if len(cfg.splits) != 3:
        raise ConfigError("adaptive task needs splits (seed set, evaluation, ground truth)")
    seed_set, eval_set, truth_set = split_dataset(data, cfg.splits, seed=_seed(cfg.seed, 101))
    if cfg.seed_size is not None:
        if cfg.seed_size > len(seed_set):
            raise ConfigError(f"seed_size {cfg.seed_size} exceeds the seed split ({len(seed_set)})")
        seed_set = seed_set.subset(range(cfg.seed_size))
    if len(truth_set) < cfg.horizon:
        raise ConfigError(f"ground-truth split ({len(truth_set)}) shorter than the horizon {cfg.horizon}")
    policy = AdaptivePolicy(seed_set.examples, data.n_actions, cfg.period, cfg.horizon, cfg.eps,
                            cfg.learner_config, data.n_features)
    return {"config": cfg, "eval_set": eval_set, "truth_set": truth_set, "policy": policy,
            "n_actions": data.n_actions, "n_features": data.n_features}


def adaptive_ground_truth(policy: AdaptivePolicy, truth_set: SupervisedDataset, horizon: int,
                          simulations: int, seed: int) -> tuple[float, float]:
    """Mean online reward over ``horizon`` steps, averaged over shuffled replays.

    Each step contributes the policy's exact expected reward on the example
    (its distribution dotted with the label indicator); the sampled action
    is what enters the history.  Returns (mean, standard error).
    """
    from .core import EMPTY_HISTORY

    examples = truth_set.examples
    values = np.empty(simulations)
    for s in range(simulations):
        rng = np.random.default_rng(_seed(seed, 202, s))
        order = rng.permutation(len(examples))[:horizon]
        draws = rng.random(horizon)
        h = EMPTY_HISTORY
        total = 0.0
        for t, idx in enumerate(order.tolist()):
            ex = examples[idx]
            dist = policy.action_distribution(ex.context, h)
            total += float(sum(dist[c] for c in ex.labels))
            a = min(int(np.searchsorted(np.cumsum(dist), draws[t] * dist.sum(), side="right")), dist.size - 1)
            h = h.append(ex.context, a, 1.0 if a in ex.labels else 0.0)
        values[s] = total / horizon
    se = float(values.std(ddof=1) / math.sqrt(simulations)) if simulations > 1 else math.nan
    return float(values.mean()), se


def run_adaptive_experiment(cfg: ExperimentConfig) -> TrialTable:
    ctx = adaptive_setup(cfg)
    truth, truth_se = adaptive_ground_truth(ctx["policy"], ctx["truth_set"], cfg.horizon, cfg.simulations,
                                            cfg.seed)
    results = _run_trials(ctx, cfg.trials)
    return _assemble(cfg, 1.0 - truth, results,
                     {"ground_truth_reward": truth, "ground_truth_standard_error": truth_se})


def tinyworld_setup(cfg: ExperimentConfig) -> dict[str, Any]:
    """World, target and reward model for the tinyworld-diagnostic task.

    ``cfg.world`` holds the world tables plus optional ``target`` (a policy
    document, uniform by default), ``rhat`` (an estimator document, constant
    0.5 by default) and ``events`` (log length per trial, default 1000).
    """
    if not cfg.world:
        raise ConfigError("tinyworld-diagnostic task needs a world")
    spec = dict(cfg.world)
    target, rhat, n_events = spec.pop("target", None), spec.pop("rhat", None), int(spec.pop("events", 1000))
    world = TinyWorld.from_dict(spec)
    policy = policy_from_dict(target) if target else uniform_policy(world.n_actions)
    if not policy.stationary:
        raise ConfigError("tinyworld-diagnostic ground truth needs a stationary target")
    rhat = estimator_from_dict(rhat) if rhat else ConstantEstimator(0.5, world.n_actions)
    return {"config": cfg, "world": world, "policy": policy, "rhat": rhat, "n_events": n_events}


def run_tinyworld_experiment(cfg: ExperimentConfig) -> TrialTable:
    from .oracle import exact_stationary_value

    ctx = tinyworld_setup(cfg)
    truth = exact_stationary_value(ctx["world"], ctx["policy"])
    results = _run_trials(ctx, cfg.trials)
    return _assemble(cfg, 1.0 - truth, results, {"ground_truth_reward": truth})


def ground_truth(cfg: ExperimentConfig) -> dict[str, Any]:
    if cfg.task == "static":
        ctx = static_setup(cfg)
        v = static_ground_truth(ctx["policy"], ctx["eval_set"])
        return {"task": "static", "reward": v, "loss": 1.0 - v, "evaluation_examples": len(ctx["eval_set"])}
    if cfg.task == "adaptive":
        ctx = adaptive_setup(cfg)
        v, se = adaptive_ground_truth(ctx["policy"], ctx["truth_set"], cfg.horizon, cfg.simulations, cfg.seed)
        return {"task": "adaptive", "reward": v, "loss": 1.0 - v, "standard_error": se,
                "simulations": cfg.simulations, "horizon": cfg.horizon}
    from .oracle import exact_stationary_value

    ctx = tinyworld_setup(cfg)
    v = exact_stationary_value(ctx["world"], ctx["policy"])
    return {"task": cfg.task, "reward": v, "loss": 1.0 - v}


def run_experiment(cfg: ExperimentConfig) -> TrialTable:
    if cfg.task == "static":
        return run_static_experiment(cfg)
    if cfg.task == "adaptive":
        return run_adaptive_experiment(cfg)
    return run_tinyworld_experiment(cfg)
