"""Supervised-to-bandit conversion, enumerable tiny worlds, and file I/O.

Event logs are JSON lines ``{"x": {id: value}, "a": int, "r": float, "p": float}``.
Supervised data is svmlight-style multilabel text: ``0,2 1:0.5 7:1.0`` with
1-based feature ids (stored 0-based).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    DataParseError,
    ExplorationEvent,
    Features,
    InvalidArgumentError,
    context_index,
)
from .policies import LabeledExample

log = logging.getLogger(__name__)

SCORE_LOW = 0.1
SCORE_HIGH = 1.0
EXPLORE_MASS = 0.3
LABEL_MASS = 0.7


@dataclass(frozen=True)
class SupervisedDataset:
    examples: tuple[LabeledExample, ...]
    n_actions: int
    n_features: int

    def __post_init__(self):
        if self.n_actions < 2:
            raise InvalidArgumentError("a supervised dataset needs K >= 2")
        object.__setattr__(self, "examples", tuple(self.examples))
        for ex in self.examples:
            if any(not 0 <= c < self.n_actions for c in ex.labels):
                raise InvalidArgumentError(f"label outside [0, {self.n_actions})")

    def __len__(self) -> int:
        return len(self.examples)

    def subset(self, indices: Iterable[int]) -> SupervisedDataset:
        return SupervisedDataset(tuple(self.examples[i] for i in indices), self.n_actions, self.n_features)


def logging_distribution(labels: frozenset[int], scores: np.ndarray) -> np.ndarray:
    """``0.3 * s_a / sum(s) + 0.7 * I(a in labels) / |labels|``."""
    mu = EXPLORE_MASS * scores / scores.sum()
    bonus = LABEL_MASS / len(labels)
    for c in labels:
        mu[c] += bonus
    return mu


def convert_supervised(dataset: SupervisedDataset, seed: int) -> list[ExplorationEvent]:
    """Turn labelled examples into logged bandit events with a label-favouring logger.

    Per example: scores ``s_a ~ U[0.1, 1]``, action ``a ~ mu(.|x)``, reward
    ``I(a in labels)`` and propensity ``mu(a|x)``.
    """
    rng = np.random.default_rng(seed)
    K = dataset.n_actions
    n = len(dataset)
    scores = rng.uniform(SCORE_LOW, SCORE_HIGH, size=(n, K))
    draws = rng.random(n)
    events = []
    for i, ex in enumerate(dataset.examples):
        if not ex.labels:
            raise InvalidArgumentError(f"example {i} has no labels")
        mu = logging_distribution(ex.labels, scores[i])
        a = min(int(np.searchsorted(np.cumsum(mu), draws[i] * mu.sum(), side="right")), K - 1)
        events.append(ExplorationEvent(ex.context, a, 1.0 if a in ex.labels else 0.0, float(mu[a])))
    return events


def split_dataset(dataset: SupervisedDataset, fractions: Sequence[float], seed: int) -> list[SupervisedDataset]:
    """Disjoint random parts of sizes ``floor(f * n)`` from one seeded shuffle."""
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or sum(fractions) > 1.0 + 1e-12:
        raise InvalidArgumentError(f"fractions must be positive and sum to at most 1: {fractions}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    parts = []
    start = 0
    for f in fractions:
        size = int(math.floor(f * n + 1e-9))
        parts.append(dataset.subset(order[start:start + size].tolist()))
        start += size
    return parts


def synthetic_multilabel(
    n: int,
    n_actions: int = 4,
    n_features: int = 20,
    seed: int = 0,
    noise: float = 0.25,
    second_label_rate: float = 0.1,
    density: float = 1.0,
) -> SupervisedDataset:
    """Offline stand-in for a multilabel text corpus.

    Each class has a random prototype direction; the primary label is the
    argmax of noisy prototype scores and, with probability
    ``second_label_rate``, the runner-up class is added as a second label.
    """
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(n_actions, n_features))
    X = rng.normal(size=(n, n_features))
    if density < 1.0:
        X *= rng.random((n, n_features)) < density
    scores = X @ protos.T + noise * rng.normal(size=(n, n_actions)) * math.sqrt(n_features)
    order = np.argsort(-scores, axis=1, kind="stable")
    extra = rng.random(n) < second_label_rate
    examples = []
    for i in range(n):
        labels = {int(order[i, 0])}
        if extra[i]:
            labels.add(int(order[i, 1]))
        nz = np.flatnonzero(X[i])
        examples.append(LabeledExample(Features(nz, X[i, nz] / math.sqrt(n_features)), frozenset(labels)))
    return SupervisedDataset(tuple(examples), n_actions, n_features)


@dataclass(frozen=True, eq=False)
class TinyWorld:
    """Fully enumerable environment over one-hot contexts.

    ``contexts[i] = D(x_i)``, ``rewards[i, a] = P(r = 1 | x_i, a)``,
    ``logging[i, a] = mu(a | x_i)`` (strictly positive).
    """

    contexts: np.ndarray
    rewards: np.ndarray
    logging: np.ndarray

    def __post_init__(self):
        D = np.array(self.contexts, dtype=np.float64)
        P = np.array(self.rewards, dtype=np.float64)
        mu = np.array(self.logging, dtype=np.float64)
        if D.ndim != 1 or D.size == 0 or np.any(D < 0) or not math.isclose(D.sum(), 1.0, abs_tol=1e-9):
            raise InvalidArgumentError("context probabilities must be a probability vector")
        if P.ndim != 2 or P.shape[0] != D.size or np.any(P < 0) or np.any(P > 1):
            raise InvalidArgumentError("reward table must be |X| x K with entries in [0, 1]")
        if mu.shape != P.shape:
            raise InvalidArgumentError("logging table must match the reward table's shape")
        if np.any(mu <= 0):
            raise InvalidArgumentError("logging probabilities must be strictly positive")
        if not np.allclose(mu.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise InvalidArgumentError("logging rows must sum to 1")
        for arr in (D, P, mu):
            arr.setflags(write=False)
        object.__setattr__(self, "contexts", D)
        object.__setattr__(self, "rewards", P)
        object.__setattr__(self, "logging", mu)
        object.__setattr__(self, "_features", tuple(Features.one_hot(i) for i in range(D.size)))

    @property
    def n_contexts(self) -> int:
        return int(self.contexts.size)

    @property
    def n_actions(self) -> int:
        return int(self.rewards.shape[1])

    def context(self, i: int) -> Features:
        return self._features[i]

    def to_dict(self) -> dict:
        return {"contexts": self.contexts.tolist(), "rewards": self.rewards.tolist(),
                "logging": self.logging.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> TinyWorld:
        try:
            return cls(d["contexts"], d["rewards"], d["logging"])
        except KeyError as exc:
            raise InvalidArgumentError(f"world spec missing key {exc}") from None


def random_world(rng: np.random.Generator, n_contexts: int | None = None, n_actions: int | None = None,
                 min_logging: float = 0.02) -> TinyWorld:
    nx = int(n_contexts or rng.integers(1, 5))
    K = int(n_actions or rng.integers(2, 5))
    D = rng.dirichlet(np.ones(nx))
    P = rng.random((nx, K))
    mu = rng.dirichlet(np.ones(K), size=nx)
    mu = (1 - K * min_logging) * mu + min_logging
    return TinyWorld(D, P, mu)


def sample_world_log(world: TinyWorld, n: int, seed: int, logging=None) -> list[ExplorationEvent]:
    """Draw ``n`` i.i.d. events ``x ~ D, a ~ mu(.|x), r ~ Bernoulli(P(x, a))``.

    ``logging`` may be a stationary policy over the world's one-hot contexts;
    by default the world's own logging table is used.
    """
    if n < 1:
        raise InvalidArgumentError("need n >= 1")
    rng = np.random.default_rng(seed)
    table = world.logging if logging is None else np.array(
        [logging.action_distribution(world.context(i)) for i in range(world.n_contexts)])
    xs = _categorical(rng.random(n), world.contexts)
    cdf = np.cumsum(table, axis=1)
    u = rng.random(n)
    acts = np.minimum((u[:, None] * cdf[xs, -1:] >= cdf[xs]).sum(axis=1), world.n_actions - 1)
    rs = (rng.random(n) < world.rewards[xs, acts]).astype(np.float64)
    feats = world._features
    return [ExplorationEvent(feats[x], a, r, p)
            for x, a, r, p in zip(xs.tolist(), acts.tolist(), rs.tolist(), table[xs, acts].tolist())]


def _categorical(u: np.ndarray, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs)
    return np.minimum(np.searchsorted(cdf, u * cdf[-1], side="right"), probs.size - 1)


# -- file formats -------------------------------------------------------------

def parse_multilabel_line(line: str, lineno: int | None = None) -> tuple[frozenset[int], Features] | None:
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    head, *feats = text.split()
    labels: set[int] = set()
    if ":" in head:
        feats.insert(0, head)
    else:
        try:
            labels = {int(c) for c in head.split(",") if c != ""}
        except ValueError:
            raise DataParseError(f"bad label list {head!r}", lineno) from None
    mapping: dict[int, float] = {}
    for tok in feats:
        try:
            i, v = tok.split(":")
            fid = int(i)
            val = float(v)
        except ValueError:
            raise DataParseError(f"bad feature token {tok!r}", lineno) from None
        if fid < 1:
            raise DataParseError(f"feature ids are 1-based, got {fid}", lineno)
        if fid - 1 in mapping:
            raise DataParseError(f"duplicate feature id {fid}", lineno)
        mapping[fid - 1] = val
    return frozenset(labels), Features.from_dict(mapping)


def read_multilabel(path: str | Path, n_actions: int | None = None) -> SupervisedDataset:
    """Parse svmlight multilabel text; examples without labels are dropped with a warning."""
    examples = []
    dropped = 0
    max_label = -1
    max_id = -1
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parsed = parse_multilabel_line(line, lineno)
            if parsed is None:
                continue
            labels, x = parsed
            if not labels:
                dropped += 1
                continue
            if n_actions is not None and max(labels) >= n_actions:
                raise DataParseError(f"label {max(labels)} >= K={n_actions}", lineno)
            max_label = max(max_label, max(labels))
            max_id = max(max_id, x.max_id)
            examples.append(LabeledExample(x, labels))
    if dropped:
        log.warning("dropped %d examples with no labels from %s", dropped, path)
    K = n_actions if n_actions is not None else max(max_label + 1, 2)
    return SupervisedDataset(tuple(examples), K, max_id + 1)


def write_multilabel(dataset: SupervisedDataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        for ex in dataset.examples:
            feats = " ".join(f"{i + 1}:{v!r}" for i, v in ex.context.to_dict().items())
            fh.write(",".join(str(c) for c in sorted(ex.labels)) + (" " + feats if feats else "") + "\n")


def _fmt(v: float) -> str:
    return format(v, ".17g")


def event_to_json(ev: ExplorationEvent) -> str:
    x = ",".join(f'"{i}":{_fmt(v)}' for i, v in ev.context.to_dict().items())
    return f'{{"x":{{{x}}},"a":{ev.action},"r":{_fmt(ev.reward)},"p":{_fmt(ev.propensity)}}}'


def write_events(events: Iterable[ExplorationEvent], path: str | Path) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(event_to_json(ev) + "\n")


def parse_event(line: str, lineno: int | None = None) -> ExplorationEvent:
    try:
        obj = json.loads(line)
        x = Features.from_dict({int(k): float(v) for k, v in obj["x"].items()})
        a = obj["a"]
        r = float(obj["r"])
        p = float(obj["p"])
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise DataParseError(f"malformed event record: {exc}", lineno) from None
    if not isinstance(a, int) or isinstance(a, bool):
        raise DataParseError(f"action must be an integer, got {a!r}", lineno)
    if not (p > 0.0 and p <= 1.0):
        raise DataParseError(f"rejected record: propensity {p} outside (0, 1]", lineno)
    if not 0.0 <= r <= 1.0:
        raise DataParseError(f"rejected record: reward {r} outside [0, 1]", lineno)
    if a < 0:
        raise DataParseError(f"rejected record: negative action {a}", lineno)
    return ExplorationEvent(x, a, r, p)


def read_events(path: str | Path) -> list[ExplorationEvent]:
    events = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                events.append(parse_event(line, lineno))
    return events


def world_context_index(event: ExplorationEvent) -> int:
    return context_index(event.context)


def load_world(path: str | Path) -> TinyWorld:
    return TinyWorld.from_dict(json.loads(Path(path).read_text()))
