"""Domain types shared by the evaluators, policies, data generators and oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np


class BanditOPEError(Exception):
    """Base class for errors raised by this package."""


class NoDataError(BanditOPEError):
    pass


class InvalidArgumentError(BanditOPEError, ValueError):
    pass


class NoAcceptedSamplesError(BanditOPEError):
    pass


class DataParseError(BanditOPEError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Features:
    """Sparse feature vector stored as sorted ``(ids, values)`` arrays.

    Dense vectors are the special case ``ids = 0..d-1``.  Instances are
    treated as immutable values.
    """

    __slots__ = ("ids", "values")

    def __init__(self, ids: Iterable[int] = (), values: Iterable[float] = ()):
        ids = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
        values = np.asarray(
            list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64
        )
        if ids.shape != values.shape or ids.ndim != 1:
            raise InvalidArgumentError("feature ids and values must be 1-d and equally long")
        if ids.size and ids.min() < 0:
            raise InvalidArgumentError("feature ids must be non-negative")
        order = np.argsort(ids, kind="stable")
        ids, values = ids[order], values[order]
        if ids.size > 1 and np.any(ids[1:] == ids[:-1]):
            raise InvalidArgumentError("duplicate feature id")
        self.ids = _frozen(ids)
        self.values = _frozen(values)

    @classmethod
    def from_dict(cls, mapping: Mapping[int, float]) -> Features:
        return cls(np.fromiter(mapping.keys(), dtype=np.int64, count=len(mapping)),
                   np.fromiter(mapping.values(), dtype=np.float64, count=len(mapping)))

    @classmethod
    def from_dense(cls, vector: Sequence[float]) -> Features:
        values = np.asarray(vector, dtype=np.float64).ravel()
        return cls(np.arange(values.size, dtype=np.int64), values)

    @classmethod
    def one_hot(cls, index: int) -> Features:
        return cls(np.array([index], dtype=np.int64), np.array([1.0]))

    def to_dict(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.ids, self.values)}

    def to_dense(self, dim: int) -> np.ndarray:
        out = np.zeros(dim)
        out[self.ids] = self.values
        return out

    @property
    def max_id(self) -> int:
        return int(self.ids[-1]) if self.ids.size else -1

    def dot(self, weights: np.ndarray) -> Any:
        """Inner product against the leading axis of ``weights``.

        ``weights`` may be a vector (d,) or a matrix (d, K); ids beyond ``d``
        contribute nothing.
        """
        ids, vals = self.ids, self.values
        d = weights.shape[0]
        if ids.size and ids[-1] >= d:
            keep = ids < d
            ids, vals = ids[keep], vals[keep]
        return vals @ weights[ids]

    def __len__(self) -> int:
        return int(self.ids.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Features):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash((self.ids.tobytes(), self.values.tobytes()))

    def __repr__(self) -> str:
        return f"Features({self.to_dict()!r})"

    def __reduce__(self):
        return (Features, (self.ids.copy(), self.values.copy()))


def as_features(context: Features | Mapping[int, float] | Sequence[float] | np.ndarray) -> Features:
    if isinstance(context, Features):
        return context
    if isinstance(context, Mapping):
        return Features.from_dict(context)
    return Features.from_dense(context)


@dataclass(frozen=True, slots=True)
class ExplorationEvent:
    """One logged tuple: context, chosen action, observed reward, logged propensity."""

    context: Features
    action: int
    reward: float
    propensity: float

    def __post_init__(self):
        if not (self.propensity > 0.0 and self.propensity <= 1.0):
            raise InvalidArgumentError(f"propensity must lie in (0, 1], got {self.propensity}")
        if not (0.0 <= self.reward <= 1.0):
            raise InvalidArgumentError(f"reward must lie in [0, 1], got {self.reward}")
        if self.action < 0:
            raise InvalidArgumentError(f"action must be non-negative, got {self.action}")


def check_events(events: Sequence[ExplorationEvent], n_actions: int | None = None) -> None:
    if len(events) == 0:
        raise NoDataError("no exploration events")
    if n_actions is not None:
        for k, ev in enumerate(events):
            if ev.action >= n_actions:
                raise InvalidArgumentError(f"event {k}: action {ev.action} >= K={n_actions}")


class TargetHistory:
    """Append-only history of accepted ``(context, action, reward)`` triples.

    ``append`` returns a new history and never changes the receiver, so a
    history handed to a policy (or kept as a snapshot) is frozen.  Storage is
    shared between a history and its extensions; branching from an older
    snapshot copies.
    """

    __slots__ = ("_store", "_n")

    def __init__(self, entries: Iterable[tuple[Features, int, float]] = ()):
        self._store = [(as_features(x), int(a), float(r)) for x, a, r in entries]
        self._n = len(self._store)

    @classmethod
    def _view(cls, store: list, n: int) -> TargetHistory:
        h = cls.__new__(cls)
        h._store = store
        h._n = n
        return h

    def append(self, context: Features, action: int, reward: float) -> TargetHistory:
        # Never grow a store behind an empty root: it may be a shared singleton.
        if self._n and self._n == len(self._store):
            store = self._store
        else:
            store = self._store[: self._n]
        store.append((context, int(action), float(reward)))
        return TargetHistory._view(store, self._n + 1)

    def prefix(self, n: int) -> TargetHistory:
        if not 0 <= n <= self._n:
            raise IndexError(f"prefix length {n} outside [0, {self._n}]")
        return TargetHistory._view(self._store, n)

    @property
    def entries(self) -> tuple[tuple[Features, int, float], ...]:
        return tuple(self._store[: self._n])

    @property
    def storage_key(self) -> tuple[int, int]:
        """Identity of the backing storage plus length; equal keys imply equal contents."""
        return id(self._store), self._n

    def last(self) -> tuple[Features, int, float] | None:
        return self._store[self._n - 1] if self._n else None

    def __len__(self) -> int:
        return self._n

    def __getitem__(self, i: int) -> tuple[Features, int, float]:
        if i < 0:
            i += self._n
        if not 0 <= i < self._n:
            raise IndexError(i)
        return self._store[i]

    def __iter__(self):
        return iter(self._store[: self._n])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TargetHistory):
            return NotImplemented
        return self.entries == other.entries

    def __hash__(self) -> int:
        return hash(self.entries)

    def __repr__(self) -> str:
        return f"TargetHistory(len={self._n})"

    def __reduce__(self):
        return (TargetHistory, (self.entries,))


EMPTY_HISTORY = TargetHistory()


def check_distribution(probs: np.ndarray, n_actions: int | None = None, atol: float = 1e-9) -> np.ndarray:
    """Validate an action distribution: non-negative entries summing to one."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise InvalidArgumentError("action distribution must be a non-empty vector")
    if n_actions is not None and probs.size != n_actions:
        raise InvalidArgumentError(f"expected {n_actions} actions, got {probs.size}")
    if np.any(probs < 0) or not math.isclose(float(probs.sum()), 1.0, rel_tol=0, abs_tol=atol):
        raise InvalidArgumentError(f"not a probability vector: {probs}")
    return probs


@runtime_checkable
class Policy(Protocol):
    """Maps a context and the target history to a distribution over actions.

    Implementations are pure: equal ``(context, history)`` give equal
    distributions.  ``stationary`` policies ignore the history, which lets
    evaluators precompute distributions in bulk.
    """

    n_actions: int
    stationary: bool

    def action_distribution(self, context: Features, history: TargetHistory) -> np.ndarray: ...


class RewardEstimator:
    """Fixed model of the expected reward ``r(x, a)``, clipped to [0, 1]."""

    n_actions: int

    def estimate(self, context: Features, action: int) -> float:
        return float(self.estimate_all(context)[action])

    def estimate_all(self, context: Features) -> np.ndarray:
        return np.array([self.estimate(context, a) for a in range(self.n_actions)])


class ConstantEstimator(RewardEstimator):
    def __init__(self, value: float, n_actions: int = 1):
        if not 0.0 <= value <= 1.0:
            raise InvalidArgumentError(f"constant reward estimate must lie in [0, 1], got {value}")
        self.value = float(value)
        self.n_actions = int(n_actions)
        self._row = _frozen(np.full(self.n_actions, self.value))

    def estimate(self, context: Features, action: int) -> float:
        return self.value

    def estimate_all(self, context: Features) -> np.ndarray:
        return self._row

    def __repr__(self) -> str:
        return f"ConstantEstimator({self.value})"


def constant_estimator(value: float, n_actions: int = 1) -> ConstantEstimator:
    return ConstantEstimator(value, n_actions)


class TableEstimator(RewardEstimator):
    """Reward model given as a (contexts x actions) table over one-hot contexts."""

    def __init__(self, table):
        table = np.asarray(table, dtype=np.float64)
        self.table = _frozen(np.clip(table, 0.0, 1.0))
        self.n_actions = table.shape[1]

    def estimate_all(self, context: Features) -> np.ndarray:
        return self.table[context_index(context)]

    def estimate(self, context: Features, action: int) -> float:
        return float(self.table[context_index(context), action])


def context_index(context: Features) -> int:
    """Index of a one-hot context (as produced for enumerable worlds)."""
    if context.ids.size != 1:
        raise InvalidArgumentError("expected a one-hot context")
    return int(context.ids[0])
