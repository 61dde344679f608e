"""Offline evaluators: DR-ns and its constant-cap variant (WC), rejection
sampling replay (RS), and the stationary DM / IPS / DR baselines.

Every estimator consumes logged :class:`ExplorationEvent` streams.  The
randomised evaluators draw their uniforms from a Philox stream so a run is
reproducible from its seed alone: ``u_k`` is the k-th draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Sequence

import numpy as np

from .core import (
    EMPTY_HISTORY,
    ExplorationEvent,
    InvalidArgumentError,
    NoAcceptedSamplesError,
    NoDataError,
    Policy,
    RewardEstimator,
    TargetHistory,
)
from .quantile import QuantileTracker, quantile_query

__all__ = [
    "EvalResult",
    "EvaluatorState",
    "RunTrace",
    "StepRecord",
    "dm_evaluate",
    "dr_evaluate",
    "dr_term",
    "drns_evaluate",
    "drns_step",
    "ips_evaluate",
    "make_uniform_stream",
    "min_propensity",
    "quantile_query",
    "rs_evaluate",
    "wc_evaluate",
]


def make_uniform_stream(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator used for every acceptance test."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _model_term(dist, rhat_row) -> float:
    # Left fold in action order; _model_terms reproduces it bit-for-bit.
    s = 0.0
    for d, r in zip(dist, rhat_row):
        s += d * r
    return s


def _model_terms(dists: np.ndarray, rhats: np.ndarray) -> np.ndarray:
    acc = np.zeros(dists.shape[0])
    for a in range(dists.shape[1]):
        acc += dists[:, a] * rhats[:, a]
    return acc


def _correction(prob_a: float, p: float, r: float, rhat_a: float) -> float:
    if prob_a == 0.0:
        return 0.0
    return prob_a / p * (r - rhat_a)


def dr_term(event: ExplorationEvent, dist: np.ndarray, rhat: RewardEstimator) -> float:
    """Doubly robust per-event estimate using the target's full distribution.

    ``sum_a dist[a] * rhat(x, a) + dist[a_k] / p_k * (r_k - rhat(x, a_k))``
    """
    row = rhat.estimate_all(event.context)
    a = event.action
    return _model_term(np.asarray(dist).tolist(), np.asarray(row).tolist()) + _correction(
        float(dist[a]), event.propensity, event.reward, float(row[a])
    )


class StepRecord(NamedTuple):
    k: int
    block: int
    cap: float
    estimate: float
    ratio: float
    accepted: bool
    u: float


@dataclass
class EvaluatorState:
    """Running state of one DR-ns pass.

    ``cap`` is the acceptance multiplier c_t currently in force; ``R`` and
    ``C`` are the cap-weighted sums of per-event estimates and of caps.
    """

    q: float
    c_max: float
    block_index: int = 1
    cap: float = field(default=None)  # type: ignore[assignment]
    R: float = 0.0
    C: float = 0.0
    tracker: QuantileTracker = field(default=None)  # type: ignore[assignment]
    history: TargetHistory = EMPTY_HISTORY
    events_processed: int = 0
    fixed_cap: bool = False

    def __post_init__(self):
        if not 0.0 <= self.q <= 1.0:
            raise InvalidArgumentError(f"q must lie in [0, 1], got {self.q}")
        if not 0.0 < self.c_max <= 1.0:
            raise InvalidArgumentError(f"c_max must lie in (0, 1], got {self.c_max}")
        if self.cap is None:
            self.cap = self.c_max
        if self.tracker is None:
            self.tracker = QuantileTracker(self.q)

    def restart_trajectory(self) -> None:
        """Start a fresh target history; the ratio tracker is kept."""
        self.block_index = 1
        self.cap = self.c_max
        self.R = 0.0
        self.C = 0.0
        self.history = EMPTY_HISTORY


def drns_step(
    state: EvaluatorState,
    event: ExplorationEvent,
    policy: Policy,
    rhat: RewardEstimator,
    u: float,
) -> StepRecord:
    """Process one exploration event, updating ``state`` in place."""
    dist = policy.action_distribution(event.context, state.history)
    return _step(state, event, np.asarray(dist, dtype=np.float64).tolist(),
                 np.asarray(rhat.estimate_all(event.context), dtype=np.float64).tolist(), u)


def _step(state: EvaluatorState, event: ExplorationEvent, dist: list, rhat_row: list, u: float) -> StepRecord:
    a, p, r = event.action, event.propensity, event.reward
    pa = dist[a]
    est = _model_term(dist, rhat_row) + _correction(pa, p, r, rhat_row[a])
    cap = state.cap
    block = state.block_index
    state.R += cap * est
    state.C += cap
    ratio = p / pa if pa > 0.0 else math.inf
    state.tracker.insert(ratio)
    state.events_processed += 1
    accepted = pa > 0.0 and u <= cap * pa / p
    if accepted:
        state.history = state.history.append(event.context, a, r)
        state.block_index += 1
        if not state.fixed_cap:
            state.cap = min(state.c_max, state.tracker.query())
    return StepRecord(state.events_processed, block, cap, est, ratio, accepted, u)


@dataclass
class RunTrace:
    """Per-event record of a randomised evaluation run.

    Arrays are indexed by event position (0-based); ``block`` holds the
    1-based block index of each event and ``trajectory`` the 0-based
    trajectory it belonged to (always 0 unless a horizon was set).
    """

    block: np.ndarray
    cap: np.ndarray
    estimate: np.ndarray
    ratio: np.ndarray
    accepted: np.ndarray
    u: np.ndarray
    trajectory: np.ndarray
    history: TargetHistory
    c_max: float = 1.0

    @classmethod
    def from_records(cls, records: Sequence[StepRecord], history: TargetHistory,
                     trajectory: Sequence[int] | None = None, c_max: float = 1.0) -> RunTrace:
        n = len(records)
        cols = list(zip(*records)) if n else [()] * 7
        return cls(
            block=np.asarray(cols[1], dtype=np.int64),
            cap=np.asarray(cols[2], dtype=np.float64),
            estimate=np.asarray(cols[3], dtype=np.float64),
            ratio=np.asarray(cols[4], dtype=np.float64),
            accepted=np.asarray(cols[5], dtype=bool),
            u=np.asarray(cols[6], dtype=np.float64),
            trajectory=np.zeros(n, dtype=np.int64) if trajectory is None else np.asarray(trajectory, dtype=np.int64),
            history=history,
            c_max=c_max,
        )

    def __len__(self) -> int:
        return int(self.block.size)

    @property
    def acceptance_indices(self) -> np.ndarray:
        """kappa(1..T): 1-based event indices of the accepted events."""
        return np.flatnonzero(self.accepted) + 1

    @property
    def completed_blocks(self) -> int:
        return int(self.accepted.sum())

    @property
    def block_sizes(self) -> np.ndarray:
        """|B(t)| for the completed blocks t = 1..T."""
        kappa = self.acceptance_indices
        return np.diff(np.concatenate(([0], kappa)))

    @property
    def block_caps(self) -> np.ndarray:
        """c_t for the completed blocks."""
        return self.cap[self.accepted]

    @property
    def trailing_events(self) -> int:
        """Events after the last acceptance (an incomplete block)."""
        kappa = self.acceptance_indices
        return len(self) - (int(kappa[-1]) if kappa.size else 0)

    @property
    def trailing_cap(self) -> float | None:
        return float(self.cap[-1]) if self.trailing_events else None

    def accumulators(self, truncate: bool = False) -> tuple[float, float]:
        """Recompute (R, C) from the records, optionally dropping the trailing block."""
        n = len(self)
        if truncate:
            n -= self.trailing_events
        R = 0.0
        C = 0.0
        for c, e in zip(self.cap[:n].tolist(), self.estimate[:n].tolist()):
            R += c * e
            C += c
        return R, C

    def events_in_completed_blocks(self) -> int:
        return len(self) - self.trailing_events

    def to_dict(self) -> dict[str, Any]:
        return {
            "block": self.block.tolist(),
            "cap": self.cap.tolist(),
            "estimate": self.estimate.tolist(),
            "ratio": [r if math.isfinite(r) else "inf" for r in self.ratio.tolist()],
            "accepted": self.accepted.tolist(),
            "u": self.u.tolist(),
            "trajectory": self.trajectory.tolist(),
            "kappa": self.acceptance_indices.tolist(),
            "block_sizes": self.block_sizes.tolist(),
            "completed_blocks": self.completed_blocks,
        }


@dataclass
class EvalResult:
    estimate: float
    accepted_count: int
    completed_blocks: int
    events_used: int
    R: float = math.nan
    C: float = math.nan
    trajectory_estimates: list[float] | None = None
    trace: RunTrace | None = None

    def to_dict(self, include_trace: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "estimate": self.estimate,
            "accepted_count": self.accepted_count,
            "T": self.completed_blocks,
            "events_used": self.events_used,
        }
        if not math.isnan(self.R):
            out["R"] = self.R
            out["C"] = self.C
        if self.trajectory_estimates is not None:
            out["trajectory_estimates"] = list(self.trajectory_estimates)
        if include_trace and self.trace is not None:
            out["trace"] = self.trace.to_dict()
        return out


def min_propensity(events: Sequence[ExplorationEvent]) -> float:
    if len(events) == 0:
        raise NoDataError("no exploration events")
    return min(ev.propensity for ev in events)


def _dists_and_rhats(events, policy, rhat):
    """Precompute target distributions (stationary policies only) and rhat rows."""
    contexts = [ev.context for ev in events]
    rh = _rhat_matrix(contexts, rhat) if rhat is not None else None
    dists = None
    if getattr(policy, "stationary", False):
        dists = _policy_matrix(contexts, policy)
    return dists, rh


def _rhat_matrix(contexts, rhat: RewardEstimator) -> np.ndarray:
    bulk = getattr(rhat, "estimate_matrix", None)
    if bulk is not None:
        return np.asarray(bulk(contexts), dtype=np.float64)
    return np.array([np.asarray(rhat.estimate_all(x), dtype=np.float64) for x in contexts])


def _policy_matrix(contexts, policy: Policy, history: TargetHistory = EMPTY_HISTORY) -> np.ndarray:
    bulk = getattr(policy, "action_distributions", None)
    if bulk is not None:
        return np.asarray(bulk(contexts), dtype=np.float64)
    return np.array([np.asarray(policy.action_distribution(x, history), dtype=np.float64) for x in contexts])


def _require(events):
    if len(events) == 0:
        raise NoDataError("no exploration events")


def _run_capped(
    events: Sequence[ExplorationEvent],
    policy: Policy,
    rhat: RewardEstimator,
    q: float,
    c_max: float,
    seed: int,
    fixed_cap: bool,
    horizon: int | None,
    trace: bool,
) -> EvalResult:
    _require(events)
    if horizon is not None and horizon < 1:
        raise InvalidArgumentError("horizon must be >= 1")
    n = len(events)
    us = make_uniform_stream(seed).random(n).tolist()
    dists, rh = _dists_and_rhats(events, policy, rhat)
    rh_rows = rh.tolist()
    dist_rows = dists.tolist() if dists is not None else None
    state = EvaluatorState(q=q, c_max=c_max, fixed_cap=fixed_cap)
    records: list[StepRecord] = []
    traj_of_event: list[int] = []
    traj_estimates: list[float] = []
    accepted_total = 0
    traj = 0
    final_history = state.history
    for k, ev in enumerate(events):
        if dist_rows is not None:
            dist = dist_rows[k]
        else:
            dist = np.asarray(policy.action_distribution(ev.context, state.history), dtype=np.float64).tolist()
        rec = _step(state, ev, dist, rh_rows[k], us[k])
        if trace:
            records.append(rec)
            traj_of_event.append(traj)
        if rec.accepted:
            accepted_total += 1
            if horizon is not None and len(state.history) >= horizon:
                traj_estimates.append(state.R / state.C)
                final_history = state.history
                state.restart_trajectory()
                traj += 1
    if horizon is None:
        estimate = state.R / state.C
        final_history = state.history
        R, C = state.R, state.C
    else:
        if not traj_estimates:
            raise NoAcceptedSamplesError(
                f"no trajectory of length {horizon} completed ({accepted_total} acceptances)"
            )
        estimate = sum(traj_estimates) / len(traj_estimates)
        R = C = math.nan
    run_trace = None
    if trace:
        history = state.history if horizon is None else final_history
        run_trace = RunTrace.from_records(records, history, traj_of_event, c_max=c_max)
    return EvalResult(
        estimate=estimate,
        accepted_count=accepted_total,
        completed_blocks=accepted_total,
        events_used=n,
        R=R,
        C=C,
        trajectory_estimates=traj_estimates if horizon is not None else None,
        trace=run_trace,
    )


def drns_evaluate(
    events: Sequence[ExplorationEvent],
    policy: Policy,
    rhat: RewardEstimator,
    q: float = 0.05,
    c_max: float = 1.0,
    seed: int = 0,
    *,
    horizon: int | None = None,
    trace: bool = False,
) -> EvalResult:
    """Doubly robust nonstationary evaluation.

    Returns ``R / C``; the events after the last acceptance are included in
    both sums.  With ``horizon`` set, the target history is restarted every
    time it reaches ``horizon`` acceptances and the estimate is the mean of
    the per-trajectory ``R / C`` values over completed trajectories.
    """
    return _run_capped(events, policy, rhat, q, c_max, seed, False, horizon, trace)


def wc_evaluate(
    events: Sequence[ExplorationEvent],
    policy: Policy,
    rhat: RewardEstimator,
    c: float,
    seed: int = 0,
    *,
    horizon: int | None = None,
    trace: bool = False,
) -> EvalResult:
    """DR-ns with the cap frozen at ``c`` (typically the minimum logged propensity)."""
    if not 0.0 < c <= 1.0:
        raise InvalidArgumentError(f"cap must lie in (0, 1], got {c}")
    return _run_capped(events, policy, rhat, 0.0, c, seed, True, horizon, trace)


def rs_evaluate(
    events: Sequence[ExplorationEvent],
    policy: Policy,
    c: float,
    seed: int = 0,
    *,
    horizon: int | None = None,
    trace: bool = False,
) -> EvalResult:
    """Rejection sampling replay: mean observed reward of the accepted events.

    Unbiased only when ``c <= min_propensity(events)``; that is not checked.
    """
    _require(events)
    if not 0.0 < c <= 1.0:
        raise InvalidArgumentError(f"cap must lie in (0, 1], got {c}")
    n = len(events)
    us = make_uniform_stream(seed).random(n).tolist()
    dists = None
    if getattr(policy, "stationary", False):
        dists = _policy_matrix([ev.context for ev in events], policy).tolist()
    history = EMPTY_HISTORY
    final_history = history
    rewards: list[float] = []
    traj_estimates: list[float] = []
    records: list[StepRecord] = []
    traj_of_event: list[int] = []
    accepted_total = 0
    block = 1
    traj = 0
    for k, ev in enumerate(events):
        if dists is not None:
            dist = dists[k]
        else:
            dist = np.asarray(policy.action_distribution(ev.context, history), dtype=np.float64).tolist()
        a, p, r = ev.action, ev.propensity, ev.reward
        pa = dist[a]
        u = us[k]
        accepted = pa > 0.0 and u <= c * pa / p
        if trace:
            records.append(StepRecord(k + 1, block, c, r if accepted else math.nan,
                                      p / pa if pa > 0.0 else math.inf, accepted, u))
            traj_of_event.append(traj)
        if accepted:
            accepted_total += 1
            block += 1
            rewards.append(r)
            history = history.append(ev.context, a, r)
            if horizon is not None and len(history) >= horizon:
                traj_estimates.append(sum(rewards) / len(rewards))
                final_history = history
                history = EMPTY_HISTORY
                rewards = []
                block = 1
                traj += 1
    if horizon is None:
        if not rewards:
            raise NoAcceptedSamplesError("rejection sampling accepted no events")
        estimate = sum(rewards) / len(rewards)
        final_history = history
    else:
        if not traj_estimates:
            raise NoAcceptedSamplesError(
                f"no trajectory of length {horizon} completed ({accepted_total} acceptances)"
            )
        estimate = sum(traj_estimates) / len(traj_estimates)
    run_trace = RunTrace.from_records(records, final_history, traj_of_event, c_max=c) if trace else None
    return EvalResult(
        estimate=estimate,
        accepted_count=accepted_total,
        completed_blocks=accepted_total,
        events_used=n,
        trajectory_estimates=traj_estimates if horizon is not None else None,
        trace=run_trace,
    )


def _mean(values: np.ndarray) -> float:
    return math.fsum(values.tolist()) / values.size


def dm_evaluate(events: Sequence[ExplorationEvent], policy: Policy, rhat: RewardEstimator) -> float:
    """Direct method: average model reward of the (history-free) target distribution."""
    _require(events)
    contexts = [ev.context for ev in events]
    return _mean(_model_terms(_policy_matrix(contexts, policy), _rhat_matrix(contexts, rhat)))


def _logged_weights(events, policy) -> np.ndarray:
    dists = _policy_matrix([ev.context for ev in events], policy)
    actions = np.fromiter((ev.action for ev in events), dtype=np.int64, count=len(events))
    props = np.fromiter((ev.propensity for ev in events), dtype=np.float64, count=len(events))
    return dists[np.arange(len(events)), actions] / props


def ips_evaluate(events: Sequence[ExplorationEvent], policy: Policy) -> float:
    """Inverse propensity scoring with the target's probability of the logged action."""
    _require(events)
    rewards = np.fromiter((ev.reward for ev in events), dtype=np.float64, count=len(events))
    return _mean(_logged_weights(events, policy) * rewards)


def dr_evaluate(events: Sequence[ExplorationEvent], policy: Policy, rhat: RewardEstimator) -> float:
    """Stationary doubly robust estimate (mean of per-event DR terms, empty history)."""
    _require(events)
    contexts = [ev.context for ev in events]
    dists = _policy_matrix(contexts, policy)
    rh = _rhat_matrix(contexts, rhat)
    n = len(events)
    actions = np.fromiter((ev.action for ev in events), dtype=np.int64, count=n)
    rewards = np.fromiter((ev.reward for ev in events), dtype=np.float64, count=n)
    props = np.fromiter((ev.propensity for ev in events), dtype=np.float64, count=n)
    idx = np.arange(n)
    w = dists[idx, actions] / props
    correction = np.where(w == 0.0, 0.0, w * (rewards - rh[idx, actions]))
    return _mean(_model_terms(dists, rh) + correction)
