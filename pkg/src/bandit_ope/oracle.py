"""Exact computations on enumerable worlds and checks of the DR-ns guarantees.

Everything here works on :class:`TinyWorld` instances, whose contexts,
actions and Bernoulli rewards are few enough to enumerate.  Policies are
evaluated through the usual ``action_distribution(context, history)``; a
policy may additionally expose ``state_key(history)`` (a hashable summary
that fully determines its behaviour) which the enumerators use for
memoisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .core import EMPTY_HISTORY, Features, InvalidArgumentError, RewardEstimator, TargetHistory
from .datagen import TinyWorld, sample_world_log
from .evaluators import RunTrace, drns_evaluate

__all__ = [
    "BiasReport",
    "BudgetExceededError",
    "LemmaReport",
    "PVPolicy",
    "bias_experiment",
    "bias_mass",
    "coverage_experiment",
    "estimate_M",
    "exact_stationary_value",
    "exact_sup_ratio",
    "exact_trajectory_value",
    "policy_table",
    "pv_policy",
    "pv_unbiasedness_experiment",
    "reachable_states",
    "theorem1_bound",
    "theorem2_bound",
    "verify_lemmas",
]

BRANCH_BUDGET = 10**6


class BudgetExceededError(RuntimeError):
    pass


def policy_table(world: TinyWorld, policy, history: TargetHistory = EMPTY_HISTORY) -> np.ndarray:
    """(contexts x actions) table of ``policy`` given ``history``."""
    if callable(policy) and not hasattr(policy, "action_distribution"):
        rows = [policy(world.context(i)) for i in range(world.n_contexts)]
    else:
        rows = [policy.action_distribution(world.context(i), history) for i in range(world.n_contexts)]
    return np.asarray(rows, dtype=np.float64)


def _table_value(world: TinyWorld, table: np.ndarray) -> float:
    return float(world.contexts @ (table * world.rewards).sum(axis=1))


def exact_stationary_value(world: TinyWorld, dist_fn) -> float:
    """``sum_x D(x) sum_a dist(x)[a] P(r=1 | x, a)``.

    ``dist_fn`` is a policy (queried with the empty history), a callable on
    contexts, or a ready (contexts x actions) table.
    """
    if isinstance(dist_fn, np.ndarray):
        return _table_value(world, dist_fn)
    if isinstance(dist_fn, PVPolicy):
        return dist_fn.value(world)
    return _table_value(world, policy_table(world, dist_fn))


def _key(policy, history: TargetHistory):
    fn = getattr(policy, "state_key", None)
    if fn is None:
        return None
    return fn(history)


def _state_tag(policy, history: TargetHistory):
    """Hashable identity of the policy state; falls back to the full history."""
    if getattr(policy, "state_key", None) is not None:
        return ("k", policy.state_key(history))
    return ("h", history.storage_key)


def exact_trajectory_value(world: TinyWorld, policy, T: int, budget: int = BRANCH_BUDGET) -> float:
    """Exact ``E[sum_{t<=T} r_t]`` when ``policy`` interacts with ``world`` for T rounds."""
    if T < 1:
        raise InvalidArgumentError("T must be >= 1")
    branching = world.n_contexts * world.n_actions * 2
    memo_ok = getattr(policy, "state_key", None) is not None
    if not memo_ok and branching**T > budget:
        raise BudgetExceededError(f"{branching}^{T} branches exceed the budget of {budget}")
    memo: dict = {}
    D, P = world.contexts, world.rewards

    def value(history: TargetHistory, remaining: int) -> float:
        if remaining == 0:
            return 0.0
        key = None
        if memo_ok:
            key = (_key(policy, history), remaining)
            if key in memo:
                return memo[key]
        total = 0.0
        for i in range(world.n_contexts):
            if D[i] == 0.0:
                continue
            x = world.context(i)
            dist = np.asarray(policy.action_distribution(x, history), dtype=np.float64)
            for a in range(world.n_actions):
                pa = dist[a]
                if pa == 0.0:
                    continue
                p1 = P[i, a]
                sub = 0.0
                if p1 > 0.0:
                    sub += p1 * (1.0 + value(history.append(x, a, 1.0), remaining - 1))
                if p1 < 1.0:
                    sub += (1.0 - p1) * value(history.append(x, a, 0.0), remaining - 1)
                total += D[i] * pa * sub
        if memo_ok:
            memo[key] = total
        return total

    return value(EMPTY_HISTORY, T)


def bias_mass(pi_dist, mu_dist, contexts, c: float) -> float:
    """Probability mass on which ``c * pi`` exceeds ``mu``.

    ``P_pi[E] - P_mu[E] / c`` for ``E = {(x, a): c pi(a|x) > mu(a|x)}``;
    tables are (contexts x actions), ``contexts`` the context probabilities.
    """
    if not c > 0:
        raise InvalidArgumentError("c must be positive")
    pi = np.atleast_2d(np.asarray(pi_dist, dtype=np.float64))
    mu = np.atleast_2d(np.asarray(mu_dist, dtype=np.float64))
    D = np.atleast_1d(np.asarray(contexts, dtype=np.float64))
    bad = c * pi > mu
    eps = float((D[:, None] * pi)[bad].sum() - (D[:, None] * mu)[bad].sum() / c)
    return max(eps, 0.0)


def theorem1_bound(T: int, eps: float) -> float:
    """Worst-case bias of the unnormalised T-block sum: ``T(T+1)/2 * eps/(1-eps)``."""
    if T < 1:
        raise InvalidArgumentError("T must be >= 1")
    if not 0.0 <= eps < 1.0:
        raise InvalidArgumentError(f"eps must lie in [0, 1), got {eps}")
    return T * (T + 1) / 2 * eps / (1.0 - eps)


def theorem2_bound(n: int, M: float, c_max: float, C: float, delta: float) -> float:
    """High-probability deviation of R/C from the progressive-validation value.

    ``(n c_max / C) * 2 * max((1+M) ln(2/delta) / n, sqrt((3+M) ln(2/delta) / n))``
    """
    if n < 1 or not M > 0 or not 0 < c_max <= 1 or not C > 0 or not 0 < delta < 1:
        raise InvalidArgumentError(f"out of range: n={n}, M={M}, c_max={c_max}, C={C}, delta={delta}")
    log_term = math.log(2.0 / delta)
    return n * c_max / C * 2.0 * max((1.0 + M) * log_term / n, math.sqrt((3.0 + M) * log_term / n))


def estimate_M(trace: RunTrace) -> float:
    """Largest observed target-to-logging probability ratio (a lower bound on the true sup)."""
    if len(trace) == 0:
        raise InvalidArgumentError("empty trace")
    with np.errstate(divide="ignore"):
        inv = 1.0 / trace.ratio
    return float(inv.max())


def reachable_states(world: TinyWorld, policy, max_len: int = 2, budget: int = BRANCH_BUDGET) -> list[TargetHistory]:
    """Distinct policy states over all histories of length <= max_len (by state_key when available)."""
    seen: dict = {}
    frontier = [EMPTY_HISTORY]
    count = 0
    for depth in range(max_len + 1):
        nxt = []
        for h in frontier:
            tag = _state_tag(policy, h)
            if tag in seen:
                continue
            seen[tag] = h
            if depth == max_len:
                continue
            for i in range(world.n_contexts):
                x = world.context(i)
                dist = policy.action_distribution(x, h)
                for a in range(world.n_actions):
                    if dist[a] == 0.0:
                        continue
                    for r in (0.0, 1.0):
                        p1 = world.rewards[i, a]
                        if (r == 1.0 and p1 == 0.0) or (r == 0.0 and p1 == 1.0):
                            continue
                        count += 1
                        if count > budget:
                            raise BudgetExceededError("history enumeration exceeded the budget")
                        nxt.append(h.append(x, a, r))
        frontier = nxt
    return list(seen.values())


def exact_sup_ratio(world: TinyWorld, policy, max_len: int = 3, budget: int = BRANCH_BUDGET) -> float:
    """``max pi(a|x,h) / mu(a|x)`` over contexts with D(x)>0 and histories up to ``max_len``.

    For policies whose ``state_key`` depends on the last entry only,
    ``max_len = 1`` already covers every reachable state.
    """
    best = 0.0
    live = world.contexts > 0
    for h in reachable_states(world, policy, max_len, budget):
        table = policy_table(world, policy, h)
        best = max(best, float((table / world.logging)[live].max()))
    return best


@dataclass
class PVPolicy:
    """Stationary mixture of the target policy over the run's history snapshots."""

    policy: Any
    weights: np.ndarray
    histories: list[TargetHistory]
    trailing_mass: float = 0.0
    n_actions: int = 0
    stationary: bool = True

    def __post_init__(self):
        self.n_actions = self.policy.n_actions

    def action_distribution(self, context: Features, history: TargetHistory = EMPTY_HISTORY) -> np.ndarray:
        out = np.zeros(self.n_actions)
        for w, h in zip(self.weights, self.histories):
            out += w * np.asarray(self.policy.action_distribution(context, h))
        return out

    def value(self, world: TinyWorld) -> float:
        """Exact value in ``world``; equal policy states are evaluated once."""
        cache: dict = {}
        total = 0.0
        for w, h in zip(self.weights.tolist(), self.histories):
            key = _state_tag(self.policy, h)
            v = cache.get(key)
            if v is None:
                v = cache[key] = _table_value(world, policy_table(world, self.policy, h))
            total += w * v
        return total


def pv_policy(trace: RunTrace, policy, include_partial: bool = False) -> PVPolicy:
    """Mixture with weight ``c_t |B(t)| / C`` on ``pi(.|., h_{t-1})``.

    By default only the T completed blocks enter (``C`` summed over them) and
    the trailing incomplete block's share of the full ``C`` is reported as
    ``trailing_mass``.  With ``include_partial`` the trailing block joins the
    mixture with history ``h_T`` and ``C`` is the full sum of caps.
    """
    if np.any(trace.trajectory != 0):
        raise InvalidArgumentError("progressive validation needs a single-trajectory trace")
    sizes = trace.block_sizes
    caps = trace.block_caps
    T = int(sizes.size)
    mass = caps * sizes
    tail = trace.trailing_events
    tail_mass = trace.trailing_cap * tail if tail else 0.0
    total = float(mass.sum()) + tail_mass
    histories = [trace.history.prefix(t) for t in range(T)]
    if include_partial:
        if total <= 0:
            raise InvalidArgumentError("empty trace")
        if tail:
            mass = np.append(mass, tail_mass)
            histories.append(trace.history.prefix(T))
        return PVPolicy(policy, mass / total, histories, 0.0)
    if T == 0:
        raise InvalidArgumentError("no completed blocks")
    return PVPolicy(policy, mass / mass.sum(), histories, tail_mass / total)


@dataclass
class LemmaReport:
    passed: bool
    n_states: int
    max_unbiasedness_error: float
    min_range_margin: float
    min_second_moment_margin: float
    details: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_states": self.n_states,
            "max_abs_E_Rk_minus_value": self.max_unbiasedness_error,
            "min_margin_range_1_plus_M": self.min_range_margin,
            "min_margin_second_moment_3_plus_M": self.min_second_moment_margin,
            "states": self.details,
        }


def state_moments(world: TinyWorld, policy, rhat: RewardEstimator, history: TargetHistory) -> dict:
    """Exact moments of the per-event DR estimate R_k for one target-history state.

    Enumerates ``(x, a, r)`` under the world's logging policy.
    """
    D, P, mu = world.contexts, world.rewards, world.logging
    pi = policy_table(world, policy, history)
    rh = np.array([np.asarray(rhat.estimate_all(world.context(i)), dtype=np.float64)
                   for i in range(world.n_contexts)])
    model = (pi * rh).sum(axis=1)
    ER = 0.0
    ER2 = 0.0
    max_abs = 0.0
    for i in range(world.n_contexts):
        if D[i] == 0.0:
            continue
        for a in range(world.n_actions):
            w = pi[i, a] / mu[i, a]
            for r, pr in ((1.0, P[i, a]), (0.0, 1.0 - P[i, a])):
                if pr == 0.0:
                    continue
                Rk = model[i] + (w * (r - rh[i, a]) if pi[i, a] > 0 else 0.0)
                prob = D[i] * mu[i, a] * pr
                ER += prob * Rk
                ER2 += prob * Rk * Rk
                max_abs = max(max_abs, abs(Rk))
    live = D > 0
    M = float((pi / mu)[live].max())
    return {
        "E_Rk": ER,
        "E_Rk2": ER2,
        "max_abs_Rk": max_abs,
        "value": _table_value(world, pi),
        "M": M,
    }


def verify_lemmas(world: TinyWorld, policy, rhat: RewardEstimator,
                  states: Sequence[TargetHistory | tuple[TargetHistory, float]], tol: float = 1e-10) -> LemmaReport:
    """Check unbiasedness, range and second moment of R_k on each supplied state.

    States are target histories, optionally paired with the cap in force
    (the cap does not enter R_k and is only echoed in the report).
    """
    details = []
    worst_err = 0.0
    min_range = math.inf
    min_m2 = math.inf
    ok = True
    for s in states:
        h, cap = (s if isinstance(s, tuple) else (s, None))
        m = state_moments(world, policy, rhat, h)
        err = abs(m["E_Rk"] - m["value"])
        range_margin = 1.0 + m["M"] - m["max_abs_Rk"]
        m2_margin = 3.0 + m["M"] - m["E_Rk2"]
        state_ok = err <= tol and range_margin >= 0 and m2_margin >= 0
        ok &= state_ok
        worst_err = max(worst_err, err)
        min_range = min(min_range, range_margin)
        min_m2 = min(min_m2, m2_margin)
        details.append({"history_length": len(h), "cap": cap, "passed": bool(state_ok), **m})
    return LemmaReport(bool(ok), len(details), worst_err, min_range, min_m2, details)


def _run_seed(seed: int, run: int) -> int:
    return seed + run


def _world_log(world: TinyWorld, n: int, run_seed: int):
    return sample_world_log(world, n, seed=np.random.SeedSequence([run_seed, 1]).generate_state(2))


@dataclass
class BiasReport:
    eps_per_state: list[float]
    eps: float
    bound: float
    measured_bias: float
    mc_mean: float
    exact_value: float
    standard_error: float
    runs: int
    failures: int
    inconclusive: bool
    passed: bool
    note: str = ("eps is the largest bias mass over visited states, a lower bound on the "
                 "uniform bound over all histories")

    def to_dict(self) -> dict:
        return {
            "empirical_eps": self.eps,
            "eps_per_state_max_count": len(self.eps_per_state),
            "theorem1_bound": self.bound,
            "measured_bias": self.measured_bias,
            "mc_mean_unnormalised_sum": self.mc_mean,
            "exact_expected_reward_sum": self.exact_value,
            "standard_error": self.standard_error,
            "runs": self.runs,
            "failures": self.failures,
            "inconclusive": self.inconclusive,
            "passed": self.passed,
            "note": self.note,
        }


def bias_experiment(world: TinyWorld, policy, rhat: RewardEstimator, q: float, c_max: float, T: int,
                    runs: int = 1000, seed: int = 0, n_events: int = 200) -> BiasReport:
    """Monte Carlo bias of ``sum_{t<=T} c_t R_{B(t)}`` against the exact T-round reward.

    Each run draws its own log of ``n_events`` events; runs that do not
    complete T blocks are failures (more than 1% marks the report
    inconclusive).
    """
    if runs < 2:
        raise InvalidArgumentError("need at least two runs")
    exact = exact_trajectory_value(world, policy, T)
    sums = []
    failures = 0
    eps_seen: dict = {}
    for run in range(runs):
        rs = _run_seed(seed, run)
        events = _world_log(world, n_events, rs)
        res = drns_evaluate(events, policy, rhat, q=q, c_max=c_max, seed=rs, trace=True)
        tr = res.trace
        if tr.completed_blocks < T:
            failures += 1
            continue
        n_T = int(tr.acceptance_indices[T - 1])
        total = 0.0
        for c, e in zip(tr.cap[:n_T].tolist(), tr.estimate[:n_T].tolist()):
            total += c * e
        sums.append(total)
        caps = tr.block_caps
        for t in range(T):
            h = tr.history.prefix(t)
            key = (_key(policy, h), float(caps[t])) if getattr(policy, "state_key", None) else None
            if key is None or key not in eps_seen:
                eps = bias_mass(policy_table(world, policy, h), world.logging, world.contexts, float(caps[t]))
                if key is None:
                    key = ("h", run, t)
                eps_seen[key] = eps
    arr = np.asarray(sums)
    mean = float(arr.mean()) if arr.size else math.nan
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else math.nan
    eps_values = list(eps_seen.values())
    eps = max(eps_values) if eps_values else 0.0
    bound = theorem1_bound(T, eps)
    bias = mean - exact
    inconclusive = failures > 0.01 * runs
    passed = bool((not inconclusive) and abs(bias) <= bound + 3 * se)
    return BiasReport(eps_values, eps, bound, bias, mean, exact, se, runs, failures, inconclusive, passed)


@dataclass
class PVExperiment:
    estimates: np.ndarray
    pv_values: np.ndarray
    mean_gap: float
    standard_error: float
    within: bool

    def to_dict(self) -> dict:
        return {
            "runs": int(self.estimates.size),
            "mean_estimate": float(self.estimates.mean()),
            "mean_pv_value": float(self.pv_values.mean()),
            "mean_gap": self.mean_gap,
            "standard_error": self.standard_error,
            "within_3_se": self.within,
        }


def pv_unbiasedness_experiment(world: TinyWorld, policy, rhat: RewardEstimator, q: float, c_max: float,
                               n_events: int, runs: int, seed: int = 0,
                               include_partial: bool = True) -> PVExperiment:
    """Compare R/C with the exact value of the run's own progressive-validation policy.

    The per-run gap ``R/C - V(pi_PV)`` is averaged over runs; in the
    unbiased regime its mean is zero.
    """
    ests = np.empty(runs)
    vals = np.empty(runs)
    for run in range(runs):
        rs = _run_seed(seed, run)
        events = _world_log(world, n_events, rs)
        res = drns_evaluate(events, policy, rhat, q=q, c_max=c_max, seed=rs, trace=True)
        ests[run] = res.estimate
        vals[run] = pv_policy(res.trace, policy, include_partial=include_partial).value(world)
    gaps = ests - vals
    mean_gap = float(gaps.mean())
    se = float(gaps.std(ddof=1) / math.sqrt(runs))
    return PVExperiment(ests, vals, mean_gap, se, bool(abs(mean_gap) <= 3 * se))


@dataclass
class CoverageReport:
    delta: float
    M: float
    runs: int
    covered_truncated: int
    covered_full: int
    skipped: int
    required: float

    @property
    def coverage_truncated(self) -> float:
        return self.covered_truncated / max(self.runs - self.skipped, 1)

    @property
    def coverage_full(self) -> float:
        return self.covered_full / self.runs

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "M": self.M,
            "runs": self.runs,
            "coverage_truncated": self.coverage_truncated,
            "coverage_full": self.coverage_full,
            "runs_without_blocks": self.skipped,
            "required": self.required,
            "passed": bool(self.coverage_truncated >= self.required),
        }


def coverage_experiment(world: TinyWorld, policy, rhat: RewardEstimator, q: float, c_max: float,
                        n_events: int, runs: int, M: float, seed: int = 0, delta: float = 0.05) -> CoverageReport:
    """Fraction of runs where ``|R/C - V(pi_PV)|`` is within the deviation bound.

    The truncated form uses only the completed blocks (n, R, C and pi_PV
    over T blocks); the full form keeps the trailing block throughout.
    """
    cov_t = cov_f = skipped = 0
    for run in range(runs):
        rs = _run_seed(seed, run)
        events = _world_log(world, n_events, rs)
        res = drns_evaluate(events, policy, rhat, q=q, c_max=c_max, seed=rs, trace=True)
        tr = res.trace
        full = pv_policy(tr, policy, include_partial=True).value(world)
        if abs(res.estimate - full) <= theorem2_bound(len(tr), M, c_max, res.C, delta):
            cov_f += 1
        if tr.completed_blocks == 0:
            skipped += 1
            continue
        R_T, C_T = tr.accumulators(truncate=True)
        pv_T = pv_policy(tr, policy).value(world)
        if abs(R_T / C_T - pv_T) <= theorem2_bound(tr.events_in_completed_blocks(), M, c_max, C_T, delta):
            cov_t += 1
    slack = 3 * math.sqrt(delta * (1 - delta) / runs)
    return CoverageReport(delta, M, runs, cov_t, cov_f, skipped, 1 - delta - slack)
