from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import make_engineered
from hypothesis import given, settings
from hypothesis import strategies as st

from bandit_ope.core import EMPTY_HISTORY, ConstantEstimator, Features, InvalidArgumentError, TableEstimator
from bandit_ope.datagen import TinyWorld, random_world, sample_world_log
from bandit_ope.evaluators import drns_evaluate
from bandit_ope.oracle import (
    BudgetExceededError,
    bias_experiment,
    bias_mass,
    coverage_experiment,
    estimate_M,
    exact_stationary_value,
    exact_sup_ratio,
    exact_trajectory_value,
    policy_table,
    pv_policy,
    pv_unbiasedness_experiment,
    reachable_states,
    state_moments,
    theorem1_bound,
    theorem2_bound,
    verify_lemmas,
)
from bandit_ope.policies import TablePolicy, UniformPolicy, WinStayPolicy


def _rollout_rewards(world, policy, T, rng):
    h = EMPTY_HISTORY
    total = 0.0
    for _ in range(T):
        i = int(rng.choice(world.n_contexts, p=world.contexts))
        x = world.context(i)
        a = int(rng.choice(world.n_actions, p=policy.action_distribution(x, h)))
        r = float(rng.random() < world.rewards[i, a])
        h = h.append(x, a, r)
        total += r
    return total


class TestExactValues:
    def test_single_context_deterministic(self):
        world = TinyWorld([1.0], [[0.3, 0.9]], [[0.5, 0.5]])
        assert exact_stationary_value(world, TablePolicy([[1.0, 0.0]])) == pytest.approx(0.3)

    def test_uniform_over_zero_and_one(self):
        world = TinyWorld([1.0], [[0.0, 1.0]], [[0.5, 0.5]])
        assert exact_stationary_value(world, UniformPolicy(2)) == 0.5

    def test_callable_distribution(self, w1):
        fn = lambda x: np.array([1.0, 0.0])  # noqa: E731
        assert exact_stationary_value(w1, fn) == pytest.approx(0.6 * 0.8 + 0.4 * 0.2)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(0)
        world = random_world(rng, 3, 3)
        target = TablePolicy(rng.dirichlet(np.ones(3), size=3))
        exact = exact_stationary_value(world, target)
        n = 1_000_000
        xs = rng.choice(3, size=n, p=world.contexts)
        tab = policy_table(world, target)
        u = rng.random(n)
        acts = (u[:, None] > np.cumsum(tab, axis=1)[xs]).sum(axis=1)
        rewards = rng.random(n) < world.rewards[xs, np.minimum(acts, 2)]
        se = rewards.std() / math.sqrt(n)
        assert abs(rewards.mean() - exact) <= 3 * se

    def test_trajectory_single_step(self, w1, w1_winstay):
        expected = exact_stationary_value(w1, lambda x: w1_winstay.action_distribution(x, EMPTY_HISTORY))
        assert exact_trajectory_value(w1, w1_winstay, 1) == pytest.approx(expected, abs=1e-15)

    def test_trajectory_constant_rewards(self):
        world = TinyWorld([0.3, 0.7], [[0.4, 0.4], [0.4, 0.4]], [[0.5, 0.5], [0.2, 0.8]])
        pol = WinStayPolicy([[0.9, 0.1], [0.3, 0.7]], stay=0.6)
        assert exact_trajectory_value(world, pol, 4) == pytest.approx(4 * 0.4, abs=1e-12)

    def test_trajectory_matches_monte_carlo(self, w1, w1_winstay):
        exact = exact_trajectory_value(w1, w1_winstay, 3)
        rng = np.random.default_rng(1)
        sims = np.array([_rollout_rewards(w1, w1_winstay, 3, rng) for _ in range(100_000)])
        assert abs(sims.mean() - exact) <= 3 * sims.std(ddof=1) / math.sqrt(sims.size)

    def test_stationary_consistency(self, w1, w1_target):
        assert exact_trajectory_value(w1, w1_target, 5) == pytest.approx(5 * exact_stationary_value(w1, w1_target))

    def test_budget(self, w1):
        # a policy without a state key cannot be memoised, so branches grow as 8^T
        class Opaque:
            stationary = False
            n_actions = 2

            def action_distribution(self, x, h=None):
                return np.array([0.5, 0.5])

        with pytest.raises(BudgetExceededError):
            exact_trajectory_value(w1, Opaque(), 8, budget=10_000)


class TestBiasMass:
    def test_no_bad_event(self):
        assert bias_mass([[0.4, 0.6]], [[0.5, 0.5]], [1.0], 0.5) == 0.0

    def test_example(self):
        assert bias_mass([[0.9, 0.1]], [[0.5, 0.5]], [1.0], 1.0) == pytest.approx(0.4)

    @pytest.mark.parametrize("c", [0.5 / 0.9, 0.5])
    def test_threshold(self, c):
        assert bias_mass([[0.9, 0.1]], [[0.5, 0.5]], [1.0], c) == 0.0

    def test_c_positive(self):
        with pytest.raises(InvalidArgumentError):
            bias_mass([[1.0]], [[1.0]], [1.0], 0.0)

    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 1), st.floats(0.01, 1))
    @settings(max_examples=200)
    def test_range_and_monotone(self, seed, c1, c2):
        rng = np.random.default_rng(seed)
        world = random_world(rng)
        pi = rng.dirichlet(np.ones(world.n_actions), size=world.n_contexts)
        lo, hi = sorted((c1, c2))
        e_lo = bias_mass(pi, world.logging, world.contexts, lo)
        e_hi = bias_mass(pi, world.logging, world.contexts, hi)
        assert 0.0 <= e_lo <= e_hi + 1e-12 < 1.0
        c_safe = float((world.logging / np.maximum(pi, 1e-300)).min())
        if c_safe > 0:
            assert bias_mass(pi, world.logging, world.contexts, min(c_safe, 1.0)) <= 1e-12


class TestBounds:
    @pytest.mark.parametrize("T", [1, 2, 7])
    def test_theorem1_zero(self, T):
        assert theorem1_bound(T, 0.0) == 0.0

    def test_theorem1_examples(self):
        assert theorem1_bound(1, 0.5) == 1.0
        assert theorem1_bound(3, 0.1) == pytest.approx(0.6667, abs=5e-5)
        assert theorem1_bound(2, 0.4) == pytest.approx(2.0)

    @pytest.mark.parametrize("T,eps", [(0, 0.1), (1, 1.0), (1, -0.1)])
    def test_theorem1_errors(self, T, eps):
        with pytest.raises(InvalidArgumentError):
            theorem1_bound(T, eps)

    def test_theorem2_example(self):
        assert theorem2_bound(100, 3, 1.0, 50, 0.05) == pytest.approx(1.8818, abs=5e-5)

    @given(st.floats(0.01, 0.98), st.floats(0.001, 0.01))
    def test_theorem2_monotone_in_delta(self, d, step):
        assert theorem2_bound(100, 3, 1.0, 50, d + step) < theorem2_bound(100, 3, 1.0, 50, d)

    def test_theorem2_root_n_scaling(self):
        b1 = theorem2_bound(10**6, 3, 1.0, 0.5 * 10**6, 0.05)
        b2 = theorem2_bound(4 * 10**6, 3, 1.0, 0.5 * 4 * 10**6, 0.05)
        assert b1 / b2 == pytest.approx(2.0)

    @pytest.mark.parametrize("args", [(0, 3, 1, 50, 0.05), (100, 0, 1, 50, 0.05), (100, 3, 1, 0, 0.05),
                                      (100, 3, 1, 50, 1.0), (100, 3, 1.5, 50, 0.05)])
    def test_theorem2_errors(self, args):
        with pytest.raises(InvalidArgumentError):
            theorem2_bound(*args)


class TestStatesAndRatios:
    def test_estimate_M_self_evaluation(self, w1):
        events = sample_world_log(w1, 300, seed=0)
        tr = drns_evaluate(events, TablePolicy(w1.logging), ConstantEstimator(0.5, 2), trace=True).trace
        assert estimate_M(tr) == pytest.approx(1.0)

    def test_estimate_M_reciprocal_of_min_ratio(self):
        from bandit_ope.core import ExplorationEvent

        x = Features.one_hot(0)
        # ratios p/pi: 0.5/0.25 = 2.0 and 0.5/1.0 = 0.5
        events = [ExplorationEvent(x, 0, 1.0, 0.5), ExplorationEvent(x, 1, 1.0, 0.5)]

        class Two:
            stationary = True
            n_actions = 2

            def __init__(self):
                self.k = 0

            def action_distribution(self, x, h=None):
                self.k += 1
                return np.array([0.25, 0.75]) if self.k == 1 else np.array([0.0, 1.0])

        tr = drns_evaluate(events, Two(), ConstantEstimator(0.0, 2), trace=True).trace
        assert estimate_M(tr) == pytest.approx(2.0)

    def test_estimate_M_below_exact_sup(self, w1, w1_winstay):
        events = sample_world_log(w1, 500, seed=1)
        tr = drns_evaluate(events, w1_winstay, ConstantEstimator(0.5, 2), trace=True).trace
        assert estimate_M(tr) <= exact_sup_ratio(w1, w1_winstay) + 1e-12

    def test_exact_sup_ratio_win_stay(self, w1, w1_winstay):
        # after a win with action 0, context 1 plays it with 0.5 * 0.6 + 0.5 = 0.8 against mu = 0.4
        assert exact_sup_ratio(w1, w1_winstay) == pytest.approx(0.8 / 0.4)

    def test_reachable_states_collapse_by_key(self, w1, w1_winstay):
        states = reachable_states(w1, w1_winstay, max_len=3)
        keys = {w1_winstay.state_key(h) for h in states}
        assert len(keys) == len(states) == 3  # empty/lost, won with 0, won with 1


class TestPVPolicy:
    def test_single_block(self, w1, w1_winstay):
        events = sample_world_log(w1, 1, seed=0)
        tr = drns_evaluate(events, TablePolicy(w1.logging), ConstantEstimator(0.5, 2), trace=True).trace
        pv = pv_policy(tr, TablePolicy(w1.logging))
        np.testing.assert_array_equal(pv.weights, [1.0])
        assert pv.trailing_mass == 0.0

    def test_equal_caps_unit_blocks_give_uniform_mixture(self, w1, w1_winstay):
        events = sample_world_log(w1, 20, seed=1)
        tr = drns_evaluate(events, TablePolicy(w1.logging), ConstantEstimator(0.5, 2), trace=True).trace
        pv = pv_policy(tr, w1_winstay)
        np.testing.assert_allclose(pv.weights, np.full(20, 1 / 20))
        x = w1.context(0)
        expected = np.mean([w1_winstay.action_distribution(x, tr.history.prefix(t)) for t in range(20)], axis=0)
        np.testing.assert_allclose(pv.action_distribution(x), expected)

    def test_weights_sum_to_one(self, w1, w1_winstay):
        events = sample_world_log(w1, 300, seed=2)
        tr = drns_evaluate(events, w1_winstay, ConstantEstimator(0.5, 2), q=0.3, trace=True).trace
        for partial in (False, True):
            pv = pv_policy(tr, w1_winstay, include_partial=partial)
            assert np.all(pv.weights > 0) and abs(pv.weights.sum() - 1.0) <= 1e-9
        assert 0 <= pv_policy(tr, w1_winstay).trailing_mass < 1

    def test_value_matches_mixture_table(self, w1, w1_winstay):
        events = sample_world_log(w1, 100, seed=3)
        tr = drns_evaluate(events, w1_winstay, ConstantEstimator(0.5, 2), q=0.2, trace=True).trace
        pv = pv_policy(tr, w1_winstay)
        assert pv.value(w1) == pytest.approx(exact_stationary_value(w1, pv), rel=1e-12)

    def test_no_completed_blocks(self, w1):
        events = sample_world_log(w1, 5, seed=0)
        tr = drns_evaluate(events, TablePolicy([[1.0, 0.0], [1.0, 0.0]]), ConstantEstimator(0.5, 2),
                           c_max=1e-9, trace=True).trace
        if tr.completed_blocks == 0:
            with pytest.raises(InvalidArgumentError):
                pv_policy(tr, UniformPolicy(2))


class TestLemmas:
    def test_self_evaluation(self, w1):
        target = TablePolicy(w1.logging)
        report = verify_lemmas(w1, target, ConstantEstimator(0.0, 2), [EMPTY_HISTORY])
        assert report.passed
        m = report.details[0]
        assert m["M"] == pytest.approx(1.0) and m["max_abs_Rk"] <= 2.0

    def test_exact_model_minimises_second_moment(self, w1, w1_target):
        moments = [state_moments(w1, w1_target, rhat, EMPTY_HISTORY)["E_Rk2"]
                   for rhat in (ConstantEstimator(0.0, 2), ConstantEstimator(0.5, 2), TableEstimator(w1.rewards))]
        assert moments[2] == min(moments)

    def test_adversarial_world_with_M_five(self):
        world = TinyWorld([1.0], [[1.0, 0.0]], [[0.1, 0.9]])
        target = TablePolicy([[0.5, 0.5]])
        for rhat in (ConstantEstimator(0.0, 2), ConstantEstimator(1.0, 2), TableEstimator([[0.0, 1.0]])):
            report = verify_lemmas(world, target, rhat, [EMPTY_HISTORY])
            d = report.details[0]
            assert d["M"] == pytest.approx(5.0)
            assert d["max_abs_Rk"] < 6.0 and d["E_Rk2"] < 8.0
            assert report.passed and report.min_range_margin > 0 and report.min_second_moment_margin > 0

    def test_win_stay_states(self, w1, w1_winstay):
        states = reachable_states(w1, w1_winstay, max_len=2)
        report = verify_lemmas(w1, w1_winstay, TableEstimator([[0.2, 0.9], [0.6, 0.1]]), states)
        assert report.passed and report.n_states == len(states)
        assert report.to_dict()["passed"] is True
        assert all(d["passed"] is True for d in report.to_dict()["states"])


class TestExperiments:
    def test_unbiased_regime(self, w1, w1_target):
        # q = 0 and caps never exceed the smallest ratio mu/pi = 0.4/0.7
        report = bias_experiment(w1, w1_target, ConstantEstimator(0.5, 2), q=0.0, c_max=0.4 / 0.7, T=2,
                                 runs=1000, seed=0, n_events=50)
        assert report.eps == 0.0 and report.bound == 0.0
        assert report.failures == 0 and not report.inconclusive
        assert abs(report.measured_bias) <= 3 * report.standard_error
        assert report.passed

    def test_engineered_eps(self, engineered):
        target = TablePolicy([[0.9, 0.1]])
        report = bias_experiment(engineered, target, ConstantEstimator(0.5, 2), q=1.0, c_max=1.0, T=2,
                                 runs=1000, seed=1, n_events=50)
        assert report.eps == pytest.approx(0.4)
        assert report.bound == pytest.approx(2.0)
        assert report.passed

    def test_pv_experiment_report(self, w1, w1_winstay):
        exp = pv_unbiasedness_experiment(w1, w1_winstay, ConstantEstimator(0.5, 2), q=0.0, c_max=0.2,
                                         n_events=50, runs=200, seed=0)
        d = exp.to_dict()
        assert d["runs"] == 200 and set(d) >= {"mean_gap", "standard_error", "within_3_se"}

    def test_coverage_report(self, w1, w1_winstay):
        M = exact_sup_ratio(w1, w1_winstay)
        rep = coverage_experiment(w1, w1_winstay, ConstantEstimator(0.5, 2), q=0.0, c_max=0.5, n_events=100,
                                  runs=100, M=M, seed=0)
        assert rep.required == pytest.approx(0.95 - 3 * math.sqrt(0.05 * 0.95 / 100))
        assert 0 <= rep.coverage_truncated <= 1 and rep.to_dict()["runs"] == 100

    def test_experiments_are_deterministic(self, w1, w1_winstay):
        a = bias_experiment(w1, w1_winstay, ConstantEstimator(0.5, 2), 0.1, 1.0, 2, runs=100, seed=5, n_events=30)
        b = bias_experiment(w1, w1_winstay, ConstantEstimator(0.5, 2), 0.1, 1.0, 2, runs=100, seed=5, n_events=30)
        assert a.to_dict() == b.to_dict()


def test_engineered_world_fixture():
    w = make_engineered()
    assert w.n_contexts == 1 and w.n_actions == 2
