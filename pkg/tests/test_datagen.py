from __future__ import annotations

import logging
import math

import numpy as np
import pytest
from conftest import random_events
from hypothesis import given, settings
from hypothesis import strategies as st

from bandit_ope.core import DataParseError, Features, InvalidArgumentError
from bandit_ope.datagen import (
    SupervisedDataset,
    TinyWorld,
    convert_supervised,
    load_world,
    logging_distribution,
    parse_multilabel_line,
    random_world,
    read_events,
    read_multilabel,
    sample_world_log,
    split_dataset,
    synthetic_multilabel,
    write_events,
    write_multilabel,
)
from bandit_ope.policies import LabeledExample, UniformPolicy

# 0.3 * 0.1 / (0.1 + 3 * 1.0): smallest score against three largest ones
MIN_MU = 0.3 * 0.1 / 3.1


class TestConversion:
    def test_equal_scores_example(self):
        np.testing.assert_allclose(logging_distribution(frozenset({0}), np.full(4, 0.5)),
                                   [0.775, 0.075, 0.075, 0.075], rtol=0, atol=1e-15)

    def test_label_mass_is_split(self):
        mu = logging_distribution(frozenset({1, 3}), np.ones(4))
        np.testing.assert_allclose(mu, [0.075, 0.425, 0.075, 0.425])

    def test_correct_labels_more_likely_with_equal_scores(self):
        mu = logging_distribution(frozenset({2}), np.full(4, 0.7))
        assert mu[2] > max(mu[0], mu[1], mu[3])

    def test_propensities_are_valid(self):
        data = synthetic_multilabel(2000, seed=1)
        events = convert_supervised(data, seed=2)
        assert len(events) == len(data)
        ps = np.array([ev.propensity for ev in events])
        assert ps.min() >= MIN_MU - 1e-15
        for ev, ex in zip(events, data.examples):
            assert ev.reward == (1.0 if ev.action in ex.labels else 0.0)
            assert ev.context is ex.context

    @given(st.lists(st.floats(0.1, 1.0), min_size=4, max_size=4), st.sets(st.integers(0, 3), min_size=1))
    @settings(max_examples=200)
    def test_distribution_properties(self, scores, labels):
        mu = logging_distribution(frozenset(labels), np.array(scores))
        assert abs(mu.sum() - 1.0) <= 1e-12
        assert mu.min() >= MIN_MU - 1e-15

    def test_deterministic(self):
        data = synthetic_multilabel(300, seed=3)
        a = convert_supervised(data, seed=4)
        b = convert_supervised(data, seed=4)
        assert [(e.action, e.propensity) for e in a] == [(e.action, e.propensity) for e in b]
        c = convert_supervised(data, seed=5)
        assert [e.action for e in a] != [e.action for e in c]

    def test_empty_labels_rejected(self):
        ds = SupervisedDataset((LabeledExample.partial(Features.one_hot(0), 0, 1.0),), 2, 1)
        with pytest.raises(InvalidArgumentError):
            convert_supervised(ds, seed=0)

    def test_action_frequencies_follow_logging(self):
        ex = LabeledExample(Features.one_hot(0), frozenset({1}))
        ds = SupervisedDataset((ex,) * 40000, 4, 1)
        events = convert_supervised(ds, seed=7)
        freq = np.bincount([ev.action for ev in events], minlength=4) / len(events)
        # by exchangeability E[s_1 / sum s] = 1/4, so P(a = 1) = 0.7 + 0.3 / 4
        assert abs(freq[1] - 0.775) <= 3 * math.sqrt(0.775 * 0.225 / len(events))


class TestDataset:
    def test_label_range(self):
        with pytest.raises(InvalidArgumentError):
            SupervisedDataset((LabeledExample(Features.one_hot(0), frozenset({2})),), 2, 1)
        with pytest.raises(InvalidArgumentError):
            SupervisedDataset((), 1, 1)

    def test_split_sizes(self):
        ex = LabeledExample(Features.one_hot(0), frozenset({0}))
        ds = SupervisedDataset((ex,) * 20000, 2, 1)
        assert [len(p) for p in split_dataset(ds, (0.5, 0.5), seed=0)] == [10000, 10000]
        assert [len(p) for p in split_dataset(ds, (0.1, 0.5, 0.4), seed=0)] == [2000, 10000, 8000]

    def test_splits_are_disjoint_and_deterministic(self):
        data = synthetic_multilabel(500, seed=0)
        parts = split_dataset(data, (0.02, 0.8, 0.18), seed=9)
        assert [len(p) for p in parts] == [10, 400, 90]
        ids = [id(e) for p in parts for e in p.examples]
        assert len(set(ids)) == len(ids)
        again = split_dataset(data, (0.02, 0.8, 0.18), seed=9)
        assert all(a.examples == b.examples for a, b in zip(parts, again))

    @pytest.mark.parametrize("fractions", [(0.6, 0.5), (0.5, 0.0), (-0.1,)])
    def test_bad_fractions(self, fractions):
        with pytest.raises(InvalidArgumentError):
            split_dataset(synthetic_multilabel(10), fractions, seed=0)

    def test_synthetic_shape(self):
        data = synthetic_multilabel(200, n_actions=3, n_features=7, seed=2)
        assert (len(data), data.n_actions, data.n_features) == (200, 3, 7)
        assert all(1 <= len(ex.labels) <= 2 for ex in data.examples)


class TestTinyWorld:
    def test_single_context_single_action(self):
        world = TinyWorld([1.0], [[1.0]], [[1.0]])
        for ev in sample_world_log(world, 50, seed=0):
            assert (ev.context, ev.action, ev.reward, ev.propensity) == (Features.one_hot(0), 0, 1.0, 1.0)

    def test_action_frequencies(self, w1):
        n = 100_000
        events = sample_world_log(w1, n, seed=1)
        xs = np.array([int(ev.context.ids[0]) for ev in events])
        acts = np.array([ev.action for ev in events])
        for i in range(w1.n_contexts):
            m = int((xs == i).sum())
            assert abs(m / n - w1.contexts[i]) <= 3 * math.sqrt(w1.contexts[i] * (1 - w1.contexts[i]) / n)
            for a in range(w1.n_actions):
                mu = w1.logging[i, a]
                assert abs(np.mean(acts[xs == i] == a) - mu) <= 3 * math.sqrt(mu * (1 - mu) / m)

    def test_propensity_equals_table(self, w1):
        for ev in sample_world_log(w1, 1000, seed=2):
            assert ev.propensity == w1.logging[int(ev.context.ids[0]), ev.action]

    def test_custom_logging_policy(self, w1):
        for ev in sample_world_log(w1, 200, seed=3, logging=UniformPolicy(2)):
            assert ev.propensity == 0.5

    def test_deterministic(self, w1):
        a = sample_world_log(w1, 100, seed=4)
        assert a == sample_world_log(w1, 100, seed=4)

    @pytest.mark.parametrize("kwargs", [
        dict(contexts=[0.5, 0.6], rewards=[[0.1], [0.2]], logging=[[1.0], [1.0]]),
        dict(contexts=[1.0], rewards=[[1.2, 0.0]], logging=[[0.5, 0.5]]),
        dict(contexts=[1.0], rewards=[[0.5, 0.5]], logging=[[1.0, 0.0]]),
        dict(contexts=[1.0], rewards=[[0.5, 0.5]], logging=[[0.6, 0.6]]),
        dict(contexts=[1.0], rewards=[[0.5, 0.5]], logging=[[1.0]]),
    ])
    def test_validation(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            TinyWorld(**kwargs)

    def test_json_round_trip(self, w1, tmp_path):
        import json

        path = tmp_path / "w.json"
        path.write_text(json.dumps(w1.to_dict()))
        back = load_world(path)
        np.testing.assert_array_equal(back.logging, w1.logging)
        with pytest.raises(InvalidArgumentError):
            TinyWorld.from_dict({"contexts": [1.0]})

    def test_random_world_is_valid(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            w = random_world(rng)
            assert w.logging.min() >= 0.02 - 1e-12
            assert w.n_contexts <= 8 and w.n_actions <= 4


class TestFileFormats:
    def test_parse_line(self):
        labels, x = parse_multilabel_line("0,2 1:0.5 7:1.0")
        assert labels == {0, 2}
        assert x.to_dict() == {0: 0.5, 6: 1.0}

    def test_parse_blank_and_comment(self):
        assert parse_multilabel_line("   # nothing") is None

    @pytest.mark.parametrize("line", ["a,b 1:1", "0 1:x", "0 0:1.0", "0 3:1 3:2"])
    def test_parse_errors_name_line(self, line):
        with pytest.raises(DataParseError, match="line 12"):
            parse_multilabel_line(line, 12)

    def test_multilabel_round_trip_and_dropping(self, tmp_path, caplog):
        path = tmp_path / "d.txt"
        path.write_text("0,2 1:0.5 7:1.0\n 3:2.0\n1 2:0.25\n")
        with caplog.at_level(logging.WARNING):
            ds = read_multilabel(path, n_actions=4)
        assert len(ds) == 2 and "dropped 1" in caplog.text
        assert ds.n_features == 7
        out = tmp_path / "e.txt"
        write_multilabel(ds, out)
        again = read_multilabel(out, n_actions=4)
        assert [(e.labels, e.context) for e in again.examples] == [(e.labels, e.context) for e in ds.examples]

    def test_label_beyond_k(self, tmp_path):
        path = tmp_path / "d.txt"
        path.write_text("5 1:1.0\n")
        with pytest.raises(DataParseError, match="line 1"):
            read_multilabel(path, n_actions=4)

    def test_events_round_trip(self, tmp_path):
        events = random_events(np.random.default_rng(0), 1000, K=4, d=6)
        path = tmp_path / "ev.jsonl"
        write_events(events, path)
        assert read_events(path) == events

    @pytest.mark.parametrize("record,msg", [
        ('{"x": {"0": 1.0}, "a": 0, "r": 1.0, "p": 0.0}', "propensity"),
        ('{"x": {"0": 1.0}, "a": 0, "r": 1.0}', "malformed"),
        ('{"x": {"0": 1.0}, "a": 0.5, "r": 1.0, "p": 0.5}', "integer"),
        ('not json', "malformed"),
    ])
    def test_rejected_records_name_line(self, tmp_path, record, msg):
        path = tmp_path / "ev.jsonl"
        good = '{"x": {"0": 1.0}, "a": 0, "r": 1.0, "p": 0.5}'
        path.write_text(good + "\n" + good + "\n" + record + "\n")
        with pytest.raises(DataParseError, match=msg) as info:
            read_events(path)
        assert info.value.line == 3 and "line 3" in str(info.value)
