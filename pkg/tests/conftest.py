from __future__ import annotations

import numpy as np
import pytest

from bandit_ope.core import ExplorationEvent, Features
from bandit_ope.datagen import TinyWorld
from bandit_ope.policies import TablePolicy, WinStayPolicy


def make_w1() -> TinyWorld:
    """Two contexts, two actions, non-uniform logging."""
    return TinyWorld(
        contexts=[0.6, 0.4],
        rewards=[[0.8, 0.3], [0.2, 0.7]],
        logging=[[0.5, 0.5], [0.4, 0.6]],
    )


def make_engineered() -> TinyWorld:
    """Single context where pi = (0.9, 0.1) against mu = (0.5, 0.5) has bias mass 0.4 at c = 1."""
    return TinyWorld(contexts=[1.0], rewards=[[0.9, 0.2]], logging=[[0.5, 0.5]])


def random_events(rng: np.random.Generator, n: int, K: int = 3, d: int = 5) -> list[ExplorationEvent]:
    events = []
    for _ in range(n):
        nnz = int(rng.integers(0, d + 1))
        ids = rng.choice(d, size=nnz, replace=False)
        x = Features(ids, rng.normal(size=nnz))
        p = float(rng.uniform(0.05, 1.0))
        r = float(rng.integers(0, 2)) if rng.random() < 0.7 else float(rng.random())
        events.append(ExplorationEvent(x, int(rng.integers(0, K)), r, p))
    return events


@pytest.fixture
def w1() -> TinyWorld:
    return make_w1()


@pytest.fixture
def engineered() -> TinyWorld:
    return make_engineered()


@pytest.fixture
def w1_winstay(w1) -> WinStayPolicy:
    return WinStayPolicy([[0.3, 0.7], [0.6, 0.4]], stay=0.5)


@pytest.fixture
def w1_target() -> TablePolicy:
    return TablePolicy([[0.3, 0.7], [0.6, 0.4]])


# One PASS/FAIL line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
