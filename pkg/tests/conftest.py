from __future__ import annotations

import numpy as np
import pytest

from distbart.data import from_arrays
from distbart.treeprior import DecisionTree, Node


def split_tree(n_features: int, var: int = 0, cut: float = 0.5, mus=(0.0, 0.0)) -> DecisionTree:
    """Root split ``x[var] <= cut`` with two leaves."""
    return DecisionTree({0: Node(var, cut, 1, 2), 1: Node(mu=mus[0]), 2: Node(mu=mus[1])}, n_features)


def random_groups(rng: np.random.Generator, N: int, M: int, P: int, spread: float = 0.15) -> list[np.ndarray]:
    return [np.clip(rng.uniform(size=P) + spread * rng.standard_normal((M, P)), 0.0, 1.0) for _ in range(N)]


@pytest.fixture
def rng():
    return np.random.default_rng(20261014)


@pytest.fixture
def small_data(rng):
    groups = random_groups(rng, 30, 20, 3)
    f = np.array([g[:, 0].mean() * g[:, 1].mean() for g in groups])
    y = f + 0.05 * rng.standard_normal(len(groups))
    return from_arrays(groups, y=y)


def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for rep in reports
             for key, value in getattr(rep, "user_properties", ()) if key == "acceptance"
             and getattr(rep, "when", "call") == "call"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
