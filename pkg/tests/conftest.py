import math

import numpy as np
import pytest

from rbwalk.environment import EnvTree, make_family


@pytest.fixture(scope="session")
def family():
    return make_family("binary-gaussian", d=2, sigma2=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def path_tree():
    """Root -> x1 (V=0.2) -> x2 (V=0.5)."""
    return EnvTree.from_edges([-1, 0, 1], [0.0, 0.2, 0.5])


@pytest.fixture
def depth2_tree():
    """Fixed binary tree of depth 2 with distinct potentials, leaves unmaterialized.

    Vertex order: root 0, children 1 and 2, grandchildren 3, 4 (of 1) and 5, 6 (of 2).
    """
    parents = [-1, 0, 0, 1, 1, 2, 2]
    potentials = [0.0, 0.1, -0.3, 0.4, 0.0, -0.2, 0.6]
    return EnvTree.from_edges(parents, potentials)


def within_se(estimate, target, se, k=3.0):
    return abs(estimate - target) <= k * se


def mean_se(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))
