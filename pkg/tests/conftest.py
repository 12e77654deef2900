import math
import sys

import numpy as np
import pytest

from gfndag.data import ancestral_sample, sample_er_dag, sample_lingauss_bn
from gfndag.envs import ExplicitEnv
from gfndag.scores import BGeScore, LocalScoreCache, standardize


def random_env(rng, n=None, all_terminating=False):
    """Random pointed DAG over states s0..s{n-1}; edges only go to higher indices."""
    n = n if n is not None else int(rng.integers(4, 8))
    names = [f"s{i}" for i in range(n)]
    edges = set()
    for j in range(1, n):
        edges.add((names[int(rng.integers(j))], names[j]))
        for i in range(j):
            if rng.random() < 0.3:
                edges.add((names[i], names[j]))
    has_child = {a for a, _ in edges}
    rewards = {}
    for i, s in enumerate(names):
        if all_terminating or s not in has_child or (i > 0 and rng.random() < 0.4):
            rewards[s] = float(math.exp(rng.normal()))
    return ExplicitEnv(names, sorted(edges), rewards)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def lingauss_cache(d, seed=0, n=100):
    r = np.random.default_rng(seed)
    g = sample_er_dag(d, 1.0, r)
    data = standardize(ancestral_sample(sample_lingauss_bn(g, r), n, r))
    return LocalScoreCache(BGeScore(data), d), data, g


@pytest.fixture(scope="session")
def d3_cache():
    return lingauss_cache(3)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, (ok, detail) in sorted(acc.RESULTS.items()):
        terminalreporter.write_line(acc.format_line(n, ok, detail))
