import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_env
from gfndag.envs import ExplicitEnv, galton_env, markov_example_env, multipath_env
from gfndag.flow_core import (
    TERMINAL,
    EnumerationBudgetExceeded,
    construct_flow_from_reward,
    enumerate_states,
    enumerate_trajectories,
    is_markovian_table,
    make_rng,
    policy_from_flow,
    sample_trajectory,
    terminal_balance,
    terminating_distribution_dp,
    terminating_log_distribution_dp,
    topological_order,
    trajectory_logprob,
    uniform_backward_policy,
    validate_env,
)


def test_terminal_sentinel_is_not_a_key():
    assert not isinstance(TERMINAL, bytes)
    assert TERMINAL is not None and TERMINAL != b"" and repr(TERMINAL)


def test_make_rng_is_reproducible_per_stream():
    a = make_rng(7, 1).random(4)
    b = make_rng(7, 1).random(4)
    c = make_rng(7, 2).random(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_topological_order_respects_edges(rng):
    env = random_env(rng, n=7)
    order = topological_order(env)
    pos = {s: i for i, s in enumerate(order)}
    assert order[0] == env.initial
    for a, b in env.edges:
        assert pos[a] < pos[b]


def test_validate_env_reports_cycle():
    with pytest.raises(ValueError, match="cycle"):
        ExplicitEnv(["a", "b", "c"], [("a", "b"), ("b", "c"), ("c", "b")], {"c": 1.0})
    env = ExplicitEnv(["a", "b", "c"], [("a", "b"), ("b", "c"), ("c", "b")], {"c": 1.0}, validate=False)
    rep = validate_env(env)
    assert rep.cycles and not rep.ok


def test_enumeration_budget():
    env = galton_env(6)
    assert len(enumerate_trajectories(env)) == 2 ** 6
    with pytest.raises(EnumerationBudgetExceeded):
        enumerate_trajectories(env, max_count=10)
    with pytest.raises(EnumerationBudgetExceeded):
        enumerate_states(env, max_states=5)


def test_galton_canonical_policy_gives_binomial():
    env = galton_env(4, p=0.3)
    dist = terminating_distribution_dp(env, env.policy)
    for s, r in env.rewards.items():
        assert dist[s] == pytest.approx(r, abs=1e-12)


def test_multipath_uniform_policy():
    env = multipath_env()
    pf = lambda s: {c: -math.log(len(env.children(s))) for c in env.children(s)} \
        if env.children(s) else {TERMINAL: 0.0}
    dist = terminating_distribution_dp(env, pf)
    k = env.key
    assert [dist[k(x)] for x in ("x3", "x4", "x5")] == pytest.approx([0.25, 0.5, 0.25])


def test_flow_policy_samples_proportional_to_reward(rng):
    env = random_env(rng, n=6)
    flow = construct_flow_from_reward(env, env.rewards)
    pf = policy_from_flow(flow)
    dist = terminating_distribution_dp(env, pf)
    Z = sum(env.rewards.values())
    for s, r in env.rewards.items():
        assert dist[s] == pytest.approx(r / Z, abs=1e-12)
    # Monte Carlo agreement
    counts = {}
    n = 4000
    for _ in range(n):
        t = sample_trajectory(env, pf, rng)
        counts[t[-2]] = counts.get(t[-2], 0) + 1
    for s, r in env.rewards.items():
        assert abs(counts.get(s, 0) / n - r / Z) < 5 * math.sqrt(0.25 / n)


def test_terminal_balance_and_markov_example():
    env = markov_example_env()
    flow = construct_flow_from_reward(env, env.rewards)
    inflow, outflow = terminal_balance(flow, env)
    assert inflow == pytest.approx(outflow) == pytest.approx(5.0)
    trajs = enumerate_trajectories(env)
    pf = policy_from_flow(flow)
    table = {t: flow.outflow(env.initial) * math.exp(trajectory_logprob(t, pf)) for t in trajs}
    assert is_markovian_table(table, env) == (True, None)
    bad = dict(table)
    t0 = trajs[0]
    bad[t0] *= 3.0
    ok, witness = is_markovian_table(bad, env)
    assert not ok and witness is not None


def test_log_dp_matches_linear_dp(rng):
    env = random_env(rng)
    flow = construct_flow_from_reward(env, env.rewards)
    pf = policy_from_flow(flow)
    lin = terminating_distribution_dp(env, pf)
    log = terminating_log_distribution_dp(env, pf)
    for s in lin:
        assert math.exp(log[s]) == pytest.approx(lin[s], rel=1e-12)


def test_backward_logprob_sums_to_one_over_trajectories(rng):
    env = random_env(rng)
    pb = uniform_backward_policy(env)
    by_x = {}
    for t in enumerate_trajectories(env):
        by_x[t[-2]] = by_x.get(t[-2], 0.0) + math.exp(trajectory_logprob(t, pb, "backward"))
    for v in by_x.values():
        assert v == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_flow_dp_equals_trajectory_enumeration_property(seed):
    env = random_env(np.random.default_rng(seed))
    flow = construct_flow_from_reward(env, env.rewards)
    pf = policy_from_flow(flow)
    dist = terminating_distribution_dp(env, pf)
    enum = {}
    for t in enumerate_trajectories(env):
        enum[t[-2]] = enum.get(t[-2], 0.0) + math.exp(trajectory_logprob(t, pf))
    for s in dist:
        assert dist[s] == pytest.approx(enum.get(s, 0.0), abs=1e-12)
