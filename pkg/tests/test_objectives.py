import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_env
from residual_cases import CASES, EQUIVALENCES, fd_gradient_error
from gfndag.autodiff import Dual
from gfndag.envs import ExplicitEnv, multipath_env, segment_counterexample_assignment, \
    segment_counterexample_env
from gfndag.flow_core import (
    TERMINAL,
    construct_flow_from_reward,
    enumerate_trajectories,
    flow_residual_report,
    policy_from_flow,
    trajectory_logprob,
    uniform_backward_policy,
)
from gfndag.objectives import (
    OffPolicyError,
    Residual,
    corrected_reward,
    db_residual,
    fm_residual,
    loss_aggregate,
    loss_terms,
    modified_db_delta,
    modified_db_residual,
    reverse_kl_gradient,
    subtb_residual,
    tb_residual,
)
from gfndag.policy_nn import TabularFlowModel


def _valid_flow(env):
    reward = env.rewards
    flow = construct_flow_from_reward(env, reward)
    pf = policy_from_flow(flow)
    log_F = {s: math.log(flow.outflow(s)) for s in env.states}
    return flow, pf, log_F


def test_all_residuals_vanish_on_a_valid_flow(rng):
    for _ in range(20):
        env = random_env(rng)
        flow, pf, log_F = _valid_flow(env)
        pb_table = {}
        for (s, s2), v in flow.items():
            if s2 is not TERMINAL:
                pb_table.setdefault(s2, {})[s] = v
        pb = {s2: {s: math.log(v / sum(row.values())) for s, v in row.items()}
              for s2, row in pb_table.items()}
        pbf = pb.__getitem__
        log_Z = log_F[env.initial]
        for s in env.states:
            if s != env.initial:
                assert abs(fm_residual(s, flow, env).value) < 1e-12
        for (s, s2) in flow:
            assert abs(db_residual(s, s2, log_F, pf, pbf, env.log_reward).value) < 1e-12
        for t in enumerate_trajectories(env):
            assert abs(tb_residual(t, log_Z, pf, pbf, env.log_reward).value) < 1e-12
            for i in range(len(t) - 1):
                for j in range(i + 2, len(t) + 1):
                    seg = t[i:j]
                    if len(seg) < 2 or (len(seg) == 2 and seg[-1] is TERMINAL):
                        continue
                    assert abs(subtb_residual(seg, log_F, pf, pbf, env.log_reward).value) < 1e-12


def test_db_terminal_form_uses_reward():
    env = ExplicitEnv(["a", "b"], [("a", "b")], {"b": 2.0})
    k = env.key
    res = db_residual(k("b"), TERMINAL, {k("b"): math.log(3.0)}, lambda s: {TERMINAL: 0.0}, None,
                      env.log_reward)
    assert res.tag == "db-terminal"
    assert res.value == pytest.approx(math.log(3.0 / 2.0))


def test_length_one_subtb_is_negated_db(rng):
    env = random_env(rng)
    model = TabularFlowModel(env, init_scale=1.0, rng=rng)
    pb = uniform_backward_policy(env)
    for s, s2 in env.edges:
        a = subtb_residual([s, s2], model.state_param, model, pb).value
        b = db_residual(s, s2, model.state_param, model, pb).value
        assert a == pytest.approx(-b, abs=1e-12)


def test_subtb_counterexample_passes_length_two_segments():
    env = segment_counterexample_env()
    F, pf_lin = segment_counterexample_assignment()
    log_F = {s: math.log(v) for s, v in F.items()}
    pf = {s: {c: math.log(p) for c, p in row.items()} for s, row in pf_lin.items()}
    pb = uniform_backward_policy(env)
    segs = [t[i:i + 3] for t in enumerate_trajectories(env) for i in range(len(t) - 2)
            if TERMINAL not in t[i:i + 3]]
    assert len({tuple(s) for s in segs}) == 3
    for seg in segs:
        assert abs(subtb_residual(seg, log_F, pf.__getitem__, pb).value) <= 1e-12
    inflow = sum(F[s] * pf_lin[s][TERMINAL] for s in env.terminating_states)
    assert (inflow, F[env.initial]) == (3.0, 4.0)


def test_nan_and_zero_probability_map_to_infinite_residual():
    assert Residual.of(float("nan"), "x").value == math.inf
    r = db_residual("a", "b", {"a": 0.0, "b": 0.0}, lambda s: {"c": 0.0}, lambda s: {"a": 0.0})
    assert math.isinf(r.value) and not r.finite and r.grad == {}


def test_modified_db_helpers_agree():
    args = (0.3, math.log(0.2), math.log(0.4), math.log(0.5), -math.log(2))
    assert modified_db_residual(*args).value == pytest.approx(modified_db_delta(*args))
    assert modified_db_residual(0.3, 0.0, -math.inf, 0.0, 0.0).value == math.inf
    arr = modified_db_delta(np.array([0.3, 0.1]), np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2))
    assert arr.shape == (2,)


def test_loss_terms_and_aggregate():
    loss, d = loss_terms(np.array([-3.0, 0.5, 2.0]), "huber", 1.0)
    np.testing.assert_allclose(loss, [2.5, 0.125, 1.5])
    np.testing.assert_allclose(d, [-1.0, 0.5, 1.0])
    loss, d = loss_terms(np.array([2.0]), "squared")
    assert loss[0] == 2.0 and d[0] == 2.0
    with pytest.raises(ValueError):
        loss_terms(np.zeros(1), "l3")
    agg = loss_aggregate([Dual(1.0, {0: 1.0}), Dual(math.inf), Residual(3.0, "x", {0: 2.0})])
    assert agg.used == 2 and agg.skipped == 1
    assert agg.value == pytest.approx(2.5)
    assert agg.grad[0] == pytest.approx((1.0 * 1.0 + 3.0 * 2.0) / 2)
    with pytest.raises(ValueError):
        loss_aggregate([])


def test_corrected_reward_schemes(rng):
    env = random_env(rng)
    pb = uniform_backward_policy(env)
    sparse = corrected_reward(env, pb, alpha=2.0)
    unc = corrected_reward(env, pb, alpha=2.0, scheme="uncorrected")
    for t in enumerate_trajectories(env):
        x = t[-2]
        total = sum(sparse(a, b) for a, b in zip(t[:-1], t[1:]))
        expect = -env.energy(x, 2.0) + 2.0 * trajectory_logprob(t, pb, "backward")
        assert total == pytest.approx(expect)
        assert sum(unc(a, b) for a, b in zip(t[:-1], t[1:])) == pytest.approx(-env.energy(x, 2.0))
    with pytest.raises(ValueError):
        corrected_reward(env, scheme="dense")
    with pytest.raises(ValueError):
        corrected_reward(env, scheme="other")


def test_reverse_kl_gradient_equals_tb_gradient_with_matching_baseline(rng):
    env = random_env(rng)
    model = TabularFlowModel(env, init_scale=1.0, rng=rng)
    pb = uniform_backward_policy(env)
    trajs = enumerate_trajectories(env)[:6]
    g, _, costs = reverse_kl_gradient(trajs, model, pb, env.log_reward, "local")
    b = float(np.mean(costs))
    # TB gradient wrt policy parameters with log Z = -b; the log Z entry is excluded
    res = [tb_residual(t, -b, model, pb, env.log_reward) for t in trajs]
    agg = loss_aggregate(res)
    for k in set(g) | set(agg.grad):
        assert g.get(k, 0.0) == pytest.approx(agg.grad.get(k, 0.0), abs=1e-12)


def test_reverse_kl_global_baseline_update_and_off_policy_error(rng):
    env = multipath_env()
    model = TabularFlowModel(env)
    pb = uniform_backward_policy(env)
    trajs = enumerate_trajectories(env)
    _, running, costs = reverse_kl_gradient(trajs, model, pb, env.log_reward, "global",
                                            running=1.0, eta=0.25)
    assert running == pytest.approx(0.75 * 1.0 + 0.25 * costs.mean())
    with pytest.raises(OffPolicyError):
        reverse_kl_gradient(trajs, model, pb, env.log_reward, on_policy=False)


@pytest.mark.parametrize("name", sorted(CASES))
def test_residual_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(10):
        model, fn = CASES[name](rng)
        assert fd_gradient_error(model, fn) < 1e-4


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), alpha=st.sampled_from([0.5, 1.0, 2.0]),
       which=st.sampled_from(sorted(EQUIVALENCES)))
def test_residual_equivalences_property(seed, alpha, which):
    assert EQUIVALENCES[which](np.random.default_rng(seed), alpha) < 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_constructed_flow_satisfies_flow_matching_property(seed):
    env = random_env(np.random.default_rng(seed))
    flow = construct_flow_from_reward(env, env.rewards)
    rep = flow_residual_report(flow, env, env.rewards)
    assert max(abs(v) for v in rep.values()) < 1e-12
