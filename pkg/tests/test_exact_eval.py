import itertools
import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import mannwhitneyu

from conftest import lingauss_cache
from gfndag.dag_env import DagEnv, edges_to_state, initial_dag_state, state_from_adjacency
from gfndag.exact_eval import (
    DagSpace,
    EnumerationTooLarge,
    ExactDagPolicy,
    PosteriorTable,
    auroc,
    conditional_trajectory_entropy,
    correlation_report,
    enumerate_dags,
    estimate_log_pftop,
    exact_posterior,
    features,
    grouped_logsumexp,
    jsd,
    policy_tables,
    shd,
    solve_forward_policy,
    structural_metrics,
    tb_residual_range,
    terminating_log_probs,
)
from gfndag.flow_core import construct_flow_from_reward, policy_from_flow, terminating_distribution_dp
from gfndag.objectives import modified_db_delta
from gfndag.policy_nn import TabularPolicy
from gfndag.scores import BGeScore, Dataset, LocalScoreCache


@pytest.mark.parametrize("d, n", [(1, 1), (2, 3), (3, 25), (4, 543)])
def test_dag_counts(d, n):
    assert len(DagSpace(d)) == n
    assert len(enumerate_dags(d)) == n


def test_d3_transition_count_and_levels():
    sp = DagSpace(3)
    assert sp.n_transitions == 48
    assert np.all(sp.level[sp.dst] == sp.level[sp.src] + 1)
    with pytest.raises(EnumerationTooLarge):
        DagSpace(6)


def test_max_parents_space_is_a_subset():
    full, cap = DagSpace(4), DagSpace(4, max_parents=1)
    assert len(cap) < len(full)
    assert cap.adjacency.sum(axis=1).max() <= 1


def test_grouped_logsumexp(rng):
    v = rng.normal(size=20)
    g = rng.integers(0, 4, size=20)
    out = grouped_logsumexp(v, g, 5)
    for k in range(4):
        ref = logsumexp(v[g == k]) if (g == k).any() else -np.inf
        assert out[k] == pytest.approx(ref)
    assert out[4] == -np.inf


@pytest.mark.parametrize("d", [3, 4])
def test_three_exact_routes_agree(d, rng):
    data = Dataset("continuous", rng.normal(size=(40, d)))
    sp = DagSpace(d)
    lr = sp.log_rewards(LocalScoreCache(BGeScore(data)))
    post = np.exp(exact_posterior(data, d, space=sp).array(sp))
    ls, le = solve_forward_policy(sp, lr)
    route_b = np.exp(terminating_log_probs(sp, ls, le))
    env = DagEnv(d)
    flow = construct_flow_from_reward(env, {k: float(np.exp(v)) for k, v in zip(sp.keys, lr)})
    dp = terminating_distribution_dp(env, policy_from_flow(flow))
    route_a = np.array([dp[k] for k in sp.keys])
    np.testing.assert_allclose(route_a, post, atol=1e-9, rtol=0)
    np.testing.assert_allclose(route_b, post, atol=1e-9, rtol=0)
    delta = modified_db_delta(lr[sp.dst] - lr[sp.src], le, ls[sp.src], ls[sp.dst], sp.uniform_log_pb())
    assert np.abs(delta).max() < 1e-10


def test_posterior_table_text_round_trip(d3_cache):
    cache, _, _ = d3_cache
    post = exact_posterior(cache, 3)
    back = PosteriorTable.from_text(post.to_text(), 3)
    assert back.log_probs == post.log_probs
    assert logsumexp(list(post.log_probs.values())) == pytest.approx(0.0, abs=1e-12)


def _random_policy_tables(sp, rng, scale=1.0):
    pol = TabularPolicy(sp.d)
    policy_tables(sp, pol)
    pol.params = rng.normal(scale=scale, size=pol.params.shape)
    return policy_tables(sp, pol)


def _brute_tb(sp, ls, le, lr, log_z):
    """TB residual of every complete trajectory, by listing edge orderings."""
    table = {(s, a): k for k, (s, a) in enumerate(zip(sp.src.tolist(), sp.act.tolist()))}
    lpb = sp.uniform_log_pb()
    out = []
    d = sp.d
    for i, g in enumerate(sp.states):
        for order in itertools.permutations(g.edges):
            s = initial_dag_state(d)
            acc = 0.0
            for u, v in order:
                k = table[(sp.lookup(s), u * d + v)]
                acc += le[k] - lpb[k]
                s = edges_to_state(d, list(s.edges) + [(u, v)])
            out.append(log_z + acc + ls[i] - lr[i])
    return np.array(out)


def test_tb_residual_range_matches_brute_force_and_bounds(rng, d3_cache):
    cache, _, _ = d3_cache
    sp = DagSpace(3)
    lr = sp.log_rewards(cache)
    log_Z = float(logsumexp(lr))
    for scale in (0.1, 1.0):
        ls, le = _random_policy_tables(sp, rng, scale)
        log_z = log_Z + rng.normal()
        lo, hi = tb_residual_range(sp, ls, le, lr, log_z)
        brute = _brute_tb(sp, ls, le, lr, log_z)
        assert lo == pytest.approx(brute.min()) and hi == pytest.approx(brute.max())
        m = max(abs(lo), abs(hi))
        assert abs(log_z - log_Z) <= m + 1e-12
        lt = terminating_log_probs(sp, ls, le)
        assert np.abs(lt - (lr - log_Z)).max() <= 2 * m + 1e-12
    ls, le = solve_forward_policy(sp, lr)
    lo, hi = tb_residual_range(sp, ls, le, lr, log_Z)
    assert max(abs(lo), abs(hi)) < 1e-10


def test_uniform_backward_policy_maximizes_conditional_entropy(d3_cache):
    cache, _, _ = d3_cache
    sp = DagSpace(3)
    lr = sp.log_rewards(cache)
    h_uniform = conditional_trajectory_entropy(sp, *solve_forward_policy(sp, lr))
    # with uniform P_B, H(tau | x) = E[log |edges|!]
    lt = terminating_log_probs(sp, *solve_forward_policy(sp, lr))
    ref = float(np.sum(np.exp(lt) * [math.lgamma(s.num_edges + 1) for s in sp.states]))
    assert h_uniform == pytest.approx(ref)
    r = np.random.default_rng(0)
    for _ in range(20):
        raw = r.normal(scale=2.0, size=sp.n_transitions)
        log_pb = raw - grouped_logsumexp(raw, sp.dst, len(sp))[sp.dst]
        ls, le = solve_forward_policy(sp, lr, log_pb)
        np.testing.assert_allclose(np.exp(terminating_log_probs(sp, ls, le)), np.exp(lr - logsumexp(lr)),
                                   atol=1e-12)
        assert conditional_trajectory_entropy(sp, ls, le) <= h_uniform + 1e-12


def test_features_against_direct_sums(d3_cache):
    cache, _, _ = d3_cache
    post = exact_posterior(cache, 3)
    sp = DagSpace(3)
    p = np.exp(post.array(sp))
    post_probs = {k: math.exp(v) for k, v in post.log_probs.items()}
    edge = features(post_probs, "edge", 3)
    np.testing.assert_allclose(edge.matrix, np.tensordot(p, sp.adjacency.astype(float), axes=1))
    np.testing.assert_allclose(features(p, "edge", space=sp).matrix, edge.matrix)
    path = features(post_probs, "path", 3).matrix
    mb = features(post_probs, "markov", 3).matrix
    assert np.all(path >= edge.matrix - 1e-15)
    np.testing.assert_allclose(mb, mb.T)
    assert np.all(np.diag(mb) == 0)
    chain = {edges_to_state(3, [(0, 1), (1, 2)]).key(): 1.0}
    assert features(chain, "path", 3).matrix[0, 2] == 1.0
    assert features(chain, "markov", 3).matrix[0, 2] == 0.0
    collider = {edges_to_state(3, [(0, 1), (2, 1)]).key(): 1.0}
    assert features(collider, "markov", 3).matrix[0, 2] == 1.0
    with pytest.raises(ValueError):
        features({k: 0.5 for k in chain}, "edge", 3)
    with pytest.raises(ValueError):
        features(chain, "bogus", 3)
    assert edge.to_csv().count("\n") == 3


def test_jsd():
    assert jsd([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2))
    assert jsd({"a": 0.3, "b": 0.7}, {"b": 0.7, "a": 0.3}) == 0.0
    with pytest.raises(ValueError):
        jsd({"a": 1.0}, {"b": 1.0})
    with pytest.raises(ValueError):
        jsd([1.0], [0.5, 0.5])


def test_shd_counts_reversal_once():
    a = edges_to_state(3, [(0, 1), (1, 2)]).adjacency
    b = edges_to_state(3, [(1, 0), (1, 2)]).adjacency
    c = edges_to_state(3, []).adjacency
    assert shd(a, a) == 0 and shd(a, b) == 1 and shd(a, c) == 2


def test_auroc_matches_mann_whitney(rng):
    for _ in range(5):
        y = rng.random(30) < 0.4
        s = np.round(rng.normal(size=30), 1)
        u = mannwhitneyu(s[y], s[~y]).statistic
        assert auroc(y, s) == pytest.approx(u / (y.sum() * (~y).sum()))
    assert math.isnan(auroc(np.ones(3, bool), np.zeros(3)))


def test_structural_metrics():
    g = edges_to_state(3, [(0, 1)])
    marg = g.adjacency.astype(float)
    e_shd, auc = structural_metrics([g, g.key(), initial_dag_state(3)], g, marg)
    assert e_shd == pytest.approx(1 / 3) and auc == 1.0
    with pytest.raises(ValueError):
        structural_metrics([], g, marg)


def _policy_and_target(d, seed=0):
    cache, _, _ = lingauss_cache(d, seed)
    sp = DagSpace(d)
    lr = sp.log_rewards(cache)
    return sp, lr, ExactDagPolicy.from_rewards(sp, lr)


def test_full_beam_equals_dp():
    sp, lr, pol = _policy_and_target(3)
    lt = terminating_log_probs(sp, pol._stop, pol._edges[sp.src, sp.act])
    for i, g in enumerate(sp.states):
        est = estimate_log_pftop(pol, g, beam_width=math.factorial(g.num_edges), mc_samples=0)
        assert est.log_estimate == pytest.approx(lt[i], abs=1e-12)
        est10 = estimate_log_pftop(pol, g, beam_width=10, mc_samples=100, rng=np.random.default_rng(0))
        assert est10.log_estimate == pytest.approx(lt[i], abs=1e-12)


def test_monte_carlo_part_is_unbiased():
    # a random policy, so orderings differ in probability and the MC part has variance
    sp = DagSpace(3)
    rng = np.random.default_rng(1)
    pol = TabularPolicy(3)
    policy_tables(sp, pol)
    pol.params = rng.normal(size=pol.params.shape)
    lt = terminating_log_probs(sp, *policy_tables(sp, pol))
    i = int(np.argmax(sp.level))
    g = sp.states[i]
    ests = np.array([math.exp(estimate_log_pftop(pol, g, beam_width=2, mc_samples=5, rng=rng).log_estimate)
                     for _ in range(400)])
    se = ests.std(ddof=1) / math.sqrt(len(ests))
    assert abs(ests.mean() - math.exp(lt[i])) <= 3 * se + 1e-15


def test_estimator_errors_and_empty_graph():
    sp, lr, pol = _policy_and_target(3)
    with pytest.raises(ValueError):
        estimate_log_pftop(pol, sp.states[1], beam_width=0, mc_samples=0)
    est = estimate_log_pftop(pol, initial_dag_state(3))
    assert est.log_estimate == pytest.approx(pol._stop[0])


def test_exact_policy_correlation_has_unit_slope():
    sp, lr, pol = _policy_and_target(4)
    rng = np.random.default_rng(2)
    idx = rng.choice(len(sp), size=60, replace=False)
    pairs = [(estimate_log_pftop(pol, sp.states[i], rng=rng).log_estimate, lr[i]) for i in idx]
    rep = correlation_report(pairs)
    assert rep.slope == pytest.approx(1.0, abs=0.02) and rep.r >= 0.999
    assert rep.intercept == pytest.approx(-logsumexp(lr), abs=0.05)
    with pytest.raises(ValueError):
        correlation_report([(0.0, 0.0), (1.0, 1.0)])
    with pytest.raises(ValueError):
        correlation_report([(0.0, 1.0)] * 4)


def test_exact_policy_tabular_conversion():
    sp, lr, pol = _policy_and_target(3)
    tab = pol.to_tabular()
    a, b = policy_tables(sp, pol), policy_tables(sp, tab)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)
    assert state_from_adjacency(sp.adjacency[5]) == sp.states[5]
