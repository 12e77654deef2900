import math

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import lingauss_cache
from gfndag.baselines import (
    Proposal,
    apply_move,
    legal_moves,
    mc3_transition_matrix,
    metropolis_hastings,
    move_delta,
    structure_mc3,
    write_trace_csv,
)
from gfndag.dag_env import canonical_key, edges_to_state, is_acyclic, state_from_adjacency, \
    state_from_key
from gfndag.exact_eval import DagSpace, exact_posterior, jsd
from gfndag.scores import EdgePenaltyPrior, log_reward

TWO_STATE = {0: math.log(1.0), 1: math.log(3.0)}


def _flip():
    return Proposal(lambda x, rng: 1 - x, lambda x, y: 0.0 if x != y else -math.inf)


def test_two_state_chain_hits_one_to_three():
    tr = metropolis_hastings(TWO_STATE.__getitem__, _flip(), 0, 40000, np.random.default_rng(0), thin=1)
    f = tr.frequencies()
    assert f[1] == pytest.approx(0.75, abs=0.01)
    assert tr.burn_in == 4000 and len(tr.states) == 36000


def test_independent_proposal_from_target_always_accepts():
    p = np.array([0.2, 0.5, 0.3])
    prop = Proposal(lambda x, rng: int(rng.choice(3, p=p)), lambda x, y: math.log(p[y]))
    tr = metropolis_hastings(lambda x: math.log(p[x]), prop, 0, 2000, np.random.default_rng(1))
    assert tr.acceptance_rate == 1.0


def test_dropping_the_hastings_factor_biases_the_chain():
    # asymmetric proposal: from any state, propose 0 w.p. 0.8
    q = np.array([0.8, 0.2])
    prop = Proposal(lambda x, rng: int(rng.random() >= 0.8), lambda x, y: math.log(q[y]))
    good = metropolis_hastings(TWO_STATE.__getitem__, prop, 0, 60000, np.random.default_rng(2), thin=1)
    bad = metropolis_hastings(TWO_STATE.__getitem__, prop, 0, 60000, np.random.default_rng(2), thin=1,
                              hastings=False)
    assert good.frequencies()[1] == pytest.approx(0.75, abs=0.015)
    assert abs(bad.frequencies()[1] - 0.75) > 0.1


def test_zero_reverse_density_is_rejected_with_warning():
    prop = Proposal(lambda x, rng: 1, lambda x, y: -math.inf if y == 0 else 0.0)
    with pytest.warns(UserWarning):
        tr = metropolis_hastings(TWO_STATE.__getitem__, prop, 0, 50, np.random.default_rng(0))
    assert tr.accepted == 0 and tr.rejected_zero_density == 50


def test_schedule_validation():
    with pytest.raises(ValueError):
        metropolis_hastings(TWO_STATE.__getitem__, _flip(), 0, 10, np.random.default_rng(0), thin=0)
    with pytest.raises(ValueError):
        metropolis_hastings(TWO_STATE.__getitem__, _flip(), 0, -1, np.random.default_rng(0))


def test_legal_moves_keep_acyclicity():
    g = edges_to_state(4, [(0, 1), (1, 2), (0, 3)])
    mv = legal_moves(g)
    kinds = [m[0] for m in mv]
    assert kinds == sorted(kinds, key=["add", "delete", "reverse"].index)
    for m in mv:
        h = apply_move(g, m)
        assert is_acyclic(h.adjacency)
        assert h.closure_t.tolist() == state_from_adjacency(h.adjacency).closure_t.tolist()
    # 0->2 cannot be reversed while the path 0->1->2 exists
    g2 = edges_to_state(3, [(0, 1), (1, 2), (0, 2)])
    assert ("reverse", 0, 2) not in legal_moves(g2)
    assert legal_moves(g2, moves=("add",)) == []


def test_move_delta_matches_full_recompute():
    cache, _, _ = lingauss_cache(5, seed=3)
    rng = np.random.default_rng(0)
    for prior in (None, EdgePenaltyPrior(0.7)):
        kw = {} if prior is None else {"prior": prior}
        g = edges_to_state(5, [])
        for _ in range(200):
            mv = legal_moves(g)
            m = mv[int(rng.integers(len(mv)))]
            h = apply_move(g, m)
            full = log_reward(h, cache, **kw) - log_reward(g, cache, **kw)
            assert move_delta(g, m, cache, **kw) == pytest.approx(full, abs=1e-9)
            g = h


def test_mc3_uniform_score_is_uniform():
    tr = structure_mc3(lambda c, p: 0.0, 3, 200_000, np.random.default_rng(0))
    f = tr.frequencies()
    assert len(f) == 25
    counts = np.array(list(f.values())) * len(tr.states)
    assert chisquare(counts).pvalue > 0.001


@pytest.mark.parametrize("d", [2, 3])
def test_mc3_kernel_detailed_balance(d):
    sp = DagSpace(d)
    states = list(sp.states)
    w = np.random.default_rng(d).normal(size=len(states))
    lt = {s.adj: w[i] for i, s in enumerate(states)}
    K = mc3_transition_matrix(states, lambda s: lt[s.adj])
    pi = np.exp(w) / np.exp(w).sum()
    flux = pi[:, None] * K
    assert np.abs(flux - flux.T).max() <= 1e-10
    np.testing.assert_allclose(K.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(K >= 0)


def test_mc3_posterior_matches_exact(d3_cache):
    cache, _, _ = d3_cache
    post = exact_posterior(cache, 3)
    tr = structure_mc3(cache, 3, 100_000, np.random.default_rng(5))
    f = tr.frequencies()
    emp = {k: f.get(k, 0.0) for k in post.log_probs}
    assert jsd(emp, {k: math.exp(v) for k, v in post.log_probs.items()}) < 5e-3
    # the running score never drifts from a full recompute
    for k, ls in list(zip(tr.states, tr.log_scores))[::500]:
        assert ls == pytest.approx(log_reward(state_from_key(k, 3), cache), abs=1e-9)


def test_mc3_max_parents_and_trace_csv(tmp_path):
    tr = structure_mc3(lambda c, p: 0.0, 4, 5000, np.random.default_rng(0), max_parents=1, thin=5)
    for k in set(tr.states):
        adj = np.unpackbits(np.frombuffer(k, np.uint8))[:16].reshape(4, 4)
        assert adj.sum(axis=0).max() <= 1
    write_trace_csv(tr, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,key,log_score,accepted"
    assert len(lines) == len(tr.states) + 1
    assert lines[1].startswith(f"{tr.burn_in},{tr.states[0].hex()},")


def test_mc3_records_canonical_keys():
    tr = structure_mc3(lambda c, p: 0.0, 3, 100, np.random.default_rng(0), burn_in=0, thin=1)
    assert len(tr.states) == 100
    for k in tr.states:
        assert canonical_key(state_from_key(k, 3)) == k
