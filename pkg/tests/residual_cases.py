"""Random residual instances on small explicit environments.

Each builder takes an rng and returns ``(model, fn)`` where ``fn()`` evaluates
one residual with the model's current parameters.
"""
import math

import numpy as np

from conftest import random_env
from gfndag.flow_core import TERMINAL, sample_trajectory, uniform_backward_policy
from gfndag.objectives import (
    corrected_reward,
    db_residual,
    fl_db_residual,
    fm_residual,
    mdb_residual,
    modified_db_residual,
    pcl_residual,
    pisql_residual,
    soft_value,
    sql_residual,
    subtb_residual,
    tb_residual,
)
from gfndag.policy_nn import TabularFlowModel


def _model(env, rng):
    return TabularFlowModel(env, init_scale=1.0, rng=rng)


def _traj(env, model, rng):
    return list(sample_trajectory(env, model, rng))


def _random_edge(env, model, rng, allow_terminal=True):
    while True:
        t = _traj(env, model, rng)
        i = int(rng.integers(len(t) - 1))
        if allow_terminal or t[i + 1] is not TERMINAL:
            return t[i], t[i + 1]


def _segment(env, model, rng, min_len=1):
    while True:
        t = _traj(env, model, rng)
        if len(t) - 1 < min_len:
            continue
        i = int(rng.integers(len(t) - min_len))
        j = int(rng.integers(i + min_len, len(t)))
        return t[i:j + 1]


def _edge_increments(env, rng):
    inc = {e: float(rng.normal()) for e in env.edges}
    return lambda s, s2: inc[(s, s2)]


def case_fm(rng):
    env = random_env(rng)
    model = _model(env, rng)
    states = [s for s in env.states if s != env.initial]
    s = states[int(rng.integers(len(states)))]
    return model, lambda: fm_residual(s, model.edge_param, env)


def case_db(rng):
    env = random_env(rng)
    model = _model(env, rng)
    pb = uniform_backward_policy(env)
    s, s2 = _random_edge(env, model, rng)
    return model, lambda: db_residual(s, s2, model.state_param, model, pb, env.log_reward)


def case_tb(rng):
    env = random_env(rng)
    model = _model(env, rng)
    pb = uniform_backward_policy(env)
    t = _traj(env, model, rng)
    return model, lambda: tb_residual(t, model.log_Z(), model, pb, env.log_reward)


def case_subtb(rng):
    env = random_env(rng)
    model = _model(env, rng)
    pb = uniform_backward_policy(env)
    seg = _segment(env, model, rng)
    if len(seg) == 2 and seg[-1] is TERMINAL:
        seg = _segment(env, model, rng, 2)
    return model, lambda: subtb_residual(seg, model.state_param, model, pb, env.log_reward)


def case_mdb(rng, alpha=1.0):
    env = random_env(rng, all_terminating=True)
    model = _model(env, rng)
    pb = uniform_backward_policy(env)
    s, s2 = _random_edge(env, model, rng, allow_terminal=False)
    return model, lambda: mdb_residual(s, s2, model, pb, lambda x: env.energy(x, alpha), alpha)


def case_modified_db(rng):
    env = random_env(rng, all_terminating=True)
    model = _model(env, rng)
    pb = uniform_backward_policy(env)
    s, s2 = _random_edge(env, model, rng, allow_terminal=False)
    delta = env.log_reward(s2) - env.log_reward(s)
    target_stop = float(rng.normal()) - 1.0
    return model, lambda: modified_db_residual(delta, model.log_pf(s, s2), model.log_pf(s, TERMINAL),
                                               target_stop, pb(s2)[s])


def case_fl_db(rng, alpha=1.0):
    env = random_env(rng)
    model = _model(env, rng)
    pb = uniform_backward_policy(env)
    inc = _edge_increments(env, rng)
    s, s2 = _random_edge(env, model, rng, allow_terminal=False)
    return model, lambda: fl_db_residual(s, s2, model.state_param, model, pb, inc, alpha)


def case_sql(rng, alpha=1.0):
    env = random_env(rng)
    model = _model(env, rng)
    r = corrected_reward(env, alpha=alpha)
    s, s2 = _random_edge(env, model, rng)
    return model, lambda: sql_residual(s, s2, model.edge_param, env, r, alpha)


def case_pcl(rng, alpha=1.0):
    env = random_env(rng)
    model = _model(env, rng)
    r = corrected_reward(env, alpha=alpha)
    seg = _segment(env, model, rng)
    return model, lambda: pcl_residual(seg, model.state_param, model, r, alpha)


def case_pisql(rng, alpha=1.0):
    env = random_env(rng, all_terminating=True)
    model = _model(env, rng)
    pb = uniform_backward_policy(env)
    s, s2 = _random_edge(env, model, rng, allow_terminal=False)

    def r(a, b):
        return env.energy(a, alpha) - env.energy(b, alpha) + alpha * pb(b)[a]

    return model, lambda: pisql_residual(s, s2, model, r, alpha)


CASES = {
    "fm": case_fm,
    "db": case_db,
    "tb": case_tb,
    "subtb": case_subtb,
    "modified-db": case_modified_db,
    "mdb": case_mdb,
    "fl-db": case_fl_db,
    "sql": case_sql,
    "pcl": case_pcl,
    "pi-sql": case_pisql,
}


def fd_gradient_error(model, fn, h=1e-5):
    """Max elementwise |analytic - central FD| relative to the gradient's scale."""
    res = fn()
    g = np.zeros_like(model.params)
    for k, v in res.grad.items():
        g[k] += v
    fd = np.zeros_like(g)
    base = model.params.copy()
    for k in range(len(base)):
        model.params[k] = base[k] + h
        up = fn().value
        model.params[k] = base[k] - h
        dn = fn().value
        model.params[k] = base[k]
        fd[k] = (up - dn) / (2 * h)
    scale = max(float(np.abs(g).max()), 1.0)
    return float(np.abs(fd - g).max()) / scale


# --- equivalence instances ------------------------------------------------

def sql_vs_db(rng, alpha):
    """|Delta_SQL - alpha Delta_DB| with F = exp(V / alpha) and pi = exp((Q - V) / alpha)."""
    env = random_env(rng)
    model = _model(env, rng)
    q = model.edge_param
    pb = uniform_backward_policy(env)
    r = corrected_reward(env, pb, alpha=alpha)

    def log_F(s):
        return soft_value(s, q, env, alpha).value / alpha

    def pf(s):
        v = soft_value(s, q, env, alpha).value
        return {c: (q(s, c).value - v) / alpha for c in model.successors(s)}

    s, s2 = _random_edge(env, model, rng)
    a = sql_residual(s, s2, q, env, r, alpha).value
    b = db_residual(s, s2, log_F, pf, pb, env.log_reward).value
    return abs(a - alpha * b)


def pcl_vs_subtb(rng, alpha):
    """|Delta_PCL - alpha Delta_SubTB| with F = exp(V / alpha); V and pi arbitrary."""
    env = random_env(rng)
    model = _model(env, rng)
    pb = uniform_backward_policy(env)
    r = corrected_reward(env, pb, alpha=alpha)
    seg = _segment(env, model, rng)
    if len(seg) == 2 and seg[-1] is TERMINAL:
        seg = _segment(env, model, rng, 2)
    a = pcl_residual(seg, model.state_param, model, r, alpha).value
    b = subtb_residual(seg, lambda s: model.state_param(s).value / alpha, model, pb,
                       env.log_reward).value
    return abs(a - alpha * b)


def pisql_vs_mdb(rng, alpha):
    """|Delta_piSQL - alpha Delta_MDB| on an all-terminating environment."""
    env = random_env(rng, all_terminating=True)
    model = _model(env, rng)
    pb = uniform_backward_policy(env)
    s, s2 = _random_edge(env, model, rng, allow_terminal=False)

    def energy(x):
        return env.energy(x, alpha)

    def r(a_, b_):
        return energy(a_) - energy(b_) + alpha * pb(b_)[a_]

    a = pisql_residual(s, s2, model, r, alpha).value
    b = mdb_residual(s, s2, model, pb, energy, alpha).value
    return abs(a - alpha * b)


EQUIVALENCES = {"sql-db": sql_vs_db, "pcl-subtb": pcl_vs_subtb, "pisql-mdb": pisql_vs_mdb}
