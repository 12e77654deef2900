"""Log-domain residuals of GFlowNet and soft RL objectives.

Every residual takes callables so the same code serves exact tables,
tabular parameters (returning :class:`~gfndag.autodiff.Dual`) and tests:

* ``pf`` is a forward policy, either a ``LogPolicy`` (``s -> {s': log p}``)
  or an object with a ``log_pf(s, s')`` method;
* ``pb`` is a backward policy ``s' -> {s: log P_B(s | s')}``;
* ``log_F``, ``V`` map a state to a log-flow or soft value;
* ``log_reward`` maps a terminating state to ``log R(x) = -E(x) / alpha``.

The residuals are plain arithmetic on these values, so they also work on
NumPy arrays for vectorized training loops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Dual, grad_of, lse, value_of
from .flow_core import TERMINAL, successors, uniform_backward_policy

__all__ = [
    "Residual",
    "CorrectedReward",
    "fm_residual",
    "db_residual",
    "tb_residual",
    "subtb_residual",
    "modified_db_delta",
    "modified_db_residual",
    "mdb_residual",
    "fl_db_residual",
    "soft_value",
    "sql_residual",
    "pcl_residual",
    "pisql_residual",
    "corrected_reward",
    "loss_terms",
    "AggregateLoss",
    "loss_aggregate",
    "reverse_kl_gradient",
    "OffPolicyError",
]


@dataclass(frozen=True)
class Residual:
    value: float
    tag: str
    grad: dict = field(default_factory=dict, repr=False)

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)

    @classmethod
    def of(cls, x, tag: str) -> "Residual":
        v = value_of(x)
        if math.isnan(v):
            v = math.inf
        return cls(v, tag, dict(grad_of(x)) if math.isfinite(v) else {})

    def __float__(self):
        return self.value


def _lpf(pf, s, s2):
    f = getattr(pf, "log_pf", None)
    if f is not None:
        return f(s, s2)
    return pf(s).get(s2, -math.inf)


def _lpb(pb, s2, s):
    """log P_B(s | s2)."""
    return pb(s2).get(s, -math.inf)


def _fn(x) -> Callable:
    if isinstance(x, Mapping):
        return x.__getitem__
    return x


def _edge_flow_fn(flow) -> Callable:
    if isinstance(flow, Mapping):
        return lambda s, s2: math.log(flow[(s, s2)]) if flow.get((s, s2), 0.0) > 0 else -math.inf
    return flow


def fm_residual(state, flow, env, log_reward=None) -> Residual:
    """log inflow(s) - log(outflow(s) + R(s)).

    ``flow`` is an edge-flow table or a callable ``(s, s') -> log F(s -> s')``
    over non-terminal edges; the terminal edge carries ``R(s)``.
    """
    if state == env.initial:
        raise ValueError("flow matching is not defined at the initial state")
    f = _edge_flow_fn(flow)
    log_reward = log_reward if log_reward is not None else getattr(env, "log_reward", None)
    inflow = lse(f(p, state) for p in env.parents(state))
    out = [f(state, c) for c in env.children(state)]
    if env.is_terminating(state):
        out.append(log_reward(state))
    outflow = lse(out) if out else -math.inf
    if value_of(outflow) == -math.inf or value_of(inflow) == -math.inf:
        return Residual(math.inf, "fm")
    return Residual.of(inflow - outflow, "fm")


def db_residual(s, s2, log_F, pf, pb, log_reward=None) -> Residual:
    """log F(s)P_F(s'|s) / F(s')P_B(s|s'); for s' = TERMINAL, log F(s)P_F(stop|s) / R(s)."""
    log_F = _fn(log_F)
    if s2 is TERMINAL:
        return Residual.of(log_F(s) + _lpf(pf, s, TERMINAL) - log_reward(s), "db-terminal")
    return Residual.of(log_F(s) + _lpf(pf, s, s2) - log_F(s2) - _lpb(pb, s2, s), "db")


def _split_terminal(traj):
    traj = list(traj)
    if traj and traj[-1] is TERMINAL:
        return traj[:-1], True
    return traj, False


def tb_residual(traj: Sequence, log_Z, pf, pb, log_reward) -> Residual:
    """log Z prod P_F / (R(x) prod P_B) over a complete trajectory (TERMINAL optional)."""
    states, _ = _split_terminal(traj)
    x = states[-1]
    acc = log_Z - log_reward(x) + _lpf(pf, x, TERMINAL)
    for s, s2 in zip(states[:-1], states[1:]):
        acc = acc + _lpf(pf, s, s2) - _lpb(pb, s2, s)
    return Residual.of(acc, "tb")


def subtb_residual(segment: Sequence, log_F, pf, pb, log_reward=None) -> Residual:
    """log F(s_n) prod P_B / (F(s_m) prod P_F) over ``s_m .. s_n``.

    A segment ending in TERMINAL uses ``log R`` of its last state in place of
    ``log F(s_n)`` and includes the stop probability. This orientation is the
    opposite of :func:`db_residual`, so a length-1 segment gives ``-db``.
    """
    log_F = _fn(log_F)
    states, terminal = _split_terminal(segment)
    if len(states) < 1 or (len(states) < 2 and not terminal):
        raise ValueError("a segment needs at least one transition")
    acc = -log_F(states[0])
    for s, s2 in zip(states[:-1], states[1:]):
        acc = acc + _lpb(pb, s2, s) - _lpf(pf, s, s2)
    if terminal:
        acc = acc + log_reward(states[-1]) - _lpf(pf, states[-1], TERMINAL)
    else:
        acc = acc + log_F(states[-1])
    return Residual.of(acc, "subtb")


def modified_db_delta(delta_score, log_pf_edge, log_stop, log_stop_next_target, log_pb):
    """log R(G')P_B(G|G')P(stop|G) / R(G)P(G'|G)P_target(stop|G'), on floats, Duals or arrays."""
    return delta_score + log_pb + log_stop - log_pf_edge - log_stop_next_target


def modified_db_residual(delta_score, log_pf_edge, log_stop, log_stop_next_target,
                         log_pb) -> Residual:
    """Modified DB on one transition of an all-terminating space.

    ``delta_score`` is ``log R(G') - log R(G)``. The stop head at ``G'`` comes
    from the frozen target copy, so the caller passes it as a plain float.
    """
    if value_of(log_stop) == -math.inf:
        return Residual(math.inf, "modified-db")
    return Residual.of(modified_db_delta(delta_score, log_pf_edge, log_stop,
                                         log_stop_next_target, log_pb), "modified-db")


def mdb_residual(s, s2, pf, pb, energy, alpha: float = 1.0) -> Residual:
    """log P_F(s'|s)P_F(stop|s') / P_B(s|s')P_F(stop|s) + (E(s') - E(s)) / alpha.

    This is the negative of :func:`modified_db_residual` with R = exp(-E/alpha).
    """
    v = (_lpf(pf, s, s2) + _lpf(pf, s2, TERMINAL) - _lpb(pb, s2, s) - _lpf(pf, s, TERMINAL)
         + (energy(s2) - energy(s)) / alpha)
    return Residual.of(v, "mdb")


def fl_db_residual(s, s2, log_F_offset, pf, pb, energy_increment, alpha: float = 1.0) -> Residual:
    """log F~(s)P_F(s'|s) / F~(s')P_B(s|s') + E(s -> s') / alpha, for s' non-terminal."""
    if energy_increment is None:
        raise ValueError("the environment has no per-step energy decomposition")
    if s2 is TERMINAL:
        raise ValueError("forward-looking DB has no terminal residual")
    log_F_offset = _fn(log_F_offset)
    v = (log_F_offset(s) + _lpf(pf, s, s2) - log_F_offset(s2) - _lpb(pb, s2, s)
         + energy_increment(s, s2) / alpha)
    return Residual.of(v, "fl-db")


def soft_value(s, q, env, alpha: float = 1.0):
    """V(s) = alpha log sum_{s''} exp(Q(s, s'') / alpha); V(TERMINAL) = 0."""
    if s is TERMINAL:
        return 0.0
    return alpha * lse(q(s, c) * (1.0 / alpha) for c in successors(env, s))


def sql_residual(s, s2, q, env, reward, alpha: float = 1.0) -> Residual:
    """Q(s, s') - (r(s, s') + V(s'))."""
    return Residual.of(q(s, s2) - reward(s, s2) - soft_value(s2, q, env, alpha), "sql")


def pcl_residual(segment: Sequence, V, pf, reward, alpha: float = 1.0) -> Residual:
    """-V(s_m) + V(s_n) + sum (r - alpha log pi) with V(TERMINAL) = 0."""
    V = _fn(V)
    segment = list(segment)
    if len(segment) < 2:
        raise ValueError("a segment needs at least one transition")
    acc = -V(segment[0]) + (0.0 if segment[-1] is TERMINAL else V(segment[-1]))
    for s, s2 in zip(segment[:-1], segment[1:]):
        acc = acc + reward(s, s2) - alpha * _lpf(pf, s, s2)
    return Residual.of(acc, "pcl")


def pisql_residual(s, s2, pf, reward, alpha: float = 1.0) -> Residual:
    """alpha (log pi(s'|s) - log pi(stop|s) + log pi(stop|s')) - r(s, s')."""
    v = alpha * (_lpf(pf, s, s2) - _lpf(pf, s, TERMINAL) + _lpf(pf, s2, TERMINAL)) - reward(s, s2)
    return Residual.of(v, "pi-sql")


class CorrectedReward:
    """Per-step MDP reward ``r(s, s')``.

    Schemes:

    * ``sparse``: ``alpha log P_B(s|s')`` on edges, ``-E(x)`` on stopping;
    * ``dense``: ``-E(s -> s') + alpha log P_B(s|s')`` on edges, 0 on stopping;
    * ``uncorrected``: 0 on edges, ``-E(x)`` on stopping.
    """

    def __init__(self, scheme, pb, energy, alpha, increment=None):
        self.scheme, self.pb, self.energy, self.alpha, self.increment = scheme, pb, energy, alpha, increment

    def __call__(self, s, s2) -> float:
        if s2 is TERMINAL:
            return -self.energy(s) if self.scheme in ("sparse", "uncorrected") else 0.0
        if self.scheme == "uncorrected":
            return 0.0
        r = self.alpha * _lpb(self.pb, s2, s)
        if self.scheme == "dense":
            r -= self.increment(s, s2)
        return r


def corrected_reward(env, pb=None, energy=None, alpha: float = 1.0, scheme: str = "sparse",
                     increment=None) -> CorrectedReward:
    """Reward whose trajectory sum is ``-E(x) + alpha sum log P_B``.

    ``energy`` defaults to ``env.energy(x, alpha)``; ``increment`` for the
    dense scheme defaults to ``env.energy_increment``.
    """
    if scheme not in ("sparse", "dense", "uncorrected"):
        raise ValueError(f"unknown scheme {scheme!r}")
    pb = pb if pb is not None else uniform_backward_policy(env)
    if energy is None:
        energy = lambda x: env.energy(x, alpha)  # noqa: E731
    if scheme == "dense":
        increment = increment if increment is not None else getattr(env, "energy_increment", None)
        if increment is None:
            raise ValueError("dense rewards need a per-step energy decomposition")
    return CorrectedReward(scheme, pb, energy, alpha, increment)


def loss_terms(values: np.ndarray, kind: str = "squared", delta: float = 1.0):
    """Elementwise loss and its derivative wrt the residual."""
    r = np.asarray(values, dtype=float)
    if kind == "squared":
        return 0.5 * r * r, r
    if kind == "huber":
        a = np.abs(r)
        small = a <= delta
        loss = np.where(small, 0.5 * r * r, delta * (a - 0.5 * delta))
        return loss, np.where(small, r, delta * np.sign(r))
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass
class AggregateLoss:
    value: float
    grad: dict
    used: int
    skipped: int


def loss_aggregate(residuals: Sequence, kind: str = "squared", delta: float = 1.0) -> AggregateLoss:
    """Mean of squared (1/2 r^2) or Huber losses; infinite residuals are skipped and counted."""
    residuals = list(residuals)
    if not residuals:
        raise ValueError("empty batch")
    vals, grads, skipped = [], [], 0
    for r in residuals:
        v = r.value if isinstance(r, Residual) else value_of(r)
        if not math.isfinite(v):
            skipped += 1
            continue
        vals.append(v)
        grads.append(r.grad if isinstance(r, Residual) else grad_of(r))
    if not vals:
        return AggregateLoss(0.0, {}, 0, skipped)
    loss, dl = loss_terms(np.array(vals), kind, delta)
    n = len(vals)
    out = {}
    for w, g in zip(dl, grads):
        for k, v in g.items():
            out[k] = out.get(k, 0.0) + float(w) * v / n
    return AggregateLoss(float(loss.mean()), out, n, skipped)


class OffPolicyError(ValueError):
    pass


def reverse_kl_gradient(trajs: Sequence, pf, pb, log_reward, baseline: str = "local",
                        running: float = 0.0, eta: float = 0.1, on_policy: bool = True):
    """Score-function gradient of KL(P_F || P_B R / Z).

    ``c(tau) = log P_F(tau) - log R(x) - log P_B(tau | x)``; the gradient is
    ``mean(grad log P_F(tau) (c(tau) - b))``. With ``baseline='global'`` the
    running value is first updated to ``(1 - eta) running + eta mean(c)`` and
    then used as ``b``. Returns ``(gradient, new running baseline, costs)``.
    """
    if not on_policy:
        raise OffPolicyError("the score-function estimator needs on-policy trajectories")
    if not trajs:
        raise ValueError("empty batch")
    logps, costs = [], []
    for traj in trajs:
        states, _ = _split_terminal(traj)
        lp = _lpf(pf, states[-1], TERMINAL)
        lb = 0.0
        for s, s2 in zip(states[:-1], states[1:]):
            lp = lp + _lpf(pf, s, s2)
            lb += value_of(_lpb(pb, s2, s))
        logps.append(lp)
        costs.append(value_of(lp) - log_reward(states[-1]) - lb)
    costs = np.array(costs)
    b_local = float(costs.mean())
    if baseline == "local":
        b, new_running = b_local, running
    elif baseline == "global":
        b = new_running = (1.0 - eta) * running + eta * b_local
    else:
        raise ValueError("baseline must be 'local' or 'global'")
    grad = {}
    K = len(trajs)
    for lp, c in zip(logps, costs):
        w = (c - b) / K
        for k, v in grad_of(lp).items():
            grad[k] = grad.get(k, 0.0) + w * v
    return grad, new_running, costs
