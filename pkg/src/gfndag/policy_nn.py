"""Forward-policy parametrizations, Adam, target copies and checkpoints.

DAG policies share one action layout: index ``u * d + v`` adds the edge
``u -> v`` and index ``d * d`` is the stop action. Their output is a logit
vector of length ``d * d + 1`` turned into a hierarchical distribution: a
sigmoid stop head, then a masked softmax over edges scaled by ``1 - stop``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Dual
from .dag_env import DagState, mask_rows
from .flow_core import TERMINAL, enumerate_states, successors

__all__ = [
    "StateBatch",
    "adj_codes",
    "make_batch",
    "batch_from_rows",
    "hierarchical_log_probs",
    "hierarchical_backward",
    "hierarchical_forward",
    "TabularPolicy",
    "MlpPolicy",
    "TabularFlowModel",
    "log_prob_action",
    "behavior_probs",
    "behavior_policy",
    "epsilon_schedule",
    "AdamState",
    "NonFiniteGradient",
    "optimizer_step",
    "TargetCopy",
    "sync_target",
    "save_checkpoint",
    "load_checkpoint",
]


def adj_codes(rows: np.ndarray, d: int) -> list:
    """Integer code of each adjacency (row ``i`` in bits ``d*i .. d*i + d - 1``).

    Used as the tabular key of a DAG state.
    """
    rows = np.asarray(rows).reshape(-1, d)
    if d * d <= 64:
        shifts = (d * np.arange(d)).astype(np.uint64)
        return (rows.astype(np.uint64) << shifts).sum(axis=1, dtype=np.uint64).tolist()
    return [sum(int(r) << (d * i) for i, r in enumerate(row)) for row in rows.tolist()]


def _bit_matrix(rows: np.ndarray, d: int) -> np.ndarray:
    """(B, d) integer rows -> (B, d*d) booleans, entry [i*d + j] = bit j of row i."""
    return ((rows[:, :, None] >> np.arange(d)) & 1).astype(bool).reshape(len(rows), d * d)


@dataclass
class StateBatch:
    adj: np.ndarray     # (B, d*d) float features
    masks: np.ndarray   # (B, d*d) bool
    keys: list          # adj_codes of the states
    states: list | None = None

    def __len__(self):
        return len(self.keys)


def make_batch(states: Sequence[DagState], max_parents: int | None = None,
               edge_filter=None) -> StateBatch:
    if not states:
        raise ValueError("empty batch")
    d = states[0].d
    adj_rows = np.array([s.adj for s in states], dtype=np.int64).reshape(len(states), d)
    mask_r = np.array([mask_rows(s, max_parents, edge_filter) for s in states],
                      dtype=np.int64).reshape(len(states), d)
    return StateBatch(_bit_matrix(adj_rows, d).astype(float), _bit_matrix(mask_r, d),
                      adj_codes(adj_rows, d), list(states))


def batch_from_rows(adj_rows: np.ndarray, mask_rows_: np.ndarray, d: int) -> StateBatch:
    """Batch from (B, d) integer adjacency and mask rows, without DagState objects."""
    return StateBatch(_bit_matrix(adj_rows, d).astype(float), _bit_matrix(mask_rows_, d),
                      adj_codes(adj_rows, d))


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def hierarchical_log_probs(logits: np.ndarray, masks: np.ndarray):
    """(log P(stop), log P(edge)) with ``-inf`` on masked edges.

    Rows with an all-zero mask stop with probability one.
    """
    logits = np.atleast_2d(logits)
    masks = np.atleast_2d(masks)
    z_stop = logits[:, -1]
    z = np.where(masks, logits[:, :-1], -np.inf)
    any_valid = masks.any(axis=1)
    m = np.where(any_valid, z.max(axis=1, initial=-np.inf), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        shifted = z - m[:, None]
        lse = np.log(np.exp(shifted).sum(axis=1))
        log_soft = shifted - lse[:, None]
    log_stop = np.where(any_valid, _log_sigmoid(z_stop), 0.0)
    log_cont = np.where(any_valid, _log_sigmoid(-z_stop), -np.inf)
    log_edges = np.where(masks, log_soft + log_cont[:, None], -np.inf)
    return log_stop, log_edges


def hierarchical_backward(logits: np.ndarray, masks: np.ndarray,
                          coef_stop: np.ndarray, coef_edges: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(coef_stop*log P(stop) + coef_edges*log P(edge))`` wrt the logits."""
    logits = np.atleast_2d(logits)
    masks = np.atleast_2d(masks)
    coef_edges = np.where(masks, coef_edges, 0.0)
    any_valid = masks.any(axis=1)
    sig = 1.0 / (1.0 + np.exp(-logits[:, -1]))
    z = np.where(masks, logits[:, :-1], -np.inf)
    m = np.where(any_valid, z.max(axis=1, initial=-np.inf), 0.0)
    p = np.exp(z - m[:, None])
    p /= np.where(any_valid, p.sum(axis=1), 1.0)[:, None]
    c_e = coef_edges.sum(axis=1)
    out = np.zeros_like(logits, dtype=float)
    out[:, :-1] = coef_edges - c_e[:, None] * p
    out[:, -1] = np.where(any_valid, coef_stop * (1.0 - sig) - c_e * sig, 0.0)
    return out


class _DagPolicyBase:
    d: int

    @property
    def num_actions(self) -> int:
        return self.d * self.d + 1

    def log_probs(self, states_or_batch, params=None):
        batch = states_or_batch if isinstance(states_or_batch, StateBatch) else make_batch(
            list(states_or_batch), getattr(self, "max_parents", None))
        logits, _ = self.forward(batch, params)
        return hierarchical_log_probs(logits, batch.masks)


class TabularPolicy(_DagPolicyBase):
    """One logit row per visited state, created lazily at zero (uniform policy)."""

    def __init__(self, d: int, max_parents: int | None = None):
        self.d = d
        self.max_parents = max_parents
        self._index = {}
        self._theta = np.zeros((64, d * d + 1))

    def _row(self, key) -> int:
        i = self._index.get(key)
        if i is None:
            i = len(self._index)
            if i >= self._theta.shape[0]:
                grown = np.zeros((2 * self._theta.shape[0], self._theta.shape[1]))
                grown[: self._theta.shape[0]] = self._theta
                self._theta = grown
            self._index[key] = i
        return i

    @property
    def n_rows(self) -> int:
        return len(self._index)

    @property
    def params(self) -> np.ndarray:
        return self._theta[: self.n_rows].reshape(-1)

    @params.setter
    def params(self, value):
        value = np.asarray(value, dtype=float)
        self._theta[: value.size // self._theta.shape[1]] = value.reshape(-1, self._theta.shape[1])

    @property
    def keys(self) -> list:
        return list(self._index)

    def forward(self, batch: StateBatch, params=None):
        rows = np.fromiter((self._row(k) for k in batch.keys), dtype=np.int64, count=len(batch))
        if params is None:
            logits = self._theta[rows].copy()
        else:
            table = np.asarray(params).reshape(-1, self._theta.shape[1])
            logits = np.zeros((len(rows), self._theta.shape[1]))
            ok = rows < table.shape[0]
            logits[ok] = table[rows[ok]]
        return logits, rows

    def backward(self, ctx, dlogits: np.ndarray) -> np.ndarray:
        g = np.zeros((self.n_rows, self._theta.shape[1]))
        np.add.at(g, ctx, dlogits)
        return g.reshape(-1)

    def update(self, ctx, dlogits: np.ndarray, adam: "AdamState") -> None:
        """Row-sparse ("lazy") Adam: only rows present in the batch move.

        Moments of untouched rows are left as they are, which is what makes
        the step cost independent of the table size.
        """
        rows, inv = np.unique(ctx, return_inverse=True)
        g = np.zeros((len(rows), self._theta.shape[1]))
        np.add.at(g, inv, dlogits)
        _check_grad(g)
        n = self._theta.shape[0]
        for name in ("m", "v"):
            cur = getattr(adam, name)
            if cur is None or cur.shape != self._theta.shape:
                new = np.zeros_like(self._theta)
                if cur is not None:
                    cur = cur.reshape(-1, self._theta.shape[1])
                    new[: min(n, len(cur))] = cur[:n]
                setattr(adam, name, new)
        adam.t += 1
        m = adam.m[rows] = adam.beta1 * adam.m[rows] + (1 - adam.beta1) * g
        v = adam.v[rows] = adam.beta2 * adam.v[rows] + (1 - adam.beta2) * g * g
        mhat = m / (1 - adam.beta1 ** adam.t)
        vhat = v / (1 - adam.beta2 ** adam.t)
        self._theta[rows] -= adam.lr * mhat / (np.sqrt(vhat) + adam.eps)


class MlpPolicy(_DagPolicyBase):
    """Flattened adjacency -> two tanh hidden layers -> stop logit + d*d edge logits."""

    def __init__(self, d: int, hidden: Sequence[int] = (128, 128), seed: int = 0,
                 max_parents: int | None = None, logit_scale: float = 1.0):
        self.d = d
        self.max_parents = max_parents
        self.logit_scale = float(logit_scale)
        sizes = [d * d, *hidden, d * d + 1]
        self.shapes = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            self.shapes += [(a, b), (b,)]
        rng = np.random.default_rng(seed)
        chunks = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            lim = 1.0 / math.sqrt(a)
            chunks += [rng.uniform(-lim, lim, size=a * b), rng.uniform(-lim, lim, size=b)]
        self._params = np.concatenate(chunks)
        self.hidden = tuple(hidden)

    @property
    def params(self) -> np.ndarray:
        return self._params

    @params.setter
    def params(self, value):
        self._params = np.array(value, dtype=float)

    def _unpack(self, flat):
        out, o = [], 0
        for shp in self.shapes:
            n = int(np.prod(shp))
            out.append(flat[o:o + n].reshape(shp))
            o += n
        return out

    def forward(self, batch: StateBatch, params=None):
        ws = self._unpack(self._params if params is None else params)
        h = batch.adj
        acts = [h]
        n_layers = len(ws) // 2
        for li in range(n_layers):
            W, b = ws[2 * li], ws[2 * li + 1]
            z = h @ W + b
            h = np.tanh(z) if li < n_layers - 1 else z
            acts.append(h)
        return h * self.logit_scale, (ws, acts)

    def backward(self, ctx, dlogits: np.ndarray) -> np.ndarray:
        ws, acts = ctx
        n_layers = len(ws) // 2
        grads = [None] * len(ws)
        delta = dlogits * self.logit_scale
        for li in range(n_layers - 1, -1, -1):
            grads[2 * li] = acts[li].T @ delta
            grads[2 * li + 1] = delta.sum(axis=0)
            if li:
                delta = (delta @ ws[2 * li].T) * (1.0 - acts[li] ** 2)
        return np.concatenate([g.reshape(-1) for g in grads])

    def update(self, ctx, dlogits: np.ndarray, adam: "AdamState") -> None:
        self.params = optimizer_step(self._params, self.backward(ctx, dlogits), adam)


def hierarchical_forward(policy, state: DagState, mask: np.ndarray | None = None):
    """(stop probability, d x d edge probabilities) at one state."""
    batch = make_batch([state], getattr(policy, "max_parents", None))
    if mask is not None:
        batch.masks = np.asarray(mask, dtype=bool).reshape(1, -1)
    logits, _ = policy.forward(batch)
    ls, le = hierarchical_log_probs(logits, batch.masks)
    return float(np.exp(ls[0])), np.exp(le[0]).reshape(state.d, state.d)


class TabularFlowModel:
    """Flat parameter vector for an explicit environment.

    Sections: one logit (or Q value) per edge, including edges to TERMINAL;
    one value per state (log-flow or soft value); one scalar (log Z).
    Accessors return :class:`~gfndag.autodiff.Dual` values whose gradients
    are keyed by flat parameter index.
    """

    def __init__(self, env, init_scale: float = 0.0, rng: np.random.Generator | None = None):
        self.env = env
        self.states = enumerate_states(env)
        self._succ = {}
        self._edge_off = {}
        o = 0
        for s in self.states:
            succ = successors(env, s)
            self._succ[s] = succ
            self._edge_off[s] = o
            o += len(succ)
        self._state_off = {s: o + i for i, s in enumerate(self.states)}
        o += len(self.states)
        self._z = o
        self.params = np.zeros(o + 1)
        if init_scale:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.params[:] = rng.normal(scale=init_scale, size=o + 1)

    def successors(self, s) -> list:
        return self._succ[s]

    def edge_index(self, s, s2) -> int:
        return self._edge_off[s] + self._succ[s].index(s2)

    def state_index(self, s) -> int:
        return self._state_off[s]

    @property
    def z_index(self) -> int:
        return self._z

    def edge_row(self, s) -> np.ndarray:
        o = self._edge_off[s]
        return self.params[o:o + len(self._succ[s])]

    def log_pf(self, s, s2) -> Dual:
        o = self._edge_off[s]
        row = self.edge_row(s)
        m = row.max()
        p = np.exp(row - m)
        p /= p.sum()
        j = self._succ[s].index(s2)
        grad = {o + k: -float(p[k]) for k in range(len(row))}
        grad[o + j] += 1.0
        return Dual(math.log(p[j]), grad)

    def edge_param(self, s, s2) -> Dual:
        i = self.edge_index(s, s2)
        return Dual(self.params[i], {i: 1.0})

    def state_param(self, s) -> Dual:
        i = self._state_off[s]
        return Dual(self.params[i], {i: 1.0})

    log_F = state_param

    def log_Z(self) -> Dual:
        return Dual(self.params[self._z], {self._z: 1.0})

    def __call__(self, s) -> dict:
        row = self.edge_row(s)
        lp = row - (row.max() + math.log(np.exp(row - row.max()).sum()))
        return dict(zip(self._succ[s], lp.tolist()))

    def set_policy(self, policy) -> None:
        """Load log-probabilities from another policy as logits."""
        for s in self.states:
            dist = policy(s)
            o = self._edge_off[s]
            for k, s2 in enumerate(self._succ[s]):
                self.params[o + k] = dist.get(s2, -1e9)


def log_prob_action(policy, state, action):
    """``(log p(action | state), gradient wrt the policy's flat parameters)``.

    ``action`` is ``(u, v)`` or ``TERMINAL`` for DAG policies, and a successor
    key for :class:`TabularFlowModel`.
    """
    if isinstance(policy, TabularFlowModel):
        lp = policy.log_pf(state, action)
        g = np.zeros_like(policy.params)
        for k, v in lp.grad.items():
            g[k] += v
        return lp.value, g
    d = state.d
    batch = make_batch([state], policy.max_parents)
    logits, ctx = policy.forward(batch)
    ls, le = hierarchical_log_probs(logits, batch.masks)
    cs = np.zeros(1)
    ce = np.zeros((1, d * d))
    if action is TERMINAL:
        lp = ls[0]
        cs[0] = 1.0
    else:
        u, v = action
        if not batch.masks[0, u * d + v]:
            raise ValueError(f"action {u}->{v} is masked")
        lp = le[0, u * d + v]
        ce[0, u * d + v] = 1.0
    dl = hierarchical_backward(logits, batch.masks, cs, ce)
    return float(lp), policy.backward(ctx, dl)


def behavior_probs(probs: np.ndarray, valid: np.ndarray, epsilon: float = 0.0,
                   temperature: float = 1.0) -> np.ndarray:
    """((1 - eps) p + eps * uniform-over-valid) ** (1 / temperature), renormalized."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    valid = np.atleast_2d(np.asarray(valid, dtype=bool))
    if not 0.0 <= epsilon <= 1.0 or not temperature > 0:
        raise ValueError("epsilon must lie in [0, 1] and temperature must be positive")
    u = valid / valid.sum(axis=1, keepdims=True)
    q = (1.0 - epsilon) * np.where(valid, probs, 0.0) + epsilon * u
    if temperature != 1.0:
        q = np.where(valid, q, 0.0) ** (1.0 / temperature)
    return q / q.sum(axis=1, keepdims=True)


def behavior_policy(policy, epsilon: float = 0.0, temperature: float = 1.0):
    """Batch function ``StateBatch -> (B, d*d + 1)`` action probabilities (stop last)."""

    def probs(batch: StateBatch) -> np.ndarray:
        ls, le = policy.log_probs(batch)
        p = np.concatenate([np.exp(le), np.exp(ls)[:, None]], axis=1)
        valid = np.concatenate([batch.masks, np.ones((len(batch), 1), bool)], axis=1)
        return behavior_probs(p, valid, epsilon, temperature)

    return probs


def epsilon_schedule(step: int, total: int, start: float = 1.0, end: float = 0.1) -> float:
    """Linear from ``start`` to ``end`` over the first half of training, then constant."""
    half = max(total // 2, 1)
    if step >= half:
        return end
    return start + (end - start) * step / half


class NonFiniteGradient(FloatingPointError):
    pass


def _check_grad(grads):
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient(f"{int(np.sum(~np.isfinite(grads)))} non-finite gradient entries")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0


def optimizer_step(params: np.ndarray, grads: np.ndarray, adam: AdamState) -> np.ndarray:
    """One Adam step. Moments grow with zero padding when the parameter vector grows."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {params.shape}")
    _check_grad(grads)
    n = params.size
    for name in ("m", "v"):
        cur = getattr(adam, name)
        if cur is None or cur.size != n:
            new = np.zeros(n)
            if cur is not None:
                new[: min(n, cur.size)] = cur[:n]
            setattr(adam, name, new)
    adam.t += 1
    adam.m = adam.beta1 * adam.m + (1 - adam.beta1) * grads
    adam.v = adam.beta2 * adam.v + (1 - adam.beta2) * grads * grads
    mhat = adam.m / (1 - adam.beta1 ** adam.t)
    vhat = adam.v / (1 - adam.beta2 ** adam.t)
    return params - adam.lr * mhat / (np.sqrt(vhat) + adam.eps)


@dataclass
class TargetCopy:
    params: np.ndarray
    period: int = 100
    synced_at: int = 0


def sync_target(policy, target: TargetCopy | None, step: int, period: int = 100) -> TargetCopy:
    if target is None:
        return TargetCopy(np.array(policy.params, copy=True), period, step)
    if step % target.period == 0:
        return TargetCopy(np.array(policy.params, copy=True), target.period, step)
    return target


def save_checkpoint(policy, path, meta: dict | None = None) -> None:
    """Flat float64 binary plus a JSON sidecar with shapes and metadata."""
    path = Path(path)
    params = np.asarray(policy.params, dtype="<f8")
    path.with_suffix(".bin").write_bytes(params.tobytes())
    info = {"kind": type(policy).__name__, "d": getattr(policy, "d", None),
            "size": int(params.size), "meta": meta or {}}
    if isinstance(policy, TabularPolicy):
        info["keys"] = [str(k) for k in policy.keys]
        info["max_parents"] = policy.max_parents
    elif isinstance(policy, MlpPolicy):
        info["hidden"] = list(policy.hidden)
        info["max_parents"] = policy.max_parents
        info["logit_scale"] = policy.logit_scale
    extra = getattr(policy, "log_z", None)
    if extra is not None:
        info["log_z"] = float(extra)
    path.with_suffix(".json").write_text(json.dumps(info, indent=2, sort_keys=True))


def load_checkpoint(path):
    path = Path(path)
    info = json.loads(path.with_suffix(".json").read_text())
    params = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8").copy()
    if info["kind"] == "TabularPolicy":
        pol = TabularPolicy(info["d"], info.get("max_parents"))
        for k in info["keys"]:
            pol._row(int(k))
        pol.params = params
    elif info["kind"] == "MlpPolicy":
        pol = MlpPolicy(info["d"], info["hidden"], max_parents=info.get("max_parents"),
                        logit_scale=info.get("logit_scale", 1.0))
        pol.params = params
    else:
        raise ValueError(f"cannot restore a {info['kind']} checkpoint")
    if "log_z" in info:
        pol.log_z = info["log_z"]
    return pol, info
