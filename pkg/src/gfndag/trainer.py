"""Training loops: trajectory balance, modified detailed balance, soft Q-learning.

DAG training runs on :class:`~gfndag.dag_env.BatchDagEnv` with one batched
policy evaluation per environment step. Small explicit environments use a
:class:`~gfndag.policy_nn.TabularFlowModel` and dual-number gradients.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import gammaln, logsumexp

from .dag_env import BatchDagEnv, DagEnv, DagState, _bits
from .exact_eval import DagSpace, jsd, policy_tables, tb_residual_range, terminating_log_probs
from .flow_core import TERMINAL, make_rng, successors, topological_order
from .objectives import loss_aggregate, loss_terms, tb_residual
from .policy_nn import (
    AdamState,
    TabularFlowModel,
    batch_from_rows,
    behavior_probs,
    epsilon_schedule,
    hierarchical_backward,
    hierarchical_log_probs,
    optimizer_step,
    sync_target,
)
from .scores import UniformPrior

__all__ = [
    "TrainConfig",
    "ReplayBuffer",
    "ScoreBinding",
    "ExactTarget",
    "TrainResult",
    "DivergenceError",
    "train_tb",
    "train_modified_db",
    "soft_value_iteration",
    "SoftValues",
    "train_sql",
    "sample_dags",
    "write_trace_csv",
]


class DivergenceError(FloatingPointError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class TrainConfig:
    steps: int = 50_000
    batch_size: int = 256
    n_envs: int = 16
    lr: float = 1e-2
    lr_logz: float = 1e-1
    eps_start: float = 1.0
    eps_end: float = 0.1
    temperature: float = 1.0
    loss: str = "huber"
    huber_delta: float = 1.0
    target_period: int = 100
    use_target: bool = True
    buffer_capacity: int = 100_000
    prefill: int = 1_000
    off_policy: bool = True
    objective: str = "tb"            # tb | reverse_kl
    baseline: str = "local"          # local | global (reverse_kl only)
    baseline_eta: float = 0.1
    seed: int = 0
    eval_every: int = 1_000
    target_jsd: float | None = None
    max_parents: int | None = None

    def __post_init__(self):
        for name in ("steps", "batch_size", "n_envs", "target_period", "buffer_capacity", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "lr_logz", "huber_delta", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.eps_end <= 1.0 and 0.0 <= self.eps_start <= 1.0):
            raise ValueError("epsilon values must lie in [0, 1]")
        if self.loss not in ("squared", "huber"):
            raise ValueError("loss must be 'squared' or 'huber'")
        if self.objective not in ("tb", "reverse_kl"):
            raise ValueError("objective must be 'tb' or 'reverse_kl'")
        if self.baseline not in ("local", "global"):
            raise ValueError("baseline must be 'local' or 'global'")

    def to_dict(self) -> dict:
        return asdict(self)


class ReplayBuffer:
    """FIFO ring buffer of DAG transitions stored as integer rows."""

    def __init__(self, capacity: int, d: int):
        self.capacity, self.d = int(capacity), d
        self.adj = np.zeros((capacity, d), dtype=np.int64)
        self.mask = np.zeros((capacity, d), dtype=np.int64)
        self.next_adj = np.zeros((capacity, d), dtype=np.int64)
        self.next_mask = np.zeros((capacity, d), dtype=np.int64)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.delta = np.zeros(capacity)
        self.log_pb = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, adj, mask, action, next_adj, next_mask, delta, log_pb) -> None:
        n = len(action)
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.adj[idx], self.mask[idx], self.action[idx] = adj, mask, action
        self.next_adj[idx], self.next_mask[idx] = next_adj, next_mask
        self.delta[idx], self.log_pb[idx] = delta, log_pb
        self.cursor = int((self.cursor + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if self.size == 0:
            raise ValueError("empty buffer")
        idx = rng.choice(self.size, size=min(batch_size, self.size), replace=False)
        return {k: getattr(self, k)[idx] for k in
                ("adj", "mask", "action", "next_adj", "next_mask", "delta", "log_pb")}


class ScoreBinding:
    """Local scores keyed by (child, parent bitmask), plus the graph prior."""

    def __init__(self, cache, d: int, prior=UniformPrior()):
        self.cache, self.d, self.prior = cache, d, prior
        self._t = {}

    def local(self, child: int, pmask: int) -> float:
        k = (child, pmask)
        v = self._t.get(k)
        if v is None:
            v = self._t[k] = float(self.cache(child, list(_bits(pmask))))
        return v

    def delta(self, u: np.ndarray, v: np.ndarray, pmask: np.ndarray) -> np.ndarray:
        """log R(G + u->v) - log R(G) given the parents of ``v`` in G."""
        out = np.empty(len(u))
        for i, (a, b, m) in enumerate(zip(u.tolist(), v.tolist(), pmask.tolist())):
            out[i] = self.local(b, m | (1 << a)) - self.local(b, m) + self.prior.delta(None, (a, b))
        return out

    def log_reward_rows(self, adj: np.ndarray) -> np.ndarray:
        d = self.d
        out = np.empty(len(adj))
        for i, rows in enumerate(adj.tolist()):
            pm = [0] * d
            for p, r in enumerate(rows):
                for c in _bits(r):
                    pm[c] |= 1 << p
            tot = sum(self.local(c, pm[c]) for c in range(d))
            if not isinstance(self.prior, UniformPrior):
                tot += self.prior(DagState(d, tuple(rows), ()))
            out[i] = tot
        return out


@dataclass
class ExactTarget:
    """Enumerated space with exact log-rewards, for in-loop evaluation."""

    space: DagSpace
    log_rewards: np.ndarray

    @classmethod
    def build(cls, binding: ScoreBinding, max_parents=None) -> "ExactTarget":
        space = DagSpace(binding.d, max_parents)
        rows = np.array([s.adj for s in space.states], dtype=np.int64)
        return cls(space, binding.log_reward_rows(rows))

    @property
    def log_posterior(self) -> np.ndarray:
        return self.log_rewards - logsumexp(self.log_rewards)

    def evaluate(self, policy, log_z: float | None = None) -> dict:
        ls, le = policy_tables(self.space, policy)
        lt = terminating_log_probs(self.space, ls, le)
        lp = self.log_posterior
        out = {"jsd": jsd(np.exp(lp), np.exp(lt))}
        if log_z is not None:
            lo, hi = tb_residual_range(self.space, ls, le, self.log_rewards, log_z)
            out["max_abs_tb"] = max(abs(lo), abs(hi))
            out["logz_err"] = abs(log_z - float(logsumexp(self.log_rewards)))
            out["max_logp_err"] = float(np.max(np.abs(lt - lp)))
            # these hold for any policy; a violation means a bookkeeping bug
            m = out["max_abs_tb"] + 1e-9
            out["bounds_ok"] = out["logz_err"] <= m and out["max_logp_err"] <= 2 * m
            if not out["bounds_ok"]:
                raise AssertionError(f"TB convergence bound violated: {out}")
        return out


@dataclass
class TrainResult:
    policy: object
    log_z: float
    trace: list
    config: TrainConfig
    steps_done: int
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)

    def evaluations(self) -> list:
        return [row for row in self.trace if "jsd" in row]


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def _bits_of(rows: np.ndarray, d: int) -> np.ndarray:
    return ((rows[:, :, None] >> np.arange(d)) & 1).astype(bool).reshape(len(rows), d * d)


def _behavior(policy, env: BatchDagEnv, masks: np.ndarray, eps: float, temp: float):
    batch = batch_from_rows(env.adj, masks, env.d)
    ls, le = policy.log_probs(batch)
    p = np.concatenate([np.exp(le), np.exp(ls)[:, None]], axis=1)
    valid = np.concatenate([batch.masks, np.ones((len(ls), 1), bool)], axis=1)
    if eps == 0.0 and temp == 1.0:
        return p
    return behavior_probs(p, valid, eps, temp)


def _check_finite(value, trace, what):
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"non-finite {what}", trace)


def train_modified_db(d: int, binding: ScoreBinding, policy, config: TrainConfig,
                      exact: ExactTarget | None = None, callback: Callable | None = None) -> TrainResult:
    """Off-policy modified-DB training with a replay buffer and a target stop head."""
    rng_roll = make_rng(config.seed, 1)
    rng_buf = make_rng(config.seed, 2)
    env = BatchDagEnv(config.n_envs, d, config.max_parents)
    buf = ReplayBuffer(config.buffer_capacity, d)
    adam = AdamState(lr=config.lr)
    target = sync_target(policy, None, 0, config.target_period)
    trace, stopped, step = [], False, 0
    A = d * d

    def rollout(eps):
        masks = env.mask_rows()
        probs = _behavior(policy, env, masks, eps, config.temperature)
        a = _sample_rows(probs, rng_roll)
        stop = a == A
        go = np.flatnonzero(~stop)
        if len(go):
            u, v = a[go] // d, a[go] % d
            pm = ((env.adj[go] >> v[:, None]) & 1) @ (np.int64(1) << np.arange(d))
            delta = binding.delta(u, v, pm)
            g_adj, g_mask = env.adj[go].copy(), masks[go]
            env.step(go, u, v)
            n_edges = env.num_edges()[go]
            buf.add(g_adj, g_mask, a[go], env.adj[go].copy(), env.mask_rows()[go], delta,
                    -np.log(n_edges.astype(float)))
        env.reset(np.flatnonzero(stop))

    while len(buf) < min(config.prefill, config.buffer_capacity):
        rollout(config.eps_start)

    for step in range(1, config.steps + 1):
        eps = epsilon_schedule(step - 1, config.steps, config.eps_start, config.eps_end)
        rollout(eps)
        B = buf.sample(config.batch_size, rng_buf)
        b0 = batch_from_rows(B["adj"], B["mask"], d)
        b1 = batch_from_rows(B["next_adj"], B["next_mask"], d)
        logits0, ctx = policy.forward(b0)
        tparams = target.params if config.use_target else None
        logits1, _ = policy.forward(b1, tparams)
        ls0, le0 = hierarchical_log_probs(logits0, b0.masks)
        ls1, _ = hierarchical_log_probs(logits1, b1.masks)
        n = len(ls0)
        lpe = le0[np.arange(n), B["action"]]
        res = B["delta"] + B["log_pb"] + ls0 - lpe - ls1
        _check_finite(res, trace, "modified-DB residual")
        loss, dl = loss_terms(res, config.loss, config.huber_delta)
        w = dl / n
        ce = np.zeros((n, A))
        ce[np.arange(n), B["action"]] = -w
        policy.update(ctx, hierarchical_backward(logits0, b0.masks, w, ce), adam)
        if config.use_target:
            target = sync_target(policy, target, step)
        row = {"step": step, "loss": float(loss.mean()), "mean_abs_residual": float(np.abs(res).mean()),
               "epsilon": eps}
        if exact is not None and (step % config.eval_every == 0 or step == config.steps):
            row.update(exact.evaluate(policy))
            if callback is not None:
                callback(step, policy, row)
            if config.target_jsd is not None and row["jsd"] <= config.target_jsd:
                trace.append(row)
                stopped = True
                break
        trace.append(row)
    return TrainResult(policy, float("nan"), trace, config, step, stopped)


def _dag_trajectories(policy, d, n, eps, temp, max_parents, rng):
    """Roll out ``n`` complete trajectories; returns per-step records and final rows."""
    env = BatchDagEnv(n, d, max_parents)
    alive = np.ones(n, dtype=bool)
    rec_adj, rec_mask, rec_act, rec_traj = [], [], [], []
    A = d * d
    while alive.any():
        idx = np.flatnonzero(alive)
        masks = env.mask_rows()
        sub = BatchDagEnv(len(idx), d)
        sub.adj, sub.ct = env.adj[idx], env.ct[idx]
        probs = _behavior(policy, sub, masks[idx], eps, temp)
        a = _sample_rows(probs, rng)
        rec_adj.append(env.adj[idx].copy())
        rec_mask.append(masks[idx])
        rec_act.append(a)
        rec_traj.append(idx)
        go = a < A
        if go.any():
            env.step(idx[go], a[go] // d, a[go] % d)
        alive[idx[~go]] = False
    return (np.concatenate(rec_adj), np.concatenate(rec_mask), np.concatenate(rec_act),
            np.concatenate(rec_traj), env.adj.copy())


def sample_dags(policy, d: int, n: int, rng: np.random.Generator, max_parents=None) -> np.ndarray:
    """(n, d) adjacency rows of DAGs sampled from the policy."""
    return _dag_trajectories(policy, d, n, 0.0, 1.0, max_parents, rng)[4]


def _train_tb_dag(d, binding, policy, config, exact, callback, log_z0):
    rng = make_rng(config.seed, 1)
    adam = AdamState(lr=config.lr)
    log_z = None if log_z0 is None else np.array([float(log_z0)])
    running = None
    trace, stopped, step = [], False, 0
    A = d * d
    on_policy = not config.off_policy
    if config.objective == "reverse_kl" and not on_policy:
        raise ValueError("reverse-KL training needs on-policy rollouts (off_policy=False)")
    for step in range(1, config.steps + 1):
        if on_policy:
            eps, temp = 0.0, 1.0
        else:
            eps, temp = epsilon_schedule(step - 1, config.steps, config.eps_start, config.eps_end), \
                config.temperature
        adj, mask, act, traj, final = _dag_trajectories(policy, d, config.batch_size, eps, temp,
                                                        config.max_parents, rng)
        batch = batch_from_rows(adj, mask, d)
        logits, ctx = policy.forward(batch)
        ls, le = hierarchical_log_probs(logits, batch.masks)
        m = len(act)
        stop = act == A
        lp = np.where(stop, ls, le[np.arange(m), np.minimum(act, A - 1)])
        nb = config.batch_size
        logpf = np.zeros(nb)
        np.add.at(logpf, traj, lp)
        k = (final[:, :, None] >> np.arange(d) & 1).sum(axis=(1, 2))
        log_pb = -gammaln(k + 1.0)
        log_r = binding.log_reward_rows(final)
        cost = logpf - log_r - log_pb
        _check_finite(cost, trace, "trajectory log-probability")
        if log_z is None:
            # data-dependent start: the first batch's estimate of -E[cost]
            log_z = np.array([-float(cost.mean())])
        if running is None:
            running = float(cost.mean())
        if config.objective == "tb":
            res = log_z[0] + cost
            loss, dl = loss_terms(res, config.loss, config.huber_delta)
            w = dl / nb
            gz = np.array([w.sum()])
            # plain SGD: with the squared loss this is the moving average
            # log Z <- (1 - lr) log Z + lr * (-mean cost), i.e. a global baseline
            log_z = log_z - config.lr_logz * gz
            loss_val = float(loss.mean())
        else:
            b_local = float(cost.mean())
            if config.baseline == "local":
                b = b_local
            else:
                b = running = (1 - config.baseline_eta) * running + config.baseline_eta * b_local
            w = (cost - b) / nb
            log_z = np.array([-b])
            res = cost - b
            loss_val = float(np.mean(cost))
        wt = w[traj]
        cs = np.where(stop, wt, 0.0)
        ce = np.zeros((m, A))
        ce[np.flatnonzero(~stop), act[~stop]] = wt[~stop]
        policy.update(ctx, hierarchical_backward(logits, batch.masks, cs, ce), adam)
        row = {"step": step, "loss": loss_val, "mean_abs_residual": float(np.abs(res).mean()),
               "log_z": float(log_z[0])}
        if exact is not None and (step % config.eval_every == 0 or step == config.steps):
            row.update(exact.evaluate(policy, float(log_z[0])))
            if callback is not None:
                callback(step, policy, row)
            if config.target_jsd is not None and row["jsd"] <= config.target_jsd:
                trace.append(row)
                stopped = True
                break
        trace.append(row)
    return TrainResult(policy, float(log_z[0]), trace, config, step, stopped)


def _train_tb_explicit(env, log_reward, model: TabularFlowModel, config, callback):
    rng = make_rng(config.seed, 1)
    adam = AdamState(lr=config.lr)
    pb = _uniform_pb(env)
    trace = []
    zi = model.z_index
    for step in range(1, config.steps + 1):
        eps = (0.0 if not config.off_policy else
               epsilon_schedule(step - 1, config.steps, config.eps_start, config.eps_end))
        trajs = [_sample_explicit(env, model, eps, rng) for _ in range(config.batch_size)]
        res = [tb_residual(t, model.log_Z(), model, pb, log_reward) for t in trajs]
        agg = loss_aggregate(res, config.loss, config.huber_delta)
        g = np.zeros_like(model.params)
        for k, v in agg.grad.items():
            g[k] += v
        _check_finite(g, trace, "gradient")
        scale = np.ones_like(g)
        scale[zi] = config.lr_logz / config.lr
        new = optimizer_step(model.params, g, adam)
        model.params = model.params + (new - model.params) * scale
        row = {"step": step, "loss": agg.value,
               "mean_abs_residual": float(np.mean([abs(r.value) for r in res])),
               "log_z": float(model.params[zi])}
        if callback is not None and step % config.eval_every == 0:
            callback(step, model, row)
        trace.append(row)
    return TrainResult(model, float(model.params[zi]), trace, config, config.steps)


def _uniform_pb(env):
    cache = {}

    def pb(s2):
        r = cache.get(s2)
        if r is None:
            pa = list(env.parents(s2))
            r = cache[s2] = {p: -math.log(len(pa)) for p in pa}
        return r

    return pb


def _sample_explicit(env, model, eps, rng):
    s = env.initial
    traj = [s]
    while True:
        succ = model.successors(s)
        row = model.edge_row(s)
        p = np.exp(row - row.max())
        p /= p.sum()
        if eps:
            p = (1 - eps) * p + eps / len(p)
        nxt = succ[int(rng.choice(len(p), p=p))]
        if nxt is TERMINAL:
            return traj
        traj.append(nxt)
        s = nxt


def train_tb(env, reward, policy, config: TrainConfig, exact: ExactTarget | None = None,
             callback: Callable | None = None, log_z0: float | None = None) -> TrainResult:
    """Trajectory-balance training (or its reverse-KL counterpart) with uniform P_B.

    For DAGs pass ``env`` as a :class:`~gfndag.dag_env.DagEnv` or ``d``,
    ``reward`` as a :class:`ScoreBinding` and a tabular or MLP policy. For an
    explicit environment pass ``reward`` as a log-reward callable (or None)
    and a :class:`~gfndag.policy_nn.TabularFlowModel`.

    ``log_z0=None`` starts log Z at the first batch's mean of
    ``log R + log P_B - log P_F`` instead of at zero.
    """
    if isinstance(env, (int, DagEnv)):
        d = env if isinstance(env, int) else env.d
        return _train_tb_dag(d, reward, policy, config, exact, callback, log_z0)
    log_reward = reward if reward is not None else env.log_reward
    return _train_tb_explicit(env, log_reward, policy, config, callback)


@dataclass
class SoftValues:
    """Soft Q and V tables; calling it gives log pi(s'|s) = (Q(s, s') - V(s)) / alpha."""

    q: dict
    v: dict
    alpha: float
    succ: dict = field(default_factory=dict, repr=False)

    def __call__(self, s) -> dict:
        return {s2: (self.q[(s, s2)] - self.v[s]) / self.alpha for s2 in self.succ[s]}


def soft_value_iteration(env, reward, alpha: float = 1.0) -> SoftValues:
    """Exact soft Q and V in one reverse-topological sweep; V(TERMINAL) = 0."""
    order = topological_order(env)
    q, v, succ = {}, {}, {}
    for s in reversed(order):
        nxt = successors(env, s)
        succ[s] = nxt
        qs = []
        for s2 in nxt:
            val = reward(s, s2) + (0.0 if s2 is TERMINAL else v[s2])
            q[(s, s2)] = val
            qs.append(val / alpha)
        v[s] = alpha * float(logsumexp(qs))
    return SoftValues(q, v, alpha, succ)


def train_sql(env, reward, alpha: float, config: TrainConfig, model: TabularFlowModel | None = None):
    """Tabular soft Q-learning with an epsilon-greedy softmax behavior policy.

    ``config.steps`` counts transitions and ``config.lr`` is the step size.
    Returns the Q-table model; calling it gives the softmax(Q / alpha) policy.
    """
    model = model if model is not None else TabularFlowModel(env)
    rng = make_rng(config.seed, 1)
    s = env.initial
    trace = []

    def v_of(s2):
        if s2 is TERMINAL:
            return 0.0
        row = model.edge_row(s2) / alpha
        return alpha * float(logsumexp(row))

    for step in range(config.steps):
        eps = epsilon_schedule(step, config.steps, config.eps_start, config.eps_end)
        succ = model.successors(s)
        row = model.edge_row(s) / alpha
        p = np.exp(row - row.max())
        p = (1 - eps) * p / p.sum() + eps / len(p)
        s2 = succ[int(rng.choice(len(p), p=p))]
        i = model.edge_index(s, s2)
        delta = model.params[i] - (reward(s, s2) + v_of(s2))
        model.params[i] -= config.lr * delta
        trace.append(abs(delta))
        s = env.initial if s2 is TERMINAL else s2

    def policy(st):
        row = model.edge_row(st) / alpha
        lp = row - logsumexp(row)
        return dict(zip(model.successors(st), lp.tolist()))

    return TrainResult(policy, float("nan"), trace, config, config.steps, extra={"model": model})


def write_trace_csv(trace: list, path) -> None:
    keys = []
    for row in trace:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(trace)
