"""Pointed DAGs, trajectories, edge flows and exact terminating-state evaluation.

States are identified by opaque byte keys. The terminal state is the
``TERMINAL`` sentinel, which is not a ``bytes`` object and therefore can never
collide with the key of an in-space state.

A forward policy is any callable ``policy(s) -> {next: log_prob}`` whose
support is a subset of the children of ``s`` (plus ``TERMINAL`` when ``s`` is
terminating). A backward policy has the same shape, ``policy_b(s') -> {s:
log_prob}``, over the parents of ``s'``.
"""
from __future__ import annotations

import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Protocol, Sequence

import numpy as np

__all__ = [
    "TERMINAL",
    "EnvGraph",
    "EnumerationBudgetExceeded",
    "PolicySupportError",
    "ValidationReport",
    "EdgeFlowTable",
    "make_rng",
    "successors",
    "enumerate_states",
    "topological_order",
    "validate_env",
    "enumerate_trajectories",
    "sample_trajectory",
    "trajectory_logprob",
    "construct_flow_from_reward",
    "flow_residual_report",
    "terminal_balance",
    "policy_from_flow",
    "terminating_log_distribution_dp",
    "terminating_distribution_dp",
    "uniform_backward_policy",
    "is_markovian_table",
]


class _Terminal:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "TERMINAL"

    def __reduce__(self):
        return (_Terminal, ())

    def __lt__(self, other):
        # sorts after every in-space key
        return False

    def __gt__(self, other):
        return other is not self


TERMINAL = _Terminal()

Key = Hashable
LogPolicy = Callable[[Key], Mapping[Key, float]]


class EnvGraph(Protocol):
    """Contract for an enumerable pointed DAG."""

    initial: Key

    def children(self, s: Key) -> Sequence[Key]: ...

    def parents(self, s: Key) -> Sequence[Key]: ...

    def is_terminating(self, s: Key) -> bool: ...


class EnumerationBudgetExceeded(RuntimeError):
    pass


class PolicySupportError(ValueError):
    pass


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; each stream index gives an independent stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def successors(env: EnvGraph, s: Key) -> list:
    out = list(env.children(s))
    if env.is_terminating(s):
        out.append(TERMINAL)
    return out


def enumerate_states(env: EnvGraph, max_states: int = 1_000_000) -> list:
    """BFS from the initial state, children visited in key order."""
    seen = {env.initial}
    order = [env.initial]
    head = 0
    while head < len(order):
        s = order[head]
        head += 1
        for c in sorted(env.children(s)):
            if c not in seen:
                seen.add(c)
                order.append(c)
                if len(order) > max_states:
                    raise EnumerationBudgetExceeded(
                        f"more than {max_states} states reachable from the initial state")
    return order


def _kahn(env: EnvGraph, states: Sequence[Key]):
    rank = {s: i for i, s in enumerate(states)}
    indeg = dict.fromkeys(states, 0)
    for s in states:
        for c in env.children(s):
            if c in indeg:
                indeg[c] += 1
    heap = [rank[s] for s in states if indeg[s] == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        s = states[heapq.heappop(heap)]
        out.append(s)
        for c in env.children(s):
            if c in indeg:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(heap, rank[c])
    leftover = [s for s in states if indeg[s] > 0]
    return out, leftover


def topological_order(env: EnvGraph, states: Sequence[Key] | None = None,
                      max_states: int = 1_000_000) -> list:
    """Topological order; ties broken by BFS rank."""
    if states is None:
        states = enumerate_states(env, max_states)
    order, leftover = _kahn(env, states)
    if leftover:
        raise ValueError(f"state graph has a cycle through {len(leftover)} states")
    return order


@dataclass
class ValidationReport:
    visited: int
    cycles: list = field(default_factory=list)
    unreachable: list = field(default_factory=list)
    dead_ends: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.cycles or self.unreachable or self.dead_ends)

    def __bool__(self):
        # truthy when there is something to report
        return not self.ok


def validate_env(env: EnvGraph, max_states: int = 1_000_000) -> ValidationReport:
    states = enumerate_states(env, max_states)
    seen = set(states)
    _, leftover = _kahn(env, states)
    unreachable = sorted({p for s in states for p in env.parents(s) if p not in seen})
    # backward reachability from terminating states
    reach = set()
    stack = [s for s in states if env.is_terminating(s)]
    reach.update(stack)
    while stack:
        s = stack.pop()
        for p in env.parents(s):
            if p in seen and p not in reach:
                reach.add(p)
                stack.append(p)
    dead = [s for s in states if s not in reach]
    return ValidationReport(visited=len(states), cycles=leftover,
                            unreachable=unreachable, dead_ends=dead)


def enumerate_trajectories(env: EnvGraph, max_count: int = 1_000_000) -> list:
    """All complete trajectories, depth-first in key order."""
    out = []

    def rec(path):
        s = path[-1]
        for c in sorted(env.children(s)):
            rec(path + (c,))
        if env.is_terminating(s):
            out.append(path + (TERMINAL,))
            if len(out) > max_count:
                raise EnumerationBudgetExceeded(f"more than {max_count} trajectories")

    rec((env.initial,))
    return out


def sample_trajectory(env: EnvGraph, policy: LogPolicy, rng: np.random.Generator,
                      max_len: int = 100_000) -> tuple:
    s = env.initial
    traj = [s]
    for _ in range(max_len):
        dist = policy(s)
        nxt = list(dist.keys())
        logp = np.fromiter(dist.values(), float, len(nxt))
        p = np.exp(logp - logp.max())
        s2 = nxt[rng.choice(len(nxt), p=p / p.sum())]
        allowed = env.is_terminating(s) if s2 is TERMINAL else s2 in set(env.children(s))
        if not allowed:
            raise PolicySupportError(f"policy moved from {s!r} to non-child {s2!r}")
        traj.append(s2)
        if s2 is TERMINAL:
            return tuple(traj)
        s = s2
    raise RuntimeError("trajectory did not terminate")


def trajectory_logprob(traj: Sequence[Key], policy: LogPolicy,
                       direction: str = "forward") -> float:
    """Sum of log-probabilities of the steps of ``traj``.

    Returns ``-inf`` when a step has zero probability under ``policy``.
    The backward direction omits the final ``x -> TERMINAL`` step.
    """
    total = 0.0
    if direction == "forward":
        for s, s2 in zip(traj[:-1], traj[1:]):
            total += policy(s).get(s2, -math.inf)
    elif direction == "backward":
        inner = traj[:-1] if traj[-1] is TERMINAL else traj
        for s, s2 in zip(inner[:-1], inner[1:]):
            total += policy(s2).get(s, -math.inf)
    else:
        raise ValueError("direction must be 'forward' or 'backward'")
    return float(total)


class EdgeFlowTable(Mapping):
    """Non-negative flow per edge ``(s, s')``; ``s'`` may be ``TERMINAL``."""

    def __init__(self, entries: Mapping[tuple, float], initial: Key):
        self._f = {}
        for k, v in entries.items():
            v = float(v)
            if not v >= 0.0:
                raise ValueError(f"negative flow on edge {k!r}")
            self._f[k] = v
        self.initial = initial
        self._out = defaultdict(float)
        self._in = defaultdict(float)
        for (s, s2), v in self._f.items():
            self._out[s] += v
            self._in[s2] += v

    def __getitem__(self, k):
        return self._f[k]

    def __iter__(self):
        return iter(self._f)

    def __len__(self):
        return len(self._f)

    def outflow(self, s: Key) -> float:
        return self._out.get(s, 0.0)

    def inflow(self, s: Key) -> float:
        return self._in.get(s, 0.0)

    def state_flow(self, s: Key) -> float:
        return self.outflow(s) if s == self.initial else self.inflow(s)

    @property
    def total_flow(self) -> float:
        return self.outflow(self.initial)

    def sources(self) -> list:
        return list(self._out)


def construct_flow_from_reward(env: EnvGraph, reward: Mapping[Key, float],
                               max_states: int = 1_000_000) -> EdgeFlowTable:
    """Edge flow with ``F(x -> TERMINAL) = R(x)``, built backwards.

    Each state's outflow is split equally among its incoming edges.
    """
    order = topological_order(env, max_states=max_states)
    flows = {}
    out = defaultdict(float)
    for s in order:
        if env.is_terminating(s):
            r = float(reward[s])
            if not r > 0:
                raise ValueError(f"reward must be positive, got {r} at {s!r}")
            flows[(s, TERMINAL)] = r
            out[s] += r
    for s in reversed(order):
        if s == env.initial:
            continue
        pa = list(env.parents(s))
        share = out[s] / len(pa)
        for p in pa:
            flows[(p, s)] = share
            out[p] += share
    return EdgeFlowTable(flows, env.initial)


def flow_residual_report(flow: EdgeFlowTable, env: EnvGraph,
                         reward: Mapping[Key, float] | None = None,
                         max_states: int = 1_000_000) -> dict:
    """``log(inflow) - log(outflow [+ R])`` at every non-initial state.

    With ``reward`` given, the terminating edge flow is replaced by ``R(s)``
    (boundary condition); otherwise the table's ``s -> TERMINAL`` entry is used.
    """
    report = {}
    for s in enumerate_states(env, max_states):
        if s == env.initial:
            continue
        try:
            fin = sum(flow[(p, s)] for p in env.parents(s))
            fout = sum(flow[(s, c)] for c in env.children(s))
            if env.is_terminating(s):
                fout += float(reward[s]) if reward is not None else flow[(s, TERMINAL)]
        except KeyError as exc:
            raise KeyError(f"edge flow missing for {exc.args[0]!r}") from None
        with np.errstate(divide="ignore"):
            report[s] = float(np.log(fin) - np.log(fout)) if fin != fout else 0.0
    return report


def terminal_balance(flow: EdgeFlowTable, env: EnvGraph) -> tuple[float, float]:
    """(total flow into TERMINAL, outflow of the initial state)."""
    term = sum(v for (s, s2), v in flow.items() if s2 is TERMINAL)
    return term, flow.total_flow


def policy_from_flow(flow: EdgeFlowTable) -> LogPolicy:
    table = defaultdict(dict)
    for (s, s2), v in flow.items():
        table[s][s2] = v
    dists = {}
    for s, row in table.items():
        tot = sum(row.values())
        if not tot > 0:
            raise ValueError(f"state {s!r} has zero outflow")
        dists[s] = {s2: (math.log(v / tot) if v > 0 else -math.inf) for s2, v in row.items()}

    def policy(s):
        try:
            return dists[s]
        except KeyError:
            raise ValueError(f"state {s!r} has zero outflow") from None

    return policy


def terminating_log_distribution_dp(env: EnvGraph, policy: LogPolicy,
                                    max_states: int = 1_000_000) -> dict:
    """Push one unit of flow from the initial state in topological order."""
    order = topological_order(env, max_states=max_states)
    logF = {env.initial: 0.0}
    acc = defaultdict(list)
    out = {}
    for s in order:
        if s != env.initial:
            terms = acc.pop(s, [])
            logF[s] = float(np.logaddexp.reduce(terms)) if terms else -math.inf
        lf = logF[s]
        for s2, lp in policy(s).items():
            if s2 is TERMINAL:
                out[s] = lf + lp
            else:
                acc[s2].append(lf + lp)
    for s in order:
        if env.is_terminating(s):
            out.setdefault(s, -math.inf)
    return out


def terminating_distribution_dp(env: EnvGraph, policy: LogPolicy,
                                max_states: int = 1_000_000) -> dict:
    return {x: math.exp(v) for x, v in terminating_log_distribution_dp(env, policy, max_states).items()}


def uniform_backward_policy(env: EnvGraph) -> LogPolicy:
    def policy_b(s2):
        pa = list(env.parents(s2))
        if not pa:
            raise ValueError(f"non-initial state {s2!r} has no parent")
        lp = -math.log(len(pa))
        return {p: lp for p in pa}

    return policy_b


def is_markovian_table(trajectory_flows: Mapping[tuple, float], env: EnvGraph,
                       rtol: float = 1e-10):
    """Check F(s) F(tau + s') == F(s -> s') F(tau) for every prefix tau ending in s.

    Returns ``(True, None)`` or ``(False, (prefix, next_state))`` for the first
    violation in depth-first order.
    """
    trajs = enumerate_trajectories(env)
    missing = [t for t in trajs if t not in trajectory_flows]
    if missing:
        raise ValueError(f"table misses {len(missing)} complete trajectories, e.g. {missing[0]!r}")
    Fs = defaultdict(float)
    Fe = defaultdict(float)
    Fp = defaultdict(float)
    for t in trajs:
        v = float(trajectory_flows[t])
        for i, s in enumerate(t):
            Fp[t[: i + 1]] += v
            if s is not TERMINAL:
                Fs[s] += v
                Fe[(s, t[i + 1])] += v

    def close(a, b):
        return abs(a - b) <= rtol * max(abs(a), abs(b), 1e-300)

    def rec(prefix):
        s = prefix[-1]
        for s2 in successors(env, s):
            ext = prefix + (s2,)
            if not close(Fs[s] * Fp[ext], Fe[(s, s2)] * Fp[prefix]):
                return prefix, s2
            if s2 is not TERMINAL:
                w = rec(ext)
                if w is not None:
                    return w
        return None

    w = rec((env.initial,))
    return (w is None), w

