"""Small table-driven environments used as fixtures and for exact checks.

Text format for :func:`explicit_env`::

    # comment
    [states]
    s0          # first state listed is the initial state
    s1
    [edges]
    s0 -> s1
    [rewards]   # listed states are terminating
    s1 = 2.0
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import binom

from .flow_core import TERMINAL, enumerate_states, validate_env

__all__ = [
    "EnvSpecError",
    "ExplicitEnv",
    "explicit_env",
    "galton_env",
    "FactorSpec",
    "factor_graph_env",
    "tempered",
    "markov_example_env",
    "multipath_env",
    "segment_counterexample_env",
]


class EnvSpecError(ValueError):
    pass


class ExplicitEnv:
    """Pointed DAG given by explicit state, edge and reward tables.

    State keys are the UTF-8 encodings of the state names.
    """

    def __init__(self, states: Sequence[str], edges: Sequence[tuple[str, str]],
                 rewards: Mapping[str, float], initial: str | None = None,
                 validate: bool = True):
        self.state_names = list(states)
        if len(set(self.state_names)) != len(self.state_names):
            raise EnvSpecError("duplicate state name")
        known = set(self.state_names)
        self.initial = (initial if initial is not None else self.state_names[0]).encode()
        self._children = {s.encode(): [] for s in self.state_names}
        self._parents = {s.encode(): [] for s in self.state_names}
        seen = set()
        for a, b in edges:
            if a not in known or b not in known:
                raise EnvSpecError(f"edge {a} -> {b} references an unknown state")
            if (a, b) in seen:
                raise EnvSpecError(f"duplicate edge {a} -> {b}")
            seen.add((a, b))
            self._children[a.encode()].append(b.encode())
            self._parents[b.encode()].append(a.encode())
        for v in self._children.values():
            v.sort()
        for v in self._parents.values():
            v.sort()
        self._reward = {}
        for s, r in rewards.items():
            if s not in known:
                raise EnvSpecError(f"reward for unknown state {s}")
            r = float(r)
            if not r > 0:
                raise EnvSpecError(f"reward of {s} must be positive")
            self._reward[s.encode()] = r
        self.edges = [(a.encode(), b.encode()) for a, b in edges]
        self.energy_increment: Callable | None = None
        if validate:
            rep = validate_env(self, max_states=len(self.state_names) + 1)
            if rep.visited < len(self.state_names):
                reached = set(enumerate_states(self, len(self.state_names) + 1))
                rep.unreachable += [k for k in self._children if k not in reached]
            if not rep.ok:
                raise EnvSpecError(f"not a valid pointed DAG: {rep}")

    def children(self, s):
        return self._children[s]

    def parents(self, s):
        return self._parents[s]

    def is_terminating(self, s):
        return s in self._reward

    def reward(self, s) -> float:
        return self._reward[s]

    def log_reward(self, s) -> float:
        return math.log(self._reward[s])

    def energy(self, s, alpha: float = 1.0) -> float:
        """E(x) with R(x) = exp(-E(x) / alpha)."""
        return -alpha * math.log(self._reward[s])

    @property
    def rewards(self) -> dict:
        return dict(self._reward)

    @property
    def states(self) -> list:
        return [s.encode() for s in self.state_names]

    @property
    def terminating_states(self) -> list:
        return [s for s in self.states if s in self._reward]

    @staticmethod
    def key(name: str) -> bytes:
        return name.encode()

    @staticmethod
    def name(key) -> str:
        return "TERMINAL" if key is TERMINAL else key.decode()

    def to_text(self) -> str:
        lines = ["[states]", *self.state_names, "[edges]"]
        lines += [f"{a.decode()} -> {b.decode()}" for a, b in self.edges]
        lines.append("[rewards]")
        lines += [f"{k.decode()} = {v!r}" for k, v in self._reward.items()]
        return "\n".join(lines) + "\n"


def explicit_env(spec: str) -> ExplicitEnv:
    """Parse the line-oriented text format described in the module docstring."""
    section = None
    states, edges, rewards = [], [], {}
    for lineno, raw in enumerate(spec.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in ("states", "edges", "rewards"):
                raise EnvSpecError(f"line {lineno}: unknown section [{section}]")
            continue
        if section == "states":
            if len(line.split()) != 1:
                raise EnvSpecError(f"line {lineno}: state names cannot contain spaces")
            states.append(line)
        elif section == "edges":
            parts = [p.strip() for p in line.split("->")]
            if len(parts) != 2 or not all(parts):
                raise EnvSpecError(f"line {lineno}: expected 'a -> b'")
            if tuple(parts) in edges:
                raise EnvSpecError(f"line {lineno}: duplicate edge {parts[0]} -> {parts[1]}")
            edges.append(tuple(parts))
        elif section == "rewards":
            parts = [p.strip() for p in line.split("=")]
            if len(parts) != 2:
                raise EnvSpecError(f"line {lineno}: expected 'state = value'")
            try:
                rewards[parts[0]] = float(parts[1])
            except ValueError:
                raise EnvSpecError(f"line {lineno}: bad reward {parts[1]!r}") from None
        else:
            raise EnvSpecError(f"line {lineno}: content outside a section")
    if not states:
        raise EnvSpecError("no states")
    return ExplicitEnv(states, edges, rewards)


def tempered(env: ExplicitEnv, alpha: float) -> ExplicitEnv:
    """Same graph with rewards R**(1/alpha), i.e. target exp(-E/alpha)."""
    rew = {k.decode(): v ** (1.0 / alpha) for k, v in env.rewards.items()}
    out = ExplicitEnv(env.state_names, [(a.decode(), b.decode()) for a, b in env.edges], rew,
                      validate=False)
    out.energy_increment = env.energy_increment
    return out


def galton_env(rows: int, p: float = 0.5) -> ExplicitEnv:
    """Quincunx of pins; bin ``k`` counts the rightward bounces.

    Bin rewards are the binomial probabilities, and ``env.policy`` is the
    canonical forward policy going left with probability ``p``.
    """
    if rows < 1:
        raise ValueError("rows must be >= 1")
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    names = [f"{r},{k}" for r in range(rows + 1) for k in range(r + 1)]
    edges = []
    for r in range(rows):
        for k in range(r + 1):
            edges.append((f"{r},{k}", f"{r + 1},{k}"))
            edges.append((f"{r},{k}", f"{r + 1},{k + 1}"))
    pmf = binom.pmf(np.arange(rows + 1), rows, 1.0 - p)
    rewards = {f"{rows},{k}": float(pmf[k]) for k in range(rows + 1)}
    env = ExplicitEnv(names, edges, rewards)
    lp, lq = math.log(p), math.log1p(-p)

    def policy(s):
        r, k = map(int, s.decode().split(","))
        if r == rows:
            return {TERMINAL: 0.0}
        return {f"{r + 1},{k}".encode(): lp, f"{r + 1},{k + 1}".encode(): lq}

    env.policy = policy
    env.rows = rows
    return env


@dataclass
class FactorSpec:
    d: int
    K: int
    factors: list = field(default_factory=list)  # [(vars, table)], table shape (K,)*len(vars)

    def __post_init__(self):
        fixed = []
        for vars_, table in self.factors:
            vars_ = tuple(int(v) for v in vars_)
            table = np.asarray(table, dtype=float)
            if any(v < 0 or v >= self.d for v in vars_):
                raise ValueError(f"factor references unknown variable in {vars_}")
            if table.shape != (self.K,) * len(vars_):
                raise ValueError(f"factor table over {vars_} must have shape {(self.K,) * len(vars_)}")
            fixed.append((vars_, table))
        self.factors = fixed

    def energy(self, x: Sequence[int]) -> float:
        return float(sum(t[tuple(x[v] for v in vs)] for vs, t in self.factors))


def factor_graph_env(spec: FactorSpec, order: Sequence[int] | None = None):
    """Assign one variable at a time following ``order``.

    Returns ``(env, energy)`` where ``energy(key)`` evaluates E at a terminating
    state. ``env.energy_increment(s, s')`` gives the sum of the factors that
    become fully assigned on that step, so increments add up to E(x).
    """
    order = list(range(spec.d)) if order is None else [int(v) for v in order]
    if sorted(order) != list(range(spec.d)):
        raise ValueError("order must be a permutation of the variables")
    pos = {v: i for i, v in enumerate(order)}
    # factors are evaluated at the step where their last variable is assigned
    done_at = [[] for _ in range(spec.d)]
    for vs, t in spec.factors:
        done_at[max(pos[v] for v in vs) if vs else 0].append((vs, t))

    def name(vals):
        return "x=" + "".join(map(str, vals))

    names, edges, rewards = [], [], {}
    for depth in range(spec.d + 1):
        for vals in itertools.product(range(spec.K), repeat=depth):
            names.append(name(vals))
            if depth:
                edges.append((name(vals[:-1]), name(vals)))
            if depth == spec.d:
                x = [0] * spec.d
                for i, v in enumerate(vals):
                    x[order[i]] = v
                rewards[name(vals)] = math.exp(-spec.energy(x))
    env = ExplicitEnv(names, edges, rewards, validate=spec.K ** spec.d < 5000)

    def decode(key):
        vals = [int(c) for c in key.decode()[2:]]
        x = {order[i]: v for i, v in enumerate(vals)}
        return vals, x

    def energy_increment(s, s2):
        if s2 is TERMINAL:
            return 0.0
        vals, x = decode(s2)
        step = len(vals) - 1
        return float(sum(t[tuple(x[v] for v in vs)] for vs, t in done_at[step]))

    def energy(key):
        vals, x = decode(key)
        return spec.energy([x[v] for v in range(spec.d)])

    env.energy_increment = energy_increment
    env.energy_fn = energy
    env.spec = spec
    env.order = order
    return env, energy


def markov_example_env(r2: float = 2.0, r3: float = 3.0) -> ExplicitEnv:
    """Four states, s2 terminating with a child s3 (flow-characterization fixture)."""
    return ExplicitEnv(
        ["s0", "s1", "s2", "s3"],
        [("s0", "s1"), ("s0", "s2"), ("s1", "s2"), ("s2", "s3")],
        {"s2": r2, "s3": r3},
    )


def multipath_env(energies: Sequence[float] = (0.0, 0.0, 0.0), alpha: float = 1.0) -> ExplicitEnv:
    """Six states; x4 is reachable through both s1 and s2.

    Rewards are exp(-E/alpha) for x3, x4, x5.
    """
    e3, e4, e5 = energies
    return ExplicitEnv(
        ["s0", "s1", "s2", "x3", "x4", "x5"],
        [("s0", "s1"), ("s0", "s2"), ("s1", "x3"), ("s1", "x4"), ("s2", "x4"), ("s2", "x5")],
        {"x3": math.exp(-e3 / alpha), "x4": math.exp(-e4 / alpha), "x5": math.exp(-e5 / alpha)},
    )


def segment_counterexample_env() -> ExplicitEnv:
    """Tree s0 -> s1 -> {s2, s3}, s3 -> s4; s2 and s4 terminating.

    Paired with :func:`segment_counterexample_assignment` this satisfies every
    length-2 segment balance equation without being a valid flow.
    """
    return ExplicitEnv(
        ["s0", "s1", "s2", "s3", "s4"],
        [("s0", "s1"), ("s1", "s2"), ("s1", "s3"), ("s3", "s4")],
        {"s2": 1.0, "s4": 1.0},
    )


def segment_counterexample_assignment():
    """State flows and forward probabilities (linear domain) of the counterexample."""
    k = ExplicitEnv.key
    F = {k("s0"): 4.0, k("s1"): 2.0, k("s2"): 2.0, k("s3"): 2.0, k("s4"): 1.0}
    pf = {
        k("s0"): {k("s1"): 1.0},
        k("s1"): {k("s2"): 0.5, k("s3"): 0.5},
        k("s2"): {TERMINAL: 1.0},
        k("s3"): {k("s4"): 1.0},
        k("s4"): {TERMINAL: 1.0},
    }
    return F, pf
