"""Metropolis-Hastings baselines: a generic sampler and structure MC^3 over DAGs."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dag_env import (
    DagState,
    _apply,
    _bits,
    canonical_key,
    initial_dag_state,
    mask_rows,
    remove_edge,
)
from .scores import UniformPrior

__all__ = [
    "ChainTrace",
    "Proposal",
    "metropolis_hastings",
    "legal_moves",
    "apply_move",
    "move_delta",
    "structure_mc3",
    "mc3_transition_matrix",
    "write_trace_csv",
]


@dataclass
class ChainTrace:
    """Post-burn-in, thinned samples of a single chain."""

    states: list
    log_scores: list
    accepted: int
    steps: int
    burn_in: int
    thin: int
    accepted_flags: list = field(default_factory=list)
    rejected_zero_density: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.steps if self.steps else 0.0

    def frequencies(self) -> dict:
        out = {}
        for s in self.states:
            out[s] = out.get(s, 0) + 1
        n = len(self.states)
        return {k: v / n for k, v in out.items()}


@dataclass
class Proposal:
    """``sample(x, rng) -> y`` and ``log_density(x, y) = log q(y | x)``."""

    sample: Callable
    log_density: Callable


def _record_schedule(steps: int, burn_in: int | None, thin: int):
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    burn = steps // 10 if burn_in is None else int(burn_in)
    return burn, thin


def metropolis_hastings(log_target: Callable, proposal: Proposal, init, steps: int,
                        rng: np.random.Generator, burn_in: int | None = None, thin: int = 10,
                        hastings: bool = True) -> ChainTrace:
    """Accept with probability min(1, p(y) q(x|y) / (p(x) q(y|x))), compared in logs.

    ``hastings=False`` drops the proposal ratio; only useful to demonstrate the bias.
    """
    burn, thin = _record_schedule(steps, burn_in, thin)
    x, lx = init, float(log_target(init))
    trace = ChainTrace([], [], 0, steps, burn, thin)
    for t in range(steps):
        y = proposal.sample(x, rng)
        ly = float(log_target(y))
        log_a = ly - lx
        if hastings:
            back = proposal.log_density(y, x)
            if back == -math.inf:
                trace.rejected_zero_density += 1
                log_a = -math.inf
            else:
                log_a += back - proposal.log_density(x, y)
        ok = log_a >= 0 or math.log(rng.random()) < log_a
        if ok:
            x, lx = y, ly
            trace.accepted += 1
        if t >= burn and (t - burn) % thin == 0:
            trace.states.append(x)
            trace.log_scores.append(lx)
            trace.accepted_flags.append(ok)
    if trace.rejected_zero_density:
        warnings.warn(f"{trace.rejected_zero_density} moves rejected: reverse proposal density is zero")
    return trace


# --- structure MC^3 -------------------------------------------------------

def legal_moves(g: DagState, max_parents: int | None = None,
                moves=("add", "delete", "reverse")) -> list:
    """Moves as ``(kind, u, v)``, in a fixed order (add, delete, reverse; lexicographic)."""
    out = []
    if "add" in moves:
        rows = mask_rows(g, max_parents)
        out += [("add", u, v) for u in range(g.d) for v in _bits(rows[u])]
    edges = g.edges
    if "delete" in moves:
        out += [("delete", u, v) for u, v in edges]
    if "reverse" in moves:
        for u, v in edges:
            h = remove_edge(g, (u, v))
            if mask_rows(h, max_parents)[v] >> u & 1:
                out.append(("reverse", u, v))
    return out


def apply_move(g: DagState, move) -> DagState:
    kind, u, v = move
    if kind == "add":
        return _apply(g, u, v)
    h = remove_edge(g, (u, v))
    return h if kind == "delete" else _apply(h, v, u)


def move_delta(g: DagState, move, score: Callable, prior=UniformPrior()) -> float:
    """log R(G') - log R(G) from the one or two families that change."""
    kind, u, v = move
    pa_v = g.parents_of(v)
    if kind == "add":
        ds = score(v, pa_v + [u]) - score(v, pa_v)
    else:
        rest = [p for p in pa_v if p != u]
        ds = score(v, rest) - score(v, pa_v)
        if kind == "reverse":
            pa_u = g.parents_of(u)
            ds += score(u, pa_u + [v]) - score(u, pa_u)
    if isinstance(prior, UniformPrior):
        return ds
    return ds + prior(apply_move(g, move)) - prior(g)


class _MoveCache:
    def __init__(self, max_parents, moves, cap=200_000):
        self.max_parents, self.moves, self.cap = max_parents, moves, cap
        self.table = {}

    def __call__(self, g):
        """(moves, successor slots) for ``g``; successors are filled lazily."""
        m = self.table.get(g.adj)
        if m is None:
            m = (legal_moves(g, self.max_parents, self.moves), {})
            if len(self.table) >= self.cap:
                self.table.clear()
            self.table[g.adj] = m
        return m

    def successor(self, g, entry, k):
        nxt = entry[1].get(k)
        if nxt is None:
            nxt = entry[1][k] = apply_move(g, entry[0][k])
        return nxt


def structure_mc3(score: Callable, d: int, steps: int, rng: np.random.Generator,
                  prior=UniformPrior(), moves=("add", "delete", "reverse"),
                  init: DagState | None = None, max_parents: int | None = None,
                  burn_in: int | None = None, thin: int = 10) -> ChainTrace:
    """Structure MC^3 with uniform proposals over legal moves.

    ``score(child, parents)`` is a local score such as a ``LocalScoreCache``.
    The Hastings factor is |moves(G)| / |moves(G')|. Recorded states are
    canonical keys.
    """
    burn, thin = _record_schedule(steps, burn_in, thin)
    g = init if init is not None else initial_dag_state(d)
    lg = float(sum(score(j, g.parents_of(j)) for j in range(d)) + prior(g))
    cache = _MoveCache(max_parents, moves)
    entry = cache(g)
    trace = ChainTrace([], [], 0, steps, burn, thin)
    for t in range(steps):
        ok = False
        mv = entry[0]
        if mv:
            k = int(rng.integers(len(mv)))
            g2 = cache.successor(g, entry, k)
            entry2 = cache(g2)
            delta = move_delta(g, mv[k], score, prior)
            log_a = delta + math.log(len(mv)) - math.log(len(entry2[0]))
            if log_a >= 0 or math.log(rng.random()) < log_a:
                g, entry, lg = g2, entry2, lg + delta
                trace.accepted += 1
                ok = True
        if t >= burn and (t - burn) % thin == 0:
            trace.states.append(canonical_key(g))
            trace.log_scores.append(lg)
            trace.accepted_flags.append(ok)
    return trace


def mc3_transition_matrix(states: list, log_target: Callable, max_parents: int | None = None,
                          moves=("add", "delete", "reverse")) -> np.ndarray:
    """Dense kernel K[i, j] of :func:`structure_mc3` over an enumerated state list."""
    index = {s.adj: i for i, s in enumerate(states)}
    lp = np.array([float(log_target(s)) for s in states])
    mv = [legal_moves(s, max_parents, moves) for s in states]
    n = len(states)
    K = np.zeros((n, n))
    for i, s in enumerate(states):
        for m in mv[i]:
            j = index[apply_move(s, m).adj]
            log_a = lp[j] - lp[i] + math.log(len(mv[i])) - math.log(len(mv[j]))
            K[i, j] += min(1.0, math.exp(min(log_a, 0.0))) / len(mv[i])
        K[i, i] = 1.0 - K[i].sum() + K[i, i]
    return K


def write_trace_csv(trace: ChainTrace, path) -> None:
    """Rows of (step, canonical key as hex, log score, accepted flag)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "key", "log_score", "accepted"])
        for i, (s, l, a) in enumerate(zip(trace.states, trace.log_scores, trace.accepted_flags)):
            step = trace.burn_in + i * trace.thin
            key = s.hex() if isinstance(s, bytes) else str(s)
            w.writerow([step, key, repr(l), int(a)])
