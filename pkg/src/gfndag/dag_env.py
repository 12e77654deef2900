"""Edge-by-edge DAG construction with incrementally maintained masks.

A :class:`DagState` stores two ``d x d`` bit matrices as tuples of Python
integers, one integer per row:

* ``adj[i]`` has bit ``j`` set iff the edge ``i -> j`` is present;
* ``ct[i]`` has bit ``j`` set iff there is a directed path ``j ~> i``
  (transpose of the transitive closure, diagonal set to one).

Adding ``u -> v`` is valid iff neither ``adj[u]`` nor ``ct[u]`` has bit ``v``.
After adding it, every row ``i`` with bit ``v`` in ``ct[i]`` is OR-ed with
``ct[u]``, which is the rank-one boolean update of the closure done one
machine word per row.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .flow_core import TERMINAL

__all__ = [
    "DagState",
    "InvalidActionError",
    "initial_dag_state",
    "action_mask",
    "valid_actions",
    "apply_edge",
    "remove_edge",
    "parent_states",
    "canonical_key",
    "state_from_key",
    "state_from_adjacency",
    "closure_transpose",
    "is_acyclic",
    "skeleton",
    "v_structures",
    "markov_equivalent",
    "DagEnv",
    "edges_to_state",
    "mask_rows",
    "BatchDagEnv",
]


class InvalidActionError(ValueError):
    pass


def _bits(x: int):
    while x:
        low = x & -x
        yield low.bit_length() - 1
        x ^= low


@dataclass(frozen=True, eq=False)
class DagState:
    d: int
    adj: tuple
    ct: tuple

    def __eq__(self, other):
        return isinstance(other, DagState) and self.d == other.d and self.adj == other.adj

    def __hash__(self):
        return hash((self.d, self.adj))

    @property
    def num_edges(self) -> int:
        return sum(r.bit_count() for r in self.adj)

    @property
    def edges(self) -> list:
        return [(i, j) for i in range(self.d) for j in _bits(self.adj[i])]

    def parents_of(self, j: int) -> list:
        return [i for i in range(self.d) if self.adj[i] >> j & 1]

    @property
    def adjacency(self) -> np.ndarray:
        return _rows_to_matrix(self.adj, self.d)

    @property
    def closure_t(self) -> np.ndarray:
        return _rows_to_matrix(self.ct, self.d)

    def key(self) -> bytes:
        return canonical_key(self)

    def __repr__(self):
        return f"DagState(d={self.d}, edges={self.edges})"


def _rows_to_matrix(rows, d):
    m = np.zeros((d, d), dtype=bool)
    for i, r in enumerate(rows):
        for j in _bits(r):
            m[i, j] = True
    return m


def _matrix_to_rows(m) -> tuple:
    m = np.asarray(m, dtype=bool)
    return tuple(int(sum(1 << j for j in np.flatnonzero(row))) for row in m)


def initial_dag_state(d: int) -> DagState:
    if d < 1:
        raise ValueError("d must be >= 1")
    return DagState(d, (0,) * d, tuple(1 << i for i in range(d)))


def _column_counts(adj, d):
    counts = [0] * d
    for r in adj:
        for j in _bits(r):
            counts[j] += 1
    return counts


def mask_rows(state: DagState, max_parents: int | None = None,
              edge_filter: np.ndarray | None = None) -> tuple:
    """Row-bitset form of :func:`action_mask`."""
    d = state.d
    full = (1 << d) - 1
    rows = [~(a | c) & full for a, c in zip(state.adj, state.ct)]
    if max_parents is not None:
        counts = _column_counts(state.adj, d)
        blocked = sum(1 << j for j in range(d) if counts[j] >= max_parents)
        rows = [r & ~blocked for r in rows]
    if edge_filter is not None:
        allowed = _matrix_to_rows(edge_filter)
        rows = [r & a for r, a in zip(rows, allowed)]
    return tuple(rows)


def action_mask(state: DagState, max_parents: int | None = None,
                edge_filter: np.ndarray | None = None) -> np.ndarray:
    """``M[u, v] = 1`` iff adding ``u -> v`` keeps a DAG (and respects constraints)."""
    return _rows_to_matrix(mask_rows(state, max_parents, edge_filter), state.d)


def valid_actions(state: DagState, max_parents: int | None = None,
                  edge_filter: np.ndarray | None = None) -> list:
    rows = mask_rows(state, max_parents, edge_filter)
    return [(u, v) for u in range(state.d) for v in _bits(rows[u])]


def _apply(state: DagState, u: int, v: int) -> DagState:
    adj = list(state.adj)
    adj[u] |= 1 << v
    cu = state.ct[u]
    ct = tuple(r | cu if r >> v & 1 else r for r in state.ct)
    return DagState(state.d, tuple(adj), ct)


def apply_edge(state: DagState, action: tuple) -> DagState:
    u, v = action
    d = state.d
    if not (0 <= u < d and 0 <= v < d) or u == v:
        raise InvalidActionError(f"edge {u}->{v} is out of range for d={d}")
    if state.adj[u] >> v & 1:
        raise InvalidActionError(f"edge {u}->{v} is already present")
    if state.ct[u] >> v & 1:
        raise InvalidActionError(f"edge {u}->{v} would close a cycle ({v} already reaches {u})")
    return _apply(state, u, v)


def closure_transpose(adj_rows: Sequence[int], d: int) -> tuple:
    """Recompute ``ct`` from scratch by propagating ancestor sets in topological order."""
    par = [0] * d
    for i, r in enumerate(adj_rows):
        for j in _bits(r):
            par[j] |= 1 << i
    anc = [None] * d
    indeg = [p.bit_count() for p in par]
    stack = [i for i in range(d) if indeg[i] == 0]
    while stack:
        i = stack.pop()
        a = 1 << i
        for p in _bits(par[i]):
            a |= anc[p]
        anc[i] = a
        for j in _bits(adj_rows[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                stack.append(j)
    if any(a is None for a in anc):
        raise ValueError("adjacency contains a cycle")
    return tuple(anc)


def state_from_adjacency(adj: np.ndarray) -> DagState:
    adj = np.asarray(adj, dtype=bool)
    d = adj.shape[0]
    rows = _matrix_to_rows(adj)
    return DagState(d, rows, closure_transpose(rows, d))


def remove_edge(state: DagState, action: tuple) -> DagState:
    u, v = action
    if not state.adj[u] >> v & 1:
        raise InvalidActionError(f"edge {u}->{v} is not present")
    adj = list(state.adj)
    adj[u] &= ~(1 << v)
    return DagState(state.d, tuple(adj), closure_transpose(adj, state.d))


def parent_states(state: DagState) -> list:
    """One parent per edge, obtained by removing it; closures recomputed."""
    return [(remove_edge(state, e), e) for e in state.edges]


def canonical_key(state: DagState) -> bytes:
    """Row-major bit-packed adjacency (same layout as ``numpy.packbits``)."""
    d = state.d
    nb = (d * d + 7) // 8
    top = nb * 8 - 1
    val = 0
    for i, r in enumerate(state.adj):
        for j in _bits(r):
            val |= 1 << (top - (i * d + j))
    return val.to_bytes(nb, "big")


def state_from_key(key: bytes, d: int) -> DagState:
    bits = np.unpackbits(np.frombuffer(key, dtype=np.uint8))[: d * d]
    return state_from_adjacency(bits.reshape(d, d))


def is_acyclic(adj: np.ndarray) -> bool:
    """Kahn's algorithm on a dense boolean matrix."""
    a = np.array(adj, dtype=bool)
    indeg = a.sum(axis=0)
    stack = [i for i in range(a.shape[0]) if indeg[i] == 0]
    seen = 0
    while stack:
        i = stack.pop()
        seen += 1
        for j in np.flatnonzero(a[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                stack.append(j)
    return seen == a.shape[0]


def skeleton(state: DagState) -> frozenset:
    return frozenset(frozenset(e) for e in state.edges)


def v_structures(state: DagState) -> frozenset:
    """Triples (a, c, b) with a -> c <- b and a, b non-adjacent (a < b)."""
    adj = state.adjacency
    out = set()
    d = state.d
    for c in range(d):
        pa = np.flatnonzero(adj[:, c])
        for x in range(len(pa)):
            for y in range(x + 1, len(pa)):
                a, b = int(pa[x]), int(pa[y])
                if not adj[a, b] and not adj[b, a]:
                    out.add((a, c, b))
    return frozenset(out)


def markov_equivalent(g1: DagState, g2: DagState) -> bool:
    """Same skeleton and same v-structures."""
    return skeleton(g1) == skeleton(g2) and v_structures(g1) == v_structures(g2)


class DagEnv:
    """:class:`~gfndag.flow_core.EnvGraph` view of the DAG construction space.

    Every state is terminating. Keys are :func:`canonical_key` values.
    """

    def __init__(self, d: int, max_parents: int | None = None,
                 edge_filter: np.ndarray | None = None):
        self.d = d
        self.max_parents = max_parents
        self.edge_filter = None if edge_filter is None else np.asarray(edge_filter, dtype=bool)
        s0 = initial_dag_state(d)
        self.initial = canonical_key(s0)
        self._states = {self.initial: s0}

    def state(self, key) -> DagState:
        s = self._states.get(key)
        if s is None:
            s = state_from_key(key, self.d)
            self._states[key] = s
        return s

    def intern(self, state: DagState) -> bytes:
        k = canonical_key(state)
        self._states.setdefault(k, state)
        return k

    def actions(self, state: DagState) -> list:
        return valid_actions(state, self.max_parents, self.edge_filter)

    def mask(self, state: DagState) -> np.ndarray:
        return action_mask(state, self.max_parents, self.edge_filter)

    def step(self, state: DagState, action) -> DagState:
        if action is TERMINAL:
            return TERMINAL
        u, v = action
        rows = mask_rows(state, self.max_parents, self.edge_filter)
        if not rows[u] >> v & 1:
            raise InvalidActionError(f"edge {u}->{v} is masked in {state!r}")
        return _apply(state, u, v)

    def children(self, key) -> list:
        s = self.state(key)
        return sorted(self.intern(_apply(s, u, v)) for u, v in self.actions(s))

    def parents(self, key) -> list:
        s = self.state(key)
        return sorted(self.intern(p) for p, _ in parent_states(s))

    def is_terminating(self, key) -> bool:
        return True

    def edge_of(self, key, child_key) -> tuple:
        """The edge added by the transition ``key -> child_key``."""
        a, b = self.state(key).adj, self.state(child_key).adj
        for u in range(self.d):
            diff = a[u] ^ b[u]
            if diff:
                return u, diff.bit_length() - 1
        raise ValueError("states are equal")


def edges_to_state(d: int, edges: Iterable[tuple]) -> DagState:
    s = initial_dag_state(d)
    for e in edges:
        s = apply_edge(s, e)
    return s


class BatchDagEnv:
    """``n`` independent DAG constructions stepped together on integer row arrays.

    ``adj`` and ``ct`` have shape ``(n, d)`` and follow the :class:`DagState`
    bit conventions, so the closure update is a vectorized row OR.
    """

    def __init__(self, n: int, d: int, max_parents: int | None = None,
                 edge_filter: np.ndarray | None = None):
        if d > 62:
            raise ValueError("batched rows support d <= 62")
        self.n, self.d, self.max_parents = n, d, max_parents
        self._allowed = None if edge_filter is None else np.array(
            _matrix_to_rows(edge_filter), dtype=np.int64)
        self._eye = (np.int64(1) << np.arange(d, dtype=np.int64))
        self.adj = np.zeros((n, d), dtype=np.int64)
        self.ct = np.tile(self._eye, (n, 1))

    def reset(self, idx=None) -> None:
        idx = slice(None) if idx is None else idx
        self.adj[idx] = 0
        self.ct[idx] = self._eye

    def mask_rows(self) -> np.ndarray:
        full = np.int64((1 << self.d) - 1)
        rows = ~(self.adj | self.ct) & full
        if self.max_parents is not None:
            counts = ((self.adj[:, :, None] >> np.arange(self.d)) & 1).sum(axis=1)
            blocked = ((counts >= self.max_parents) * self._eye).sum(axis=1)
            rows &= ~blocked[:, None]
        if self._allowed is not None:
            rows &= self._allowed
        return rows

    def num_edges(self) -> np.ndarray:
        return ((self.adj[:, :, None] >> np.arange(self.d)) & 1).sum(axis=(1, 2))

    def parent_masks(self, v: np.ndarray) -> np.ndarray:
        """Bitmask of the parents of node ``v[i]`` in env ``i``."""
        bits = (self.adj >> v[:, None]) & 1
        return (bits * self._eye).sum(axis=1)

    def step(self, idx: np.ndarray, u: np.ndarray, v: np.ndarray) -> None:
        """Add ``u[k] -> v[k]`` in env ``idx[k]``; the caller guarantees mask validity."""
        self.adj[idx, u] |= np.int64(1) << v
        cu = self.ct[idx, u]
        sel = ((self.ct[idx] >> v[:, None]) & 1).astype(bool)
        self.ct[idx] = np.where(sel, self.ct[idx] | cu[:, None], self.ct[idx])

    def states(self, idx=None) -> list:
        idx = range(self.n) if idx is None else idx
        return [DagState(self.d, tuple(int(x) for x in self.adj[i]),
                         tuple(int(x) for x in self.ct[i])) for i in idx]
