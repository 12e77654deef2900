"""Synthetic Bayesian networks, ancestral sampling and dataset files.

Datasets are CSV files with a header of variable names and one observation
per row. An optional companion ``<stem>.interventions.csv`` with the same
header holds a 0/1 mask of intervened entries.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dag_env import DagState, edges_to_state, initial_dag_state
from .scores import Dataset

__all__ = [
    "LinGaussBn",
    "DiscreteBn",
    "sample_er_dag",
    "sample_lingauss_bn",
    "sample_discrete_bn",
    "ancestral_sample",
    "DataFormatError",
    "write_dataset",
    "read_dataset",
    "intervention_path",
    "write_metadata",
    "read_edge_list",
    "write_edge_list",
]


def sample_er_dag(d: int, edges_per_node: float, rng: np.random.Generator) -> DagState:
    """Random node order, then each order-respecting edge with probability
    ``edges_per_node * d / C(d, 2)`` (clipped to 1)."""
    if edges_per_node < 0:
        raise ValueError("edges_per_node must be non-negative")
    pairs = d * (d - 1) // 2
    if pairs == 0 or edges_per_node == 0:
        return initial_dag_state(d)
    p = min(1.0, edges_per_node * d / pairs)
    order = rng.permutation(d)
    edges = [(int(order[i]), int(order[j])) for i in range(d) for j in range(i + 1, d)
             if rng.random() < p]
    return edges_to_state(d, edges)


def _topological(g: DagState) -> list:
    adj = g.adjacency
    indeg = adj.sum(axis=0)
    out, stack = [], sorted(np.flatnonzero(indeg == 0).tolist(), reverse=True)
    while stack:
        i = stack.pop()
        out.append(i)
        for j in np.flatnonzero(adj[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                stack.append(int(j))
    return out


@dataclass
class LinGaussBn:
    g_star: DagState
    theta: np.ndarray        # theta[j, i] weight of j -> i
    noise_var: np.ndarray

    def covariance(self) -> np.ndarray:
        """(I - Theta)^-T D (I - Theta)^-1 for row-vector samples x = x Theta + eps."""
        d = self.g_star.d
        inv = np.linalg.inv(np.eye(d) - self.theta)
        return inv.T @ np.diag(self.noise_var) @ inv


@dataclass
class DiscreteBn:
    g_star: DagState
    cpts: list               # cpts[i] has shape (K ** n_parents, K)
    K: int


def sample_lingauss_bn(g: DagState, rng: np.random.Generator, noise_var: float = 0.01) -> LinGaussBn:
    d = g.d
    theta = np.zeros((d, d))
    mask = g.adjacency
    theta[mask] = rng.normal(size=int(mask.sum()))
    return LinGaussBn(g, theta, np.full(d, float(noise_var)))


def sample_discrete_bn(g: DagState, K: int, rng: np.random.Generator) -> DiscreteBn:
    """CPT rows drawn from a symmetric Dirichlet(1)."""
    cpts = [rng.dirichlet(np.ones(K), size=K ** len(g.parents_of(i))) for i in range(g.d)]
    return DiscreteBn(g, cpts, K)


def ancestral_sample(bn, N: int, rng: np.random.Generator) -> Dataset:
    if N < 1:
        raise ValueError("N must be >= 1")
    g = bn.g_star
    d = g.d
    order = _topological(g)
    if isinstance(bn, LinGaussBn):
        x = np.zeros((N, d))
        sd = np.sqrt(bn.noise_var)
        for i in order:
            x[:, i] = x @ bn.theta[:, i] + rng.normal(scale=sd[i], size=N)
        return Dataset("continuous", x)
    x = np.zeros((N, d), dtype=np.int64)
    for i in order:
        u = np.zeros(N, dtype=np.int64)
        for p in g.parents_of(i):
            u = u * bn.K + x[:, p]
        cdf = np.cumsum(bn.cpts[i][u], axis=1)
        r = rng.random(N)[:, None]
        x[:, i] = np.minimum((cdf < r * cdf[:, -1:]).sum(axis=1), bn.K - 1)
    return Dataset("categorical", x, arity=bn.K)


class DataFormatError(ValueError):
    pass


def intervention_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".interventions.csv")


def _write_table(path, names, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        w.writerows(rows)


def write_dataset(path, data: Dataset) -> None:
    """Continuous values are written with ``repr`` so reading them back is exact."""
    fmt = repr if data.kind == "continuous" else str
    rows = [[fmt(v) for v in row] for row in data.values.tolist()]
    _write_table(path, data.names, rows)
    if data.interventions is not None:
        _write_table(intervention_path(path), data.names, data.interventions.astype(int).tolist())


def _read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if not all(header):
        raise DataFormatError(f"{path}: line 1: empty variable name")
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataFormatError(f"{path}: line {lineno}: expected {len(header)} cells, got {len(row)}")
        for col, cell in enumerate(row, start=1):
            if not cell.strip():
                raise DataFormatError(f"{path}: line {lineno}, column {col}: missing value")
        body.append((lineno, row))
    return header, body


def _parse(path, body, conv):
    out = []
    for lineno, row in body:
        vals = []
        for col, cell in enumerate(row, start=1):
            try:
                vals.append(conv(cell.strip()))
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}, column {col}: bad value {cell!r}") from None
        out.append(vals)
    return out


def read_dataset(path, kind: str | None = None, arity: int | None = None) -> Dataset:
    """Read a dataset CSV; ``kind=None`` means categorical iff every cell is an integer."""
    header, body = _read_table(path)
    if kind is None:
        try:
            _parse(path, body, int)
            kind = "categorical"
        except DataFormatError:
            kind = "continuous"
    values = _parse(path, body, float if kind == "continuous" else int)
    mask = None
    ipath = intervention_path(path)
    if ipath.exists():
        ih, ibody = _read_table(ipath)
        if ih != header:
            raise DataFormatError(f"{ipath}: header does not match {path}")
        m = _parse(ipath, ibody, int)
        if any(v not in (0, 1) for row in m for v in row):
            raise DataFormatError(f"{ipath}: mask entries must be 0 or 1")
        mask = np.array(m, dtype=bool).reshape(len(m), len(header))
    arr = np.array(values, dtype=float if kind == "continuous" else np.int64).reshape(len(values), len(header))
    try:
        return Dataset(kind, arr, mask, arity, header)
    except ValueError as e:
        raise DataFormatError(f"{path}: {e}") from None


def write_metadata(path, meta: dict) -> None:
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def write_edge_list(path, g: DagState, names=None) -> None:
    names = names or [f"X{i}" for i in range(g.d)]
    _write_table(path, ["source", "target"], [[names[u], names[v]] for u, v in g.edges])


def read_edge_list(path, names) -> DagState:
    header, body = _read_table(path)
    idx = {n: i for i, n in enumerate(names)}
    edges = []
    for lineno, (a, b) in ((ln, r) for ln, r in body):
        if a not in idx or b not in idx:
            raise DataFormatError(f"{path}: line {lineno}: unknown variable")
        edges.append((idx[a], idx[b]))
    return edges_to_state(len(names), edges)
