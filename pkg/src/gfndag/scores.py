"""Modular Bayesian scores (BGe, BDe), graph priors, log-rewards and delta-scores."""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln

from .dag_env import DagState, InvalidActionError

__all__ = [
    "Dataset",
    "BgeHyper",
    "BdeHyper",
    "BGeScore",
    "BDeScore",
    "bge_local_score",
    "bde_local_score",
    "LocalScoreCache",
    "UniformPrior",
    "EdgePenaltyPrior",
    "log_reward",
    "delta_score",
    "standardize",
]


@dataclass
class Dataset:
    kind: str
    values: np.ndarray
    interventions: np.ndarray | None = None
    arity: int | None = None
    names: list | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ValueError("kind must be 'continuous' or 'categorical'")
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError("values must be an N x d matrix")
        if self.kind == "continuous":
            v = v.astype(float)
            if not np.all(np.isfinite(v)):
                raise ValueError("continuous data contains missing or non-finite entries")
        else:
            if v.size and (np.any(v < 0) or not np.all(v == np.floor(v))):
                raise ValueError("categorical values must be non-negative integers")
            v = v.astype(np.int64)
            if self.arity is None:
                self.arity = int(v.max()) + 1 if v.size else 2
            if v.size and v.max() >= self.arity:
                raise ValueError(f"category index {int(v.max())} >= arity {self.arity}")
        self.values = v
        if self.interventions is not None:
            m = np.asarray(self.interventions, dtype=bool)
            if m.shape != v.shape:
                raise ValueError("intervention mask must have the same shape as values")
            self.interventions = m
        if self.names is None:
            self.names = [f"X{i}" for i in range(v.shape[1])]
        elif len(self.names) != v.shape[1]:
            raise ValueError("names must have one entry per column")

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


def standardize(data: Dataset) -> Dataset:
    """Zero-mean, unit-variance columns (continuous data only)."""
    if data.kind != "continuous":
        raise ValueError("only continuous data can be standardized")
    v = data.values
    sd = v.std(axis=0)
    sd[sd == 0] = 1.0
    return Dataset("continuous", (v - v.mean(axis=0)) / sd, data.interventions, None, data.names)


@dataclass(frozen=True)
class BgeHyper:
    alpha_mu: float = 1.0
    alpha_w: float | None = None  # defaults to d + 2

    def resolve(self, d: int) -> tuple[float, float]:
        aw = float(d + 2) if self.alpha_w is None else float(self.alpha_w)
        if not self.alpha_mu > 0:
            raise ValueError("alpha_mu must be positive")
        if not aw > d + 1:
            raise ValueError("alpha_w must exceed d + 1")
        return float(self.alpha_mu), aw


@dataclass(frozen=True)
class BdeHyper:
    equivalent_sample_size: float = 1.0
    K: int | None = None


class BGeScore:
    """BGe local scores for linear-Gaussian data with a Normal-Wishart prior."""

    def __init__(self, data: Dataset, hyper: BgeHyper = BgeHyper()):
        if data.kind != "continuous":
            raise ValueError("BGe needs continuous data")
        N, d = data.values.shape
        if N < 1:
            raise ValueError("BGe needs at least one observation")
        am, aw = hyper.resolve(d)
        self.N, self.d, self.alpha_mu, self.alpha_w = N, d, am, aw
        x = data.values
        xbar = x.mean(axis=0)
        xc = x - xbar
        self.t = am * (aw - d - 1) / (am + 1)
        self.R = self.t * np.eye(d) + xc.T @ xc + (N * am / (N + am)) * np.outer(xbar, xbar)
        self._const = 0.5 * math.log(am / (N + am)) - 0.5 * N * math.log(math.pi)

    def _logdet(self, idx) -> float:
        if not idx:
            return 0.0
        sub = self.R[np.ix_(idx, idx)]
        L = np.linalg.cholesky(sub)
        return 2.0 * float(np.log(np.diag(L)).sum())

    def local(self, child: int, parents: Sequence[int]) -> float:
        pa = sorted(int(p) for p in parents)
        l = len(pa)
        N, d, aw = self.N, self.d, self.alpha_w
        a = N + aw - d + l
        return (self._const
                + gammaln(0.5 * (a + 1)) - gammaln(0.5 * (aw - d + l + 1))
                + 0.5 * (aw - d + 2 * l + 1) * math.log(self.t)
                + 0.5 * a * self._logdet(pa)
                - 0.5 * (a + 1) * self._logdet(pa + [int(child)]))


class BDeScore:
    """BDe local scores for categorical data; uniform prior gives BDeu.

    Samples where the child is intervened on are left out of its counts.
    """

    def __init__(self, data: Dataset, hyper: BdeHyper = BdeHyper()):
        if data.kind != "categorical":
            raise ValueError("BDe needs categorical data")
        self.K = int(hyper.K if hyper.K is not None else data.arity)
        if data.values.size and data.values.max() >= self.K:
            raise ValueError(f"category index {int(data.values.max())} >= K={self.K}")
        self.ess = float(hyper.equivalent_sample_size)
        if not self.ess > 0:
            raise ValueError("equivalent sample size must be positive")
        self.values = data.values
        self.interventions = data.interventions
        self.d = data.values.shape[1]

    def local(self, child: int, parents: Sequence[int]) -> float:
        pa = sorted(int(p) for p in parents)
        K = self.K
        x = self.values
        if self.interventions is not None:
            x = x[~self.interventions[:, child]]
        if x.shape[0] == 0:
            return 0.0
        u = np.zeros(x.shape[0], dtype=np.int64)
        for p in pa:
            u = u * K + x[:, p]
        n_cfg = float(K) ** len(pa)
        a_ku = self.ess / (K * n_cfg)
        a_u = self.ess / n_cfg
        cfg, inv = np.unique(u, return_inverse=True)
        counts = np.zeros((len(cfg), K))
        np.add.at(counts, (inv, x[:, child]), 1.0)
        n_u = counts.sum(axis=1)
        return float(np.sum(gammaln(a_u) - gammaln(a_u + n_u))
                     + np.sum(gammaln(a_ku + counts) - gammaln(a_ku)))


def bge_local_score(data: Dataset, child: int, parents: Sequence[int],
                    hyper: BgeHyper = BgeHyper()) -> float:
    return BGeScore(data, hyper).local(child, parents)


def bde_local_score(data: Dataset, child: int, parents: Sequence[int],
                    hyper: BdeHyper = BdeHyper()) -> float:
    return BDeScore(data, hyper).local(child, parents)


class LocalScoreCache:
    """Memoized ``(child, sorted parents) -> local score``; insertions are locked."""

    def __init__(self, scorer: Callable[[int, Sequence[int]], float] | BGeScore | BDeScore, d: int | None = None):
        self._fn = scorer.local if hasattr(scorer, "local") else scorer
        self.d = d if d is not None else getattr(scorer, "d", None)
        self._table = {}
        self._lock = threading.Lock()

    def __call__(self, child: int, parents) -> float:
        key = (int(child), tuple(sorted(int(p) for p in parents)))
        v = self._table.get(key)
        if v is None:
            v = float(self._fn(*key))
            with self._lock:
                self._table.setdefault(key, v)
        return v

    def __len__(self):
        return len(self._table)


class UniformPrior:
    def __call__(self, g: DagState) -> float:
        return 0.0

    def delta(self, g: DagState, edge) -> float:
        return 0.0


@dataclass(frozen=True)
class EdgePenaltyPrior:
    """log P(G) = -beta * |edges| (up to a constant)."""

    beta: float

    def __call__(self, g: DagState) -> float:
        return -self.beta * g.num_edges

    def delta(self, g: DagState, edge) -> float:
        return -self.beta


def log_reward(g: DagState, cache: LocalScoreCache, prior=UniformPrior()) -> float:
    """log P(D | G) + log P(G) as a sum of local scores."""
    return float(sum(cache(j, g.parents_of(j)) for j in range(g.d)) + prior(g))


def delta_score(g: DagState, action, cache: LocalScoreCache, prior=UniformPrior()) -> float:
    """log R(G + u->v) - log R(G), from the single family that changes."""
    u, v = action
    if g.adj[u] >> v & 1 or g.ct[u] >> v & 1 or u == v:
        raise InvalidActionError(f"edge {u}->{v} cannot be added to {g!r}")
    pa = g.parents_of(v)
    return cache(v, pa + [u]) - cache(v, pa) + prior.delta(g, action)
