"""Exact oracles on enumerable DAG spaces, posterior metrics and the P_F^T estimator."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid
from scipy.special import gammaln, logsumexp, rel_entr

from .dag_env import DagState, _apply, _bits, canonical_key, initial_dag_state, mask_rows, state_from_key
from .scores import BDeScore, BGeScore, Dataset, LocalScoreCache, UniformPrior

__all__ = [
    "MAX_ENUM_D",
    "EnumerationTooLarge",
    "DagSpace",
    "enumerate_dags",
    "PosteriorTable",
    "exact_posterior",
    "grouped_logsumexp",
    "policy_tables",
    "terminating_log_probs",
    "solve_forward_policy",
    "ExactDagPolicy",
    "tb_residual_range",
    "conditional_trajectory_entropy",
    "FeatureReport",
    "features",
    "jsd",
    "shd",
    "auroc",
    "structural_metrics",
    "PfTopEstimate",
    "estimate_log_pftop",
    "CorrelationReport",
    "correlation_report",
]

MAX_ENUM_D = 5


class EnumerationTooLarge(ValueError):
    pass


def grouped_logsumexp(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    """``out[g] = logsumexp(values[groups == g])``; empty groups give ``-inf``."""
    m = np.full(n_groups, -np.inf)
    np.maximum.at(m, groups, values)
    safe = np.where(np.isfinite(m), m, 0.0)
    acc = np.zeros(n_groups)
    np.add.at(acc, groups, np.exp(values - safe[groups]))
    with np.errstate(divide="ignore"):
        return np.where(acc > 0, safe + np.log(acc), -np.inf)


class DagSpace:
    """All DAGs over ``d`` nodes with the transitions that add one edge.

    States are stored level by level (level = number of edges), so every
    transition goes from level ``L`` to ``L + 1``.
    """

    def __init__(self, d: int, max_parents: int | None = None, limit: int = MAX_ENUM_D):
        if d > limit:
            raise EnumerationTooLarge(f"d={d} exceeds the enumeration budget d <= {limit}")
        if d < 1:
            raise ValueError("d must be >= 1")
        self.d = d
        self.max_parents = max_parents
        s0 = initial_dag_state(d)
        states = [s0]
        index = {s0.adj: 0}
        src, act, dst = [], [], []
        frontier = [0]
        while frontier:
            nxt = []
            for i in frontier:
                s = states[i]
                rows = mask_rows(s, max_parents)
                for u in range(d):
                    for v in _bits(rows[u]):
                        g2 = _apply(s, u, v)
                        j = index.get(g2.adj)
                        if j is None:
                            j = len(states)
                            index[g2.adj] = j
                            states.append(g2)
                            nxt.append(j)
                        src.append(i)
                        act.append(u * d + v)
                        dst.append(j)
            frontier = nxt
        self.states = states
        self.index = index
        self.src = np.array(src, dtype=np.int64)
        self.act = np.array(act, dtype=np.int64)
        self.dst = np.array(dst, dtype=np.int64)
        self.level = np.array([s.num_edges for s in states], dtype=np.int64)
        self.n_levels = int(self.level.max()) + 1
        self._keys = None
        self._codes = None
        self._adj = None

    def __len__(self):
        return len(self.states)

    @property
    def n_transitions(self) -> int:
        return len(self.src)

    @property
    def keys(self) -> list:
        if self._keys is None:
            self._keys = [canonical_key(s) for s in self.states]
        return self._keys

    @property
    def codes(self) -> list:
        """Tabular keys (:func:`~gfndag.policy_nn.adj_codes`) of the states."""
        if self._codes is None:
            from .policy_nn import adj_codes

            rows = np.array([s.adj for s in self.states], dtype=np.int64)
            self._codes = adj_codes(rows, self.d)
            self._code_index = {c: i for i, c in enumerate(self._codes)}
        return self._codes

    def code_index(self, code) -> int:
        self.codes
        return self._code_index[code]

    def key_index(self) -> dict:
        return {k: i for i, k in enumerate(self.keys)}

    def lookup(self, state: DagState) -> int:
        return self.index[state.adj]

    @property
    def adjacency(self) -> np.ndarray:
        """(n, d, d) boolean adjacency matrices."""
        if self._adj is None:
            rows = np.array([s.adj for s in self.states], dtype=np.int64)
            self._adj = ((rows[:, :, None] >> np.arange(self.d)) & 1).astype(bool)
        return self._adj

    @property
    def masks(self) -> np.ndarray:
        m = np.zeros((len(self), self.d * self.d), dtype=bool)
        m[self.src, self.act] = True
        return m

    def log_rewards(self, scorer, prior=UniformPrior()) -> np.ndarray:
        """Sum of local scores plus the log prior, for every state."""
        d = self.d
        fam = {}
        out = np.empty(len(self))
        adj = self.adjacency
        for i, s in enumerate(self.states):
            tot = 0.0
            for j in range(d):
                pa = tuple(np.flatnonzero(adj[i, :, j]).tolist())
                v = fam.get((j, pa))
                if v is None:
                    v = fam[(j, pa)] = float(scorer(j, pa))
                tot += v
            out[i] = tot + prior(s)
        return out

    def uniform_log_pb(self) -> np.ndarray:
        """log P_B for uniform edge removal, per transition."""
        return -np.log(self.level[self.dst].astype(float))


def enumerate_dags(d: int) -> list:
    return list(DagSpace(d).states)


def _as_scorer(scorer, d):
    if isinstance(scorer, Dataset):
        scorer = BGeScore(scorer) if scorer.kind == "continuous" else BDeScore(scorer)
    if isinstance(scorer, (BGeScore, BDeScore)):
        return LocalScoreCache(scorer, d)
    return scorer


@dataclass(frozen=True)
class PosteriorTable:
    log_probs: dict
    d: int
    log_evidence: float

    def array(self, space: DagSpace) -> np.ndarray:
        return np.array([self.log_probs[k] for k in space.keys])

    def to_text(self) -> str:
        return "".join(f"{k.hex()}\t{v!r}\n" for k, v in self.log_probs.items())

    @classmethod
    def from_text(cls, text: str, d: int) -> "PosteriorTable":
        lp = {}
        for line in text.splitlines():
            if line.strip():
                k, v = line.split("\t")
                lp[bytes.fromhex(k)] = float(v)
        return cls(lp, d, float("nan"))


def exact_posterior(scorer, d: int, prior=UniformPrior(), space: DagSpace | None = None) -> PosteriorTable:
    """P(G | D) for every DAG by enumeration and normalization.

    ``scorer`` is a :class:`~gfndag.scores.Dataset`, a score object or a
    callable ``(child, parents) -> local score``.
    """
    space = space if space is not None else DagSpace(d)
    lr = space.log_rewards(_as_scorer(scorer, d), prior)
    z = float(logsumexp(lr))
    return PosteriorTable(dict(zip(space.keys, (lr - z).tolist())), d, z)


def policy_tables(space: DagSpace, policy, chunk: int = 4096):
    """Evaluate a DAG policy on every state: (log_stop (n,), log_edge per transition)."""
    from .policy_nn import StateBatch

    d = space.d
    masks = space.masks
    adj = space.adjacency.reshape(len(space), d * d).astype(float)
    log_stop = np.empty(len(space))
    log_edges = np.empty((len(space), d * d))
    keys = space.codes
    for a in range(0, len(space), chunk):
        b = min(a + chunk, len(space))
        batch = StateBatch(adj[a:b], masks[a:b], keys[a:b], space.states[a:b])
        ls, le = policy.log_probs(batch)
        log_stop[a:b] = ls
        log_edges[a:b] = le
    return log_stop, log_edges[space.src, space.act]


def terminating_log_probs(space: DagSpace, log_stop: np.ndarray, log_edge: np.ndarray) -> np.ndarray:
    """Log terminating probabilities by forward DP over levels."""
    n = len(space)
    log_visit = np.full(n, -np.inf)
    log_visit[0] = 0.0
    src_level = space.level[space.src]
    for L in range(space.n_levels - 1):
        sel = src_level == L
        if not sel.any():
            continue
        vals = log_visit[space.src[sel]] + log_edge[sel]
        inc = grouped_logsumexp(vals, space.dst[sel], n)
        log_visit = np.logaddexp(log_visit, inc)
    return log_visit + log_stop


def solve_forward_policy(space: DagSpace, log_rewards: np.ndarray, log_pb: np.ndarray | None = None):
    """Unique forward policy satisfying modified DB for a fixed P_B.

    With ``u(G) = -log P(stop | G)`` the conditions give
    ``u(G) = log(1 + sum_{G'} R(G')/R(G) P_B(G|G') exp(u(G')))``, solved from
    the complete graphs back to the empty one.
    Returns ``(log_stop per state, log P_F per transition)``.
    """
    lr = np.asarray(log_rewards, dtype=float)
    if not np.all(np.isfinite(lr)):
        raise ValueError("rewards must be strictly positive")
    log_pb = space.uniform_log_pb() if log_pb is None else np.asarray(log_pb, dtype=float)
    n = len(space)
    u = np.zeros(n)
    a = np.empty(space.n_transitions)
    src_level = space.level[space.src]
    for L in range(space.n_levels - 2, -1, -1):
        sel = np.flatnonzero(src_level == L)
        if not len(sel):
            continue
        s, t = space.src[sel], space.dst[sel]
        a[sel] = lr[t] - lr[s] + log_pb[sel] + u[t]
        g = grouped_logsumexp(a[sel], s, n)
        touched = np.unique(s)
        u[touched] = np.logaddexp(0.0, g[touched])
    return -u, a - u[space.src]


class ExactDagPolicy:
    """Table-backed DAG policy over a :class:`DagSpace`, usable wherever a learned one is."""

    def __init__(self, space: DagSpace, log_stop: np.ndarray, log_edge: np.ndarray):
        self.space = space
        self.d = space.d
        self.max_parents = space.max_parents
        self._stop = np.asarray(log_stop, dtype=float)
        table = np.full((len(space), self.d * self.d), -np.inf)
        table[space.src, space.act] = log_edge
        self._edges = table

    @classmethod
    def from_rewards(cls, space: DagSpace, log_rewards, log_pb=None) -> "ExactDagPolicy":
        return cls(space, *solve_forward_policy(space, log_rewards, log_pb))

    def to_tabular(self):
        """Equivalent :class:`~gfndag.policy_nn.TabularPolicy` (e.g. for checkpoints)."""
        from .policy_nn import TabularPolicy

        pol = TabularPolicy(self.d, self.max_parents)
        rows = np.array([pol._row(c) for c in self.space.codes])
        theta = np.where(np.isfinite(self._edges), self._edges, 0.0)
        with np.errstate(divide="ignore"):
            stop = self._stop - np.log(-np.expm1(self._stop))
        stop = np.where(np.isfinite(stop), stop, 0.0)
        pol._theta[rows] = np.concatenate([theta, stop[:, None]], axis=1)
        return pol

    def log_probs(self, states):
        from .policy_nn import StateBatch, make_batch

        batch = states if isinstance(states, StateBatch) else make_batch(list(states))
        self.space.codes
        ci = self.space._code_index
        idx = np.fromiter((ci[k] for k in batch.keys), dtype=np.int64, count=len(batch))
        return self._stop[idx].copy(), self._edges[idx].copy()


def tb_residual_range(space: DagSpace, log_stop: np.ndarray, log_edge: np.ndarray,
                      log_rewards: np.ndarray, log_z: float, log_pb: np.ndarray | None = None):
    """(min, max) of the TB residual over every complete trajectory.

    Uses max-plus and min-plus DP over ``log P_F - log P_B`` instead of
    listing the trajectories.
    """
    log_pb = space.uniform_log_pb() if log_pb is None else log_pb
    n = len(space)
    step = log_edge - log_pb
    hi = np.full(n, -np.inf)
    lo = np.full(n, np.inf)
    hi[0] = lo[0] = 0.0
    src_level = space.level[space.src]
    for L in range(space.n_levels - 1):
        sel = src_level == L
        s, t = space.src[sel], space.dst[sel]
        np.maximum.at(hi, t, hi[s] + step[sel])
        np.minimum.at(lo, t, lo[s] + step[sel])
    base = log_z + log_stop - log_rewards
    return float(np.min(base + lo)), float(np.max(base + hi))


def conditional_trajectory_entropy(space: DagSpace, log_stop: np.ndarray, log_edge: np.ndarray) -> float:
    """H(tau | x) = H(tau) - H(x); x is a function of tau."""
    n = len(space)
    log_term = terminating_log_probs(space, log_stop, log_edge)
    log_visit = log_term - log_stop
    p_stop = np.exp(log_stop)
    h_state = -np.where(p_stop > 0, p_stop * log_stop, 0.0)
    pe = np.exp(log_edge)
    ent_e = -np.where(pe > 0, pe * log_edge, 0.0)
    np.add.at(h_state, space.src, ent_e)
    visit = np.exp(log_visit)
    h_traj = float(np.sum(visit * h_state))
    pt = np.exp(log_term)
    h_x = -float(np.sum(np.where(pt > 0, pt * log_term, 0.0)))
    return h_traj - h_x


@dataclass
class FeatureReport:
    kind: str
    matrix: np.ndarray

    def to_csv(self) -> str:
        return "\n".join(",".join(f"{v:.10g}" for v in row) for row in self.matrix) + "\n"


def _feature_stack(adj: np.ndarray, kind: str) -> np.ndarray:
    """(n, d, d) indicator features from (n, d, d) adjacency."""
    adj = adj.astype(bool)
    n, d, _ = adj.shape
    if kind == "edge":
        return adj.astype(float)
    if kind == "path":
        reach = adj.copy()
        for k in range(d):
            reach |= reach[:, :, k:k + 1] & reach[:, k:k + 1, :]
        return reach.astype(float)
    if kind == "markov":
        a = adj.astype(np.int64)
        mb = adj | adj.transpose(0, 2, 1) | (np.einsum("nik,njk->nij", a, a) > 0)
        mb[:, np.arange(d), np.arange(d)] = False
        return mb.astype(float)
    raise ValueError(f"unknown feature kind {kind!r}")


def features(dist, kind: str = "edge", d: int | None = None, space: DagSpace | None = None) -> FeatureReport:
    """Edge, path or Markov-blanket marginals of a distribution over DAGs.

    ``dist`` is a mapping ``key -> probability`` (``d`` required) or an array
    aligned with ``space``.
    """
    if isinstance(dist, Mapping):
        if d is None:
            raise ValueError("d is required with a key mapping")
        keys = list(dist)
        p = np.array([dist[k] for k in keys], dtype=float)
        adj = np.array([state_from_key(k, d).adjacency for k in keys]).reshape(len(keys), d, d)
    else:
        if space is None:
            raise ValueError("space is required with an array distribution")
        p = np.asarray(dist, dtype=float)
        adj = space.adjacency
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"distribution is not normalized (sum={p.sum():.6g})")
    return FeatureReport(kind, np.tensordot(p, _feature_stack(adj, kind), axes=1))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence (natural log) between aligned distributions."""
    if isinstance(p, Mapping) or isinstance(q, Mapping):
        if set(p) != set(q):
            raise ValueError("distributions have different supports")
        keys = list(p)
        p = [p[k] for k in keys]
        q = [q[k] for k in keys]
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("distributions have different supports")
    m = 0.5 * (p + q)
    return max(0.0, float(0.5 * rel_entr(p, m).sum() + 0.5 * rel_entr(q, m).sum()))


def shd(a: np.ndarray, b: np.ndarray) -> int:
    """Structural Hamming distance; a reversed edge counts once."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    diff = (a != b) | (a.T != b.T)
    return int(np.triu(diff, 1).sum())


def auroc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve by threshold sweep and trapezoidal integration."""
    labels = np.asarray(labels, dtype=bool).ravel()
    scores = np.asarray(scores, dtype=float).ravel()
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[distinct]
    fps = np.cumsum(~y)[distinct]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return float(trapezoid(tpr, fpr))


def structural_metrics(samples: Sequence, g_star: DagState, edge_marginals: np.ndarray):
    """(expected SHD of the samples to ``g_star``, AUROC of the marginals for its edges)."""
    if not samples:
        raise ValueError("no samples")
    d = g_star.d
    ref = g_star.adjacency
    dists = []
    for smp in samples:
        a = smp.adjacency if isinstance(smp, DagState) else state_from_key(smp, d).adjacency
        dists.append(shd(a, ref))
    off = ~np.eye(d, dtype=bool)
    return float(np.mean(dists)), auroc(ref[off], np.asarray(edge_marginals)[off])


@dataclass
class PfTopEstimate:
    log_estimate: float
    stderr: float          # standard error of the linear-scale estimate
    log_top: float         # log of the beam part
    n_top: int
    n_mc: int
    capped: int = 0


def _log_factorial(k: int) -> float:
    return float(gammaln(k + 1))


def _traj_logprob_batch(policy, g: DagState, orders: np.ndarray) -> np.ndarray:
    """log P_F of each edge ordering (rows of ``orders``) ending with stop at ``g``."""
    edges = g.edges
    d = g.d
    M, K = orders.shape
    states = [initial_dag_state(d)] * M
    total = np.zeros(M)
    for t in range(K):
        _, le = policy.log_probs(states)
        acts = [edges[orders[m, t]] for m in range(M)]
        total += le[np.arange(M), [u * d + v for u, v in acts]]
        states = [_apply(s, u, v) for s, (u, v) in zip(states, acts)]
    ls, _ = policy.log_probs([g])
    return total + ls[0]


def estimate_log_pftop(policy, g: DagState, beam_width: int = 10, mc_samples: int = 100,
                       rng: np.random.Generator | None = None, max_attempts: int = 100,
                       return_beam: bool = False) -> PfTopEstimate:
    """Estimate P_F^T(g) = sum over edge orderings of P_F(tau).

    A beam search keeps the ``B`` most probable orderings; the remaining
    ``K! - B`` are covered by ``M`` uniform orderings drawn by rejection
    (at most ``max_attempts`` draws each), scaled by ``(K! - B) / M``.
    """
    if beam_width <= 0 and mc_samples <= 0:
        raise ValueError("beam_width and mc_samples cannot both be 0")
    rng = rng if rng is not None else np.random.default_rng()
    edges = g.edges
    K = len(edges)
    d = g.d
    log_kfact = _log_factorial(K)
    if K == 0:
        ls, _ = policy.log_probs([g])
        return PfTopEstimate(float(ls[0]), 0.0, float(ls[0]), 1, 0)

    beam = [((), 0.0, initial_dag_state(d))] if beam_width > 0 else []
    for _ in range(K if beam else 0):
        _, le = policy.log_probs([b[2] for b in beam])
        cand = []
        for bi, (order, score, st) in enumerate(beam):
            used = set(order)
            for ei, (u, v) in enumerate(edges):
                if ei not in used:
                    cand.append((score + le[bi, u * d + v], bi, ei))
        cand.sort(key=lambda c: -c[0])
        beam = [(beam[bi][0] + (ei,), sc, _apply(beam[bi][2], *edges[ei]))
                for sc, bi, ei in cand[:beam_width]]
    ls, _ = policy.log_probs([g])
    top_scores = np.array([b[1] for b in beam]) + ls[0]
    top_set = {b[0] for b in beam}
    n_top = len(beam)
    log_top = float(logsumexp(top_scores)) if n_top else -math.inf
    log_rest = log_kfact + math.log1p(-math.exp(math.log(n_top) - log_kfact)) if n_top and \
        math.log(n_top) < log_kfact else (-math.inf if n_top else log_kfact)

    capped = 0
    if mc_samples <= 0 or log_rest == -math.inf:
        return PfTopEstimate(log_top, 0.0, log_top, n_top, 0)
    complement = None
    orders = np.empty((mc_samples, K), dtype=np.int64)
    for m in range(mc_samples):
        for _ in range(max_attempts):
            perm = rng.permutation(K)
            if tuple(perm.tolist()) not in top_set:
                break
        else:
            capped += 1
            if complement is None and K <= 8:
                complement = [p for p in permutations(range(K)) if p not in top_set]
            if complement is not None:
                perm = np.array(complement[rng.integers(len(complement))])
        orders[m] = perm
    lps = _traj_logprob_batch(policy, g, orders)
    # estimate = top + exp(log_rest) * mean(exp(lps))
    log_mc = log_rest + float(logsumexp(lps)) - math.log(mc_samples)
    log_est = float(np.logaddexp(log_top, log_mc))
    scaled = np.exp(log_rest + lps)
    stderr = float(scaled.std(ddof=1) / math.sqrt(mc_samples)) if mc_samples > 1 else float("inf")
    return PfTopEstimate(log_est, stderr, log_top, n_top, mc_samples, capped)


@dataclass
class CorrelationReport:
    slope: float
    intercept: float
    r: float
    trimmed_slope: float
    trimmed_intercept: float
    trimmed_r: float
    n: int


def correlation_report(pairs: Sequence, trim: float = 0.05) -> CorrelationReport:
    """OLS of log-estimate on log-reward, plus a fit with the largest residuals trimmed."""
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 3:
        raise ValueError("need at least 3 (log estimate, log reward) pairs")
    y, x = arr[:, 0], arr[:, 1]
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("degenerate variance")
    fit = stats.linregress(x, y)
    res = np.abs(y - (fit.intercept + fit.slope * x))
    keep = np.argsort(res, kind="stable")[: max(3, int(math.ceil((1 - trim) * len(x))))]
    xt, yt = x[keep], y[keep]
    if np.ptp(xt) == 0 or np.ptp(yt) == 0:
        tfit = fit
    else:
        tfit = stats.linregress(xt, yt)
    return CorrelationReport(float(fit.slope), float(fit.intercept), float(fit.rvalue),
                             float(tfit.slope), float(tfit.intercept), float(tfit.rvalue), len(x))
