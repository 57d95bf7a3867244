"""Merging operators: ToMe, K-Medoids, DPC-KNN, SiT, Sinkhorn, PatchMerger.

Hard merges return a :class:`HardAssignment` whose cluster ids are ordered by
the input index of each cluster's centre (or representative), so cluster
``c`` is output row ``c``. Soft merges return a :class:`SoftAssignment`.
"""

from dataclasses import dataclass
from fractions import Fraction
import math
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from ._validation import (check_budget, check_seed, check_tokens, check_vector,
                          stable_top)
from .prune import _softmax, _wrap, topk_prune
from .types import exact_rate


@dataclass(frozen=True, eq=False)
class HardAssignment:
    labels: np.ndarray
    centers: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if self.centers is not None:
            centers = np.asarray(self.centers, dtype=np.int64)
            centers.setflags(write=False)
            object.__setattr__(self, "centers", centers)

    @property
    def n_clusters(self):
        if self.centers is not None:
            return self.centers.size
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def members(self, c):
        return np.flatnonzero(self.labels == c)


@dataclass(frozen=True, eq=False)
class SoftAssignment:
    """Dense ``(C, P)`` assignment weights.

    ``normalized`` names the axis that sums to one: ``"column"`` (each token
    distributes unit mass over clusters) or ``"row"`` (each cluster is a
    convex combination of tokens). ``empty`` flags clusters that received no
    mass and were emitted as zero vectors.
    """

    weights: np.ndarray
    normalized: str = "column"
    empty: np.ndarray | None = None

    def hard_labels(self):
        """Argmax cluster of every token, lowest cluster id on ties."""
        return np.argmax(self.weights, axis=0)


class QueryBank(NamedTuple):
    queries: np.ndarray

    @classmethod
    def random(cls, n_clusters, dim, seed):
        """i.i.d. normal queries with variance ``1 / dim``."""
        if n_clusters < 1 or dim < 1:
            raise ValueError("query bank needs n_clusters >= 1 and dim >= 1")
        rng = np.random.default_rng(check_seed(seed))
        return cls(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(n_clusters, dim)))


def init_predictor(dim, n_clusters, seed):
    """Seeded ``(dim, n_clusters)`` weight matrix for :func:`sit_merge`."""
    return QueryBank.random(n_clusters, dim, seed).queries.T.copy()


def _cluster_means(x, labels, n_clusters, weights=None):
    out = np.zeros((n_clusters, x.shape[1]))
    for c in range(n_clusters):
        m = labels == c
        if weights is not None and weights[m].sum() > 0:
            w = weights[m]
            out[c] = w @ x[m] / w.sum()
        else:
            out[c] = x[m].mean(axis=0)
    return out


def _assign_nearest(dist, centers):
    labels = np.argmin(dist[:, centers], axis=1)
    labels[centers] = np.arange(centers.size)
    return labels


# -- hard merging ---------------------------------------------------------------

def tome_merge_count(n_tokens, rate):
    """Merges ToMe performs on ``n_tokens`` at per-stage keep ``rate``."""
    return math.floor(n_tokens * (1 - exact_rate(rate)))


def tome_merge(tokens, rate=None, n_merge=None, metric=None):
    """Bipartite soft matching.

    The first ``2 * floor(P/2)`` tokens alternate between partition A (even
    positions) and B (odd positions); with odd ``P`` the last token joins B.
    Every A token proposes its most cosine-similar B token, the ``m``
    strongest proposals are accepted and each B token is replaced by the mean
    of itself and the A tokens merged into it.

    Parameters
    ----------
    rate : float, optional
        Per-stage keep rate, at least 0.5; ``m = floor(P * (1 - rate))``.
    n_merge : int, optional
        Explicit merge count ``m``, at most ``floor(P / 2)``.
    metric : array, optional
        Alternative ``(P, D')`` features for the similarity (e.g. attention
        keys). Defaults to the tokens themselves.
    """
    x = check_tokens(tokens)
    P = x.shape[0]
    if P < 2:
        raise ValueError("ToMe needs at least two tokens")
    if (rate is None) == (n_merge is None):
        raise ValueError("pass exactly one of rate or n_merge")
    if rate is not None:
        if exact_rate(rate) < Fraction(1, 2):
            raise ValueError(
                f"ToMe cannot keep fewer than 50% of tokens per stage (rate={rate})")
        if exact_rate(rate) > 1:
            raise ValueError(f"rate must be at most 1, got {rate}")
        n_merge = tome_merge_count(P, rate)
    m = check_budget(n_merge, P // 2, name="n_merge", low=0)

    feats = x if metric is None else check_tokens(metric, name="metric")
    if feats.shape[0] != P:
        raise ValueError("metric must have one row per token")
    half = P // 2
    a_idx = np.arange(0, 2 * half, 2)
    b_idx = np.setdiff1d(np.arange(P), a_idx)

    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    unit = feats / np.where(norms > 0, norms, 1.0)
    sim = unit[a_idx] @ unit[b_idx].T
    best_b = np.argmax(sim, axis=1)
    best_val = sim[np.arange(half), best_b]
    merged_a = np.argsort(-best_val, kind="stable")[:m]

    target = np.arange(P)
    target[a_idx[merged_a]] = b_idx[best_b[merged_a]]
    # representative of a cluster = lowest index among its members
    roots = np.unique(target)
    rep_of_root = {r: np.flatnonzero(target == r).min() for r in roots}
    reps = np.array(sorted(rep_of_root.values()))
    cluster_of_root = {r: int(np.searchsorted(reps, rep_of_root[r])) for r in roots}
    labels = np.array([cluster_of_root[t] for t in target])
    merged = _cluster_means(x, labels, reps.size)
    return _wrap(tokens, merged), HardAssignment(labels, reps)


def kmedoids_objective(tokens, assignment):
    """Sum of l2 distances of every token to its cluster medoid."""
    x = check_tokens(tokens)
    medoids = assignment.centers[assignment.labels]
    return float(np.linalg.norm(x - x[medoids], axis=1).sum())


def kmedoids_cluster(tokens, scores, k, iters=3, return_history=False):
    """Alternating K-Medoids initialised at the ``k`` most attended tokens.

    Each iteration assigns tokens to the nearest medoid (l2, lowest medoid
    index on ties, medoids always in their own cluster) and then moves each
    medoid to the member with the smallest summed distance to the others.
    A final assignment step ties the labels to the returned medoids.
    """
    x = check_tokens(tokens)
    scores = check_vector(scores, "scores", length=x.shape[0])
    k = check_budget(k, x.shape[0])
    if iters < 0:
        raise ValueError("iters must be nonnegative")
    dist = cdist(x, x)
    medoids = topk_prune(scores, k)
    history = []
    for _ in range(iters):
        labels = _assign_nearest(dist, medoids)
        history.append(float(dist[np.arange(x.shape[0]), medoids[labels]].sum()))
        updated = np.empty_like(medoids)
        for c in range(k):
            members = np.flatnonzero(labels == c)
            cost = dist[np.ix_(members, members)].sum(axis=1)
            updated[c] = members[np.argmin(cost)]
        medoids = np.sort(updated)
    labels = _assign_nearest(dist, medoids)
    history.append(float(dist[np.arange(x.shape[0]), medoids[labels]].sum()))
    result = (_wrap(tokens, x[medoids]), HardAssignment(labels, medoids))
    if return_history:
        return result + (history,)
    return result


def dpc_scores(tokens, k_nn=5):
    """Density-peak scores ``rho * delta`` with a kNN density kernel.

    ``rho_i = exp(-mean of squared distances to the k nearest neighbours)``
    (self excluded); ``delta_i`` is the distance to the nearest token of
    higher density, and the maximum pairwise distance for the densest token.
    Equal densities are ordered by index, lower index counting as denser.
    """
    x = check_tokens(tokens)
    P = x.shape[0]
    k_nn = check_budget(k_nn, P - 1, name="k_nn")
    dist = cdist(x, x)
    off = dist + np.diag(np.full(P, np.inf))
    knn = np.sort(off, axis=1)[:, :k_nn]
    rho = np.exp(-np.mean(knn ** 2, axis=1))
    idx = np.arange(P)
    higher = (rho[None, :] > rho[:, None]) | (
        (rho[None, :] == rho[:, None]) & (idx[None, :] < idx[:, None]))
    masked = np.where(higher, dist, np.inf)
    delta = masked.min(axis=1)
    top = ~higher.any(axis=1)
    delta[top] = dist.max()
    return rho * delta, rho, delta


def dpcknn_cluster(tokens, k, k_nn=5, importance=None):
    """DPC-KNN clustering; clusters are (importance-weighted) member means."""
    x = check_tokens(tokens)
    k = check_budget(k, x.shape[0])
    if x.shape[0] == 1:
        return _wrap(tokens, x.copy()), HardAssignment(np.zeros(1, dtype=np.int64), [0])
    score, _, _ = dpc_scores(x, k_nn)
    if importance is not None:
        importance = check_vector(importance, "importance", length=x.shape[0],
                                  nonnegative=True)
    centers = stable_top(score, k)
    labels = _assign_nearest(cdist(x, x), centers)
    merged = _cluster_means(x, labels, k, importance)
    return _wrap(tokens, merged), HardAssignment(labels, centers)


# -- soft merging ---------------------------------------------------------------

def soft_merge(x, weights):
    """Cluster features as weight-renormalised token means.

    Row ``i`` is ``sum_j W[i, j] x_j / sum_j W[i, j]``; clusters with zero
    mass become zero vectors and are flagged.
    """
    mass = weights.sum(axis=1)
    empty = ~(mass > 0)
    safe = np.where(empty, 1.0, mass)
    out = (weights @ x) / safe[:, None]
    out[empty] = 0.0
    return out, empty


def sit_merge(tokens, weight, bias=None):
    """Soft clustering from a linear assignment predictor.

    ``weight`` maps features to ``C`` cluster logits, shape ``(D, C)``. Each
    token's logits are softmaxed over clusters, giving a column-stochastic
    ``(C, P)`` assignment.
    """
    x = check_tokens(tokens)
    weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    if weight.shape[0] != x.shape[1]:
        raise ValueError(f"predictor expects D={weight.shape[0]}, tokens have D={x.shape[1]}")
    logits = x @ weight
    if bias is not None:
        logits = logits + check_vector(bias, "bias", length=weight.shape[1])
    A = _softmax(logits, axis=1).T
    merged, empty = soft_merge(x, A)
    return _wrap(tokens, merged), SoftAssignment(A, "column", empty)


class SinkhornResult(NamedTuple):
    transport: np.ndarray
    row_residual: float
    col_residual: float


def sinkhorn_knopp(sim, eps=1.0, iters=3, row_marginals=None, col_marginals=None):
    """Entropic transport plan ``diag(u) exp(sim / eps) diag(v)``.

    Runs ``iters`` alternating row-then-column scalings in the log domain,
    starting from ``exp(sim / eps)`` rescaled to the total marginal mass.
    Default marginals are uniform with unit total mass.

    Returns
    -------
    SinkhornResult
        The plan and the max absolute row / column marginal residuals.
    """
    sim = np.atleast_2d(np.asarray(sim, dtype=np.float64))
    if not np.all(np.isfinite(sim)):
        raise ValueError("similarity matrix must be finite")
    if not eps > 0:
        raise ValueError("eps must be positive")
    if iters < 0:
        raise ValueError("iters must be nonnegative")
    C, P = sim.shape
    r = np.full(C, 1.0 / C) if row_marginals is None else check_vector(
        row_marginals, "row_marginals", length=C)
    c = np.full(P, 1.0 / P) if col_marginals is None else check_vector(
        col_marginals, "col_marginals", length=P)
    if np.any(r <= 0) or np.any(c <= 0):
        raise ValueError("marginals must be positive")
    if not math.isclose(r.sum(), c.sum(), rel_tol=1e-9):
        raise ValueError(f"marginal totals differ: {r.sum()} vs {c.sum()}")

    log_k = sim / eps
    log_r, log_c = np.log(r), np.log(c)
    f = np.full(C, np.log(r.sum()) - logsumexp(log_k))
    g = np.zeros(P)
    for _ in range(iters):
        f = log_r - logsumexp(log_k + g[None, :], axis=1)
        g = log_c - logsumexp(log_k + f[:, None], axis=0)
    T = np.exp(log_k + f[:, None] + g[None, :])
    return SinkhornResult(T, float(np.max(np.abs(T.sum(axis=1) - r))),
                          float(np.max(np.abs(T.sum(axis=0) - c))))


def _queries(queries, dim):
    q = queries.queries if isinstance(queries, QueryBank) else queries
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if q.shape[1] != dim:
        raise ValueError(f"queries have D={q.shape[1]}, tokens have D={dim}")
    if not np.all(np.isfinite(q)):
        raise ValueError("queries must be finite")
    return q


def sinkhorn_merge(tokens, queries, eps=1.0, iters=3):
    """Query clustering with a Sinkhorn-balanced cosine-similarity assignment.

    Marginals are uniform with every token carrying unit mass (each query
    receives ``P / C``); the plan is column-normalised before merging.
    """
    x = check_tokens(tokens)
    q = _queries(queries, x.shape[1])
    xn = np.linalg.norm(x, axis=1)
    qn = np.linalg.norm(q, axis=1)
    if np.any(xn == 0):
        raise ValueError(f"token {int(np.flatnonzero(xn == 0)[0])} has zero norm")
    if np.any(qn == 0):
        raise ValueError(f"query {int(np.flatnonzero(qn == 0)[0])} has zero norm")
    sim = (q / qn[:, None]) @ (x / xn[:, None]).T
    C, P = sim.shape
    plan = sinkhorn_knopp(sim, eps, iters, np.full(C, P / C), np.ones(P)).transport
    A = plan / plan.sum(axis=0, keepdims=True)
    merged, empty = soft_merge(x, A)
    return _wrap(tokens, merged), SoftAssignment(A, "column", empty)


def patchmerger_merge(tokens, queries):
    """Each query softmaxes its dot products over the tokens."""
    x = check_tokens(tokens)
    q = _queries(queries, x.shape[1])
    W = _softmax(q @ x.T, axis=1)
    return _wrap(tokens, W @ x), SoftAssignment(W, "row", np.zeros(q.shape[0], dtype=bool))
