"""Pruning operators: fixed l_p patterns, Top-K, EViT, DynamicViT, ATS.

Index sets are returned as sorted ``int64`` arrays. Ties between equal
scores are always broken towards the lowest index.
"""

import numpy as np

from ._validation import (check_budget, check_seed, check_tokens, check_vector,
                          stable_top)
from .types import TokenSet

NORMS = {"1": 1, "l1": 1, "2": 2, "l2": 2, "inf": np.inf, "linf": np.inf}

# distances closer than this are treated as the same threshold shell
_SHELL_DECIMALS = 9


def _norm_order(p):
    if isinstance(p, str):
        key = p.lower()
        if key not in NORMS:
            raise ValueError(f"unsupported norm {p!r}; use 1, 2 or inf")
        return NORMS[key]
    if p in (1, 2) or p == np.inf:
        return p
    raise ValueError(f"unsupported norm {p!r}; use 1, 2 or inf")


def grid_distances(grid, p):
    """Distance of every raster position to the grid centre ((H-1)/2, (W-1)/2)."""
    H, W = (int(g) for g in grid)
    if H < 1 or W < 1:
        raise ValueError(f"invalid grid {grid}")
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    offsets = np.stack([rows.ravel() - (H - 1) / 2, cols.ravel() - (W - 1) / 2], axis=1)
    return np.linalg.norm(offsets, ord=_norm_order(p), axis=1)


def lp_fixed_pattern(grid, p, k):
    """Centre-radial keep set of roughly ``k`` tokens.

    Tokens are kept in whole distance shells around the grid centre. The
    shell threshold minimises ``abs(n_kept - k)``; when an under- and an
    overshoot are equally far from ``k`` the smaller set wins. The empty set
    is never returned.
    """
    dist = np.round(grid_distances(grid, p), _SHELL_DECIMALS)
    k = check_budget(k, dist.size)
    levels, counts = np.unique(dist, return_counts=True)
    cumulative = np.cumsum(counts)
    gap = np.abs(cumulative - k)
    # lexicographic: smallest gap, then smallest set
    best = np.lexsort((cumulative, gap))[0]
    return np.flatnonzero(dist <= levels[best])


def topk_prune(scores, k):
    """Indices of the ``k`` largest CLS attention scores."""
    scores = check_vector(scores, "scores")
    k = check_budget(k, scores.size)
    return stable_top(scores, k)


def _wrap(tokens, spatial):
    if isinstance(tokens, TokenSet):
        return tokens.with_spatial(spatial)
    return spatial


def evit_reduce(tokens, scores, k, exclude=None):
    """Top-K pruning plus one attention-weighted fused token.

    The pruned tokens are averaged with weights proportional to their CLS
    attention (renormalised over the pruned subset) and the result is
    appended after the kept tokens. Zero total pruned attention falls back to
    a plain mean. ``k == P`` returns the input unchanged with no fused token.
    Indices in ``exclude`` are never kept (they always enter the fused token).

    Returns
    -------
    reduced : ndarray or TokenSet
        ``(k + 1, D)`` tokens, same container type as the input.
    kept : ndarray
        Sorted kept indices.
    """
    x = check_tokens(tokens)
    scores = check_vector(scores, "scores", length=x.shape[0], nonnegative=True)
    k = check_budget(k, x.shape[0])
    if k == x.shape[0]:
        return _wrap(tokens, x), np.arange(k)
    select = scores
    if exclude is not None and len(exclude):
        select = scores.copy()
        select[np.asarray(exclude, dtype=np.int64)] = -1.0
    kept = topk_prune(select, k)
    pruned = np.setdiff1d(np.arange(x.shape[0]), kept)
    w = scores[pruned]
    total = w.sum()
    w = w / total if total > 0 else np.full(pruned.size, 1.0 / pruned.size)
    fused = w @ x[pruned]
    return _wrap(tokens, np.vstack([x[kept], fused])), kept


def dynamicvit_select(probs, k):
    """Inference-time DynamicViT selection: keep the ``k`` most probable tokens."""
    probs = check_vector(probs, "probs")
    if np.any((probs < 0) | (probs > 1)):
        raise ValueError("keep probabilities must lie in [0, 1]")
    k = check_budget(k, probs.size)
    return stable_top(probs, k)


def _softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def gumbel_softmax_mask(logits, temperature=1.0, hard=False, seed=0):
    """Per-token keep mask from (keep, drop) logits with seeded Gumbel noise.

    ``mask = softmax((logits + g) / temperature)[:, 0]`` where
    ``g = -log(-log(U))``. With ``hard=True`` the mask is the one-hot argmax
    value (1.0 for keep); in a differentiable framework this is the forward
    value of the straight-through estimator.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError(f"logits must have shape (P, 2), got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    rng = np.random.default_rng(check_seed(seed))
    u = rng.random(logits.shape)
    # keep U inside (0, 1) so both logs stay finite
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).eps)
    g = -np.log(-np.log(u))
    y = _softmax((logits + g) / temperature, axis=1)
    if hard:
        return (np.argmax(y, axis=1) == 0).astype(np.float64)
    return y[:, 0]


def ats_sample(scores, max_keep, mode="fixed-quantile", seed=0):
    """Adaptive token sampling via inverse transform sampling of the CLS CDF.

    ``max_keep`` quantiles are mapped through the CDF of the L1-normalised
    scores to the first index whose cumulative mass reaches them. Repeated
    hits collapse to one token, so fewer than ``max_keep`` tokens may return.

    Parameters
    ----------
    mode : {"fixed-quantile", "seeded-uniform"}
        Mid-point quantiles ``(k - 0.5) / N`` or ``N`` seeded uniforms.
    """
    scores = check_vector(scores, "scores", nonnegative=True)
    total = scores.sum()
    if not total > 0:
        raise ValueError("ATS needs at least one positive attention score")
    n = check_budget(max_keep, scores.size, name="max_keep")
    cdf = np.cumsum(scores / total)
    cdf[-1] = 1.0
    if mode == "fixed-quantile":
        q = (np.arange(1, n + 1) - 0.5) / n
    elif mode == "seeded-uniform":
        # (0, 1] so a zero-mass leading token can never be hit
        q = 1.0 - np.random.default_rng(check_seed(seed)).random(n)
    else:
        raise ValueError(f"unknown ATS mode {mode!r}")
    # absorb cumsum round-off so quantiles on an exact boundary hit that token
    idx = np.searchsorted(cdf, q - 1e-12, side="left")
    return np.unique(np.minimum(idx, scores.size - 1))
