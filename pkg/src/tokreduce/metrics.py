"""Reduction-pattern comparison metrics."""

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from ._validation import check_labels, check_vector
from .types import DepthMap, exact_rate, keep_budget, record_depth


def _as_set(m):
    return {int(i) for i in m}


def ioa(m1, m2):
    """Intersection over area: ``|M1 & M2| / |M2|`` (M2 is the smaller-rate pattern)."""
    m1, m2 = _as_set(m1), _as_set(m2)
    if not m2:
        raise ValueError("IoA is undefined for an empty M2")
    return len(m1 & m2) / len(m2)


def iou(m1, m2):
    m1, m2 = _as_set(m1), _as_set(m2)
    union = m1 | m2
    if not union:
        raise ValueError("IoU is undefined for two empty sets")
    return len(m1 & m2) / len(union)


def _lower_bound(n_tokens, r1, r2, n_stages, denominator):
    if not 0 < exact_rate(r2) <= exact_rate(r1) <= 1:
        raise ValueError(f"rates must satisfy 0 < r2 <= r1 <= 1, got r1={r1}, r2={r2}")
    out = []
    for s in range(1, n_stages + 1):
        k1 = keep_budget(n_tokens, r1, s)
        k2 = keep_budget(n_tokens, r2, s)
        if k2 < 1:
            raise ValueError(f"floor(P * r2^{s}) = 0; no pattern to compare")
        overlap = k1 + k2 - n_tokens
        out.append(overlap / denominator(k2) if overlap >= 0 else 0.0)
    return out


def ioa_lower_bound(n_tokens, r1, r2, n_stages=3):
    """Smallest possible IoA at each stage between static patterns of rates r1 >= r2."""
    return _lower_bound(n_tokens, r1, r2, n_stages, lambda k2: k2)


def iou_lower_bound(n_tokens, r1, r2, n_stages=3):
    """Smallest possible IoU at each stage; same as the IoA bound over ``P``."""
    return _lower_bound(n_tokens, r1, r2, n_stages, lambda k2: n_tokens)


# -- clustering agreement -------------------------------------------------------

def _labels(a):
    if hasattr(a, "hard_labels"):
        return a.hard_labels()
    if hasattr(a, "labels"):
        a = a.labels
    return check_labels(a)


def contingency(c, k):
    c, k = _labels(c), _labels(k)
    if c.shape != k.shape:
        raise ValueError(f"partitions cover different element sets ({c.size} vs {k.size})")
    if c.size == 0:
        raise ValueError("partitions are empty")
    _, ci = np.unique(c, return_inverse=True)
    _, ki = np.unique(k, return_inverse=True)
    table = np.zeros((ci.max() + 1, ki.max() + 1), dtype=np.int64)
    np.add.at(table, (ci, ki), 1)
    return table


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def homogeneity(c, k):
    """``1 - H(C|K) / H(C)``; 1 when C has a single class."""
    n = contingency(c, k)
    h_c = _entropy(n.sum(axis=1))
    if h_c == 0.0:
        return 1.0
    n_k = n.sum(axis=0)
    nz = n > 0
    N = n.sum()
    cond = -np.sum(n[nz] / N * np.log(n[nz] / np.broadcast_to(n_k, n.shape)[nz]))
    return float(1.0 - cond / h_c)


def mutual_information(c, k):
    n = contingency(c, k)
    N = n.sum()
    outer = np.outer(n.sum(axis=1), n.sum(axis=0))
    nz = n > 0
    return float(np.sum(n[nz] / N * np.log(N * n[nz] / outer[nz])))


def nmi(c, k):
    """Mutual information normalised by the arithmetic mean of both entropies."""
    n = contingency(c, k)
    h_c, h_k = _entropy(n.sum(axis=1)), _entropy(n.sum(axis=0))
    if h_c == 0.0 and h_k == 0.0:
        # two single-cluster partitions of the same elements are identical
        return 1.0
    value = mutual_information(c, k) / ((h_c + h_k) / 2)
    return float(min(max(value, 0.0), 1.0))


# -- depth maps -----------------------------------------------------------------

def averaged_depth_map(records):
    """Position-wise mean survival depth over a collection of records."""
    records = list(records)
    if not records:
        raise ValueError("need at least one record")
    grid = records[0].grid
    if grid is None:
        raise ValueError("records must carry a grid layout")
    total = records[0].total_blocks
    for r in records[1:]:
        if r.grid != grid:
            raise ValueError(f"grid mismatch: {r.grid} vs {grid}")
        if r.total_blocks != total:
            raise ValueError("records disagree on total_blocks")
    depths = np.stack([record_depth(r) for r in records]).astype(np.float64)
    return DepthMap(grid, depths.mean(axis=0), total, len(records))


def _map_values(m):
    return m.mean_depth if isinstance(m, DepthMap) else check_vector(np.ravel(m), "map")


def _distribution(v):
    if np.any(v < 0):
        raise ValueError("distribution metrics need nonnegative maps")
    total = v.sum()
    if not total > 0:
        raise ValueError("map has zero mass")
    return v / total


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise ValueError("correlation undefined for a constant input")
    return float(np.clip(xc @ yc / (sx * sy), -1.0, 1.0))


def spearman(x, y):
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def jensen_shannon(p, q):
    """Jensen-Shannon divergence (natural log) between two distributions."""
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return np.sum(a[nz] * np.log(a[nz] / m[nz]))

    return float(max(0.5 * kl(p) + 0.5 * kl(q), 0.0))


def histogram_intersection(p, q):
    return float(np.minimum(p, q).sum())


def grid_coordinates(grid):
    H, W = grid
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)


def emd(p, q, ground):
    """Exact earth mover's distance between histograms ``p`` and ``q``.

    ``ground`` is an ``(n, n)`` metric cost matrix (zero diagonal, triangle
    inequality), which lets shared mass stay in place. The transportation LP is solved
    over the bins with positive mass with the HiGHS dual simplex, which
    returns a vertex (exact) optimum.
    """
    p = check_vector(p, "p", nonnegative=True)
    q = check_vector(q, "q", length=p.size, nonnegative=True)
    ground = np.asarray(ground, dtype=np.float64)
    if ground.shape != (p.size, p.size):
        raise ValueError("ground distance must be (n, n)")
    if p.size > 1024:
        raise ValueError("exact EMD is limited to 1024 bins")
    if not np.isclose(p.sum(), q.sum(), rtol=1e-9, atol=0):
        raise ValueError("histograms must carry equal mass")
    # mass that stays in place costs nothing; only the excess is transported
    common = np.minimum(p, q)
    supply, demand = p - common, q - common
    src, dst = np.flatnonzero(supply > 0), np.flatnonzero(demand > 0)
    if src.size == 0 or dst.size == 0:
        return 0.0
    a, b = supply[src], demand[dst]
    b = b * (a.sum() / b.sum())
    cost = ground[np.ix_(src, dst)]
    ns, nd = src.size, dst.size
    flat = np.arange(ns * nd)
    rows_eq = sparse.vstack([
        sparse.csr_matrix((np.ones(ns * nd), (flat // nd, flat)), shape=(ns, ns * nd)),
        sparse.csr_matrix((np.ones(ns * nd), (flat % nd, flat)), shape=(nd, ns * nd)),
    ]).tocsr()
    res = linprog(cost.ravel(), A_eq=rows_eq[:-1], b_eq=np.concatenate([a, b])[:-1],
                  bounds=(0, None), method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    flow = np.maximum(res.x, 0.0)
    return float(flow @ cost.ravel())


DEPTH_METRICS = ("pearson", "spearman", "jsd", "emd", "histogram")


def depth_map_similarity(a, b, metric="pearson"):
    """Compare two depth maps with a saliency-style metric.

    ``jsd``, ``emd`` and ``histogram`` first L1-normalise both maps; ``emd``
    uses the Euclidean distance between grid positions as ground cost.
    """
    va, vb = _map_values(a), _map_values(b)
    grid_a = a.grid if isinstance(a, DepthMap) else None
    grid_b = b.grid if isinstance(b, DepthMap) else None
    if grid_a is not None and grid_b is not None and grid_a != grid_b:
        raise ValueError(f"grid mismatch: {grid_a} vs {grid_b}")
    if va.shape != vb.shape:
        raise ValueError("maps differ in size")
    if metric == "pearson":
        return pearson(va, vb)
    if metric == "spearman":
        return spearman(va, vb)
    if metric not in ("jsd", "emd", "histogram"):
        raise ValueError(f"unknown metric {metric!r}; choose from {DEPTH_METRICS}")
    p, q = _distribution(va), _distribution(vb)
    if metric == "jsd":
        return jensen_shannon(p, q)
    if metric == "histogram":
        return histogram_intersection(p, q)
    grid = grid_a or grid_b or (1, va.size)
    coords = grid_coordinates(grid)
    return emd(p, q, cdist(coords, coords))


def rank_correlation(x, y):
    """Spearman correlation with average ranks for ties."""
    x = check_vector(x, "x")
    y = check_vector(y, "y", length=x.size)
    if x.size < 3:
        raise ValueError("rank correlation needs at least 3 points")
    if np.unique(x).size < 2 or np.unique(y).size < 2:
        raise ValueError("rank correlation needs at least two distinct values per input")
    return spearman(x, y)
