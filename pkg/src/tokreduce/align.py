"""Feature-alignment metrics between two models' representations.

All three take ``(n, d)`` matrices with samples as rows and centre the
columns internally.
"""

import numpy as np

PWCCA_RIDGE = 1e-10


def _check_pair(a, b, same_dim=False):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("feature matrices must be 2-D (samples x features)")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"sample counts differ: {a.shape[0]} vs {b.shape[0]}")
    if same_dim and a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2:
        raise ValueError("need at least two samples")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("feature matrices must be finite")
    return a - a.mean(axis=0), b - b.mean(axis=0)


def _unit_frobenius(x, name):
    norm = np.linalg.norm(x)
    if norm == 0:
        raise ValueError(f"{name} is constant across samples")
    return x / norm


def procrustes_distance(a, b):
    """Orthogonal Procrustes distance ``2 - 2 ||A^T B||_*`` of unit-norm centred inputs."""
    a, b = _check_pair(a, b, same_dim=True)
    a, b = _unit_frobenius(a, "A"), _unit_frobenius(b, "B")
    nuclear = np.linalg.svd(a.T @ b, compute_uv=False).sum()
    return float(max(2.0 - 2.0 * nuclear, 0.0))


def linear_cka(a, b):
    a, b = _check_pair(a, b)
    denom = np.linalg.norm(a.T @ a) * np.linalg.norm(b.T @ b)
    if denom == 0:
        raise ValueError("CKA undefined for zero-variance input")
    return float(np.linalg.norm(b.T @ a) ** 2 / denom)


def _whitener(cov, ridge):
    """Inverse square root of ``cov + ridge*I`` on its numerically supported span."""
    evals, evecs = np.linalg.eigh(cov + ridge * np.eye(cov.shape[0]))
    keep = evals > max(evals.max(), 0.0) * 1e-12
    if not np.any(keep):
        raise ValueError("no usable CCA directions (rank-deficient input)")
    return evecs[:, keep] / np.sqrt(evals[keep])


def cca(a, b, ridge=PWCCA_RIDGE):
    """Canonical correlations and A-side canonical variates.

    Returns ``(rho, variates)`` where ``variates`` is ``(n, k)`` with
    ``k = min(rank A, rank B)``.
    """
    a, b = _check_pair(a, b)
    n = a.shape[0]
    if n <= max(a.shape[1], b.shape[1]):
        raise ValueError(f"CCA needs more samples than features (n={n})")
    wa = _whitener(a.T @ a, ridge)
    wb = _whitener(b.T @ b, ridge)
    u, rho, _ = np.linalg.svd(wa.T @ (a.T @ b) @ wb, full_matrices=False)
    k = min(wa.shape[1], wb.shape[1])
    return np.clip(rho[:k], 0.0, 1.0), a @ wa @ u[:, :k]


def pwcca(a, b, ridge=PWCCA_RIDGE):
    """Projection-weighted CCA similarity of ``a`` relative to ``b``.

    Canonical correlations are averaged with weights proportional to how much
    of ``a``'s raw features each canonical variate accounts for, so the
    result is not symmetric in its arguments.
    """
    rho, variates = cca(a, b, ridge)
    a_c = np.asarray(a, dtype=np.float64)
    a_c = a_c - a_c.mean(axis=0)
    alpha = np.abs(variates.T @ a_c).sum(axis=1)
    if not alpha.sum() > 0:
        raise ValueError("degenerate canonical variates")
    return float(np.clip((alpha / alpha.sum()) @ rho, 0.0, 1.0))


ALIGN_METRICS = {
    "procrustes": procrustes_distance,
    "cka": linear_cka,
    "pwcca": pwcca,
}
