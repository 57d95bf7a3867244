"""scikit-learn style wrappers around the reduction operators.

Each estimator treats one token matrix ``X`` of shape ``(P, D)`` as the data
(tokens are the samples). CLS attention scores or keep probabilities, where
a method needs them, are passed as the ``scores`` keyword of ``fit`` and
``transform``.

>>> import numpy as np
>>> X = np.eye(4)
>>> TopKPruner(n_keep=2).fit_transform(X, scores=[0.1, 0.4, 0.3, 0.2]).shape
(2, 4)
"""

import math

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_tokens, check_vector
from .merge import (QueryBank, dpcknn_cluster, init_predictor, kmedoids_cluster,
                    patchmerger_merge, sinkhorn_merge, sit_merge, tome_merge)
from .prune import (ats_sample, dynamicvit_select, evit_reduce, lp_fixed_pattern,
                    topk_prune)
from .types import keep_budget


class _BaseReducer(TransformerMixin, BaseEstimator):
    """Shared fit/transform plumbing.

    Subclasses implement ``_reduce(X, scores)`` returning the reduced token
    matrix and a dict of fitted attributes.
    """

    needs_scores = False

    def _budget(self, n_tokens, count_param="n_keep"):
        count = getattr(self, count_param)
        if (count is None) == (self.keep_rate is None):
            raise ValueError(f"set exactly one of {count_param} or keep_rate")
        if count is not None:
            return count
        return max(keep_budget(n_tokens, self.keep_rate, 1), 1)

    def _validate(self, X, scores, reset):
        X = check_tokens(X, name="X")
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, {type(self).__name__} was fitted with "
                f"{self.n_features_in_}")
        if self.needs_scores:
            if scores is None:
                raise ValueError(f"{type(self).__name__} needs per-token scores")
            scores = check_vector(scores, "scores", length=X.shape[0])
        return X, scores

    def fit(self, X, y=None, scores=None):
        self.fit_transform(X, scores=scores)
        return self

    def fit_transform(self, X, y=None, scores=None):
        X, scores = self._validate(X, scores, reset=True)
        self._init_params(X)
        reduced, attrs = self._reduce(X, scores)
        for name, value in attrs.items():
            setattr(self, name, value)
        return reduced

    def transform(self, X, scores=None):
        check_is_fitted(self, "n_features_in_")
        X, scores = self._validate(X, scores, reset=False)
        return self._reduce(X, scores)[0]

    def _init_params(self, X):
        pass


class TopKPruner(_BaseReducer):
    """Keep the ``n_keep`` tokens with the highest CLS attention."""

    needs_scores = True

    def __init__(self, n_keep=None, keep_rate=None):
        self.n_keep = n_keep
        self.keep_rate = keep_rate

    def _reduce(self, X, scores):
        kept = topk_prune(scores, self._budget(X.shape[0]))
        return X[kept], {"kept_indices_": kept}


class EViTPruner(_BaseReducer):
    """Top-K pruning with an attention-weighted fused token appended."""

    needs_scores = True

    def __init__(self, n_keep=None, keep_rate=None):
        self.n_keep = n_keep
        self.keep_rate = keep_rate

    def _reduce(self, X, scores):
        reduced, kept = evit_reduce(X, np.maximum(scores, 0.0), self._budget(X.shape[0]))
        fused = reduced[-1] if reduced.shape[0] > kept.size else None
        return reduced, {"kept_indices_": kept, "fused_token_": fused}


class DynamicViTPruner(_BaseReducer):
    """Keep the most probable tokens; ``scores`` are keep probabilities."""

    needs_scores = True

    def __init__(self, n_keep=None, keep_rate=None):
        self.n_keep = n_keep
        self.keep_rate = keep_rate

    def _reduce(self, X, scores):
        kept = dynamicvit_select(scores, self._budget(X.shape[0]))
        return X[kept], {"kept_indices_": kept}


class ATSPruner(_BaseReducer):
    """Adaptive token sampling; keeps at most ``n_keep`` tokens."""

    needs_scores = True

    def __init__(self, n_keep=None, keep_rate=None, mode="fixed-quantile", random_state=0):
        self.n_keep = n_keep
        self.keep_rate = keep_rate
        self.mode = mode
        self.random_state = random_state

    def _reduce(self, X, scores):
        kept = ats_sample(scores, self._budget(X.shape[0]), self.mode, self.random_state)
        return X[kept], {"kept_indices_": kept}


class LpPatternPruner(_BaseReducer):
    """Fixed centre-radial pattern; rows of ``X`` follow the raster of ``grid``."""

    def __init__(self, grid=(14, 14), norm=2, n_keep=None, keep_rate=None):
        self.grid = grid
        self.norm = norm
        self.n_keep = n_keep
        self.keep_rate = keep_rate

    def _reduce(self, X, scores):
        if X.shape[0] != self.grid[0] * self.grid[1]:
            raise ValueError(f"X has {X.shape[0]} rows, grid {self.grid} needs "
                             f"{self.grid[0] * self.grid[1]}")
        kept = lp_fixed_pattern(self.grid, self.norm, self._budget(X.shape[0]))
        return X[kept], {"kept_indices_": kept}


class ToMeMerger(_BaseReducer):
    """Bipartite soft matching; ``keep_rate`` must be at least 0.5."""

    def __init__(self, keep_rate=0.5, n_merge=None):
        self.keep_rate = keep_rate
        self.n_merge = n_merge

    def _reduce(self, X, scores):
        if self.n_merge is not None:
            merged, assign = tome_merge(X, n_merge=self.n_merge)
        else:
            merged, assign = tome_merge(X, rate=self.keep_rate)
        return merged, {"labels_": assign.labels, "representatives_": assign.centers}


class _ClusterReducer(ClusterMixin, _BaseReducer):
    def predict(self, X):
        """Nearest fitted cluster feature for each row of ``X``."""
        check_is_fitted(self, "cluster_centers_")
        X = check_tokens(X, name="X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        d = ((X[:, None, :] - self.cluster_centers_[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1)


class KMedoidsMerger(_ClusterReducer):
    """K-Medoids initialised at the most attended tokens."""

    needs_scores = True

    def __init__(self, n_clusters=None, keep_rate=None, n_iter=3):
        self.n_clusters = n_clusters
        self.keep_rate = keep_rate
        self.n_iter = n_iter

    def _reduce(self, X, scores):
        merged, assign = kmedoids_cluster(X, scores, self._budget(X.shape[0], "n_clusters"),
                                          self.n_iter)
        return merged, {"labels_": assign.labels, "medoid_indices_": assign.centers,
                        "cluster_centers_": merged}


class DPCKNNMerger(_ClusterReducer):
    """Density-peak clustering; optional importance weights via ``scores``."""

    def __init__(self, n_clusters=None, keep_rate=None, k_nn=5):
        self.n_clusters = n_clusters
        self.keep_rate = keep_rate
        self.k_nn = k_nn

    def _validate(self, X, scores, reset):
        X, _ = super()._validate(X, None, reset)
        if scores is not None:
            scores = check_vector(scores, "scores", length=X.shape[0], nonnegative=True)
        return X, scores

    def _reduce(self, X, scores):
        merged, assign = dpcknn_cluster(X, self._budget(X.shape[0], "n_clusters"),
                                        self.k_nn, importance=scores)
        return merged, {"labels_": assign.labels, "center_indices_": assign.centers,
                        "cluster_centers_": merged}


class _SoftReducer(_BaseReducer):
    def _n_clusters(self, n_tokens):
        if (self.n_clusters is None) == (self.keep_rate is None):
            raise ValueError("set exactly one of n_clusters or keep_rate")
        if self.n_clusters is not None:
            return int(self.n_clusters)
        return max(math.floor(n_tokens * self.keep_rate), 1)


class SiTMerger(_SoftReducer):
    """Soft clustering with a seeded linear assignment predictor (``coef_``)."""

    def __init__(self, n_clusters=None, keep_rate=None, random_state=0):
        self.n_clusters = n_clusters
        self.keep_rate = keep_rate
        self.random_state = random_state

    def _init_params(self, X):
        self.coef_ = init_predictor(X.shape[1], self._n_clusters(X.shape[0]), self.random_state)

    def _reduce(self, X, scores):
        merged, assign = sit_merge(X, self.coef_)
        return merged, {"assignment_": assign.weights, "labels_": assign.hard_labels()}


class SinkhornMerger(_SoftReducer):
    """Query clustering balanced by Sinkhorn-Knopp (``queries_``)."""

    def __init__(self, n_clusters=None, keep_rate=None, eps=1.0, n_iter=3, random_state=0):
        self.n_clusters = n_clusters
        self.keep_rate = keep_rate
        self.eps = eps
        self.n_iter = n_iter
        self.random_state = random_state

    def _init_params(self, X):
        self.queries_ = QueryBank.random(self._n_clusters(X.shape[0]), X.shape[1],
                                         self.random_state).queries

    def _reduce(self, X, scores):
        merged, assign = sinkhorn_merge(X, self.queries_, self.eps, self.n_iter)
        return merged, {"assignment_": assign.weights, "labels_": assign.hard_labels()}


class PatchMergerMerger(_SoftReducer):
    """Query clustering with a per-query softmax over tokens (``queries_``)."""

    def __init__(self, n_clusters=None, keep_rate=None, random_state=0):
        self.n_clusters = n_clusters
        self.keep_rate = keep_rate
        self.random_state = random_state

    def _init_params(self, X):
        self.queries_ = QueryBank.random(self._n_clusters(X.shape[0]), X.shape[1],
                                         self.random_state).queries

    def _reduce(self, X, scores):
        merged, assign = patchmerger_merge(X, self.queries_)
        return merged, {"assignment_": assign.weights, "labels_": assign.hard_labels()}
