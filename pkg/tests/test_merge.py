import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tokreduce.merge import (QueryBank, dpc_scores, dpcknn_cluster, init_predictor,
                             kmedoids_cluster, kmedoids_objective, patchmerger_merge,
                             sinkhorn_knopp, sinkhorn_merge, sit_merge, tome_merge,
                             tome_merge_count)
from tokreduce.toyvit import synth_tokens
from tokreduce.types import TokenSet

# six decimals keeps squared distances clear of float underflow
coords = st.floats(-10, 10).map(lambda v: round(v, 6))
token_mats = st.integers(2, 10).flatmap(lambda P: st.integers(1, 5).flatmap(
    lambda D: arrays(np.float64, (P, D), elements=coords)))


def two_blobs(rng, size=3, dim=4, gap=50.0):
    a = rng.normal(scale=0.1, size=(size, dim))
    b = rng.normal(scale=0.1, size=(size, dim)) + gap
    return np.vstack([a, b])


# -- ToMe ---------------------------------------------------------------------

def tome_oracle(x, m):
    """Straight-line bipartite matching: returns {frozenset(members)}."""
    P = len(x)
    half = P // 2
    A = [2 * i for i in range(half)]
    B = [i for i in range(P) if i not in A]

    def unit(i):
        n = math.sqrt(sum(v * v for v in x[i]))
        return [v / n for v in x[i]] if n else [0.0] * len(x[i])

    def cos(i, j):
        return sum(u * v for u, v in zip(unit(i), unit(j)))

    edges = []
    for pos, a in enumerate(A):
        sims = [cos(a, b) for b in B]
        best = max(range(len(B)), key=lambda j: (sims[j], -j))
        edges.append((-sims[best], pos, a, B[best]))
    edges.sort()
    groups = {i: {i} for i in range(P)}
    for _, _, a, b in edges[:m]:
        groups[b] |= groups.pop(a)
    return {frozenset(g) for g in groups.values()}


class TestToMe:
    def test_identical_pairs(self):
        a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        merged, assign = tome_merge(np.array([a, a, b, b]), n_merge=2)
        np.testing.assert_array_equal(merged, [a, b])
        assert assign.labels.tolist() == [0, 0, 1, 1]
        assert assign.centers.tolist() == [0, 2]

    def test_zero_merges_identity(self, rng):
        x = rng.normal(size=(5, 3))
        merged, assign = tome_merge(x, n_merge=0)
        np.testing.assert_array_equal(merged, x)
        assert assign.labels.tolist() == list(range(5))

    def test_all_identical(self):
        merged, _ = tome_merge(np.full((4, 3), 2.5), n_merge=2)
        np.testing.assert_array_equal(merged, np.full((2, 3), 2.5))

    def test_rate_below_half_rejected(self, rng):
        with pytest.raises(ValueError, match="50%"):
            tome_merge(rng.normal(size=(8, 2)), rate=0.49)

    def test_too_many_merges(self, rng):
        with pytest.raises(ValueError):
            tome_merge(rng.normal(size=(8, 2)), n_merge=5)

    def test_equal_cosine_picks_lowest_b(self):
        # tokens 3 and 5 share a direction, so token 0 proposes B token 3
        x = np.array([[1, -4], [0, 0], [0, 0], [0, -1], [0, 0], [0, -0.75]])
        _, assign = tome_merge(x, n_merge=1)
        assert assign.labels[0] == assign.labels[3]

    def test_rate_count(self):
        assert tome_merge_count(196, 0.5) == 98
        assert tome_merge_count(196, 0.7) == 58

    @settings(max_examples=100)
    @given(token_mats, st.data())
    def test_matches_oracle(self, x, data):
        m = data.draw(st.integers(0, x.shape[0] // 2))
        merged, assign = tome_merge(x, n_merge=m)
        groups = {frozenset(assign.members(c).tolist()) for c in range(assign.n_clusters)}
        assert groups == tome_oracle(x, m)
        assert merged.shape[0] == x.shape[0] - m
        for c in range(assign.n_clusters):
            members = assign.members(c)
            assert assign.centers[c] == members.min()
            np.testing.assert_allclose(merged[c], x[members].mean(axis=0), atol=1e-12)


# -- K-Medoids -----------------------------------------------------------------

def brute_kmedoids(x, k):
    d = np.linalg.norm(x[:, None] - x[None], axis=2)
    best = min(itertools.combinations(range(len(x)), k),
               key=lambda c: d[:, list(c)].min(axis=1).sum())
    return sorted(best)


class TestKMedoids:
    def test_full_keep_identity(self, rng):
        x = rng.normal(size=(5, 2))
        merged, assign = kmedoids_cluster(x, rng.random(5), 5)
        np.testing.assert_array_equal(merged, x)
        assert assign.labels.tolist() == list(range(5))

    @pytest.mark.parametrize("seed", range(10))
    def test_two_blobs_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        x = two_blobs(rng)
        merged, assign = kmedoids_cluster(x, rng.random(6), 2)
        assert assign.centers.tolist() == brute_kmedoids(x, 2)
        np.testing.assert_array_equal(merged, x[assign.centers])

    def test_identical_tokens(self):
        x = np.ones((4, 2))
        _, assign = kmedoids_cluster(x, [0.1, 0.4, 0.3, 0.2], 2, iters=0)
        assert assign.centers.tolist() == [1, 2]
        assert assign.labels.tolist() == [0, 0, 1, 0]

    @settings(max_examples=60)
    @given(token_mats, st.data())
    def test_objective_non_increasing(self, x, data):
        k = data.draw(st.integers(1, x.shape[0]))
        scores = data.draw(arrays(np.float64, x.shape[0], elements=st.floats(0, 1)))
        (_, assign), history = (lambda r: (r[:2], r[2]))(
            kmedoids_cluster(x, scores, k, iters=4, return_history=True))
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))
        assert math.isclose(history[-1], kmedoids_objective(x, assign), abs_tol=1e-9)
        assert sorted(set(assign.labels.tolist())) == list(range(k))

    def test_budget(self, rng):
        with pytest.raises(ValueError):
            kmedoids_cluster(rng.normal(size=(3, 2)), [1, 2, 3], 4)


# -- DPC-KNN ------------------------------------------------------------------

def dpc_oracle(x, k_nn):
    P = len(x)
    d = [[math.dist(x[i], x[j]) for j in range(P)] for i in range(P)]
    rho = []
    for i in range(P):
        near = sorted(d[i][j] for j in range(P) if j != i)[:k_nn]
        rho.append(math.exp(-sum(v * v for v in near) / k_nn))
    dmax = max(max(row) for row in d)
    score = []
    for i in range(P):
        higher = [d[i][j] for j in range(P) if rho[j] > rho[i] or (rho[j] == rho[i] and j < i)]
        score.append(rho[i] * (min(higher) if higher else dmax))
    return score


class TestDPCKNN:
    @pytest.mark.parametrize("seed", range(10))
    def test_two_blobs_one_center_each(self, seed):
        rng = np.random.default_rng(seed)
        x = two_blobs(rng)
        merged, assign = dpcknn_cluster(x, 2, k_nn=2)
        assert sorted(c // 3 for c in assign.centers) == [0, 1]
        assert assign.labels.tolist() in ([0, 0, 0, 1, 1, 1], [1, 1, 1, 0, 0, 0])
        np.testing.assert_allclose(sorted(merged[:, 0]),
                                   sorted([x[:3, 0].mean(), x[3:, 0].mean()]))

    @settings(max_examples=60)
    @given(token_mats.filter(lambda m: m.shape[0] >= 3), st.data())
    def test_scores_match_oracle(self, x, data):
        k_nn = data.draw(st.integers(1, x.shape[0] - 1))
        score, _, _ = dpc_scores(x, k_nn)
        np.testing.assert_allclose(score, dpc_oracle(x.tolist(), k_nn), rtol=1e-9,
                                   atol=1e-300)

    def test_full_keep_identity(self, rng):
        x = rng.normal(size=(6, 3))
        merged, _ = dpcknn_cluster(x, 6, k_nn=2)
        np.testing.assert_allclose(merged, x)

    def test_uniform_importance(self, rng):
        x = rng.normal(size=(8, 3))
        a, _ = dpcknn_cluster(x, 3, k_nn=3)
        b, _ = dpcknn_cluster(x, 3, k_nn=3, importance=np.full(8, 0.7))
        np.testing.assert_allclose(a, b, rtol=1e-14)

    def test_importance_weighted_mean(self, rng):
        x = two_blobs(rng)
        w = rng.random(6)
        merged, assign = dpcknn_cluster(x, 2, k_nn=2, importance=w)
        for c in range(2):
            m = assign.labels == c
            np.testing.assert_allclose(merged[c], (w[m] @ x[m]) / w[m].sum())

    def test_knn_range(self, rng):
        with pytest.raises(ValueError):
            dpcknn_cluster(rng.normal(size=(4, 2)), 2, k_nn=4)


# -- soft merging -------------------------------------------------------------

class TestSiT:
    def test_zero_weights_token_mean(self, rng):
        x = rng.normal(size=(6, 3))
        merged, assign = sit_merge(x, np.zeros((3, 4)))
        np.testing.assert_allclose(assign.weights, 0.25)
        np.testing.assert_allclose(merged, np.tile(x.mean(axis=0), (4, 1)), atol=1e-14)

    def test_saturated_one_hot(self, rng):
        x = np.abs(rng.normal(size=(4, 2))) + 0.1
        target = [0, 1, 1, 0]
        # bias-free one-hot: feature 0 routes to cluster 0, feature 1 to cluster 1
        x[:, 0] = [1, -1, -1, 1]
        x[:, 1] = -x[:, 0]
        merged, assign = sit_merge(x, 1000.0 * np.eye(2))
        assert assign.hard_labels().tolist() == target
        np.testing.assert_allclose(merged[0], x[[0, 3]].mean(axis=0))
        np.testing.assert_allclose(merged[1], x[[1, 2]].mean(axis=0))

    def test_dense_recompute(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 3))
        w = init_predictor(3, 2, seed=11)
        merged, assign = sit_merge(x, w)
        A = [[0.0] * 4 for _ in range(2)]
        for j in range(4):
            logits = [sum(x[j][d] * w[d][c] for d in range(3)) for c in range(2)]
            z = [math.exp(v) for v in logits]
            for c in range(2):
                A[c][j] = z[c] / sum(z)
        for c in range(2):
            mass = sum(A[c])
            expected = [sum(A[c][j] * x[j][d] for j in range(4)) / mass for d in range(3)]
            np.testing.assert_allclose(merged[c], expected, atol=1e-6)
        np.testing.assert_allclose(assign.weights, A, atol=1e-12)

    @settings(max_examples=50)
    @given(token_mats, st.integers(1, 4), st.integers(0, 100))
    def test_column_stochastic_and_hull(self, x, C, seed):
        merged, assign = sit_merge(x, init_predictor(x.shape[1], C, seed))
        np.testing.assert_allclose(assign.weights.sum(axis=0), 1.0, atol=1e-9)
        live = ~assign.empty
        assert np.all(merged[live] >= x.min(axis=0) - 1e-9)
        assert np.all(merged[live] <= x.max(axis=0) + 1e-9)


def sinkhorn_reference(sim, r, c, eps, iters):
    """Plain-domain alternating scaling."""
    K = np.exp(np.asarray(sim) / eps)
    u = np.ones(len(r))
    v = np.ones(len(c))
    for _ in range(iters):
        u = r / (K @ v)
        v = c / (K.T @ u)
    return u[:, None] * K * v[None, :]


class TestSinkhorn:
    def test_constant_similarity_uniform(self):
        res = sinkhorn_knopp(np.full((3, 5), 0.3), iters=3)
        np.testing.assert_allclose(res.transport, 1 / 15, atol=1e-15)

    def test_diagonal_permutation(self):
        sim = np.eye(3) * 100.0 + np.random.default_rng(0).random((3, 3))
        res = sinkhorn_knopp(sim, eps=1.0, iters=50)
        ref = sinkhorn_reference(sim, np.full(3, 1 / 3), np.full(3, 1 / 3), 1.0, 2000)
        np.testing.assert_allclose(res.transport, ref, atol=1e-6)
        np.testing.assert_allclose(res.transport, np.eye(3) / 3, atol=1e-6)

    def test_matches_reference_loop(self, rng):
        sim = rng.normal(size=(4, 7))
        r, c = np.full(4, 7 / 4), np.ones(7)
        res = sinkhorn_knopp(sim, 0.5, 5, r, c)
        np.testing.assert_allclose(res.transport, sinkhorn_reference(sim, r, c, 0.5, 5),
                                   rtol=1e-10)

    def test_zero_iterations(self, rng):
        sim = rng.normal(size=(3, 4))
        res = sinkhorn_knopp(sim, iters=0)
        K = np.exp(sim)
        np.testing.assert_allclose(res.transport, K / K.sum(), rtol=1e-12)
        assert np.isfinite(res.row_residual) and np.isfinite(res.col_residual)

    def test_converges(self, rng):
        res = sinkhorn_knopp(rng.normal(size=(8, 8)), eps=1.0, iters=50)
        assert max(res.row_residual, res.col_residual) < 1e-6

    def test_small_eps_stable(self, rng):
        res = sinkhorn_knopp(rng.normal(size=(5, 5)) * 50, eps=1e-3, iters=10)
        assert np.all(np.isfinite(res.transport))

    def test_errors(self):
        with pytest.raises(ValueError):
            sinkhorn_knopp(np.zeros((2, 2)), eps=0)
        with pytest.raises(ValueError):
            sinkhorn_knopp(np.zeros((2, 2)), row_marginals=[1, 1], col_marginals=[1, 2])


class TestSinkhornMerge:
    def test_orthogonal_queries_recover_tokens(self):
        rng = np.random.default_rng(3)
        Q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        tokens = Q[:4] * rng.uniform(1, 3, size=(4, 1))
        queries = Q[[2, 0, 3, 1]]
        merged, assign = sinkhorn_merge(tokens, queries, eps=0.01, iters=50)
        sim = queries @ tokens.T
        best = max(itertools.permutations(range(4)),
                   key=lambda p: sum(sim[c, p[c]] / np.linalg.norm(tokens[p[c]])
                                     for c in range(4)))
        for c in range(4):
            np.testing.assert_allclose(merged[c], tokens[best[c]], atol=1e-6)

    def test_single_cluster_mean(self, rng):
        x = rng.normal(size=(7, 3))
        merged, _ = sinkhorn_merge(x, rng.normal(size=(1, 3)))
        np.testing.assert_allclose(merged[0], x.mean(axis=0), atol=1e-12)

    def test_deterministic(self, rng):
        x = rng.normal(size=(9, 4))
        q = QueryBank.random(3, 4, seed=5)
        a, _ = sinkhorn_merge(x, q)
        b, _ = sinkhorn_merge(x, q)
        np.testing.assert_array_equal(a, b)

    def test_zero_norm_token_named(self, rng):
        x = rng.normal(size=(4, 2))
        x[2] = 0
        with pytest.raises(ValueError, match="token 2"):
            sinkhorn_merge(x, rng.normal(size=(2, 2)))

    @settings(max_examples=50)
    @given(token_mats, st.integers(1, 4), st.integers(0, 100))
    def test_column_stochastic_and_hull(self, x, C, seed):
        if np.any(np.linalg.norm(x, axis=1) == 0):
            return
        merged, assign = sinkhorn_merge(x, QueryBank.random(C, x.shape[1], seed))
        np.testing.assert_allclose(assign.weights.sum(axis=0), 1.0, atol=1e-9)
        assert np.all(merged >= x.min(axis=0) - 1e-9)
        assert np.all(merged <= x.max(axis=0) + 1e-9)


class TestPatchMerger:
    def test_zero_queries_mean(self, rng):
        x = rng.normal(size=(5, 3))
        merged, _ = patchmerger_merge(x, np.zeros((2, 3)))
        np.testing.assert_allclose(merged, np.tile(x.mean(axis=0), (2, 1)), atol=1e-14)

    def test_saturated_query(self, rng):
        x = rng.normal(size=(5, 3))
        merged, _ = patchmerger_merge(x, 1000.0 * x[[3]])
        np.testing.assert_allclose(merged[0], x[3], atol=1e-6)

    def test_hand_example(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        q = np.array([[1.0, 0.0], [0.0, 2.0]])
        merged, assign = patchmerger_merge(x, q)
        e, e2 = math.e, math.e ** 2
        # query 0 logits [1, 0, 1]; query 1 logits [0, 2, 2]
        w0 = [e / (2 * e + 1), 1 / (2 * e + 1), e / (2 * e + 1)]
        w1 = [1 / (1 + 2 * e2), e2 / (1 + 2 * e2), e2 / (1 + 2 * e2)]
        np.testing.assert_allclose(assign.weights, [w0, w1], atol=1e-12)
        np.testing.assert_allclose(merged[0], [w0[0] + w0[2], w0[1] + w0[2]], atol=1e-9)
        np.testing.assert_allclose(merged[1], [w1[0] + w1[2], w1[1] + w1[2]], atol=1e-9)

    def test_blob_generator_labels(self):
        s = synth_tokens((2, 3), 4, "blob-planted", 0, n_blobs=2)
        assert sorted(np.bincount(s.labels).tolist()) == [3, 3]

    def test_tokenset_passthrough(self, rng):
        ts = TokenSet(rng.normal(size=(4, 2)), np.ones(2), (2, 2))
        merged, _ = patchmerger_merge(ts, rng.normal(size=(2, 2)))
        assert isinstance(merged, TokenSet) and merged.n_tokens == 2
