"""Seeded NumPy transformer with token reduction at fixed stage blocks.

The weights are random (normal with std 0.02, LayerNorm at identity), so the
model classifies nothing. It exists to drive every reduction operator
through a realistic forward pass and to account for the compute each
reduction saves.
"""

from dataclasses import dataclass, field
import math
from typing import NamedTuple
import zlib

import numpy as np
from scipy.special import erf

from ._validation import check_seed
from .merge import (QueryBank, dpcknn_cluster, init_predictor, kmedoids_cluster,
                    patchmerger_merge, sinkhorn_merge, sit_merge, tome_merge)
from .prune import (_softmax, ats_sample, dynamicvit_select, evit_reduce,
                    lp_fixed_pattern, topk_prune)
from .types import (DEFAULT_STAGE_BLOCKS, HARD_MERGED, PRUNED, SOFT_MERGED,
                    ReductionRecord, StageRecord, TokenSet, exact_rate,
                    make_schedule)

PRESETS = {
    "tiny": {"dim": 64, "heads": 2},
    "small": {"dim": 128, "heads": 4},
    "base": {"dim": 256, "heads": 8},
}

PRUNING_METHODS = ("none", "lp1", "lp2", "lpinf", "topk", "evit", "dynamicvit", "ats")
HARD_MERGE_METHODS = ("tome", "kmedoids", "dpcknn")
SOFT_MERGE_METHODS = ("sit", "sinkhorn", "patchmerger")
METHODS = PRUNING_METHODS + HARD_MERGE_METHODS + SOFT_MERGE_METHODS

_LP_NORM = {"lp1": 1, "lp2": 2, "lpinf": np.inf}


@dataclass(frozen=True)
class ToyViTConfig:
    depth: int = 12
    heads: int = 2
    dim: int = 64
    mlp_ratio: int = 4
    grid: tuple = (14, 14)
    seed: int = 0
    predictor_head: bool = True
    stage_blocks: tuple = DEFAULT_STAGE_BLOCKS
    init_std: float = 0.02
    # std of the query/key projections; None uses init_std. Larger values
    # give the peaked CLS attention of a trained backbone.
    qk_std: float | None = None

    @classmethod
    def preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def validate(self):
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"dim={self.dim} must be a positive multiple of heads={self.heads}")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be at least 1")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ValueError(f"invalid grid {self.grid}")
        blocks = tuple(self.stage_blocks)
        if not blocks or any(b >= a for a, b in zip(blocks[1:], blocks[:-1])) or blocks[0] < 1:
            raise ValueError(f"stage_blocks must be strictly increasing positive ints, got {blocks}")
        if self.depth < blocks[-1] + 1:
            raise ValueError(
                f"depth={self.depth} too shallow for a reduction after block {blocks[-1]}")
        check_seed(self.seed)


@dataclass(frozen=True, eq=False)
class ToyViT:
    config: ToyViTConfig
    blocks: tuple
    predictors: tuple = ()

    @property
    def n_tokens(self):
        return self.config.grid[0] * self.config.grid[1]


def _frozen(a):
    a.setflags(write=False)
    return a


def build_toy_vit(config):
    """Draw all weights from a seeded normal; biases zero, LayerNorm identity."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    D, hidden, std = config.dim, config.dim * config.mlp_ratio, config.init_std
    qk_std = std if config.qk_std is None else config.qk_std
    blocks = []
    for _ in range(config.depth):
        qkv = rng.normal(0.0, std, size=(D, 3 * D))
        if qk_std != std:
            qkv[:, :2 * D] *= qk_std / std
        blocks.append({
            "ln1_g": np.ones(D), "ln1_b": np.zeros(D),
            "qkv_w": qkv, "qkv_b": np.zeros(3 * D),
            "proj_w": rng.normal(0.0, std, size=(D, D)), "proj_b": np.zeros(D),
            "ln2_g": np.ones(D), "ln2_b": np.zeros(D),
            "fc1_w": rng.normal(0.0, std, size=(D, hidden)), "fc1_b": np.zeros(hidden),
            "fc2_w": rng.normal(0.0, std, size=(hidden, D)), "fc2_b": np.zeros(D),
        })
    predictors = []
    if config.predictor_head:
        # DynamicViT-style head per block: D -> D/2 -> (keep, drop)
        half = max(D // 2, 1)
        for _ in range(config.depth):
            predictors.append({
                "w1": rng.normal(0.0, std, size=(D, half)), "b1": np.zeros(half),
                "w2": rng.normal(0.0, std, size=(half, 2)), "b2": np.zeros(2),
            })
    blocks = tuple({k: _frozen(v) for k, v in b.items()} for b in blocks)
    predictors = tuple({k: _frozen(v) for k, v in p.items()} for p in predictors)
    return ToyViT(config, blocks, predictors)


def _layer_norm(x, g, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _block(x, w, heads):
    T, D = x.shape
    dh = D // heads
    h = _layer_norm(x, w["ln1_g"], w["ln1_b"])
    qkv = (h @ w["qkv_w"] + w["qkv_b"]).reshape(T, 3, heads, dh).transpose(1, 2, 0, 3)
    q, k, v = qkv
    att = _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(dh), axis=-1)
    out = (att @ v).transpose(1, 0, 2).reshape(T, D)
    x = x + out @ w["proj_w"] + w["proj_b"]
    h = _layer_norm(x, w["ln2_g"], w["ln2_b"])
    x = x + _gelu(h @ w["fc1_w"] + w["fc1_b"]) @ w["fc2_w"] + w["fc2_b"]
    return x, att


def flop_count(config, token_count):
    """Multiply-accumulates of one block processing ``token_count`` tokens.

    attention: ``4 t D^2`` for the q, k, v and output projections plus
    ``2 t^2 D`` for the score and value products; mlp: ``2 t D (ratio D)``.
    LayerNorm, softmax and the reduction operators themselves are not counted.
    """
    t, D = int(token_count), config.dim
    if t < 1:
        raise ValueError("token_count must be positive")
    attention = 4 * t * D * D + 2 * t * t * D
    mlp = 2 * t * D * (config.mlp_ratio * D)
    return {"attention": attention, "mlp": mlp, "total": attention + mlp}


class ForwardTrace(NamedTuple):
    record: ReductionRecord
    cls_probe: np.ndarray
    flops: tuple
    token_counts: tuple
    stage_counts: tuple

    @property
    def total_flops(self):
        return sum(f["total"] for f in self.flops)

    @property
    def attention_flops(self):
        return sum(f["attention"] for f in self.flops)


def derive_seed(*parts):
    """Stable 64-bit seed from integers and strings."""
    ints = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1, dtype=np.uint64)[0])


def tome_stage_merges(n_tokens, rate, stage):
    """ToMe merges at ``stage`` so that ``floor(P (1 - r^s))`` tokens are merged in total."""
    r = exact_rate(rate)
    done = math.floor(n_tokens * (1 - r ** (stage - 1)))
    return math.floor(n_tokens * (1 - r ** stage)) - done


@dataclass
class _State:
    """Mutable bookkeeping of one forward pass."""

    n_tokens: int
    origin: np.ndarray = None          # pruning: original index per token, -1 = fused
    cur_of_orig: np.ndarray = None     # hard merge: current token of each original
    reps: np.ndarray = None            # hard merge: representative per current token
    composed: np.ndarray = None        # soft merge: (C, P) composed assignment
    stages: list = field(default_factory=list)


def check_method(method, keep_rate):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method == "tome" and exact_rate(keep_rate) < exact_rate(0.5):
        raise ValueError(
            f"ToMe cannot run at keep rate {keep_rate}: bipartite matching merges "
            "at most half of the tokens per stage (r >= 0.5 required)")


def forward_with_reduction(model, tokens, method="none", schedule=None, seed=0,
                           params=None):
    """Run the model, reducing spatial tokens after each stage block.

    At stage block ``b`` the block runs on the current tokens, its
    head-averaged CLS attention is handed to the reduction operator, and the
    reduced set enters block ``b + 1``. The CLS token is never reduced.

    Parameters
    ----------
    method : str
        One of :data:`METHODS`.
    schedule : KeepSchedule, optional
        Defaults to keep rate 1 on the model's stage blocks.
    seed : int
        Seed for stochastic operators (ATS seeded-uniform mode).
    params : dict, optional
        ``ats_mode`` ("fixed-quantile"), ``kmedoids_iters`` (3), ``k_nn`` (5),
        ``sinkhorn_eps`` (1.0), ``sinkhorn_iters`` (3),
        ``evit_fused_candidate`` (True), ``tome_key_metric`` (False).
    """
    cfg = model.config
    params = dict(params or {})
    P = model.n_tokens
    if schedule is None:
        schedule = make_schedule(P, 1.0, cfg.stage_blocks, cfg.depth)
    if schedule.n_tokens != P:
        raise ValueError(f"schedule built for P={schedule.n_tokens}, model has P={P}")
    if schedule.total_blocks != cfg.depth or schedule.stage_blocks[-1] >= cfg.depth:
        raise ValueError("schedule does not fit the model depth")
    check_method(method, schedule.keep_rate)
    if method == "dynamicvit" and not model.predictors:
        raise ValueError("dynamicvit needs a model built with predictor_head=True")
    if not isinstance(tokens, TokenSet) or tokens.grid != tuple(cfg.grid):
        raise ValueError(f"tokens must be a TokenSet on grid {cfg.grid}")
    if tokens.dim != cfg.dim:
        raise ValueError(f"tokens have D={tokens.dim}, model expects {cfg.dim}")
    seed = check_seed(seed)

    state = _State(P)
    if method in HARD_MERGE_METHODS:
        state.cur_of_orig = np.arange(P)
        state.reps = np.arange(P)
    elif method in SOFT_MERGE_METHODS:
        state.composed = np.eye(P)
    else:
        state.origin = np.arange(P)

    x = np.vstack([tokens.cls[None, :], tokens.spatial])
    stage_of_block = {b: s for s, b in enumerate(schedule.stage_blocks, start=1)}
    probes, flops, counts, stage_counts = [], [], [], []
    for b in range(1, cfg.depth + 1):
        counts.append(x.shape[0])
        flops.append(flop_count(cfg, x.shape[0]))
        x, att = _block(x, model.blocks[b - 1], cfg.heads)
        s = stage_of_block.get(b)
        if s is None:
            continue
        probes.append(x[0].copy())
        cls_att = att[:, 0, 1:].mean(axis=0)
        spatial = _reduce(model, state, method, x[1:], cls_att,
                          schedule, s, b, seed, params)
        x = np.vstack([x[:1], spatial])
        stage_counts.append(spatial.shape[0])
    probes.append(x[0].copy())

    record = ReductionRecord(P, state.stages, tuple(cfg.grid), schedule.stage_blocks,
                             schedule.total_blocks, method)
    return ForwardTrace(record, np.array(probes), tuple(flops), tuple(counts),
                        tuple(stage_counts))


def _reduce(model, state, method, xs, cls_att, schedule, s, block, seed, params):
    cfg = model.config
    P = state.n_tokens
    budget = schedule.budgets[s - 1]
    n = xs.shape[0]

    if method in PRUNING_METHODS:
        origin = state.origin
        fused = None
        if method == "none":
            keep = np.arange(n)
        elif method in _LP_NORM:
            pattern = lp_fixed_pattern(cfg.grid, _LP_NORM[method], budget)
            keep = np.flatnonzero(np.isin(origin, pattern))
        elif method == "topk":
            keep = topk_prune(cls_att, budget)
        elif method == "evit":
            exclude = None
            if not params.get("evit_fused_candidate", True):
                exclude = np.flatnonzero(origin < 0)
            reduced, keep = evit_reduce(xs, cls_att, min(budget, n), exclude)
            if reduced.shape[0] > keep.size:
                fused = reduced[-1]
        elif method == "dynamicvit":
            keep = dynamicvit_select(_keep_probs(model, block, xs), budget)
        else:
            keep = ats_sample(cls_att, min(budget, n), params.get("ats_mode", "fixed-quantile"),
                              derive_seed(seed, s))
        new_origin = origin[keep]
        out = xs[keep]
        if fused is not None:
            out = np.vstack([out, fused])
            new_origin = np.append(new_origin, -1)
        state.origin = new_origin
        state.stages.append(StageRecord(PRUNED, new_origin[new_origin >= 0]))
        return out

    if method in HARD_MERGE_METHODS:
        if method == "tome":
            metric = None
            if params.get("tome_key_metric", False):
                w = model.blocks[block - 1]
                h = _layer_norm(xs, w["ln1_g"], w["ln1_b"])
                metric = h @ w["qkv_w"][:, cfg.dim:2 * cfg.dim]
            merged, assign = tome_merge(xs, n_merge=tome_stage_merges(P, schedule.keep_rate, s),
                                        metric=metric)
        elif method == "kmedoids":
            merged, assign = kmedoids_cluster(xs, cls_att, budget,
                                              params.get("kmedoids_iters", 3))
        else:
            k_nn = min(params.get("k_nn", 5), n - 1)
            if k_nn < 1:
                merged, assign = xs.copy(), None
            else:
                merged, assign = dpcknn_cluster(xs, budget, k_nn)
        if assign is not None:
            state.cur_of_orig = assign.labels[state.cur_of_orig]
            state.reps = state.reps[assign.centers]
        state.stages.append(StageRecord(HARD_MERGED, state.reps, state.cur_of_orig))
        return merged

    stage_seed = derive_seed(cfg.seed, method, s)
    if method == "sit":
        merged, assign = sit_merge(xs, init_predictor(cfg.dim, budget, stage_seed))
    elif method == "sinkhorn":
        merged, assign = sinkhorn_merge(xs, QueryBank.random(budget, cfg.dim, stage_seed),
                                        params.get("sinkhorn_eps", 1.0),
                                        params.get("sinkhorn_iters", 3))
    else:
        merged, assign = patchmerger_merge(xs, QueryBank.random(budget, cfg.dim, stage_seed))
    state.composed = assign.weights @ state.composed
    labels = np.argmax(state.composed, axis=0)
    reps = np.argmax(state.composed, axis=1)
    kept = np.flatnonzero(reps[labels] == np.arange(P))
    state.stages.append(StageRecord(SOFT_MERGED, kept, labels, assign.weights))
    return merged


def _keep_probs(model, block, xs):
    p = model.predictors[block - 1]
    h = _gelu(xs @ p["w1"] + p["b1"])
    return _softmax(h @ p["w2"] + p["b2"], axis=1)[:, 0]


class SynthTokens(NamedTuple):
    tokens: TokenSet
    labels: np.ndarray | None


SYNTH_KINDS = ("random", "blob-planted", "center-biased")


def synth_tokens(grid, dim, kind="random", seed=0, n_blobs=2, separation=10.0, spread=0.1):
    """Synthetic token grids.

    random
        i.i.d. standard normal features.
    blob-planted
        ``n_blobs`` well separated Gaussian blobs with balanced, shuffled
        ground-truth labels (returned in ``labels``).
    center-biased
        Normal features scaled by a Gaussian envelope of the distance to the
        grid centre, so feature energy decays outwards.
    """
    H, W = (int(g) for g in grid)
    if H < 1 or W < 1 or dim < 1:
        raise ValueError(f"invalid shape grid={grid}, dim={dim}")
    P = H * W
    rng = np.random.default_rng(check_seed(seed))
    cls = rng.normal(size=dim)
    labels = None
    if kind == "random":
        spatial = rng.normal(size=(P, dim))
    elif kind == "blob-planted":
        if not 1 <= n_blobs <= P:
            raise ValueError(f"n_blobs must lie in [1, {P}]")
        centers = rng.normal(scale=separation, size=(n_blobs, dim))
        labels = rng.permutation(np.arange(P) % n_blobs)
        spatial = centers[labels] + rng.normal(scale=spread, size=(P, dim))
    elif kind == "center-biased":
        rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        d2 = (rows.ravel() - (H - 1) / 2) ** 2 + (cols.ravel() - (W - 1) / 2) ** 2
        sigma = max(H, W) / 4
        envelope = np.exp(-d2 / (2 * sigma ** 2))
        spatial = rng.normal(size=(P, dim)) * envelope[:, None]
    else:
        raise ValueError(f"unknown kind {kind!r}; choose from {SYNTH_KINDS}")
    return SynthTokens(TokenSet(spatial, cls, (H, W)), labels)

