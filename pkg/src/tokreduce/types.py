"""Shared data model: token sets, keep schedules, reduction records, depth maps."""

from dataclasses import dataclass, field
from fractions import Fraction
import math

import numpy as np

from ._validation import check_vector

DEFAULT_STAGE_BLOCKS = (4, 7, 10)
DEFAULT_TOTAL_BLOCKS = 12

PRUNED = "pruned"
HARD_MERGED = "hard-merged"
SOFT_MERGED = "soft-merged"
STAGE_KINDS = (PRUNED, HARD_MERGED, SOFT_MERGED)


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def exact_rate(r):
    """Rational value of a keep rate, read from its shortest decimal repr.

    ``196 * 0.7**2`` is 95.99999999999999 in binary floating point; reading
    0.7 as 7/10 gives the intended 96.
    """
    if isinstance(r, Fraction):
        return r
    return Fraction(repr(float(r)))


def keep_budget(n_tokens, rate, stage):
    """floor(P * r**s), evaluated exactly."""
    return math.floor(n_tokens * exact_rate(rate) ** stage)


@dataclass(frozen=True, eq=False)
class TokenSet:
    """Spatial token matrix plus the CLS vector.

    ``grid`` is the raster layout ``(H, W)`` of the spatial tokens. Reduced
    sets no longer live on a grid and carry ``grid=None``.
    """

    spatial: np.ndarray
    cls: np.ndarray
    grid: tuple | None = None

    def __post_init__(self):
        spatial = _frozen(self.spatial)
        cls = _frozen(self.cls)
        if spatial.ndim != 2 or spatial.shape[0] < 1 or spatial.shape[1] < 1:
            raise ValueError(f"spatial must be a non-empty (P, D) matrix, got {spatial.shape}")
        if cls.shape != (spatial.shape[1],):
            raise ValueError(f"cls must have shape ({spatial.shape[1]},), got {cls.shape}")
        if not (np.all(np.isfinite(spatial)) and np.all(np.isfinite(cls))):
            raise ValueError("token features must be finite")
        grid = self.grid
        if grid is not None:
            grid = (int(grid[0]), int(grid[1]))
            if grid[0] * grid[1] != spatial.shape[0]:
                raise ValueError(f"grid {grid} does not match P={spatial.shape[0]}")
        object.__setattr__(self, "spatial", spatial)
        object.__setattr__(self, "cls", cls)
        object.__setattr__(self, "grid", grid)

    @property
    def n_tokens(self):
        return self.spatial.shape[0]

    @property
    def dim(self):
        return self.spatial.shape[1]

    def with_spatial(self, spatial):
        return TokenSet(spatial, self.cls, None)

    def __eq__(self, other):
        if not isinstance(other, TokenSet):
            return NotImplemented
        return (self.grid == other.grid
                and np.array_equal(self.spatial, other.spatial)
                and np.array_equal(self.cls, other.cls))

    __hash__ = None


@dataclass(frozen=True)
class KeepSchedule:
    keep_rate: float
    n_tokens: int
    stage_blocks: tuple = DEFAULT_STAGE_BLOCKS
    total_blocks: int = DEFAULT_TOTAL_BLOCKS
    budgets: tuple = field(default=(), compare=False)

    @property
    def n_stages(self):
        return len(self.stage_blocks)


def make_schedule(n_tokens, keep_rate, stage_blocks=DEFAULT_STAGE_BLOCKS,
                  total_blocks=DEFAULT_TOTAL_BLOCKS):
    """Build a :class:`KeepSchedule` with budgets ``K_s = floor(P * r**s)``.

    Raises
    ------
    ValueError
        If the rate is outside (0, 1], the stage list is empty, not strictly
        increasing or not inside the network, or the last budget is zero.
    """
    n_tokens = int(n_tokens)
    if n_tokens < 1:
        raise ValueError("n_tokens must be positive")
    keep_rate = float(keep_rate)
    if not 0.0 < keep_rate <= 1.0:
        raise ValueError(f"keep rate must lie in (0, 1], got {keep_rate}")
    stage_blocks = tuple(int(b) for b in stage_blocks)
    if not stage_blocks:
        raise ValueError("stage_blocks must not be empty")
    if any(b >= a for a, b in zip(stage_blocks[1:], stage_blocks[:-1])):
        raise ValueError(f"stage_blocks must be strictly increasing, got {stage_blocks}")
    total_blocks = int(total_blocks)
    if stage_blocks[0] < 1 or stage_blocks[-1] >= total_blocks:
        raise ValueError(
            f"stage blocks {stage_blocks} must lie in [1, {total_blocks - 1}]")
    budgets = tuple(keep_budget(n_tokens, keep_rate, s)
                    for s in range(1, len(stage_blocks) + 1))
    if budgets[-1] < 1:
        raise ValueError(
            f"keep rate {keep_rate} leaves no tokens at stage {len(budgets)} "
            f"for P={n_tokens} (budgets {list(budgets)})")
    return KeepSchedule(keep_rate, n_tokens, stage_blocks, total_blocks, budgets)


@dataclass(frozen=True, eq=False)
class StageRecord:
    """Outcome of one reduction stage, indexed by original token position.

    kept
        Sorted original indices that survive the stage: kept tokens for
        pruning, cluster representatives for merging.
    labels
        Cluster id of every original token (merging only).
    weights
        Stage-local soft assignment matrix (soft merging only).
    """

    kind: str
    kept: tuple
    labels: tuple | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ValueError(f"unknown stage kind {self.kind!r}")
        kept = tuple(sorted(int(i) for i in self.kept))
        if len(set(kept)) != len(kept):
            raise ValueError("kept indices must be unique")
        object.__setattr__(self, "kept", kept)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(int(c) for c in self.labels))
        if self.weights is not None:
            object.__setattr__(self, "weights", _frozen(self.weights))

    def __eq__(self, other):
        if not isinstance(other, StageRecord):
            return NotImplemented
        if (self.weights is None) != (other.weights is None):
            return False
        return (self.kind == other.kind and self.kept == other.kept
                and self.labels == other.labels
                and (self.weights is None
                     or np.array_equal(self.weights, other.weights)))

    __hash__ = None


@dataclass(frozen=True)
class ReductionRecord:
    n_tokens: int
    stages: tuple
    grid: tuple | None = None
    stage_blocks: tuple = DEFAULT_STAGE_BLOCKS
    total_blocks: int = DEFAULT_TOTAL_BLOCKS
    method: str = ""
    sample_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        if self.grid is not None:
            object.__setattr__(self, "grid", (int(self.grid[0]), int(self.grid[1])))
        for st in self.stages:
            if any(not 0 <= i < self.n_tokens for i in st.kept):
                raise ValueError("kept index outside [0, P)")
            if st.labels is not None and len(st.labels) != self.n_tokens:
                raise ValueError("labels must cover every original token")

    @property
    def kept_sets(self):
        return [set(st.kept) for st in self.stages]

    @property
    def depth(self):
        return record_depth(self)


def record_depth(record, schedule=None):
    """Number of blocks that processed each original token.

    A token that drops out at stage ``s`` has depth ``stage_blocks[s]``;
    survivors of every stage have depth ``total_blocks``.
    """
    stage_blocks = schedule.stage_blocks if schedule is not None else record.stage_blocks
    total_blocks = schedule.total_blocks if schedule is not None else record.total_blocks
    if len(record.stages) != len(stage_blocks):
        raise ValueError(
            f"record has {len(record.stages)} stages, schedule expects {len(stage_blocks)}")
    depth = np.full(record.n_tokens, total_blocks, dtype=np.int64)
    alive = np.ones(record.n_tokens, dtype=bool)
    for st, block in zip(record.stages, stage_blocks):
        mask = np.zeros(record.n_tokens, dtype=bool)
        mask[list(st.kept)] = True
        dropped = alive & ~mask
        depth[dropped] = block
        alive &= mask
    return depth


@dataclass(frozen=True, eq=False)
class DepthMap:
    grid: tuple
    mean_depth: np.ndarray
    total_blocks: int = DEFAULT_TOTAL_BLOCKS
    n_records: int = 1

    def __post_init__(self):
        grid = (int(self.grid[0]), int(self.grid[1]))
        d = check_vector(np.ravel(self.mean_depth), "mean_depth", length=grid[0] * grid[1])
        if np.any(d < 0) or np.any(d > self.total_blocks):
            raise ValueError(f"depth values must lie in [0, {self.total_blocks}]")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "mean_depth", _frozen(d))

    def as_grid(self):
        return self.mean_depth.reshape(self.grid)

    def __eq__(self, other):
        if not isinstance(other, DepthMap):
            return NotImplemented
        return (self.grid == other.grid and self.total_blocks == other.total_blocks
                and self.n_records == other.n_records
                and np.array_equal(self.mean_depth, other.mean_depth))

    __hash__ = None
