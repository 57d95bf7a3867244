"""Token reduction operators for vision transformers and reduction-pattern analysis."""

__version__ = "0.1.0"

from .types import (DepthMap, KeepSchedule, ReductionRecord, StageRecord, TokenSet,
                    keep_budget, make_schedule, record_depth)
from .prune import (ats_sample, dynamicvit_select, evit_reduce, gumbel_softmax_mask,
                    lp_fixed_pattern, topk_prune)
from .merge import (HardAssignment, QueryBank, SoftAssignment, dpcknn_cluster,
                    kmedoids_cluster, patchmerger_merge, sinkhorn_knopp, sinkhorn_merge,
                    sit_merge, tome_merge)
from .metrics import (averaged_depth_map, depth_map_similarity, homogeneity, ioa,
                      ioa_lower_bound, iou, iou_lower_bound, nmi, rank_correlation)
from .align import linear_cka, procrustes_distance, pwcca
from .toyvit import (ToyViTConfig, build_toy_vit, flop_count, forward_with_reduction,
                     synth_tokens)

__all__ = [
    "DepthMap", "KeepSchedule", "ReductionRecord", "StageRecord", "TokenSet",
    "keep_budget", "make_schedule", "record_depth",
    "ats_sample", "dynamicvit_select", "evit_reduce", "gumbel_softmax_mask",
    "lp_fixed_pattern", "topk_prune",
    "HardAssignment", "QueryBank", "SoftAssignment", "dpcknn_cluster",
    "kmedoids_cluster", "patchmerger_merge", "sinkhorn_knopp", "sinkhorn_merge",
    "sit_merge", "tome_merge",
    "averaged_depth_map", "depth_map_similarity", "homogeneity", "ioa",
    "ioa_lower_bound", "iou", "iou_lower_bound", "nmi", "rank_correlation",
    "linear_cka", "procrustes_distance", "pwcca",
    "ToyViTConfig", "build_toy_vit", "flop_count", "forward_with_reduction",
    "synth_tokens",
]
