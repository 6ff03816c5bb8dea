"""Anchor/reuse Top-k sparse attention analysis toolkit.

Computes oracle Top-k attention over recorded traces, measures
cross-layer Top-k similarity, selects anchor layers by dynamic
programming, builds head remappings, simulates the anchor/reuse sparse
pipeline, and estimates speedups with a calibrated cost model.
"""

from .attention import (
    AttentionDistribution,
    TopKIndexSet,
    TopkAttentionResult,
    dense_attention,
    oracle_topk_indices,
    softmax_row,
    topk_attention,
)
from .costmodel import (
    BenchRow,
    CostParams,
    CostReport,
    get_preset,
    predict_ratios,
    predict_report,
    preset_names,
    weighted_pipeline_time,
)
from .errors import (
    FormatError,
    InvalidArgumentError,
    InvalidPlanError,
    KascadeError,
    NumericError,
    UndefinedScoreError,
    UnsupportedOperationError,
)
from .heads import (
    HeadMap,
    compute_head_map,
    head_similarity,
    identity_head_map,
    pooled_all_heads_topk,
)
from .metrics import (
    LayerImportance,
    SimilarityMatrix,
    apply_importance,
    layer_distribution,
    layer_importance,
    mass_coverage,
    sim_score,
    similarity_matrix,
)
from .pipeline import build_plan, compute_head_maps
from .planner import AnchorPlanCore, exhaustive_select, objective, select_anchors
from .runner import AnchorPlan, LayerReport, RunReport, compare, run_dense, run_kascade
from .tiles import (
    KBudgetPolicy,
    Tile,
    TileSpec,
    k_budget,
    make_tiles,
    pool_postsoftmax,
    pool_presoftmax,
)
from .trace import AttentionTrace
from .traceio import (
    SynthConfig,
    generate_synthetic,
    read_plan,
    read_trace,
    write_plan,
    write_trace,
)

__version__ = "0.1.0"
