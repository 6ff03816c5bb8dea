"""Plan construction: similarity -> anchors -> head maps, in one call.

This is the offline step of the deployment story: run it once on a
development trace set, persist the plan, then execute any number of
prompts against it.
"""

from typing import Optional, Sequence, Union

import numpy as np

from . import metrics
from .heads import (
    MODE_ALL_HEADS_POOLED,
    MODE_IDENTITY,
    MODE_REMAPPED,
    compute_head_map,
    group_distributions,
    head_similarity_from_dists,
    identity_head_map,
    topk_tables,
)
from .errors import InvalidArgumentError
from .metrics import MODE_PLANNING, TOKEN_AGG_MIN, PLANNING_K
from .planner import DEFAULT_ANCHOR_BUDGET, select_anchors
from .runner import POOL_POST, AnchorPlan
from .tiles import DEFAULT_TILE_SIZE, KBudgetPolicy
from .trace import AttentionTrace


def compute_head_maps(
    traces: Union[AttentionTrace, Sequence[AttentionTrace]],
    anchors: Sequence[int],
    k: int = PLANNING_K,
    head_map_mode: str = MODE_REMAPPED,
) -> dict:
    """Head maps for every reuse layer, against its most recent anchor.

    Group distributions are computed once per layer and reused across the
    anchor's whole segment, which matters on long traces.
    """
    traces = metrics._as_traces(traces)
    L = traces[0].num_layers
    Hkv = traces[0].num_kv_heads
    anchor_set = set(anchors)
    maps = {}
    if head_map_mode == MODE_IDENTITY:
        for layer in range(L):
            if layer in anchor_set:
                continue
            anchor = max(a for a in anchors if a <= layer)
            maps[layer] = identity_head_map(Hkv, reuse_layer=layer, anchor_layer=anchor)
        return maps
    if head_map_mode != MODE_REMAPPED:
        raise InvalidArgumentError(f"unknown head-map mode {head_map_mode!r}")

    sorted_anchors = sorted(anchor_set)
    for idx, anchor in enumerate(sorted_anchors):
        seg_end = sorted_anchors[idx + 1] if idx + 1 < len(sorted_anchors) else L
        reuse_layers = [l for l in range(anchor + 1, seg_end)]
        if not reuse_layers:
            continue
        # The anchor enters only through its per-token Top-k tables;
        # compute them once for the whole segment.
        anchor_tables = [topk_tables(group_distributions(t, anchor), k) for t in traces]
        for layer in reuse_layers:
            per_trace = []
            for t, idx_a in zip(traces, anchor_tables):
                Pb = group_distributions(t, layer)
                per_trace.append(head_similarity_from_dists(None, Pb, k, idx_a=idx_a))
            simmat = np.mean(per_trace, axis=0)
            maps[layer] = compute_head_map(simmat, reuse_layer=layer, anchor_layer=anchor)
    return maps


def build_plan(
    traces: Union[AttentionTrace, Sequence[AttentionTrace]],
    budget: int = DEFAULT_ANCHOR_BUDGET,
    k: int = PLANNING_K,
    token_agg: str = TOKEN_AGG_MIN,
    tile_size: int = DEFAULT_TILE_SIZE,
    pooling: str = POOL_POST,
    mode: str = MODE_REMAPPED,
    k_policy: Optional[KBudgetPolicy] = None,
    use_importance: bool = True,
    similarity: Optional[metrics.SimilarityMatrix] = None,
) -> AnchorPlan:
    """Full offline planning pass over a development trace set.

    Computes the planning-mode similarity matrix (min over tiles),
    weights it by layer importance when hidden states are available,
    selects anchors by dynamic programming, and fills in per-reuse-layer
    head maps (unless mode is all_heads_pooled).
    """
    traces = metrics._as_traces(traces)
    if similarity is None:
        similarity = metrics.similarity_matrix(
            traces, k=k, token_agg=token_agg, mode=MODE_PLANNING, tile_size=tile_size
        )
    if use_importance and all(t.has_xy() for t in traces):
        similarity = metrics.apply_importance(similarity, metrics.layer_importance(traces))
    core = select_anchors(similarity, budget)
    head_maps = {}
    if mode == MODE_REMAPPED:
        head_maps = compute_head_maps(traces, core.anchors, k=k)
    elif mode != MODE_ALL_HEADS_POOLED:
        raise InvalidArgumentError(f"unknown plan mode {mode!r}")
    plan = AnchorPlan(
        core=core,
        head_maps=head_maps,
        pooling=pooling,
        k_policy=k_policy or KBudgetPolicy(),
        tile_size=tile_size,
        mode=mode,
    )
    plan.validate(traces[0])
    return plan
