"""End-to-end anchor/reuse sparse-attention execution over a trace.

Layer 0 always runs dense. Every other anchor layer computes pooled
post-softmax (or pre-softmax) distributions per (kv head, tile), selects
its Top-k key sets under the k-budget rule, and then itself attends
sparsely over them. Reuse layers borrow the most recent anchor's sets,
routed through the plan's head map (or a single shared set in
all-heads-pooled mode). Fidelity versus dense attention is reported per
layer.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attention import (
    TopKIndexSet,
    dense_attention,
    oracle_topk_indices,
    softmax_row,
    topk_attention,
)
from .errors import InvalidArgumentError, InvalidPlanError
from .heads import MODE_ALL_HEADS_POOLED, MODE_REMAPPED, HeadMap
from .parallel import parallel_map
from .planner import AnchorPlanCore
from .tiles import (
    DEFAULT_TILE_SIZE,
    PREFILL,
    KBudgetPolicy,
    TileSpec,
    k_budget,
    make_tiles,
)
from .trace import AttentionTrace

POOL_POST = "post"
POOL_PRE = "pre"

KIND_ANCHOR0 = "anchor0"
KIND_ANCHOR = "anchor"
KIND_REUSE = "reuse"


@dataclass
class AnchorPlan:
    """Everything the runner needs: anchors, head maps, budgets, modes."""

    core: AnchorPlanCore
    head_maps: Dict[int, HeadMap] = field(default_factory=dict)
    pooling: str = POOL_POST
    k_policy: KBudgetPolicy = field(default_factory=KBudgetPolicy)
    tile_size: int = DEFAULT_TILE_SIZE
    mode: str = MODE_REMAPPED

    @property
    def anchors(self) -> List[int]:
        return self.core.anchors

    def latest_anchor(self, layer: int) -> int:
        """Most recent anchor at or before ``layer``."""
        prior = [a for a in self.anchors if a <= layer]
        if not prior:
            raise InvalidPlanError(f"no anchor precedes layer {layer}")
        return prior[-1]

    def validate(self, trace: AttentionTrace):
        if self.pooling not in (POOL_POST, POOL_PRE):
            raise InvalidPlanError(f"unknown pooling mode {self.pooling!r}")
        if self.mode not in (MODE_REMAPPED, MODE_ALL_HEADS_POOLED):
            raise InvalidPlanError(f"unknown plan mode {self.mode!r}")
        if self.anchors[-1] >= trace.num_layers:
            raise InvalidPlanError(
                f"anchor {self.anchors[-1]} out of range for {trace.num_layers} layers"
            )
        if 0 not in self.anchors:
            raise InvalidPlanError("layer 0 must be an anchor")
        if self.mode == MODE_REMAPPED:
            anchor_set = set(self.anchors)
            for layer in range(trace.num_layers):
                if layer in anchor_set:
                    continue
                hm = self.head_maps.get(layer)
                if hm is None:
                    raise InvalidPlanError(f"reuse layer {layer} has no head map")
                if hm.anchor_layer != self.latest_anchor(layer):
                    raise InvalidPlanError(
                        f"head map for layer {layer} references anchor "
                        f"{hm.anchor_layer}, expected {self.latest_anchor(layer)}"
                    )
                hm.validate(trace.num_kv_heads)

    def digest(self) -> str:
        payload = {
            "anchors": self.anchors,
            "mode": self.mode,
            "pooling": self.pooling,
            "tile_size": self.tile_size,
            "fraction": self.k_policy.fraction,
            "k_min": self.k_policy.k_min,
            "head_maps": {
                str(l): hm.map for l, hm in sorted(self.head_maps.items())
            },
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class LayerReport:
    layer: int
    kind: str
    output_rel_err_l2: float
    mass_recovered_mean: float
    fallback_rows: int = 0


@dataclass
class RunReport:
    per_layer: List[LayerReport]
    overall: Dict[str, float]
    config: Dict[str, str] = field(default_factory=dict)

    def kind_mean(self, kind: str, field_name: str) -> float:
        vals = [getattr(r, field_name) for r in self.per_layer if r.kind == kind]
        return float(np.mean(vals)) if vals else float("nan")


def run_dense(trace: AttentionTrace) -> np.ndarray:
    """Dense attention outputs for every layer: [L][Hq][N][d] float32."""
    outs = parallel_map(
        lambda layer: dense_attention(trace, layer)[1], range(trace.num_layers)
    )
    return np.stack(outs, axis=0)


def _rel_err_l2(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm((a.astype(np.float64) - b.astype(np.float64)).ravel())
    den = np.linalg.norm(b.astype(np.float64).ravel())
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return float(num / den)


def _post_pooled(P: np.ndarray, tile, group: int) -> np.ndarray:
    heads = slice(tile.kv_head * group, (tile.kv_head + 1) * group)
    return P[heads, tile.start : tile.end, : tile.end].mean(
        axis=(0, 1), dtype=np.float64
    )


def _pre_pooled(trace: AttentionTrace, layer: int, tile, group: int) -> np.ndarray:
    heads = slice(tile.kv_head * group, (tile.kv_head + 1) * group)
    q = trace.Q[layer, heads, tile.start : tile.end].reshape(-1, trace.head_dim)
    pooled_q = q.mean(axis=0, dtype=np.float64)
    keys = trace.K[layer, tile.kv_head, : tile.end].astype(np.float64)
    scores = (keys @ pooled_q) / math.sqrt(trace.head_dim)
    return softmax_row(scores).astype(np.float64)


def _anchor_selections(
    trace: AttentionTrace,
    layer: int,
    P: Optional[np.ndarray],
    tiles: TileSpec,
    plan: AnchorPlan,
) -> Dict[Tuple[int, int], TopKIndexSet]:
    group = trace.group_size
    pooled: Dict[Tuple[int, int], np.ndarray] = {}
    for tile in tiles.tiles:
        if plan.pooling == POOL_POST:
            pooled[(tile.kv_head, tile.tile_id)] = _post_pooled(P, tile, group)
        else:
            pooled[(tile.kv_head, tile.tile_id)] = _pre_pooled(trace, layer, tile, group)

    selections: Dict[Tuple[int, int], TopKIndexSet] = {}
    if plan.mode == MODE_ALL_HEADS_POOLED:
        by_tile: Dict[int, List[np.ndarray]] = {}
        bound: Dict[int, int] = {}
        for tile in tiles.tiles:
            by_tile.setdefault(tile.tile_id, []).append(
                pooled[(tile.kv_head, tile.tile_id)]
            )
            bound[tile.tile_id] = tile.causal_bound
        for tid, dists in by_tile.items():
            k = k_budget(plan.k_policy, bound[tid])
            shared = oracle_topk_indices(
                np.mean(dists, axis=0), k, kv_head=-1, tile_id=tid
            )
            for g in range(trace.num_kv_heads):
                selections[(g, tid)] = TopKIndexSet(
                    kv_head=g, tile_id=tid, indices=shared.indices, k=shared.k
                )
        return selections

    for tile in tiles.tiles:
        k = k_budget(plan.k_policy, tile.causal_bound)
        selections[(tile.kv_head, tile.tile_id)] = oracle_topk_indices(
            pooled[(tile.kv_head, tile.tile_id)],
            k,
            kv_head=tile.kv_head,
            tile_id=tile.tile_id,
        )
    return selections


def _routed_selections(
    anchor_sels: Dict[Tuple[int, int], TopKIndexSet],
    head_map: Optional[HeadMap],
    num_kv_heads: int,
) -> Dict[Tuple[int, int], TopKIndexSet]:
    """Reuse-layer selections: anchor sets routed through the head map."""
    routed: Dict[Tuple[int, int], TopKIndexSet] = {}
    tile_ids = {tid for (_, tid) in anchor_sels}
    for tid in tile_ids:
        for g in range(num_kv_heads):
            src = head_map.map[g] if head_map is not None else g
            base = anchor_sels[(src, tid)]
            routed[(g, tid)] = TopKIndexSet(
                kv_head=g, tile_id=tid, indices=base.indices, k=base.k
            )
    return routed


def run_kascade(
    trace: AttentionTrace, plan: AnchorPlan, phase: str = PREFILL
) -> Tuple[np.ndarray, RunReport]:
    """Execute the anchor/reuse pipeline and compare against dense.

    Returns (outputs [L][Hq][N][d] float32, report). Layer 0's output is
    the dense output itself, so its error is exactly zero.
    """
    plan.validate(trace)
    L, Hq, N, d = (
        trace.num_layers,
        trace.num_query_heads,
        trace.seq_len,
        trace.head_dim,
    )
    tiles = make_tiles(N, phase, Hq, trace.num_kv_heads, plan.tile_size)
    outputs = np.empty((L, Hq, N, d), dtype=np.float32)
    reports: List[LayerReport] = []
    anchor_set = set(plan.anchors)
    current_sels: Optional[Dict[Tuple[int, int], TopKIndexSet]] = None

    for layer in range(L):
        P, Y_dense = dense_attention(trace, layer)
        if layer == 0:
            outputs[layer] = Y_dense
            reports.append(
                LayerReport(
                    layer=0,
                    kind=KIND_ANCHOR0,
                    output_rel_err_l2=0.0,
                    mass_recovered_mean=1.0,
                )
            )
            current_sels = _anchor_selections(trace, 0, P, tiles, plan)
            continue
        if layer in anchor_set:
            kind = KIND_ANCHOR
            current_sels = _anchor_selections(trace, layer, P, tiles, plan)
            sels = current_sels
        else:
            kind = KIND_REUSE
            if current_sels is None:
                raise InvalidPlanError(f"no anchor selections before layer {layer}")
            head_map = (
                plan.head_maps.get(layer) if plan.mode == MODE_REMAPPED else None
            )
            sels = _routed_selections(current_sels, head_map, trace.num_kv_heads)
        result = topk_attention(trace, layer, sels, tiles, dense_P=P)
        outputs[layer] = result.Y
        reports.append(
            LayerReport(
                layer=layer,
                kind=kind,
                output_rel_err_l2=_rel_err_l2(result.Y, Y_dense),
                mass_recovered_mean=float(
                    result.mass_recovered.mean(dtype=np.float64)
                ),
                fallback_rows=len(result.fallback_rows),
            )
        )

    overall = _summarize(reports)
    config = {
        "plan": plan.digest(),
        "prompt_id": trace.prompt_id,
        "phase": phase,
        "mode": plan.mode,
        "pooling": plan.pooling,
    }
    return outputs, RunReport(per_layer=reports, overall=overall, config=config)


def _summarize(reports: List[LayerReport]) -> Dict[str, float]:
    errs = np.array([r.output_rel_err_l2 for r in reports], dtype=np.float64)
    mass = np.array([r.mass_recovered_mean for r in reports], dtype=np.float64)
    out = {
        "mean_output_rel_err_l2": float(errs.mean()),
        "max_output_rel_err_l2": float(errs.max()),
        "mean_mass_recovered": float(mass.mean()),
        "fallback_rows": int(sum(r.fallback_rows for r in reports)),
    }
    for kind in (KIND_ANCHOR0, KIND_ANCHOR, KIND_REUSE):
        sub = [r for r in reports if r.kind == kind]
        if sub:
            out[f"{kind}_mean_rel_err"] = float(
                np.mean([r.output_rel_err_l2 for r in sub])
            )
            out[f"{kind}_mean_mass_recovered"] = float(
                np.mean([r.mass_recovered_mean for r in sub])
            )
    return out


def compare(outputs_a: np.ndarray, outputs_b: np.ndarray) -> RunReport:
    """Per-layer relative L2 error of ``outputs_a`` against reference
    ``outputs_b`` (both [L][Hq][N][d])."""
    outputs_a = np.asarray(outputs_a)
    outputs_b = np.asarray(outputs_b)
    if outputs_a.shape != outputs_b.shape:
        raise InvalidArgumentError(
            f"shape mismatch: {outputs_a.shape} vs {outputs_b.shape}"
        )
    reports = [
        LayerReport(
            layer=i,
            kind="compare",
            output_rel_err_l2=_rel_err_l2(outputs_a[i], outputs_b[i]),
            mass_recovered_mean=float("nan"),
        )
        for i in range(outputs_a.shape[0])
    ]
    errs = np.array([r.output_rel_err_l2 for r in reports])
    overall = {
        "mean_output_rel_err_l2": float(errs.mean()),
        "max_output_rel_err_l2": float(errs.max()),
    }
    return RunReport(per_layer=reports, overall=overall)
