"""Dense and Top-k scaled dot-product attention over traces.

This is the numerical ground truth the rest of the toolkit is measured
against: correctness-first, float32 at the interface with float64
accumulation inside. Causal masking, GQA head grouping, deterministic
Top-k tie-breaking (lowest position wins).
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidArgumentError, NumericError
from .tiles import TileSpec
from .trace import AttentionTrace


@dataclass
class AttentionDistribution:
    """Post-softmax weights over the attendable key positions of one row."""

    weights: np.ndarray
    key_positions: np.ndarray

    def validate(self):
        w = np.asarray(self.weights, dtype=np.float64)
        pos = np.asarray(self.key_positions)
        if w.shape != pos.shape or w.ndim != 1:
            raise InvalidArgumentError("weights/key_positions must be matching vectors")
        if abs(float(w.sum()) - 1.0) > 1e-6:
            raise InvalidArgumentError("weights must sum to 1 within 1e-6")
        if (w < 0).any():
            raise InvalidArgumentError("weights must be non-negative")
        if pos.size > 1 and not (np.diff(pos) > 0).all():
            raise InvalidArgumentError("key_positions must be strictly increasing")


@dataclass
class TopKIndexSet:
    """Sorted key positions selected for one (kv head, tile)."""

    kv_head: int
    tile_id: int
    indices: np.ndarray
    k: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)

    def validate(self, causal_bound: Optional[int] = None):
        idx = self.indices
        if idx.size > 1 and not (np.diff(idx) > 0).all():
            raise InvalidArgumentError("indices must be unique and sorted")
        if (idx < 0).any():
            raise InvalidArgumentError("indices must be non-negative")
        if causal_bound is not None:
            if (idx >= causal_bound).any():
                raise InvalidArgumentError(
                    f"index beyond causal bound {causal_bound} of the tile"
                )
            if idx.size != min(self.k, causal_bound):
                raise InvalidArgumentError(
                    f"expected min(k={self.k}, attendable={causal_bound}) "
                    f"indices, got {idx.size}"
                )


@dataclass
class TopkAttentionResult:
    Y: np.ndarray                       # [Hq][N][d] float32
    mass_recovered: np.ndarray          # [Hq][N] float32
    fallback_rows: List[Tuple[int, int]] = field(default_factory=list)


def softmax_row(scores) -> np.ndarray:
    """Numerically stable softmax of one score vector.

    Max-subtraction before exponentiation, float64 accumulation of the
    normalizer, float32 result. Order-preserving by construction.
    """
    scores = np.asarray(scores)
    if scores.ndim != 1 or scores.size == 0:
        raise InvalidArgumentError("scores must be a non-empty vector")
    if not np.isfinite(scores).all():
        raise InvalidArgumentError("scores must be finite")
    s = scores.astype(np.float64)
    e = np.exp(s - s.max())
    return (e / e.sum()).astype(np.float32)


def _softmax_masked(scores: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Row-wise softmax of [R][C] scores where ``visible`` marks
    attendable entries; masked entries come back as exact zeros.
    Exponentials stay in the input precision, the normalizer accumulates
    in float64; the result keeps the input precision."""
    masked = np.where(visible, scores, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - m)
    e[~visible] = 0.0
    s = e.sum(axis=1, keepdims=True, dtype=np.float64)
    return np.divide(e, s, dtype=e.dtype)


def dense_attention(
    trace: AttentionTrace, layer: int, causal: bool = True
) -> Tuple[np.ndarray, np.ndarray]:
    """Full attention for one layer.

    Returns (P, Y): P[h][i] is row i's post-softmax distribution over key
    positions (zeros beyond the causal bound), Y[h][i] the attention
    output. Query head h reads K/V from kv head h // (Hq / Hkv).
    """
    if not (0 <= layer < trace.num_layers):
        raise InvalidArgumentError(
            f"layer {layer} out of range [0, {trace.num_layers})"
        )
    Hq, N, d = trace.num_query_heads, trace.seq_len, trace.head_dim
    scale = 1.0 / math.sqrt(d)
    P = np.empty((Hq, N, N), dtype=np.float32)
    Y = np.empty((Hq, N, d), dtype=np.float32)
    visible = (
        np.tril(np.ones((N, N), dtype=bool))
        if causal
        else np.ones((N, N), dtype=bool)
    )
    for h in range(Hq):
        g = trace.kv_head_of(h)
        q = np.asarray(trace.Q[layer, h], dtype=np.float32)
        k = np.asarray(trace.K[layer, g], dtype=np.float32)
        v = np.asarray(trace.V[layer, g], dtype=np.float32)
        scores = (q @ k.T) * np.float32(scale)
        p = _softmax_masked(scores, visible)
        y = p @ v
        if not np.isfinite(p).all() or not np.isfinite(y).all():
            bad = np.argwhere(~np.isfinite(p).all(axis=1))
            row = int(bad[0][0]) if bad.size else None
            raise NumericError(
                "non-finite attention intermediate", layer=layer, head=h, row=row
            )
        P[h] = p
        Y[h] = y
    return P, Y


def oracle_topk_indices(
    p: Union[np.ndarray, AttentionDistribution],
    k: int,
    kv_head: int = 0,
    tile_id: int = 0,
) -> TopKIndexSet:
    """Positions of the k largest weights; ties go to the smaller position.

    If k meets or exceeds the number of weights, every position is
    returned.
    """
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    if isinstance(p, AttentionDistribution):
        weights = np.asarray(p.weights)
        positions = np.asarray(p.key_positions, dtype=np.int64)
    else:
        weights = np.asarray(p)
        positions = None
    if weights.ndim != 1 or weights.size == 0:
        raise InvalidArgumentError("p must be a non-empty vector")
    take = min(k, weights.size)
    # Stable argsort of the negated weights: equal weights keep their
    # original (ascending-position) order, so the smaller index wins.
    order = np.argsort(-weights, kind="stable")[:take]
    order.sort()
    indices = positions[order] if positions is not None else order.astype(np.int64)
    return TopKIndexSet(kv_head=kv_head, tile_id=tile_id, indices=indices, k=k)


def _normalize_selections(
    selections: Union[Mapping[Tuple[int, int], TopKIndexSet], Sequence[TopKIndexSet]],
) -> Dict[Tuple[int, int], TopKIndexSet]:
    if isinstance(selections, Mapping):
        return dict(selections)
    return {(s.kv_head, s.tile_id): s for s in selections}


def topk_attention(
    trace: AttentionTrace,
    layer: int,
    selections: Union[Mapping[Tuple[int, int], TopKIndexSet], Sequence[TopKIndexSet]],
    tiles: TileSpec,
    causal: bool = True,
    dense_P: Optional[np.ndarray] = None,
) -> TopkAttentionResult:
    """Sparse attention over per-(kv head, tile) selected key positions.

    The softmax is renormalized over the selected keys only.
    mass_recovered[h][row] is the fraction of the dense distribution's
    weight falling on the selected indices intersected with the row's
    causal range. A causal row whose selected set is empty falls back to
    its diagonal key and is flagged (its recovered mass stays 0 since no
    selected key was attendable).

    ``dense_P`` may pass in a precomputed dense distribution for the
    layer; otherwise it is computed here.
    """
    sel_map = _normalize_selections(selections)
    Hq, N, d = trace.num_query_heads, trace.seq_len, trace.head_dim
    group = trace.group_size
    scale = 1.0 / math.sqrt(d)
    if dense_P is None:
        dense_P, _ = dense_attention(trace, layer, causal=causal)

    Y = np.zeros((Hq, N, d), dtype=np.float32)
    mass = np.zeros((Hq, N), dtype=np.float32)
    fallback: List[Tuple[int, int]] = []

    for tile in tiles.tiles:
        key = (tile.kv_head, tile.tile_id)
        if key not in sel_map:
            raise InvalidArgumentError(
                f"no Top-k set for kv head {tile.kv_head}, tile {tile.tile_id}"
            )
        sel = sel_map[key].indices
        if causal and sel.size and sel[-1] >= tile.causal_bound:
            raise InvalidArgumentError(
                f"selection for kv head {tile.kv_head}, tile {tile.tile_id} "
                f"breaks the tile's causal bound {tile.causal_bound}"
            )
        rows = np.arange(tile.start, tile.end)
        # sel is sorted, so row r sees exactly the prefix sel[:vis[r]].
        if causal:
            vis = np.searchsorted(sel, rows, side="right")
        else:
            vis = np.full(rows.shape, sel.size, dtype=np.int64)
        col = np.arange(sel.size)
        visible = col[None, :] < vis[:, None]            # [T][S]
        k_sel = np.asarray(trace.K[layer, tile.kv_head, sel], dtype=np.float32)
        v_sel = np.asarray(trace.V[layer, tile.kv_head, sel], dtype=np.float32)
        for h in range(tile.kv_head * group, (tile.kv_head + 1) * group):
            live = vis > 0
            if sel.size and live.any():
                q = np.asarray(trace.Q[layer, h, rows[live]], dtype=np.float32)
                scores = (q @ k_sel.T) * np.float32(scale)
                p = _softmax_masked(scores, visible[live])
                Y[h, rows[live]] = p @ v_sel
                dm = dense_P[h][rows[live]][:, sel].astype(np.float64)
                dm[~visible[live]] = 0.0
                mass[h, rows[live]] = dm.sum(axis=1).astype(np.float32)
            for r in rows[~live]:
                # Empty effective selection: attend the diagonal key.
                Y[h, r] = trace.V[layer, tile.kv_head, r]
                mass[h, r] = 0.0
                fallback.append((h, int(r)))
    return TopkAttentionResult(Y=Y, mass_recovered=mass, fallback_rows=fallback)
