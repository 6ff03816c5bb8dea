"""Sparsity and cross-layer similarity metrics.

The central quantity is the reuse score of an index set: how much of a
layer's own Top-k attention mass is recovered when it is forced to use
another layer's Top-k keys. Aggregated over tokens and prompts this
yields the layer-by-layer similarity matrix the anchor planner consumes.

Two aggregation paths share the same score:

* diagnostic mode pools each layer's distribution across all query heads
  per token (the heat-map view of cross-layer stability);
* planning mode applies the kernel conventions: per-tile post-softmax
  pooling per kv head, plus the best head remapping between the two
  layers, and a (default min) aggregation over tiles.
"""

import hashlib
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from .attention import TopKIndexSet, dense_attention
from .errors import (
    InvalidArgumentError,
    UndefinedScoreError,
    UnsupportedOperationError,
)
from .parallel import parallel_map
from .ranking import topk_table
from .tiles import PREFILL, DEFAULT_TILE_SIZE, make_tiles
from .trace import AttentionTrace

TOKEN_AGG_MEAN = "mean"
TOKEN_AGG_MIN = "min"
PLANNING_K = 64          # selection size used when scoring layers for planning

MODE_DIAGNOSTIC = "diagnostic"
MODE_PLANNING = "planning"


@dataclass
class SimilarityMatrix:
    """Upper-triangular layer-by-layer reuse scores.

    S[a][b] is defined for a <= b (anchor index precedes reuse index) and
    stored as 0 below the diagonal. Entries are float32-rounded.
    """

    S: np.ndarray
    k_used: int
    token_aggregation: str
    prompt_aggregation: str = "mean"
    importance_weighted: bool = False
    mode: str = MODE_DIAGNOSTIC
    prompt_count: int = 1
    undefined_scores: int = 0

    @property
    def num_layers(self) -> int:
        return self.S.shape[0]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.S, dtype=np.float32).tobytes())
        meta = f"{self.k_used}|{self.token_aggregation}|{self.mode}|{self.importance_weighted}"
        h.update(meta.encode())
        return h.hexdigest()[:16]


@dataclass
class LayerImportance:
    """Per-layer weight: mean of 1 - cosine(attention input, output)."""

    w: np.ndarray
    source_prompt_count: int
    skipped_tokens: int = 0


def mass_coverage(P: np.ndarray, k: int, per_row: bool = False) -> np.ndarray:
    """Attention mass captured by each row's top-k keys.

    P: [Hq][N][N] dense distributions for one layer. Returns the mean
    over query rows per head, or the full [Hq][N] per-row values.
    """
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    P = np.asarray(P)
    if P.ndim == 2:
        P = P[None]
    take = min(k, P.shape[-1])
    top = np.sort(P, axis=-1)[..., -take:]
    cov = top.sum(axis=-1, dtype=np.float64)
    return cov.astype(np.float32) if per_row else cov.mean(axis=-1).astype(np.float32)


def layer_distribution(P: np.ndarray) -> np.ndarray:
    """Mean of per-head distributions: [Hq][N][N] -> [N][N]."""
    P = np.asarray(P)
    if P.ndim != 3:
        raise InvalidArgumentError("P must be [Hq][N][N]")
    return P.mean(axis=0, dtype=np.float64).astype(np.float32)


def _as_indices(sel) -> np.ndarray:
    if isinstance(sel, TopKIndexSet):
        return sel.indices
    return np.asarray(sel, dtype=np.int64)


def sim_score(p_b: np.ndarray, I_a, I_b) -> float:
    """Mass of p_b on I_a relative to its mass on its own Top-k set I_b.

    Equals 1 when the sets coincide; float64 accumulation, float32-rounded
    result (entries land in [0, 1 + 1e-6]).
    """
    idx_a = _as_indices(I_a)
    idx_b = _as_indices(I_b)
    if idx_a.size != idx_b.size or idx_a.size == 0:
        raise InvalidArgumentError(
            f"index sets must be non-empty and equal-sized, got {idx_a.size} and {idx_b.size}"
        )
    p = np.asarray(p_b, dtype=np.float64)
    if idx_a.max() >= p.size or idx_b.max() >= p.size:
        raise InvalidArgumentError("index set outside the distribution's support")
    num = float(p[idx_a].sum())
    den = float(p[idx_b].sum())
    if den == 0.0:
        raise UndefinedScoreError("distribution carries no mass on its own Top-k set")
    return float(np.float32(num / den))


def _token_topk(pooled: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-token Top-k over causal rows of a pooled [N][N] distribution.

    Returns (idx [N][k] padded with -1, valid mask [N][k], den [N]) where
    den is each row's mass on its own set.
    """
    N = pooled.shape[0]
    take = min(k, N)
    order = topk_table(pooled, take)
    valid = np.arange(take)[None, :] < np.minimum(np.arange(N) + 1, take)[:, None]
    idx = np.where(valid, order, -1)
    gathered = np.take_along_axis(
        pooled.astype(np.float64), np.where(valid, order, 0), axis=1
    )
    gathered[~valid] = 0.0
    den = gathered.sum(axis=1)
    return idx, valid, den


def _pair_scores(
    pooled_b: np.ndarray,
    idx_a: np.ndarray,
    valid_a: np.ndarray,
    den_b: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-token scores for one (a, b) layer pair.

    Returns (scores [N] float32-rounded, defined mask [N]).
    """
    num = np.take_along_axis(
        pooled_b.astype(np.float64), np.where(valid_a, idx_a, 0), axis=1
    )
    num[~valid_a] = 0.0
    num = num.sum(axis=1)
    defined = den_b != 0.0
    scores = np.zeros_like(num)
    scores[defined] = num[defined] / den_b[defined]
    return scores.astype(np.float32), defined


def _aggregate(scores: np.ndarray, defined: np.ndarray, token_agg: str) -> Tuple[float, int]:
    undefined = int((~defined).sum())
    kept = scores[defined]
    if kept.size == 0:
        return 0.0, undefined
    if token_agg == TOKEN_AGG_MEAN:
        return float(np.float32(kept.mean(dtype=np.float64))), undefined
    if token_agg == TOKEN_AGG_MIN:
        return float(kept.min()), undefined
    raise InvalidArgumentError(f"unknown token aggregation {token_agg!r}")


def _as_traces(traces) -> List[AttentionTrace]:
    if isinstance(traces, AttentionTrace):
        return [traces]
    traces = list(traces)
    if not traces:
        raise InvalidArgumentError("at least one trace is required")
    L = traces[0].num_layers
    for t in traces[1:]:
        if t.num_layers != L:
            raise InvalidArgumentError(
                f"traces disagree on layer count: {t.num_layers} != {L}"
            )
        if (t.num_query_heads, t.num_kv_heads) != (
            traces[0].num_query_heads,
            traces[0].num_kv_heads,
        ):
            raise InvalidArgumentError("traces disagree on head counts")
    return traces


def _diagnostic_matrix(trace: AttentionTrace, k: int, token_agg: str) -> Tuple[np.ndarray, int]:
    L = trace.num_layers
    S = np.zeros((L, L), dtype=np.float32)
    undefined = 0
    # Stream one pooled [N][N] distribution at a time; only the (small)
    # per-token Top-k index tables of earlier layers are kept around.
    topks: List[Tuple[np.ndarray, np.ndarray]] = []
    for b in range(L):
        P, _ = dense_attention(trace, b)
        pooled_b = layer_distribution(P)
        del P
        idx_b, valid_b, den_b = _token_topk(pooled_b, k)
        topks.append((idx_b, valid_b))
        for a in range(b + 1):
            idx_a, valid_a = topks[a]
            scores, defined = _pair_scores(pooled_b, idx_a, valid_a, den_b)
            S[a, b], und = _aggregate(scores, defined, token_agg)
            undefined += und
    return S, undefined


def _tile_distributions(trace, P, tiles, k):
    """Pooled per-(kv head, tile) distributions and their Top-k sets."""
    group = trace.group_size
    dists, sets, dens = {}, {}, {}
    for tile in tiles.tiles:
        g = tile.kv_head
        heads = slice(g * group, (g + 1) * group)
        block = P[heads, tile.start:tile.end, : tile.end]
        pooled = block.mean(axis=(0, 1), dtype=np.float64)
        take = min(k, tile.end)
        order = np.argsort(-pooled, kind="stable")[:take]
        dists[(g, tile.tile_id)] = pooled
        sets[(g, tile.tile_id)] = np.sort(order)
        dens[(g, tile.tile_id)] = float(pooled[order].sum())
    return dists, sets, dens


def _planning_matrix(
    trace: AttentionTrace, k: int, token_agg: str, tile_size: int, phase: str
) -> Tuple[np.ndarray, int]:
    L = trace.num_layers
    Hkv = trace.num_kv_heads
    tiles = make_tiles(trace.seq_len, phase, trace.num_query_heads, Hkv, tile_size)
    tile_ids = sorted({t.tile_id for t in tiles.tiles})

    def layer_data(layer):
        P, _ = dense_attention(trace, layer)
        return _tile_distributions(trace, P, tiles, k)

    per_layer = parallel_map(layer_data, range(L))

    def pair_score(i, a, j, b, tid):
        dist_b = per_layer[b][0][(j, tid)]
        den = per_layer[b][2][(j, tid)]
        if den == 0.0:
            return None
        num = float(dist_b[per_layer[a][1][(i, tid)]].sum())
        return float(np.float32(num / den))

    S = np.zeros((L, L), dtype=np.float32)
    undefined = 0
    for b in range(L):
        for a in range(b + 1):
            # Head map that maximizes the per-head score (token-mean).
            hs = np.zeros((Hkv, Hkv), dtype=np.float64)
            for i in range(Hkv):
                for j in range(Hkv):
                    vals = [pair_score(i, a, j, b, tid) for tid in tile_ids]
                    vals = [v for v in vals if v is not None]
                    hs[i, j] = np.mean(vals) if vals else 0.0
            head_map = hs.argmax(axis=0)  # ties -> smaller anchor head
            per_tile = []
            for tid in tile_ids:
                vals = [
                    pair_score(int(head_map[j]), a, j, b, tid)
                    for j in range(Hkv)
                ]
                kept = [v for v in vals if v is not None]
                undefined += len(vals) - len(kept)
                if kept:
                    per_tile.append(float(np.mean(kept)))
            if not per_tile:
                S[a, b] = 0.0
            elif token_agg == TOKEN_AGG_MEAN:
                S[a, b] = np.float32(np.mean(per_tile))
            elif token_agg == TOKEN_AGG_MIN:
                S[a, b] = np.float32(np.min(per_tile))
            else:
                raise InvalidArgumentError(f"unknown token aggregation {token_agg!r}")
    return S, undefined


def similarity_matrix(
    traces: Union[AttentionTrace, Sequence[AttentionTrace]],
    k: int = PLANNING_K,
    token_agg: str = TOKEN_AGG_MEAN,
    mode: str = MODE_DIAGNOSTIC,
    tile_size: int = DEFAULT_TILE_SIZE,
    phase: str = PREFILL,
) -> SimilarityMatrix:
    """Cross-layer reuse scores, averaged over the supplied prompts.

    ``mode=diagnostic`` scores head-averaged per-token distributions;
    ``mode=planning`` scores per-tile, per-kv-head pooled distributions
    through the best head remapping for each layer pair. Scores with a
    zero denominator are excluded from aggregation and counted.
    """
    traces = _as_traces(traces)
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    mats = []
    undefined = 0
    for t in traces:
        if mode == MODE_DIAGNOSTIC:
            S, und = _diagnostic_matrix(t, k, token_agg)
        elif mode == MODE_PLANNING:
            S, und = _planning_matrix(t, k, token_agg, tile_size, phase)
        else:
            raise InvalidArgumentError(f"unknown similarity mode {mode!r}")
        mats.append(S.astype(np.float64))
        undefined += und
    S = np.mean(mats, axis=0).astype(np.float32)
    return SimilarityMatrix(
        S=S,
        k_used=k,
        token_aggregation=token_agg,
        mode=mode,
        prompt_count=len(traces),
        undefined_scores=undefined,
    )


def layer_importance(
    traces: Union[AttentionTrace, Sequence[AttentionTrace]],
    norm_floor: float = 1e-12,
) -> LayerImportance:
    """Per-layer importance: mean over tokens and prompts of
    1 - cosine(attention input, attention output).

    Layers whose attention barely changes the representation (cosine
    near 1) get weights near 0. Tokens whose input or output norm falls
    below ``norm_floor`` are skipped and counted.
    """
    traces = _as_traces(traces)
    missing = [t.prompt_id for t in traces if not t.has_xy()]
    if missing:
        raise UnsupportedOperationError(
            "trace(s) carry no attention input/output hidden states: "
            + ", ".join(repr(m) for m in missing)
        )
    L = traces[0].num_layers
    total = np.zeros(L, dtype=np.float64)
    count = np.zeros(L, dtype=np.int64)
    skipped = 0
    for t in traces:
        for layer in range(L):
            x = t.X[layer].astype(np.float64)
            y = t.Y[layer].astype(np.float64)
            nx = np.linalg.norm(x, axis=1)
            ny = np.linalg.norm(y, axis=1)
            ok = (nx > norm_floor) & (ny > norm_floor)
            skipped += int((~ok).sum())
            cos = (x[ok] * y[ok]).sum(axis=1) / (nx[ok] * ny[ok])
            cos = np.clip(cos, -1.0, 1.0)
            total[layer] += (1.0 - cos).sum()
            count[layer] += int(ok.sum())
    w = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return LayerImportance(
        w=w.astype(np.float64),
        source_prompt_count=len(traces),
        skipped_tokens=skipped,
    )


def apply_importance(S: SimilarityMatrix, importance: LayerImportance) -> SimilarityMatrix:
    """Entrywise reweighting S'[i][j] = w[j] * S[i][j]."""
    if importance.w.shape[0] != S.num_layers:
        raise InvalidArgumentError(
            f"importance has {importance.w.shape[0]} layers, matrix has {S.num_layers}"
        )
    weighted = (S.S.astype(np.float64) * importance.w[None, :]).astype(np.float32)
    return SimilarityMatrix(
        S=weighted,
        k_used=S.k_used,
        token_aggregation=S.token_aggregation,
        prompt_aggregation=S.prompt_aggregation,
        importance_weighted=True,
        mode=S.mode,
        prompt_count=S.prompt_count,
        undefined_scores=S.undefined_scores,
    )
