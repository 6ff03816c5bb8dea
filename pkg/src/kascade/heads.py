"""Head remapping between anchor and reuse layers.

Nothing ties head i of one layer to head i of another, so each reuse
head is assigned the anchor kv head whose Top-k set best covers its own
attention mass (many-to-one allowed). The all-heads-pooled variant
sidesteps the mapping by sharing a single Top-k set across every head.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .attention import TopKIndexSet, dense_attention, oracle_topk_indices
from .errors import InvalidArgumentError
from .metrics import PLANNING_K, TOKEN_AGG_MEAN, TOKEN_AGG_MIN, _as_traces
from .ranking import topk_table
from .trace import AttentionTrace

MODE_REMAPPED = "remapped"
MODE_IDENTITY = "identity"
MODE_ALL_HEADS_POOLED = "all_heads_pooled"


@dataclass
class HeadMap:
    """map[h] = anchor kv head whose Top-k set reuse kv head h borrows."""

    reuse_layer: int
    anchor_layer: int
    map: List[int]
    mode: str = MODE_REMAPPED

    def __post_init__(self):
        self.map = [int(m) for m in self.map]

    def validate(self, num_kv_heads: int):
        if self.mode not in (MODE_REMAPPED, MODE_IDENTITY, MODE_ALL_HEADS_POOLED):
            raise InvalidArgumentError(f"unknown head-map mode {self.mode!r}")
        if self.mode == MODE_ALL_HEADS_POOLED:
            return
        if len(self.map) != num_kv_heads:
            raise InvalidArgumentError(
                f"head map has {len(self.map)} entries for {num_kv_heads} kv heads"
            )
        if any(not (0 <= m < num_kv_heads) for m in self.map):
            raise InvalidArgumentError("head map entry out of range")


def group_distributions(trace: AttentionTrace, layer: int, P: np.ndarray = None) -> np.ndarray:
    """Per-kv-head, per-token distributions: query heads of each GQA
    group pooled post-softmax. Returns [Hkv][N][N] float32."""
    if P is None:
        P, _ = dense_attention(trace, layer)
    Hkv, group = trace.num_kv_heads, trace.group_size
    out = np.empty((Hkv, P.shape[1], P.shape[2]), dtype=np.float32)
    for g in range(Hkv):
        out[g] = P[g * group : (g + 1) * group].mean(axis=0, dtype=np.float64)
    return out


def topk_tables(P: np.ndarray, k: int) -> np.ndarray:
    """Per-kv-head, per-token Top-k index tables: [Hkv][N][min(k, N)]."""
    return topk_table(P, min(k, P.shape[-1]))


def head_similarity_from_dists(
    Pa: Optional[np.ndarray],
    Pb: np.ndarray,
    k: int = PLANNING_K,
    token_agg: str = TOKEN_AGG_MEAN,
    idx_a: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Head-level reuse scores from two layers' per-kv-head distributions
    (as produced by group_distributions). Entry [i][j] scores anchor head
    i's Top-k set against reuse head j's own.

    The anchor side only enters through its Top-k tables, so callers that
    already hold them can pass ``idx_a`` and skip ``Pa``.
    """
    if idx_a is None:
        idx_a = topk_tables(Pa, k)
    Hkv, N = Pb.shape[0], Pb.shape[1]
    take = min(k, N)
    rows = np.arange(N)
    valid = np.arange(take)[None, :] < np.minimum(rows + 1, take)[:, None]
    idx_b = topk_tables(Pb, k)
    hs = np.zeros((Hkv, Hkv), dtype=np.float64)
    for j in range(Hkv):
        pb = Pb[j].astype(np.float64)
        den = np.take_along_axis(pb, np.where(valid, idx_b[j], 0), axis=1)
        den[~valid] = 0.0
        den = den.sum(axis=1)
        defined = den != 0.0
        for i in range(Hkv):
            num = np.take_along_axis(pb, np.where(valid, idx_a[i], 0), axis=1)
            num[~valid] = 0.0
            num = num.sum(axis=1)
            scores = (num[defined] / den[defined]).astype(np.float32)
            if scores.size == 0:
                hs[i, j] = 0.0
            elif token_agg == TOKEN_AGG_MEAN:
                hs[i, j] = scores.mean(dtype=np.float64)
            elif token_agg == TOKEN_AGG_MIN:
                hs[i, j] = scores.min()
            else:
                raise InvalidArgumentError(f"unknown token aggregation {token_agg!r}")
    return hs


def head_similarity(
    traces: Union[AttentionTrace, Sequence[AttentionTrace]],
    anchor_layer: int,
    reuse_layer: int,
    k: int = PLANNING_K,
    token_agg: str = TOKEN_AGG_MEAN,
) -> np.ndarray:
    """[Hkv][Hkv] matrix: entry [i][j] scores anchor head i's Top-k set
    against reuse head j's own, aggregated over tokens and prompts."""
    traces = _as_traces(traces)
    per_trace = []
    for t in traces:
        Pa = group_distributions(t, anchor_layer)
        Pb = Pa if reuse_layer == anchor_layer else group_distributions(t, reuse_layer)
        per_trace.append(head_similarity_from_dists(Pa, Pb, k, token_agg))
    return np.mean(per_trace, axis=0)


def compute_head_map(
    simmat: np.ndarray, reuse_layer: int = -1, anchor_layer: int = -1
) -> HeadMap:
    """Assign each reuse head the anchor head maximizing its similarity
    column; ties go to the smaller anchor head index."""
    simmat = np.asarray(simmat)
    if simmat.ndim != 2 or simmat.shape[0] != simmat.shape[1]:
        raise InvalidArgumentError("head similarity matrix must be square")
    mapping = simmat.argmax(axis=0)
    return HeadMap(
        reuse_layer=reuse_layer,
        anchor_layer=anchor_layer,
        map=[int(m) for m in mapping],
        mode=MODE_REMAPPED,
    )


def identity_head_map(num_kv_heads: int, reuse_layer: int = -1, anchor_layer: int = -1) -> HeadMap:
    return HeadMap(
        reuse_layer=reuse_layer,
        anchor_layer=anchor_layer,
        map=list(range(num_kv_heads)),
        mode=MODE_IDENTITY,
    )


def pooled_all_heads_topk(
    group_dists: np.ndarray, k: int, tile_id: int = 0
) -> TopKIndexSet:
    """Shared Top-k set from the mean of per-kv-head pooled distributions.

    group_dists: [Hkv][support] (one pooled distribution per kv head,
    e.g. one tile's). The result applies to every head, so kv_head is
    recorded as -1.
    """
    group_dists = np.asarray(group_dists)
    if group_dists.ndim == 1:
        group_dists = group_dists[None]
    pooled = group_dists.mean(axis=0, dtype=np.float64)
    sel = oracle_topk_indices(pooled, k, kv_head=-1, tile_id=tile_id)
    return sel
