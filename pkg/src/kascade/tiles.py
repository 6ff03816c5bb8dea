"""Query tiles and pooled attention scores.

A tile is the set of query rows that will share one Top-k index set:
a block of consecutive tokens in prefill, a single token's GQA group in
decode. Pooling collapses the tile's attention information into one
vector that drives Top-k selection.
"""

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .errors import InvalidArgumentError

PREFILL = "prefill"
DECODE = "decode"

DEFAULT_TILE_SIZE = 128
DEFAULT_TOPK_FRACTION = 0.1
DEFAULT_K_MIN = 128


@dataclass(frozen=True)
class Tile:
    start: int          # first query row (inclusive)
    end: int            # last query row (exclusive)
    kv_head: int
    tile_id: int        # unique within (phase, kv_head)

    @property
    def causal_bound(self) -> int:
        """Highest key position visible to any row of the tile, plus one."""
        return self.end


@dataclass
class TileSpec:
    phase: str
    tile_size: int
    tiles: List[Tile] = field(default_factory=list)

    def validate(self, seq_len: int, num_kv_heads: int):
        if self.phase not in (PREFILL, DECODE):
            raise InvalidArgumentError(f"unknown phase {self.phase!r}")
        for g in range(num_kv_heads):
            rows = sorted(
                (t.start, t.end) for t in self.tiles if t.kv_head == g
            )
            cursor = 0
            for start, end in rows:
                if start != cursor or end <= start:
                    raise InvalidArgumentError(
                        f"tiles for kv head {g} do not partition rows "
                        f"(gap or overlap at {start})"
                    )
                cursor = end
            if cursor != seq_len:
                raise InvalidArgumentError(
                    f"tiles for kv head {g} cover {cursor} of {seq_len} rows"
                )


@dataclass(frozen=True)
class KBudgetPolicy:
    """k = min(max(floor(fraction * L), k_min), L) over L visible keys."""

    fraction: float = DEFAULT_TOPK_FRACTION
    k_min: int = DEFAULT_K_MIN

    def __post_init__(self):
        if not (0.0 < self.fraction <= 1.0):
            raise InvalidArgumentError(
                f"fraction must be in (0, 1], got {self.fraction}"
            )
        if self.k_min < 1:
            raise InvalidArgumentError(f"k_min must be >= 1, got {self.k_min}")


def k_budget(policy: KBudgetPolicy, num_keys: int) -> int:
    """Top-k budget for a context of ``num_keys`` visible keys.

    The fractional part is floored before clamping, the conservative
    choice for a budget.
    """
    if num_keys < 1:
        raise InvalidArgumentError(f"num_keys must be >= 1, got {num_keys}")
    return min(max(math.floor(policy.fraction * num_keys), policy.k_min), num_keys)


def pool_presoftmax(q_tile: np.ndarray) -> np.ndarray:
    """Mean of the tile's query vectors. q_tile: [T][d]."""
    q_tile = np.asarray(q_tile)
    if q_tile.ndim != 2 or q_tile.shape[0] < 1:
        raise InvalidArgumentError("q_tile must be a non-empty [T][d] array")
    return q_tile.mean(axis=0, dtype=np.float64).astype(np.float32)


def pool_postsoftmax(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of per-query attention distributions over a tile.

    Rows may have different causal supports; shorter rows are
    zero-extended to the longest support before averaging. Each input
    row sums to 1, so the pooled vector does as well.
    """
    rows = [np.asarray(r) for r in rows]
    if not rows:
        raise InvalidArgumentError("cannot pool an empty tile")
    width = max(r.shape[0] for r in rows)
    acc = np.zeros(width, dtype=np.float64)
    for r in rows:
        acc[: r.shape[0]] += r
    return (acc / len(rows)).astype(np.float32)


def make_tiles(
    seq_len: int,
    phase: str,
    num_query_heads: int,
    num_kv_heads: int,
    tile_size: int = DEFAULT_TILE_SIZE,
) -> TileSpec:
    """Tile layout for one trace.

    prefill: ceil(N / tile_size) contiguous token ranges per kv head.
    decode:  one tile per token per kv head, holding that token's
             query-head group (tile_size = Hq / Hkv by construction).
    """
    if tile_size < 1:
        raise InvalidArgumentError(f"tile_size must be >= 1, got {tile_size}")
    if num_query_heads % num_kv_heads != 0:
        raise InvalidArgumentError(
            f"num_query_heads ({num_query_heads}) must be divisible by "
            f"num_kv_heads ({num_kv_heads})"
        )
    tiles: List[Tile] = []
    if phase == PREFILL:
        for g in range(num_kv_heads):
            for tid, start in enumerate(range(0, seq_len, tile_size)):
                tiles.append(
                    Tile(start=start, end=min(start + tile_size, seq_len),
                         kv_head=g, tile_id=tid)
                )
        return TileSpec(phase=PREFILL, tile_size=tile_size, tiles=tiles)
    if phase == DECODE:
        group = num_query_heads // num_kv_heads
        for g in range(num_kv_heads):
            for t in range(seq_len):
                tiles.append(Tile(start=t, end=t + 1, kv_head=g, tile_id=t))
        return TileSpec(phase=DECODE, tile_size=group, tiles=tiles)
    raise InvalidArgumentError(f"unknown phase {phase!r}")
