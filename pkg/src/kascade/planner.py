"""Anchor layer selection.

Given the similarity matrix, pick M anchor layers (layer 0 forced) so
that the summed anchor-to-covered-layer similarity is maximal. Each
layer is covered by its most recent anchor, so the objective decomposes
into consecutive segments and a dynamic program finds the optimum in
O(M * L^2). An exhaustive maximizer with the same tie-break serves as
the oracle in tests.
"""

import math
from dataclasses import dataclass
from itertools import combinations
from typing import List, Sequence, Union

import numpy as np

from .errors import InvalidArgumentError, UnsupportedOperationError
from .metrics import SimilarityMatrix

DEFAULT_ANCHOR_BUDGET = 5


@dataclass
class AnchorPlanCore:
    """Selected anchor set plus the objective it achieves."""

    anchors: List[int]
    budget: int
    objective_value: float
    source_digest: str = ""

    def __post_init__(self):
        self.anchors = [int(a) for a in self.anchors]
        if len(self.anchors) != self.budget:
            raise InvalidArgumentError(
                f"{len(self.anchors)} anchors but budget {self.budget}"
            )
        if not self.anchors or self.anchors[0] != 0:
            raise InvalidArgumentError("layer 0 must be the first anchor")
        if any(b <= a for a, b in zip(self.anchors, self.anchors[1:])):
            raise InvalidArgumentError("anchors must be strictly increasing")


def _matrix_of(S: Union[SimilarityMatrix, np.ndarray]) -> np.ndarray:
    arr = S.S if isinstance(S, SimilarityMatrix) else np.asarray(S)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvalidArgumentError("similarity matrix must be square")
    return arr.astype(np.float64)


def _digest_of(S) -> str:
    return S.digest() if isinstance(S, SimilarityMatrix) else ""


def objective(S: Union[SimilarityMatrix, np.ndarray], anchors: Sequence[int]) -> float:
    """Total similarity captured by an anchor set.

    Each anchor a covers layers a .. next_anchor - 1 (the last anchor
    covers through L - 1) and contributes sum_l S[a][l] over its segment.
    """
    mat = _matrix_of(S)
    L = mat.shape[0]
    anchors = [int(a) for a in anchors]
    if not anchors or anchors[0] != 0:
        raise InvalidArgumentError("anchors must start at layer 0")
    if any(b <= a for a, b in zip(anchors, anchors[1:])) or anchors[-1] >= L:
        raise InvalidArgumentError("anchors must be strictly increasing and < L")
    total = 0.0
    bounds = anchors[1:] + [L]
    for a, end in zip(anchors, bounds):
        total += float(mat[a, a:end].sum())
    return total


def _segment_sums(mat: np.ndarray) -> np.ndarray:
    """seg[i][j] = sum_{l=i}^{j-1} S[i][l] for 0 <= i < L, i <= j <= L."""
    L = mat.shape[0]
    cum = np.zeros((L, L + 1), dtype=np.float64)
    cum[:, 1:] = np.cumsum(mat, axis=1)
    return cum - cum[np.arange(L), np.arange(L)][:, None]


def select_anchors(S: Union[SimilarityMatrix, np.ndarray], M: int) -> AnchorPlanCore:
    """Optimal anchor set of size M via dynamic programming.

    Layer 0 is always the first anchor. Ties resolve to the
    lexicographically smallest anchor set: the DP stores suffix optima
    and the reconstruction walks front-to-back taking the smallest next
    anchor that still achieves the stored optimum (an exact float
    comparison, since the optimum was computed from those very terms).
    """
    mat = _matrix_of(S)
    L = mat.shape[0]
    if not (1 <= M <= L):
        raise InvalidArgumentError(f"anchor budget {M} outside [1, {L}]")
    seg = _segment_sums(mat)

    # suffix[m][i]: best value of covering layers i..L-1 with m anchors,
    # the first of which sits at layer i.
    suffix = np.full((M + 1, L), -np.inf, dtype=np.float64)
    suffix[1] = seg[np.arange(L), L]
    for m in range(2, M + 1):
        # first anchor at i, second at j > i; j leaves room for m-1 anchors
        for i in range(L - m + 1):
            j_lo, j_hi = i + 1, L - m + 2
            cand = seg[i, j_lo:j_hi] + suffix[m - 1, j_lo:j_hi]
            suffix[m, i] = cand.max()

    anchors = [0]
    i, m = 0, M
    while m > 1:
        target = suffix[m, i]
        j_lo, j_hi = i + 1, L - m + 2
        cand = seg[i, j_lo:j_hi] + suffix[m - 1, j_lo:j_hi]
        j = j_lo + int(np.flatnonzero(cand == target)[0])
        anchors.append(j)
        i, m = j, m - 1

    return AnchorPlanCore(
        anchors=anchors,
        budget=M,
        objective_value=objective(mat, anchors),
        source_digest=_digest_of(S),
    )


EXHAUSTIVE_LIMIT = 10**6


def exhaustive_select(S: Union[SimilarityMatrix, np.ndarray], M: int) -> AnchorPlanCore:
    """Brute-force maximizer over every valid anchor set (test oracle).

    Enumerates candidate sets in lexicographic order and keeps the first
    one achieving the maximum, matching select_anchors' tie-break.
    """
    mat = _matrix_of(S)
    L = mat.shape[0]
    if not (1 <= M <= L):
        raise InvalidArgumentError(f"anchor budget {M} outside [1, {L}]")
    n_sets = math.comb(L - 1, M - 1)
    if n_sets > EXHAUSTIVE_LIMIT:
        raise UnsupportedOperationError(
            f"{n_sets} candidate sets exceed the exhaustive bound {EXHAUSTIVE_LIMIT}"
        )
    best_anchors, best_value = None, -np.inf
    for rest in combinations(range(1, L), M - 1):
        anchors = [0, *rest]
        value = objective(mat, anchors)
        if value > best_value:
            best_anchors, best_value = anchors, value
    return AnchorPlanCore(
        anchors=best_anchors,
        budget=M,
        objective_value=best_value,
        source_digest=_digest_of(S),
    )
