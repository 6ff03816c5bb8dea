"""Fast top-k index tables for the similarity paths.

np.argpartition + a within-partition lexsort is ~10x cheaper than a full
stable argsort when k << N. Ties inside the partition are ordered by
ascending position, matching the toolkit's tie rule; a tie straddling
the partition boundary may admit a different equal-valued index, which
leaves every mass sum built from the table unchanged. The contract-level
oracle (attention.oracle_topk_indices) keeps the exact stable argsort.
"""

import numpy as np


def topk_table(arr: np.ndarray, take: int) -> np.ndarray:
    """Indices of the ``take`` largest entries along the last axis,
    ordered by (value descending, index ascending)."""
    n = arr.shape[-1]
    take = min(take, n)
    if take >= n:
        return np.argsort(-arr, axis=-1, kind="stable")
    part = np.argpartition(-arr, take - 1, axis=-1)[..., :take]
    vals = np.take_along_axis(arr, part, axis=-1)
    # lexsort: primary key value descending, secondary key index ascending
    order = np.lexsort((part, -vals), axis=-1)
    return np.take_along_axis(part, order, axis=-1)
