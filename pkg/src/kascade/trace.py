"""Attention trace container: per-layer, per-head Q/K/V for one prompt."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError


@dataclass
class AttentionTrace:
    """Recorded Q/K/V tensors (and optional attention-block input/output
    hidden states X/Y) for a single prompt.

    Shapes:
        Q: [L][Hq][N][d]      K, V: [L][Hkv][N][d]
        X, Y: [L][N][model_dim] (optional, together or not at all)

    Query head ``h`` reads keys/values from kv head ``h // (Hq // Hkv)``.
    """

    num_layers: int
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    seq_len: int
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    X: Optional[np.ndarray] = None
    Y: Optional[np.ndarray] = None
    prompt_id: str = ""

    def __post_init__(self):
        self.validate()

    @property
    def group_size(self) -> int:
        return self.num_query_heads // self.num_kv_heads

    def kv_head_of(self, query_head: int) -> int:
        return query_head // self.group_size

    def has_xy(self) -> bool:
        return self.X is not None and self.Y is not None

    def validate(self):
        L, Hq, Hkv, d, N = (
            self.num_layers,
            self.num_query_heads,
            self.num_kv_heads,
            self.head_dim,
            self.seq_len,
        )
        for name, val in (("num_layers", L), ("num_query_heads", Hq),
                          ("num_kv_heads", Hkv), ("head_dim", d), ("seq_len", N)):
            if val < 1:
                raise InvalidArgumentError(f"{name} must be >= 1, got {val}")
        if Hq % Hkv != 0:
            raise InvalidArgumentError(
                f"num_query_heads ({Hq}) must be divisible by num_kv_heads ({Hkv})"
            )
        expect = {
            "Q": (L, Hq, N, d),
            "K": (L, Hkv, N, d),
            "V": (L, Hkv, N, d),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise InvalidArgumentError(
                    f"{name} has shape {arr.shape}, header implies {shape}"
                )
            if not np.isfinite(arr).all():
                raise InvalidArgumentError(f"{name} contains non-finite values")
        if (self.X is None) != (self.Y is None):
            raise InvalidArgumentError("X and Y must be supplied together")
        if self.X is not None:
            for name in ("X", "Y"):
                arr = getattr(self, name)
                if arr.ndim != 3 or arr.shape[0] != L or arr.shape[1] != N:
                    raise InvalidArgumentError(
                        f"{name} has shape {arr.shape}, expected [L={L}][N={N}][model_dim]"
                    )
                if not np.isfinite(arr).all():
                    raise InvalidArgumentError(f"{name} contains non-finite values")
            if self.X.shape != self.Y.shape:
                raise InvalidArgumentError(
                    f"X shape {self.X.shape} != Y shape {self.Y.shape}"
                )

    def equals(self, other: "AttentionTrace") -> bool:
        """Bit-exact equality, used by round-trip tests."""
        header_eq = (
            self.num_layers == other.num_layers
            and self.num_query_heads == other.num_query_heads
            and self.num_kv_heads == other.num_kv_heads
            and self.head_dim == other.head_dim
            and self.seq_len == other.seq_len
            and self.prompt_id == other.prompt_id
            and self.has_xy() == other.has_xy()
        )
        if not header_eq:
            return False
        tensors = np.array_equal(self.Q, other.Q) and np.array_equal(
            self.K, other.K
        ) and np.array_equal(self.V, other.V)
        if not tensors:
            return False
        if self.has_xy():
            return np.array_equal(self.X, other.X) and np.array_equal(self.Y, other.Y)
        return True
