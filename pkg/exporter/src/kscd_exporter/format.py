"""Independent writer for the KSCD trace wire format (version 1).

Layout (little-endian): magic "KSCD", u16 version, u32 L/Hq/Hkv/d/N,
u8 dtype (0 = float32), u8 flags (bit 0: X/Y present), u16-length-
prefixed UTF-8 prompt id, then row-major float32 tensors Q [L][Hq][N][d],
K and V [L][Hkv][N][d], and optionally X and Y [L][N][model_dim].

Deliberately not imported from the analysis toolkit: the byte layout is
the contract, and an independent writer keeps both sides honest.
"""

import struct

import numpy as np

from .errors import ExportError

MAGIC = b"KSCD"
VERSION = 1
DTYPE_F32 = 0
FLAG_XY = 0x01

HEADER = struct.Struct("<4sH5I2BH")


def write_kscd(path, *, Q, K, V, X=None, Y=None, prompt_id=""):
    """Write one trace. Q: [L][Hq][N][d]; K, V: [L][Hkv][N][d];
    X, Y: [L][N][model_dim] (both or neither)."""
    Q = np.ascontiguousarray(Q, dtype="<f4")
    K = np.ascontiguousarray(K, dtype="<f4")
    V = np.ascontiguousarray(V, dtype="<f4")
    L, Hq, N, d = Q.shape
    Hkv = K.shape[1]
    if K.shape != (L, Hkv, N, d) or V.shape != (L, Hkv, N, d):
        raise ExportError(f"inconsistent tensor shapes: Q {Q.shape} K {K.shape} V {V.shape}")
    if (X is None) != (Y is None):
        raise ExportError("X and Y must be written together")
    flags = 0
    if X is not None:
        X = np.ascontiguousarray(X, dtype="<f4")
        Y = np.ascontiguousarray(Y, dtype="<f4")
        if X.shape != Y.shape or X.shape[:2] != (L, N):
            raise ExportError(f"bad hidden-state shapes: X {X.shape} Y {Y.shape}")
        flags |= FLAG_XY
    prompt = prompt_id.encode("utf-8")
    if len(prompt) > 0xFFFF:
        raise ExportError("prompt_id longer than 65535 bytes")
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, L, Hq, Hkv, d, N, DTYPE_F32, flags, len(prompt)))
        f.write(prompt)
        f.write(Q.tobytes())
        f.write(K.tobytes())
        f.write(V.tobytes())
        if flags & FLAG_XY:
            f.write(X.tobytes())
            f.write(Y.tobytes())
