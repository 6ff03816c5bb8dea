"""Shared fixtures and independent oracles.

The oracles here are deliberately naive (explicit loops, float64) and
never call into the code paths they check.
"""

import math

import numpy as np
import pytest

from kascade import AttentionTrace


def random_trace(seed, L=2, Hq=4, Hkv=2, d=8, N=12, xy=False, model_dim=None):
    """Unstructured iid-normal trace for numeric oracle tests."""
    rng = np.random.default_rng(seed)
    model_dim = model_dim or Hq * d
    return AttentionTrace(
        num_layers=L,
        num_query_heads=Hq,
        num_kv_heads=Hkv,
        head_dim=d,
        seq_len=N,
        Q=rng.standard_normal((L, Hq, N, d)).astype(np.float32),
        K=rng.standard_normal((L, Hkv, N, d)).astype(np.float32),
        V=rng.standard_normal((L, Hkv, N, d)).astype(np.float32),
        X=rng.standard_normal((L, N, model_dim)).astype(np.float32) if xy else None,
        Y=rng.standard_normal((L, N, model_dim)).astype(np.float32) if xy else None,
        prompt_id=f"rand-{seed}",
    )


def naive_attention(trace, layer, causal=True):
    """Three-loop float64 attention; the ground truth for dense_attention."""
    Hq, N, d = trace.num_query_heads, trace.seq_len, trace.head_dim
    P = np.zeros((Hq, N, N), dtype=np.float64)
    Y = np.zeros((Hq, N, d), dtype=np.float64)
    for h in range(Hq):
        g = h // (Hq // trace.num_kv_heads)
        for i in range(N):
            hi = i + 1 if causal else N
            scores = []
            for j in range(hi):
                dot = 0.0
                for x in range(d):
                    dot += float(trace.Q[layer, h, i, x]) * float(trace.K[layer, g, j, x])
                scores.append(dot / math.sqrt(d))
            m = max(scores)
            exps = [math.exp(s - m) for s in scores]
            z = sum(exps)
            for j in range(hi):
                P[h, i, j] = exps[j] / z
                for x in range(d):
                    Y[h, i, x] += (exps[j] / z) * float(trace.V[layer, g, j, x])
    return P, Y


def sorted_topk(weights, k):
    """Full-sort Top-k oracle with the smaller-index tie rule."""
    order = sorted(range(len(weights)), key=lambda i: (-float(weights[i]), i))
    return sorted(order[: min(k, len(weights))])


@pytest.fixture
def small_trace():
    return random_trace(seed=711, L=3, Hq=4, Hkv=2, d=8, N=16)
