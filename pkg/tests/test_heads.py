import numpy as np
import pytest

from kascade import (
    InvalidArgumentError,
    SynthConfig,
    compute_head_map,
    generate_synthetic,
    head_similarity,
    oracle_topk_indices,
    pooled_all_heads_topk,
)
from kascade.heads import HeadMap, identity_head_map

from conftest import random_trace


def permuted_copy_trace(perm, seed=0, L=3, Hq=8, Hkv=4, d=16, N=64):
    """Identical layers except layer >= 1 kv heads are permuted by perm."""
    perms = [list(range(Hkv))] + [list(perm)] * (L - 1)
    cfg = SynthConfig(
        num_layers=L, num_query_heads=Hq, num_kv_heads=Hkv, head_dim=d,
        seq_len=N, seed=seed, layer_correlation=1.0, head_permutations=perms,
        heavy_tail_temperature=4.0,
    )
    return generate_synthetic(cfg)


class TestHeadSimilarity:
    def test_same_layer_diagonal_one(self, small_trace):
        hs = head_similarity(small_trace, 1, 1, k=4)
        np.testing.assert_allclose(np.diag(hs), 1.0, atol=1e-6)

    def test_recovers_permutation_on_permuted_copies(self):
        perm = [2, 0, 3, 1]
        t = permuted_copy_trace(perm)
        hs = head_similarity(t, 0, 1, k=8)
        # reuse head j holds base head perm[j]; anchor head i holds base
        # head i, so column j peaks at i = perm[j]
        assert hs.argmax(axis=0).tolist() == perm

    def test_single_kv_head_forced(self):
        t = random_trace(seed=3, Hq=2, Hkv=1)
        hs = head_similarity(t, 0, 1, k=4)
        assert hs.shape == (1, 1)


class TestComputeHeadMap:
    def test_identity_dominant(self):
        sim = np.array([[0.9, 0.1], [0.2, 0.8]])
        hm = compute_head_map(sim, reuse_layer=1, anchor_layer=0)
        assert hm.map == [0, 1]

    def test_recovers_permutation_matrix(self):
        perm = [1, 2, 0]
        sim = np.full((3, 3), 0.1)
        for j, i in enumerate(perm):
            sim[i, j] = 0.95
        assert compute_head_map(sim).map == perm

    def test_dominant_anchor_head_many_to_one(self):
        sim = np.array([[0.2, 0.3], [0.9, 0.8]])
        assert compute_head_map(sim).map == [1, 1]

    def test_tie_goes_to_smaller_anchor_head(self):
        sim = np.array([[0.5, 0.5], [0.5, 0.5]])
        assert compute_head_map(sim).map == [0, 0]

    def test_scale_invariant(self):
        rng = np.random.default_rng(4)
        sim = rng.random((5, 5))
        base = compute_head_map(sim).map
        assert compute_head_map(3.7 * sim).map == base

    def test_non_square_rejected(self):
        with pytest.raises(InvalidArgumentError):
            compute_head_map(np.ones((2, 3)))


class TestPooledAllHeadsTopk:
    def test_single_head_equals_per_head(self):
        rng = np.random.default_rng(5)
        dist = rng.random(16)
        shared = pooled_all_heads_topk(dist[None, :], 4)
        own = oracle_topk_indices(dist, 4)
        assert shared.indices.tolist() == own.indices.tolist()

    def test_disjoint_one_hot_heads_union(self):
        d0 = np.zeros(8)
        d0[2] = 1.0
        d1 = np.zeros(8)
        d1[5] = 1.0
        shared = pooled_all_heads_topk(np.stack([d0, d1]), 2)
        assert shared.indices.tolist() == [2, 5]

    def test_identical_heads_match_single(self):
        rng = np.random.default_rng(6)
        dist = rng.random(12)
        stacked = np.tile(dist, (3, 1))
        shared = pooled_all_heads_topk(stacked, 5)
        assert shared.indices.tolist() == oracle_topk_indices(dist, 5).indices.tolist()


class TestHeadMapValidation:
    def test_identity_helper(self):
        hm = identity_head_map(4, reuse_layer=3, anchor_layer=1)
        assert hm.map == [0, 1, 2, 3]
        hm.validate(4)

    def test_entry_out_of_range(self):
        hm = HeadMap(reuse_layer=1, anchor_layer=0, map=[0, 7])
        with pytest.raises(InvalidArgumentError):
            hm.validate(2)

    def test_wrong_length(self):
        hm = HeadMap(reuse_layer=1, anchor_layer=0, map=[0])
        with pytest.raises(InvalidArgumentError):
            hm.validate(2)

    def test_unknown_mode(self):
        hm = HeadMap(reuse_layer=1, anchor_layer=0, map=[0], mode="psychic")
        with pytest.raises(InvalidArgumentError):
            hm.validate(1)
