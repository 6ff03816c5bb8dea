import numpy as np
import pytest

from kascade import (
    AnchorPlan,
    AnchorPlanCore,
    InvalidArgumentError,
    InvalidPlanError,
    KBudgetPolicy,
    SynthConfig,
    compare,
    dense_attention,
    generate_synthetic,
    run_dense,
    run_kascade,
)
from kascade.heads import MODE_ALL_HEADS_POOLED, identity_head_map
from kascade.pipeline import build_plan, compute_head_maps

from conftest import naive_attention, random_trace
from test_heads import permuted_copy_trace


def full_plan(L, N, tile_size=None):
    """Every layer an anchor, full Top-k budget."""
    core = AnchorPlanCore(anchors=list(range(L)), budget=L, objective_value=0.0)
    return AnchorPlan(
        core=core,
        k_policy=KBudgetPolicy(fraction=1.0, k_min=N),
        tile_size=tile_size or N,
    )


def plan_with_maps(trace, anchors, fraction=0.25, k_min=8, tile_size=16,
                   head_map_mode="remapped", head_k=None, **kwargs):
    core = AnchorPlanCore(anchors=list(anchors), budget=len(anchors), objective_value=0.0)
    # selection size well below N, otherwise every head's Top-k set is
    # the full support and the mapping cannot discriminate
    head_k = head_k or max(2, trace.seq_len // 8)
    maps = compute_head_maps(trace, anchors, k=head_k, head_map_mode=head_map_mode)
    return AnchorPlan(
        core=core,
        head_maps=maps,
        k_policy=KBudgetPolicy(fraction=fraction, k_min=k_min),
        tile_size=tile_size,
        **kwargs,
    )


class TestRunDense:
    def test_single_token_outputs_values(self):
        t = random_trace(seed=20, N=1)
        outs = run_dense(t)
        for layer in range(t.num_layers):
            for h in range(t.num_query_heads):
                np.testing.assert_array_equal(
                    outs[layer, h, 0], t.V[layer, t.kv_head_of(h), 0]
                )

    def test_matches_naive_oracle(self):
        t = random_trace(seed=21, L=2, Hq=2, Hkv=1, d=8, N=10)
        outs = run_dense(t)
        for layer in range(2):
            _, Y_ref = naive_attention(t, layer)
            assert np.abs(outs[layer] - Y_ref).max() < 1e-6

    def test_deterministic_bit_identical(self, small_trace):
        a = run_dense(small_trace)
        b = run_dense(small_trace)
        np.testing.assert_array_equal(a, b)


class TestRunKascade:
    def test_degenerate_full_plan_equals_dense(self):
        t = random_trace(seed=22, L=3, Hq=4, Hkv=2, d=8, N=32)
        outs, report = run_kascade(t, full_plan(3, 32))
        dense = run_dense(t)
        assert np.abs(outs - dense).max() <= 1e-5
        assert report.overall["max_output_rel_err_l2"] <= 1e-5
        for r in report.per_layer:
            assert r.mass_recovered_mean == pytest.approx(1.0, abs=1e-6)

    def test_layer_zero_bit_identical_to_dense(self):
        t = random_trace(seed=23, L=2, Hq=2, Hkv=1, d=8, N=16)
        plan = plan_with_maps(t, [0], fraction=0.2, k_min=2)
        outs, report = run_kascade(t, plan)
        _, Y0 = dense_attention(t, 0)
        np.testing.assert_array_equal(outs[0], Y0)
        assert report.per_layer[0].kind == "anchor0"
        assert report.per_layer[0].output_rel_err_l2 == 0.0

    def test_copied_layers_reuse_equals_oracle_mass(self):
        # All layers identical: reuse indices are the oracle indices, so
        # recovered mass equals the oracle tile mass at the same budget.
        cfg = SynthConfig(num_layers=3, num_query_heads=2, num_kv_heads=1,
                          head_dim=16, seq_len=32, seed=24, layer_correlation=1.0)
        t = generate_synthetic(cfg)
        plan = plan_with_maps(t, [0, 1], fraction=0.25, k_min=2, tile_size=8)
        _, report = run_kascade(t, plan)
        anchor_mass = [r.mass_recovered_mean for r in report.per_layer if r.kind == "anchor"]
        reuse_mass = [r.mass_recovered_mean for r in report.per_layer if r.kind == "reuse"]
        assert reuse_mass[0] == pytest.approx(anchor_mass[0], abs=1e-6)

    def test_monotone_fidelity_in_fraction(self):
        cfg = SynthConfig(num_layers=4, num_query_heads=4, num_kv_heads=2,
                          head_dim=16, seq_len=64, seed=25, layer_correlation=0.9)
        t = generate_synthetic(cfg)
        masses = []
        for fraction in (0.1, 0.25, 0.5, 1.0):
            plan = plan_with_maps(t, [0, 2], fraction=fraction, k_min=2, tile_size=16)
            _, report = run_kascade(t, plan)
            masses.append(report.overall["mean_mass_recovered"])
        for lo, hi in zip(masses, masses[1:]):
            assert hi >= lo - 1e-7

    def test_remapped_beats_identity_on_permuted_traces(self):
        # Anchor at the unpermuted layer 0; reuse layers carry a
        # non-trivial kv-head permutation, so an identity mapping reads
        # the wrong heads' index sets.
        perm = [2, 0, 3, 1]
        t = permuted_copy_trace(perm, seed=26, L=3, Hq=8, Hkv=4, d=16, N=64)
        remapped = plan_with_maps(t, [0], fraction=0.15, k_min=4, tile_size=16)
        identity = plan_with_maps(t, [0], fraction=0.15, k_min=4, tile_size=16,
                                  head_map_mode="identity")
        assert all(hm.map == [perm[j] for j in range(4)] for hm in remapped.head_maps.values())
        _, rep_re = run_kascade(t, remapped)
        _, rep_id = run_kascade(t, identity)
        m_re = rep_re.overall["reuse_mean_mass_recovered"]
        m_id = rep_id.overall["reuse_mean_mass_recovered"]
        assert m_re > m_id

    def test_remapped_output_equals_per_layer_oracle_on_permuted_copies(self):
        # On exact head-permuted copies, routed anchor sets coincide with
        # what each reuse layer would have selected for itself, so the
        # remapped output matches the every-layer-anchored (oracle
        # selection) output; the identity mapping does not.
        perm = [1, 2, 0]
        t = permuted_copy_trace(perm, seed=35, L=3, Hq=6, Hkv=3, d=16, N=64)
        kw = dict(fraction=0.2, k_min=4, tile_size=16)
        oracle_plan = plan_with_maps(t, [0, 1, 2], **kw)     # every layer anchored
        remapped = plan_with_maps(t, [0], **kw)
        identity = plan_with_maps(t, [0], head_map_mode="identity", **kw)
        oracle_out, _ = run_kascade(t, oracle_plan)
        re_out, _ = run_kascade(t, remapped)
        id_out, _ = run_kascade(t, identity)
        assert np.abs(re_out - oracle_out).max() <= 1e-5
        assert np.abs(id_out - oracle_out).max() > 1e-3

    def test_all_heads_pooled_mode_runs(self):
        t = random_trace(seed=27, L=3, Hq=4, Hkv=2, d=8, N=32)
        core = AnchorPlanCore(anchors=[0, 1], budget=2, objective_value=0.0)
        plan = AnchorPlan(core=core, mode=MODE_ALL_HEADS_POOLED,
                          k_policy=KBudgetPolicy(fraction=0.5, k_min=4), tile_size=8)
        outs, report = run_kascade(t, plan)
        assert outs.shape == (3, 4, 32, 8)
        assert 0 < report.overall["mean_mass_recovered"] <= 1 + 1e-6

    def test_decode_phase_runs_per_token_tiles(self):
        t = random_trace(seed=28, L=2, Hq=4, Hkv=2, d=8, N=12)
        plan = plan_with_maps(t, [0], fraction=0.5, k_min=2)
        _, report = run_kascade(t, plan, phase="decode")
        assert report.config["phase"] == "decode"
        assert report.overall["mean_mass_recovered"] > 0.5

    def test_missing_head_map_is_invalid_plan(self):
        t = random_trace(seed=29, L=3)
        core = AnchorPlanCore(anchors=[0], budget=1, objective_value=0.0)
        plan = AnchorPlan(core=core)  # no head maps for layers 1, 2
        with pytest.raises(InvalidPlanError):
            run_kascade(t, plan)

    def test_anchor_out_of_range_is_invalid_plan(self):
        t = random_trace(seed=30, L=2)
        core = AnchorPlanCore(anchors=[0, 5], budget=2, objective_value=0.0)
        plan = AnchorPlan(core=core)
        with pytest.raises(InvalidPlanError):
            run_kascade(t, plan)

    def test_wrong_anchor_reference_is_invalid_plan(self):
        t = random_trace(seed=31, L=3)
        core = AnchorPlanCore(anchors=[0, 2], budget=2, objective_value=0.0)
        maps = {1: identity_head_map(t.num_kv_heads, reuse_layer=1, anchor_layer=2)}
        plan = AnchorPlan(core=core, head_maps=maps)
        with pytest.raises(InvalidPlanError):
            run_kascade(t, plan)


class TestCompare:
    def test_equal_outputs_zero_error(self):
        a = np.ones((2, 1, 3, 4), dtype=np.float32)
        report = compare(a, a.copy())
        assert report.overall["max_output_rel_err_l2"] == 0.0

    def test_double_has_unit_relative_error(self):
        b = np.full((1, 1, 2, 2), 3.0, dtype=np.float32)
        report = compare(2 * b, b)
        assert report.overall["max_output_rel_err_l2"] == pytest.approx(1.0)

    def test_matches_norm_oracle(self):
        rng = np.random.default_rng(33)
        a = rng.standard_normal((2, 2, 4, 4)).astype(np.float32)
        b = rng.standard_normal((2, 2, 4, 4)).astype(np.float32)
        report = compare(a, b)
        for layer in range(2):
            ref = np.linalg.norm((a[layer] - b[layer]).ravel()) / np.linalg.norm(
                b[layer].ravel()
            )
            assert report.per_layer[layer].output_rel_err_l2 == pytest.approx(
                float(ref), rel=1e-6
            )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            compare(np.ones((1, 2, 3, 4)), np.ones((1, 2, 3, 5)))


def test_correlated_trace_pipeline_recovers_mass():
    # Planned end to end on a correlated generator trace: anchors via the
    # similarity matrix, head maps computed, then executed in prefill.
    cfg = SynthConfig(num_layers=8, num_query_heads=4, num_kv_heads=2,
                      head_dim=16, seq_len=256, seed=34, layer_correlation=0.95,
                      heavy_tail_temperature=4.0)
    t = generate_synthetic(cfg)
    plan = build_plan(t, budget=3, tile_size=64,
                      k_policy=KBudgetPolicy(fraction=0.1, k_min=32))
    _, report = run_kascade(t, plan)
    assert report.overall["reuse_mean_mass_recovered"] > 0.85
    assert report.overall["anchor0_mean_rel_err"] == 0.0


def test_full_scale_pipeline_five_anchors_of_32_layers():
    # The deployment-sized configuration: 5 anchors over 32 layers at 10%
    # Top-k on a 2048-token correlated trace. Slowest test in the suite
    # (about a minute); everything upstream of it is exercised at small
    # sizes elsewhere.
    cfg = SynthConfig(num_layers=32, num_query_heads=4, num_kv_heads=2,
                      head_dim=16, seq_len=2048, seed=11,
                      layer_correlation=0.95, heavy_tail_temperature=4.0)
    t = generate_synthetic(cfg)
    plan = build_plan(t, budget=5)
    assert plan.core.anchors[0] == 0 and len(plan.core.anchors) == 5
    _, report = run_kascade(t, plan)
    assert report.overall["reuse_mean_mass_recovered"] >= 0.95
    assert report.overall["anchor_mean_mass_recovered"] >= 0.95
