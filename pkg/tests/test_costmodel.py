import pytest

from kascade import (
    CostParams,
    InvalidArgumentError,
    get_preset,
    predict_ratios,
    predict_report,
    preset_names,
    weighted_pipeline_time,
)
from kascade.costmodel import FIT_MIN_SEQ, PUBLISHED_BENCH, fit_ratios, report_from_preset


class TestWeightedPipelineTime:
    def test_decode_131072_k10_published_row(self):
        params = CostParams(phase="decode", seq_len=131072, baseline_layer_time=11.64)
        rep = weighted_pipeline_time(
            params, {"anchor0": 14.08, "anchor": 10.78, "reuse": 1.24}
        )
        assert rep.kascade_time == pytest.approx(2.83, abs=0.01)
        assert rep.speedup == pytest.approx(4.11, abs=0.02)

    def test_prefill_131072_k10_published_row(self):
        params = CostParams(phase="prefill", seq_len=131072, baseline_layer_time=262.21)
        rep = weighted_pipeline_time(
            params, {"anchor0": 483.69, "anchor": 416.53, "reuse": 37.18}
        )
        assert rep.kascade_time == pytest.approx(98.55, abs=0.1)
        assert rep.speedup == pytest.approx(2.66, abs=0.02)

    def test_uniform_times_give_unit_speedup(self):
        params = CostParams(phase="decode", baseline_layer_time=1.0)
        rep = weighted_pipeline_time(params, {"anchor0": 1.0, "anchor": 1.0, "reuse": 1.0})
        assert rep.speedup == pytest.approx(1.0)

    def test_linear_in_each_kind(self):
        params = CostParams(phase="decode")
        base = {"anchor0": 2.0, "anchor": 1.5, "reuse": 0.2}
        t0 = weighted_pipeline_time(params, base).kascade_time
        for kind, weight in (("anchor0", 1), ("anchor", 4), ("reuse", 27)):
            bumped = dict(base)
            bumped[kind] += 0.32
            t1 = weighted_pipeline_time(params, bumped).kascade_time
            assert t1 - t0 == pytest.approx(0.32 * weight / 32, rel=1e-9)

    def test_speedup_consistent_with_own_fields(self):
        params = CostParams(phase="decode", baseline_layer_time=7.7)
        rep = weighted_pipeline_time(params, {"anchor0": 3.0, "anchor": 2.0, "reuse": 0.5})
        assert abs(rep.speedup - rep.baseline_time / rep.kascade_time) < 1e-9

    def test_nonpositive_time_rejected(self):
        params = CostParams(phase="decode")
        with pytest.raises(InvalidArgumentError):
            weighted_pipeline_time(params, {"anchor0": 1.0, "anchor": 0.0, "reuse": 1.0})

    def test_invalid_anchor_count(self):
        with pytest.raises(InvalidArgumentError):
            CostParams(phase="decode", num_layers=4, num_anchors=5)


class TestPublishedTableReproduction:
    @pytest.mark.parametrize(
        "row", [r for r in PUBLISHED_BENCH if r.seq_len >= FIT_MIN_SEQ],
        ids=lambda r: r.preset_name,
    )
    def test_long_rows_reproduce_time_and_speedup(self, row):
        rep = report_from_preset(row.preset_name)
        assert rep.kascade_time == pytest.approx(row.kascade_ms, rel=0.005)
        assert rep.speedup == pytest.approx(row.speedup_tl, abs=0.02)

    def test_preset_lookup(self):
        row = get_preset("table3-decode-131072-k10")
        assert row.kascade_ms == 2.83
        with pytest.raises(InvalidArgumentError):
            get_preset("table3-decode-1-k99")

    def test_all_presets_named_uniquely(self):
        names = preset_names()
        assert len(names) == len(set(names)) == len(PUBLISHED_BENCH)

    def test_short_rows_flagged(self):
        rep = report_from_preset("table3-decode-8192-k10")
        assert not rep.valid


class TestPredictRatios:
    def test_decode_reuse_near_point_11(self):
        ratios = predict_ratios("decode", 0.1, 131072)
        assert ratios["reuse"] == pytest.approx(0.11, abs=0.005)

    def test_decode_reuse_near_point_31(self):
        ratios = predict_ratios("decode", 0.3, 131072)
        assert ratios["reuse"] == pytest.approx(0.31, abs=0.005)

    def test_full_fraction_never_beats_dense(self):
        for phase in ("decode", "prefill"):
            ratios = predict_ratios(phase, 1.0, 131072)
            assert ratios["reuse"] >= 1.0

    def test_speedup_monotone_decreasing_in_fraction(self):
        speeds = [
            predict_report("decode", f, 131072).speedup
            for f in (0.05, 0.1, 0.2, 0.3, 0.5, 1.0)
        ]
        for hi, lo in zip(speeds, speeds[1:]):
            assert hi > lo

    def test_short_sequence_flagged(self):
        assert predict_ratios("decode", 0.1, 8192)["valid"] == 0.0
        assert not predict_report("decode", 0.1, 8192).valid

    def test_fit_residuals_reported(self):
        # Constant offsets cannot capture everything (prefill gather cost
        # grows with fraction); the fit must expose its residuals.
        for phase in ("decode", "prefill"):
            fit = fit_ratios(phase)
            assert set(fit.max_residual) == {"reuse", "anchor0", "anchor"}
            assert fit.max_residual["reuse"] < 0.1
        assert fit_ratios("decode").max_residual["reuse"] < 0.005

    def test_invalid_fraction(self):
        with pytest.raises(InvalidArgumentError):
            predict_ratios("decode", 0.0, 131072)

    def test_unknown_phase(self):
        with pytest.raises(InvalidArgumentError):
            predict_ratios("training", 0.1, 131072)
