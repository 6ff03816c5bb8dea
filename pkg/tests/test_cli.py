import json

import numpy as np
import pytest

from kascade import dense_attention, mass_coverage, read_plan, read_trace, similarity_matrix
from kascade.cli import main

from test_heads import permuted_copy_trace
from kascade.traceio import write_trace


def run_cli(*args):
    return main([str(a) for a in args])


def gen_args(out, layers=3, q_heads=4, kv_heads=2, dim=8, tokens=24, rho=1.0, seed=7, extra=()):
    return [
        "gen", "--layers", layers, "--q-heads", q_heads, "--kv-heads", kv_heads,
        "--dim", dim, "--tokens", tokens, "--rho", rho, "--seed", seed,
        "--out", out, *extra,
    ]


class TestGen:
    def test_smoke_writes_valid_trace(self, tmp_path, capsys):
        out = tmp_path / "t.kscd"
        assert run_cli(*gen_args(out)) == 0
        assert "layers=3" in capsys.readouterr().out
        t = read_trace(out)
        assert (t.num_layers, t.num_query_heads, t.num_kv_heads) == (3, 4, 2)

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.kscd", tmp_path / "b.kscd"
        assert run_cli(*gen_args(a)) == 0
        assert run_cli(*gen_args(b)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_invalid_dims_rejected_at_parse_time(self, tmp_path, capsys):
        out = tmp_path / "t.kscd"
        code = run_cli(*gen_args(out, q_heads=5, kv_heads=2))
        assert code == 1
        assert "divisible" in capsys.readouterr().err
        assert not out.exists()

    def test_usage_error_exit_code(self, capsys):
        assert run_cli("gen", "--layers", "2") == 1

    def test_xy_flag(self, tmp_path):
        out = tmp_path / "t.kscd"
        assert run_cli(*gen_args(out, extra=["--xy"])) == 0
        assert read_trace(out).has_xy()


class TestAnalyze:
    def test_rho_one_similarity_all_ones(self, tmp_path):
        trace = tmp_path / "t.kscd"
        run_cli(*gen_args(trace, rho=1.0))
        out_dir = tmp_path / "out"
        assert run_cli("analyze", "--trace", trace, "--k", 6, "--out-dir", out_dir) == 0
        rows = (out_dir / "similarity.csv").read_text().strip().splitlines()[1:]
        for row in rows:
            assert float(row.split(",")[2]) == pytest.approx(1.0, abs=1e-6)

    def test_full_k_coverage_all_ones(self, tmp_path):
        trace = tmp_path / "t.kscd"
        run_cli(*gen_args(trace, tokens=16))
        out_dir = tmp_path / "out"
        assert run_cli("analyze", "--trace", trace, "--k", 16, "--out-dir", out_dir) == 0
        rows = (out_dir / "coverage.csv").read_text().strip().splitlines()[1:]
        for row in rows:
            assert float(row.split(",")[2]) == pytest.approx(1.0, abs=1e-6)

    def test_outputs_match_library(self, tmp_path):
        trace_path = tmp_path / "t.kscd"
        run_cli(*gen_args(trace_path, rho=0.4, seed=13))
        out_dir = tmp_path / "out"
        assert run_cli("analyze", "--trace", trace_path, "--k", 5, "--out-dir", out_dir) == 0
        t = read_trace(trace_path)
        S = similarity_matrix(t, k=5)
        rows = (out_dir / "similarity.csv").read_text().strip().splitlines()[1:]
        for row in rows:
            a, b, val = row.split(",")
            assert float(val) == pytest.approx(float(S.S[int(a), int(b)]), abs=1e-6)
        cov_rows = (out_dir / "coverage.csv").read_text().strip().splitlines()[1:]
        P, _ = dense_attention(t, 0)
        cov0 = mass_coverage(P, 5)
        got = [float(r.split(",")[2]) for r in cov_rows if r.startswith("0,")]
        np.testing.assert_allclose(got, cov0, atol=1e-6)

    def test_importance_warning_without_xy(self, tmp_path, capsys):
        trace = tmp_path / "t.kscd"
        run_cli(*gen_args(trace))
        out_dir = tmp_path / "out"
        assert run_cli("analyze", "--trace", trace, "--importance",
                       "--out-dir", out_dir) == 0
        assert "uniform" in capsys.readouterr().err
        rows = (out_dir / "importance.csv").read_text().strip().splitlines()[1:]
        assert all(float(r.split(",")[1]) == 1.0 for r in rows)

    def test_missing_trace_is_data_error(self, tmp_path):
        assert run_cli("analyze", "--trace", tmp_path / "nope.kscd") == 2


class TestPlan:
    def test_full_budget_lists_all_layers(self, tmp_path, capsys):
        trace = tmp_path / "t.kscd"
        run_cli(*gen_args(trace, layers=4, tokens=32))
        plan_path = tmp_path / "p.json"
        assert run_cli("plan", "--trace", trace, "--budget", 4, "--k", 8,
                       "--tile-size", 8, "--out", plan_path) == 0
        plan = read_plan(plan_path)
        assert plan.core.anchors == [0, 1, 2, 3]

    def test_objective_printed_matches_recomputation(self, tmp_path, capsys):
        trace = tmp_path / "t.kscd"
        run_cli(*gen_args(trace, layers=4, tokens=32, rho=0.7, seed=3))
        plan_path = tmp_path / "p.json"
        assert run_cli("plan", "--trace", trace, "--budget", 2, "--k", 8,
                       "--tile-size", 8, "--out", plan_path) == 0
        printed = capsys.readouterr().out
        plan = read_plan(plan_path)
        assert f"objective={plan.core.objective_value:.6g}" in printed

    def test_permuted_copy_trace_head_maps(self, tmp_path):
        perm = [1, 0]
        t = permuted_copy_trace(perm, seed=5, L=3, Hq=4, Hkv=2, d=16, N=48)
        trace_path = tmp_path / "perm.kscd"
        write_trace(trace_path, t)
        plan_path = tmp_path / "p.json"
        assert run_cli("plan", "--trace", trace_path, "--budget", 1, "--k", 6,
                       "--tile-size", 16, "--out", plan_path) == 0
        plan = read_plan(plan_path)
        assert plan.core.anchors == [0]
        for hm in plan.head_maps.values():
            assert hm.map == perm

    def test_budget_beyond_layers_is_data_error(self, tmp_path):
        trace = tmp_path / "t.kscd"
        run_cli(*gen_args(trace, layers=3))
        assert run_cli("plan", "--trace", trace, "--budget", 9,
                       "--out", tmp_path / "p.json") == 2


class TestRun:
    def _plan_and_trace(self, tmp_path, **gen_kwargs):
        trace = tmp_path / "t.kscd"
        run_cli(*gen_args(trace, **gen_kwargs))
        plan_path = tmp_path / "p.json"
        layers = gen_kwargs.get("layers", 3)
        run_cli("plan", "--trace", trace, "--budget", layers, "--k", 8,
                "--tile-size", 8, "--fraction", 1.0,
                "--k-min", gen_kwargs.get("tokens", 24), "--out", plan_path)
        return trace, plan_path

    def test_degenerate_plan_zero_errors(self, tmp_path, capsys):
        trace, plan = self._plan_and_trace(tmp_path)
        report_path = tmp_path / "r.json"
        assert run_cli("run", "--trace", trace, "--plan", plan,
                       "--out", report_path) == 0
        data = json.loads(report_path.read_text())
        assert data["overall"]["max_output_rel_err_l2"] <= 1e-5
        assert "anchor0" in capsys.readouterr().out

    def test_fail_above_threshold_exit_code(self, tmp_path):
        trace = tmp_path / "t.kscd"
        run_cli(*gen_args(trace, rho=0.2, seed=9))
        plan_path = tmp_path / "p.json"
        run_cli("plan", "--trace", trace, "--budget", 1, "--k", 6,
                "--tile-size", 8, "--fraction", 0.2, "--k-min", 2,
                "--out", plan_path)
        assert run_cli("run", "--trace", trace, "--plan", plan_path,
                       "--fail-above", "1e-9") == 3
        assert run_cli("run", "--trace", trace, "--plan", plan_path,
                       "--fail-above", "1e9") == 0

    def test_all_heads_pooled_mode_smoke(self, tmp_path, capsys):
        trace, plan = self._plan_and_trace(tmp_path)
        assert run_cli("run", "--trace", trace, "--plan", plan,
                       "--mode", "all-heads-pooled") == 0
        assert "mode: all_heads_pooled" in capsys.readouterr().out

    def test_decode_phase_smoke(self, tmp_path):
        trace, plan = self._plan_and_trace(tmp_path, tokens=12)
        assert run_cli("run", "--trace", trace, "--plan", plan,
                       "--phase", "decode") == 0

    def test_plan_trace_mismatch_is_invalid(self, tmp_path):
        trace, plan = self._plan_and_trace(tmp_path, layers=4, tokens=32)
        other = tmp_path / "small.kscd"
        run_cli(*gen_args(other, layers=2, tokens=8))
        assert run_cli("run", "--trace", other, "--plan", plan) == 2


class TestCost:
    def test_preset_decode_131072_k10(self, tmp_path, capsys):
        out = tmp_path / "c.json"
        assert run_cli("cost", "--preset", "table3-decode-131072-k10",
                       "--out", out) == 0
        data = json.loads(out.read_text())[0]
        assert data["speedup"] == pytest.approx(4.11, abs=0.02)
        assert data["kascade_time"] == pytest.approx(2.83, abs=0.01)

    def test_preset_prefill_262144_k10(self, capsys):
        assert run_cli("cost", "--preset", "table3-prefill-262144-k10") == 0
        assert "speedup=2.5" in capsys.readouterr().out

    def test_uniform_ratios_unit_speedup(self, capsys):
        assert run_cli("cost", "--ratios", "1,1,1") == 0
        assert "speedup=1.000" in capsys.readouterr().out

    def test_list_presets(self, capsys):
        assert run_cli("cost", "--list-presets") == 0
        out = capsys.readouterr().out
        assert "table3-decode-131072-k10" in out
        assert len(out.strip().splitlines()) == 39

    def test_predict_mode(self, capsys):
        assert run_cli("cost", "--predict", "--phase", "decode",
                       "--fraction", 0.1, "--seq-len", 131072) == 0

    def test_unknown_preset_is_data_error(self):
        assert run_cli("cost", "--preset", "table3-decode-1-k1") == 2

    def test_csv_output(self, capsys):
        assert run_cli("cost", "--preset", "table3-decode-131072-k10", "--csv") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("name,kascade_time")
        assert lines[1].startswith("table3-decode-131072-k10,")


class TestReport:
    def test_renders_run_report(self, tmp_path, capsys):
        trace = tmp_path / "t.kscd"
        run_cli(*gen_args(trace))
        plan_path = tmp_path / "p.json"
        run_cli("plan", "--trace", trace, "--budget", 1, "--k", 6,
                "--tile-size", 8, "--out", plan_path)
        report_path = tmp_path / "r.json"
        run_cli("run", "--trace", trace, "--plan", plan_path, "--out", report_path)
        capsys.readouterr()
        assert run_cli("report", report_path) == 0
        out = capsys.readouterr().out
        assert "anchor0" in out and "overall" in out

    def test_renders_other_json(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text('{"x": 1}')
        assert run_cli("report", path) == 0
        assert '"x": 1' in capsys.readouterr().out
