"""Command-line front end: gen, analyze, plan, run, cost, report.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 threshold
failure (the --fail-above CI hook). All subcommands are deterministic
given their flags and seed; KASCADE_THREADS caps internal parallelism.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import costmodel, metrics, pipeline, planner, runner, tiles, traceio
from .attention import dense_attention
from .errors import KascadeError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_THRESHOLD = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kascade", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic trace file")
    gen.add_argument("--layers", type=int, required=True)
    gen.add_argument("--q-heads", type=int, required=True)
    gen.add_argument("--kv-heads", type=int, required=True)
    gen.add_argument("--dim", type=int, required=True)
    gen.add_argument("--tokens", type=int, required=True)
    gen.add_argument("--rho", type=float, default=1.0,
                     help="cross-layer key correlation in [0, 1]")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--temperature", type=float, default=4.0,
                     help="query sharpness; higher = heavier-tailed softmax")
    gen.add_argument("--query-correlation", type=float, default=0.85)
    gen.add_argument("--layer0-temperature-scale", type=float, default=1.0)
    gen.add_argument("--permute-heads", action="store_true",
                     help="apply a random kv-head permutation per layer (layer 0 stays identity)")
    gen.add_argument("--xy", action="store_true",
                     help="include attention-block input/output hidden states")
    gen.add_argument("--prompt-id", default="")
    gen.add_argument("--out", required=True)

    analyze = sub.add_parser("analyze", help="sparsity, similarity and importance reports")
    analyze.add_argument("--trace", nargs="+", required=True)
    analyze.add_argument("--k", type=int, default=metrics.PLANNING_K)
    analyze.add_argument("--token-agg", choices=["mean", "min"], default="mean")
    analyze.add_argument("--mode", choices=["diagnostic", "planning"], default="diagnostic")
    analyze.add_argument("--tile-size", type=int, default=tiles.DEFAULT_TILE_SIZE)
    analyze.add_argument("--importance", action="store_true")
    analyze.add_argument("--out-dir", default=".")

    plan = sub.add_parser("plan", help="select anchors and head maps, write a plan file")
    plan.add_argument("--trace", nargs="+", required=True)
    plan.add_argument("--budget", type=int, default=planner.DEFAULT_ANCHOR_BUDGET)
    plan.add_argument("--k", type=int, default=metrics.PLANNING_K)
    plan.add_argument("--token-agg", choices=["mean", "min"], default="min")
    plan.add_argument("--tile-size", type=int, default=tiles.DEFAULT_TILE_SIZE)
    plan.add_argument("--pooling", choices=["post", "pre"], default="post")
    plan.add_argument("--mode", choices=["remapped", "all-heads-pooled"], default="remapped")
    plan.add_argument("--fraction", type=float, default=tiles.DEFAULT_TOPK_FRACTION)
    plan.add_argument("--k-min", type=int, default=tiles.DEFAULT_K_MIN)
    plan.add_argument("--no-importance", action="store_true",
                      help="skip importance weighting even when X/Y are present")
    plan.add_argument("--out", required=True)

    run = sub.add_parser("run", help="execute the pipeline and report fidelity vs dense")
    run.add_argument("--trace", required=True)
    run.add_argument("--plan", required=True)
    run.add_argument("--phase", choices=["prefill", "decode"], default="prefill")
    run.add_argument("--mode", choices=["remapped", "all-heads-pooled"], default=None,
                     help="override the plan's head-map mode")
    run.add_argument("--out", default=None, help="write the machine-readable report here")
    run.add_argument("--fail-above", type=float, default=None,
                     help="exit 3 if any layer's relative L2 error exceeds this")

    cost = sub.add_parser("cost", help="weighted-average pipeline time and speedup")
    cost.add_argument("--preset", action="append", default=None,
                      help="published benchmark preset, e.g. table3-decode-131072-k10")
    cost.add_argument("--list-presets", action="store_true")
    cost.add_argument("--ratios", default=None,
                      help="anchor0,anchor,reuse per-kind times (or ratios)")
    cost.add_argument("--predict", action="store_true",
                      help="use the fitted ratio model for --phase/--fraction/--seq-len")
    cost.add_argument("--phase", choices=["decode", "prefill"], default="decode")
    cost.add_argument("--fraction", type=float, default=0.1)
    cost.add_argument("--seq-len", type=int, default=131072)
    cost.add_argument("--layers", type=int, default=costmodel.PIPELINE_LAYERS)
    cost.add_argument("--anchors", type=int, default=costmodel.PIPELINE_ANCHORS)
    cost.add_argument("--baseline-time", type=float, default=1.0)
    cost.add_argument("--csv", action="store_true", help="emit CSV instead of text")
    cost.add_argument("--out", default=None, help="write JSON results here")

    report = sub.add_parser("report", help="render a saved report file as text")
    report.add_argument("file")

    return parser


def _load_traces(paths):
    return [traceio.read_trace(p) for p in paths]


def cmd_gen(args) -> int:
    perms = None
    if args.permute_heads:
        rng = np.random.default_rng(args.seed ^ 0x9E3779B9)
        perms = [list(range(args.kv_heads))] + [
            list(rng.permutation(args.kv_heads)) for _ in range(args.layers - 1)
        ]
    config = traceio.SynthConfig(
        num_layers=args.layers,
        num_query_heads=args.q_heads,
        num_kv_heads=args.kv_heads,
        head_dim=args.dim,
        seq_len=args.tokens,
        seed=args.seed,
        layer_correlation=args.rho,
        head_permutations=perms,
        heavy_tail_temperature=args.temperature,
        query_correlation=args.query_correlation,
        layer0_temperature_scale=args.layer0_temperature_scale,
        include_xy=args.xy,
        prompt_id=args.prompt_id,
    )
    trace = traceio.generate_synthetic(config)
    traceio.write_trace(args.out, trace)
    size = os.path.getsize(args.out)
    print(
        f"wrote {args.out}: layers={trace.num_layers} q_heads={trace.num_query_heads} "
        f"kv_heads={trace.num_kv_heads} dim={trace.head_dim} tokens={trace.seq_len} "
        f"xy={int(trace.has_xy())} bytes={size}"
    )
    return EXIT_OK


def cmd_analyze(args) -> int:
    traces = _load_traces(args.trace)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    coverage = []
    for layer in range(traces[0].num_layers):
        per_head = []
        for t in traces:
            P, _ = dense_attention(t, layer)
            per_head.append(metrics.mass_coverage(P, args.k))
        coverage.append(np.mean(per_head, axis=0))
    (out_dir / "coverage.csv").write_text(traceio.coverage_csv(coverage))

    S = metrics.similarity_matrix(
        traces,
        k=args.k,
        token_agg=args.token_agg,
        mode=args.mode,
        tile_size=args.tile_size,
    )
    (out_dir / "similarity.csv").write_text(traceio.similarity_csv(S))

    if args.importance:
        if all(t.has_xy() for t in traces):
            imp = metrics.layer_importance(traces)
        else:
            print(
                "warning: trace(s) lack attention input/output hidden states; "
                "using uniform importance weights",
                file=sys.stderr,
            )
            imp = metrics.LayerImportance(
                w=np.ones(traces[0].num_layers), source_prompt_count=len(traces)
            )
        (out_dir / "importance.csv").write_text(traceio.importance_csv(imp))

    print(
        f"analyzed {len(traces)} trace(s): k={args.k} mode={args.mode} "
        f"token_agg={args.token_agg} undefined_scores={S.undefined_scores} "
        f"-> {out_dir}"
    )
    return EXIT_OK


def cmd_plan(args) -> int:
    traces = _load_traces(args.trace)
    plan = pipeline.build_plan(
        traces,
        budget=args.budget,
        k=args.k,
        token_agg=args.token_agg,
        tile_size=args.tile_size,
        pooling=args.pooling,
        mode=args.mode.replace("-", "_"),
        k_policy=tiles.KBudgetPolicy(fraction=args.fraction, k_min=args.k_min),
        use_importance=not args.no_importance,
    )
    traceio.write_plan(args.out, plan)
    print(
        f"anchors={plan.core.anchors} objective={plan.core.objective_value:.6g} "
        f"mode={plan.mode} pooling={plan.pooling} -> {args.out}"
    )
    return EXIT_OK


def cmd_run(args) -> int:
    trace = traceio.read_trace(args.trace)
    plan = traceio.read_plan(args.plan)
    if args.mode is not None:
        plan.mode = args.mode.replace("-", "_")
    _, report = runner.run_kascade(trace, plan, phase=args.phase)
    if args.out:
        traceio.write_report(args.out, report)
    print(traceio.format_report(report), end="")
    if args.fail_above is not None:
        worst = report.overall["max_output_rel_err_l2"]
        if worst > args.fail_above:
            print(
                f"FAIL: max relative error {worst:.3e} exceeds {args.fail_above:.3e}",
                file=sys.stderr,
            )
            return EXIT_THRESHOLD
    return EXIT_OK


def _cost_rows(args):
    rows = []
    if args.preset:
        for name in args.preset:
            row = costmodel.get_preset(name)
            rep = costmodel.report_from_preset(name)
            rows.append((name, rep, row))
    elif args.ratios:
        parts = [float(x) for x in args.ratios.split(",")]
        if len(parts) != 3:
            raise KascadeError("--ratios needs anchor0,anchor,reuse")
        params = costmodel.CostParams(
            phase=args.phase,
            num_layers=args.layers,
            num_anchors=args.anchors,
            topk_fraction=args.fraction,
            seq_len=args.seq_len,
            baseline_layer_time=args.baseline_time,
        )
        rep = costmodel.weighted_pipeline_time(
            params, {"anchor0": parts[0], "anchor": parts[1], "reuse": parts[2]}
        )
        rows.append(("custom", rep, None))
    elif args.predict:
        rep = costmodel.predict_report(
            args.phase,
            args.fraction,
            args.seq_len,
            num_layers=args.layers,
            num_anchors=args.anchors,
            baseline_layer_time=args.baseline_time,
        )
        rows.append((f"predict-{args.phase}-{args.seq_len}-k{args.fraction}", rep, None))
    else:
        for name in costmodel.preset_names():
            rows.append((name, costmodel.report_from_preset(name), costmodel.get_preset(name)))
    return rows


def cmd_cost(args) -> int:
    if args.list_presets:
        for name in costmodel.preset_names():
            print(name)
        return EXIT_OK
    rows = _cost_rows(args)
    if args.csv:
        print("name,kascade_time,baseline_time,speedup,published_time,published_speedup")
        for name, rep, row in rows:
            pub_t = f"{row.kascade_ms}" if row else ""
            pub_s = f"{row.speedup_tl}" if row else ""
            print(
                f"{name},{rep.kascade_time:.6g},{rep.baseline_time:.6g},"
                f"{rep.speedup:.6g},{pub_t},{pub_s}"
            )
    else:
        for name, rep, row in rows:
            line = (
                f"{name}: time={rep.kascade_time:.4g} baseline={rep.baseline_time:.4g} "
                f"speedup={rep.speedup:.3f}"
            )
            if row:
                line += f" (published time={row.kascade_ms} speedup={row.speedup_tl})"
            if not rep.valid:
                line += f" [!] {rep.note}"
            print(line)
    if args.out:
        payload = [
            {
                "name": name,
                "kascade_time": rep.kascade_time,
                "baseline_time": rep.baseline_time,
                "speedup": rep.speedup,
                "per_kind": rep.per_kind,
                "valid": rep.valid,
                "published_time": row.kascade_ms if row else None,
                "published_speedup": row.speedup_tl if row else None,
            }
            for name, rep, row in rows
        ]
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
    return EXIT_OK


def cmd_report(args) -> int:
    with open(args.file, "r", encoding="utf-8") as f:
        data = json.load(f)
    if isinstance(data, dict) and data.get("kind") == "kascade-run-report":
        print(traceio.format_report(traceio.report_from_dict(data)), end="")
    else:
        print(json.dumps(data, indent=2, sort_keys=True))
    return EXIT_OK


_HANDLERS = {
    "gen": cmd_gen,
    "analyze": cmd_analyze,
    "plan": cmd_plan,
    "run": cmd_run,
    "cost": cmd_cost,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command == "gen" and args.q_heads % args.kv_heads != 0:
        parser.print_usage(sys.stderr)
        sys.stderr.write(
            f"kascade: error: --q-heads ({args.q_heads}) must be divisible "
            f"by --kv-heads ({args.kv_heads})\n"
        )
        return EXIT_USAGE
    try:
        return _HANDLERS[args.command](args)
    except KascadeError as e:
        sys.stderr.write(f"kascade: {e}\n")
        return EXIT_DATA
    except OSError as e:
        sys.stderr.write(f"kascade: {e}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
