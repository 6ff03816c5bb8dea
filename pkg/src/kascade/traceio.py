"""Trace/plan/report serialization and synthetic trace generation.

Binary trace format (version 1, little-endian throughout) — this is the
normative wire contract between the toolkit and any trace producer:

    offset 0   magic          4 bytes, b"KSCD"
    offset 4   version        u16 (currently 1)
    offset 6   L, Hq, Hkv, d, N   u32 each
    offset 26  dtype          u8 (0 = 32-bit float, little-endian)
    offset 27  flags          u8 (bit 0: X/Y hidden states present)
    offset 28  prompt_id len  u16 (bytes of UTF-8 that follow)
    offset 30  prompt_id      UTF-8 bytes
    then       Q [L][Hq][N][d], K [L][Hkv][N][d], V [L][Hkv][N][d]
    then       X [L][N][model_dim], Y [L][N][model_dim]   (flags bit 0)

Tensors are row-major float32. model_dim is not a header field; it is
recovered from the trailing payload size, which must divide evenly.
"""

import io
import json
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import FormatError, InvalidArgumentError
from .heads import HeadMap
from .metrics import LayerImportance, SimilarityMatrix
from .planner import AnchorPlanCore
from .runner import AnchorPlan, LayerReport, RunReport
from .tiles import KBudgetPolicy
from .trace import AttentionTrace

MAGIC = b"KSCD"
TRACE_VERSION = 1
DTYPE_F32 = 0
FLAG_XY = 0x01

_HEADER = struct.Struct("<4sH5I2BH")   # magic, version, L/Hq/Hkv/d/N, dtype, flags, prompt_len

PLAN_SCHEMA_VERSION = 1
REPORT_SCHEMA_VERSION = 1


def write_trace(path, trace: AttentionTrace) -> None:
    """Serialize a trace; bit-exact round trip with read_trace."""
    flags = FLAG_XY if trace.has_xy() else 0
    prompt = trace.prompt_id.encode("utf-8")
    if len(prompt) > 0xFFFF:
        raise InvalidArgumentError("prompt_id longer than 65535 bytes")
    header = _HEADER.pack(
        MAGIC,
        TRACE_VERSION,
        trace.num_layers,
        trace.num_query_heads,
        trace.num_kv_heads,
        trace.head_dim,
        trace.seq_len,
        DTYPE_F32,
        flags,
        len(prompt),
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(prompt)
        for arr in (trace.Q, trace.K, trace.V):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if trace.has_xy():
            f.write(np.ascontiguousarray(trace.X, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(trace.Y, dtype="<f4").tobytes())


def read_trace(path) -> AttentionTrace:
    """Parse a trace file, rejecting malformed input with byte offsets."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise FormatError(
            f"file truncated inside the {_HEADER.size}-byte header", offset=len(blob)
        )
    magic, version, L, Hq, Hkv, d, N, dtype, flags, prompt_len = _HEADER.unpack_from(
        blob, 0
    )
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != TRACE_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}", offset=26)
    if min(L, Hq, Hkv, d, N) < 1:
        raise FormatError("header dimensions must all be >= 1", offset=6)
    if Hq % Hkv != 0:
        raise FormatError(
            f"query heads ({Hq}) not divisible by kv heads ({Hkv})", offset=10
        )
    pos = _HEADER.size
    if len(blob) < pos + prompt_len:
        raise FormatError("file truncated inside prompt_id", offset=len(blob))
    try:
        prompt_id = blob[pos : pos + prompt_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"prompt_id is not valid UTF-8: {e}", offset=pos) from None
    pos += prompt_len

    def take(shape, name):
        nonlocal pos
        count = int(np.prod(shape))
        nbytes = count * 4
        if len(blob) < pos + nbytes:
            raise FormatError(
                f"file truncated inside tensor {name}: need {nbytes} bytes at "
                f"offset {pos}, have {len(blob) - pos}",
                offset=len(blob),
            )
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += nbytes
        return arr.copy()

    Q = take((L, Hq, N, d), "Q")
    K = take((L, Hkv, N, d), "K")
    V = take((L, Hkv, N, d), "V")
    X = Y = None
    if flags & FLAG_XY:
        remaining = len(blob) - pos
        per_tensor = remaining // 2
        if remaining <= 0 or remaining % 2 != 0 or per_tensor % (L * N * 4) != 0:
            raise FormatError(
                f"trailing {remaining} bytes do not form two [L][N][model_dim] "
                "float32 tensors",
                offset=pos,
            )
        model_dim = per_tensor // (L * N * 4)
        X = take((L, N, model_dim), "X")
        Y = take((L, N, model_dim), "Y")
    if pos != len(blob):
        raise FormatError(
            f"{len(blob) - pos} unexpected trailing bytes", offset=pos
        )
    try:
        return AttentionTrace(
            num_layers=L,
            num_query_heads=Hq,
            num_kv_heads=Hkv,
            head_dim=d,
            seq_len=N,
            Q=Q,
            K=K,
            V=V,
            X=X,
            Y=Y,
            prompt_id=prompt_id,
        )
    except InvalidArgumentError as e:
        raise FormatError(f"trace payload violates header invariants: {e}") from None


# ---------------------------------------------------------------------------
# Synthetic traces
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Controls for the synthetic trace generator.

    Keys are correlated across layers (K_l = rho * K_base +
    sqrt(1 - rho^2) * noise, optionally head-permuted per layer) because
    reuse quality hinges on which keys matter staying stable. Queries are
    concentrated along shared directions so the softmax comes out
    heavy-tailed at the configured temperature; query_correlation blends
    a per-GQA-group direction with per-row jitter so rows in a tile agree
    on most, but not all, of their hot keys.
    """

    num_layers: int
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    seq_len: int
    seed: int = 0
    layer_correlation: float = 1.0
    head_permutations: Optional[List[List[int]]] = None
    heavy_tail_temperature: float = 4.0
    query_correlation: float = 0.85
    layer0_temperature_scale: float = 1.0
    include_xy: bool = False
    prompt_id: str = ""

    def validate(self):
        if not (0.0 <= self.layer_correlation <= 1.0):
            raise InvalidArgumentError("layer_correlation must be in [0, 1]")
        if not (0.0 <= self.query_correlation <= 1.0):
            raise InvalidArgumentError("query_correlation must be in [0, 1]")
        if self.heavy_tail_temperature <= 0 or self.layer0_temperature_scale <= 0:
            raise InvalidArgumentError("temperatures must be > 0")
        if self.num_query_heads % self.num_kv_heads != 0:
            raise InvalidArgumentError(
                "num_query_heads must be divisible by num_kv_heads"
            )
        if self.head_permutations is not None:
            if len(self.head_permutations) != self.num_layers:
                raise InvalidArgumentError(
                    "head_permutations must list one permutation per layer"
                )
            for i, perm in enumerate(self.head_permutations):
                if sorted(perm) != list(range(self.num_kv_heads)):
                    raise InvalidArgumentError(
                        f"layer {i} permutation is not a permutation of kv heads"
                    )


def _unit_rows(arr: np.ndarray) -> np.ndarray:
    return arr / np.linalg.norm(arr, axis=-1, keepdims=True)


def generate_synthetic(config: SynthConfig) -> AttentionTrace:
    """Deterministic synthetic trace with controllable structure.

    layer_correlation 1 reproduces every layer exactly (modulo the
    per-layer head permutation); 0 makes layers independent. The draw
    order below is fixed; identical configs produce identical bytes.
    """
    config.validate()
    L, Hq, Hkv, d, N = (
        config.num_layers,
        config.num_query_heads,
        config.num_kv_heads,
        config.head_dim,
        config.seq_len,
    )
    group = Hq // Hkv
    rho = config.layer_correlation
    rng = np.random.default_rng(config.seed)

    k_base = rng.standard_normal((Hkv, N, d))
    v_base = rng.standard_normal((Hkv, N, d))
    group_dirs = _unit_rows(rng.standard_normal((Hkv, d)))
    jitter = _unit_rows(rng.standard_normal((Hq, N, d)))

    c = config.query_correlation
    dirs = np.empty((Hq, N, d))
    for h in range(Hq):
        g = h // group
        dirs[h] = _unit_rows(
            np.sqrt(c) * group_dirs[g][None, :] + np.sqrt(1.0 - c) * jitter[h]
        )

    perms = config.head_permutations or [list(range(Hkv))] * L
    mix = np.sqrt(1.0 - rho * rho)
    Q = np.empty((L, Hq, N, d), dtype=np.float32)
    K = np.empty((L, Hkv, N, d), dtype=np.float32)
    V = np.empty((L, Hkv, N, d), dtype=np.float32)
    for layer in range(L):
        perm = perms[layer]
        k_noise = rng.standard_normal((Hkv, N, d))
        v_noise = rng.standard_normal((Hkv, N, d))
        tau = config.heavy_tail_temperature * (
            config.layer0_temperature_scale if layer == 0 else 1.0
        )
        for g in range(Hkv):
            K[layer, g] = (rho * k_base[perm[g]] + mix * k_noise[g]).astype(np.float32)
            V[layer, g] = (rho * v_base[perm[g]] + mix * v_noise[g]).astype(np.float32)
            for member in range(group):
                h = g * group + member
                src = perm[g] * group + member
                Q[layer, h] = (tau * np.sqrt(d) * dirs[src]).astype(np.float32)

    X = Y = None
    if config.include_xy:
        model_dim = Hq * d
        x_base = rng.standard_normal((N, model_dim)) / np.sqrt(model_dim)
        X = np.repeat(x_base[None, :, :], L, axis=0).astype(np.float32)
        Y = np.empty((L, N, model_dim), dtype=np.float32)
        # Depth profile: early attention rewrites the representation,
        # deep attention barely moves it (importance decays with depth).
        aligns = np.linspace(0.1, 0.95, L)
        for layer in range(L):
            noise = rng.standard_normal((N, model_dim)) / np.sqrt(model_dim)
            a = aligns[layer]
            Y[layer] = (a * x_base + np.sqrt(1.0 - a * a) * noise).astype(np.float32)

    return AttentionTrace(
        num_layers=L,
        num_query_heads=Hq,
        num_kv_heads=Hkv,
        head_dim=d,
        seq_len=N,
        Q=Q,
        K=K,
        V=V,
        X=X,
        Y=Y,
        prompt_id=config.prompt_id or f"synth-seed{config.seed}",
    )


# ---------------------------------------------------------------------------
# Plan files (JSON)
# ---------------------------------------------------------------------------


def _expect(obj, key, kinds, path):
    if not isinstance(obj, dict) or key not in obj:
        raise FormatError("missing required field", field_path=f"{path}.{key}")
    val = obj[key]
    if not isinstance(val, kinds):
        raise FormatError(
            f"field has type {type(val).__name__}", field_path=f"{path}.{key}"
        )
    return val


def plan_to_dict(plan: AnchorPlan) -> dict:
    return {
        "schema_version": PLAN_SCHEMA_VERSION,
        "kind": "kascade-plan",
        "anchors": list(plan.core.anchors),
        "budget": plan.core.budget,
        "objective_value": plan.core.objective_value,
        "source_digest": plan.core.source_digest,
        "mode": plan.mode,
        "pooling": plan.pooling,
        "tile_size": plan.tile_size,
        "k_policy": {
            "fraction": plan.k_policy.fraction,
            "k_min": plan.k_policy.k_min,
        },
        "head_maps": [
            {
                "reuse_layer": hm.reuse_layer,
                "anchor_layer": hm.anchor_layer,
                "mode": hm.mode,
                "map": list(hm.map),
            }
            for _, hm in sorted(plan.head_maps.items())
        ],
    }


def plan_from_dict(data: dict) -> AnchorPlan:
    version = _expect(data, "schema_version", int, "$")
    if version != PLAN_SCHEMA_VERSION:
        raise FormatError(
            f"unsupported plan schema version {version}", field_path="$.schema_version"
        )
    anchors = _expect(data, "anchors", list, "$")
    if not all(isinstance(a, int) for a in anchors):
        raise FormatError("anchors must be integers", field_path="$.anchors")
    budget = _expect(data, "budget", int, "$")
    objective_value = float(_expect(data, "objective_value", (int, float), "$"))
    source_digest = _expect(data, "source_digest", str, "$")
    mode = _expect(data, "mode", str, "$")
    pooling = _expect(data, "pooling", str, "$")
    tile_size = _expect(data, "tile_size", int, "$")
    kp = _expect(data, "k_policy", dict, "$")
    fraction = float(_expect(kp, "fraction", (int, float), "$.k_policy"))
    k_min = _expect(kp, "k_min", int, "$.k_policy")
    head_maps: Dict[int, HeadMap] = {}
    raw_maps = _expect(data, "head_maps", list, "$")
    for i, entry in enumerate(raw_maps):
        path = f"$.head_maps[{i}]"
        reuse_layer = _expect(entry, "reuse_layer", int, path)
        anchor_layer = _expect(entry, "anchor_layer", int, path)
        hm_mode = _expect(entry, "mode", str, path)
        mapping = _expect(entry, "map", list, path)
        if not all(isinstance(m, int) for m in mapping):
            raise FormatError("map entries must be integers", field_path=f"{path}.map")
        head_maps[reuse_layer] = HeadMap(
            reuse_layer=reuse_layer,
            anchor_layer=anchor_layer,
            map=mapping,
            mode=hm_mode,
        )
    try:
        core = AnchorPlanCore(
            anchors=anchors,
            budget=budget,
            objective_value=objective_value,
            source_digest=source_digest,
        )
        return AnchorPlan(
            core=core,
            head_maps=head_maps,
            pooling=pooling,
            k_policy=KBudgetPolicy(fraction=fraction, k_min=k_min),
            tile_size=tile_size,
            mode=mode,
        )
    except InvalidArgumentError as e:
        raise FormatError(f"plan violates invariants: {e}", field_path="$") from None


def write_plan(path, plan: AnchorPlan) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(plan_to_dict(plan), f, indent=2, sort_keys=True)
        f.write("\n")


def read_plan(path) -> AnchorPlan:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"plan file is not valid JSON: {e}") from None
    return plan_from_dict(data)


def plans_equal(a: AnchorPlan, b: AnchorPlan) -> bool:
    return plan_to_dict(a) == plan_to_dict(b)


# ---------------------------------------------------------------------------
# Run reports and tabular text forms
# ---------------------------------------------------------------------------


def report_to_dict(report: RunReport) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "kascade-run-report",
        "per_layer": [
            {
                "layer": r.layer,
                "kind": r.kind,
                "output_rel_err_l2": r.output_rel_err_l2,
                "mass_recovered_mean": r.mass_recovered_mean,
                "fallback_rows": r.fallback_rows,
            }
            for r in report.per_layer
        ],
        "overall": report.overall,
        "config": report.config,
    }


def report_from_dict(data: dict) -> RunReport:
    per_layer = [
        LayerReport(
            layer=entry["layer"],
            kind=entry["kind"],
            output_rel_err_l2=entry["output_rel_err_l2"],
            mass_recovered_mean=entry["mass_recovered_mean"],
            fallback_rows=entry.get("fallback_rows", 0),
        )
        for entry in data.get("per_layer", [])
    ]
    return RunReport(
        per_layer=per_layer,
        overall=data.get("overall", {}),
        config=data.get("config", {}),
    )


def write_report(path, report: RunReport) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report_to_dict(report), f, indent=2, sort_keys=True)
        f.write("\n")


def read_report(path) -> RunReport:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"report file is not valid JSON: {e}") from None
    return report_from_dict(data)


def format_report(report: RunReport) -> str:
    """Human-readable rendering of a run report."""
    out = io.StringIO()
    out.write(f"{'layer':>5}  {'kind':<8}  {'rel_err_l2':>12}  {'mass_recovered':>14}\n")
    for r in report.per_layer:
        mass = "-" if np.isnan(r.mass_recovered_mean) else f"{r.mass_recovered_mean:.6f}"
        out.write(
            f"{r.layer:>5}  {r.kind:<8}  {r.output_rel_err_l2:>12.3e}  {mass:>14}\n"
        )
    out.write("overall:\n")
    for key in sorted(report.overall):
        out.write(f"  {key} = {report.overall[key]:.6g}\n")
    for key, val in sorted(report.config.items()):
        out.write(f"  # {key}: {val}\n")
    return out.getvalue()


def similarity_csv(S: SimilarityMatrix) -> str:
    lines = ["row,col,value"]
    L = S.num_layers
    for a in range(L):
        for b in range(a, L):
            lines.append(f"{a},{b},{S.S[a, b]:.8g}")
    return "\n".join(lines) + "\n"


def importance_csv(importance: LayerImportance) -> str:
    lines = ["layer,weight"]
    for layer, w in enumerate(importance.w):
        lines.append(f"{layer},{w:.8g}")
    return "\n".join(lines) + "\n"


def coverage_csv(coverage_by_layer: Sequence[np.ndarray]) -> str:
    """coverage_by_layer[l][h] = mean top-k mass for (layer l, head h)."""
    lines = ["layer,head,coverage"]
    for layer, per_head in enumerate(coverage_by_layer):
        for head, cov in enumerate(np.atleast_1d(per_head)):
            lines.append(f"{layer},{head},{cov:.8g}")
    return "\n".join(lines) + "\n"
