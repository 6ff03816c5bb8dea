"""Forward-hook capture and trace export.

Capture points:
  Q/K  post-rotary (dot products reproduce the model's attention logits)
  V    per kv head
  X    attention-block input hidden state (before the block's norm)
  Y    attention output, post output-projection, before the residual add

X/Y conventions are recorded in the export manifest next to the files.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .errors import ExportError
from .format import write_kscd
from .reference import ByteTokenizer, TinyCausalLM, load_model

CAPTURE_CONVENTIONS = {
    "q_k": "post_rotary",
    "x": "attention_block_input_pre_norm",
    "y": "attention_output_post_projection",
}


@dataclass
class ExportConfig:
    model: str                      # tiny:<spec> or checkpoint directory
    prompt_file: str                # one prompt per line, blank lines skipped
    output_dir: str
    max_tokens: int = 512
    capture_xy: bool = True
    dtype: str = "float32"          # downcast policy for captured tensors

    def validate(self):
        if self.max_tokens < 1:
            raise ExportError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.dtype != "float32":
            raise ExportError(f"unsupported downcast dtype {self.dtype!r}")


@dataclass
class LayerCapture:
    q: np.ndarray                   # [Hq][N][d]
    k: np.ndarray                   # [Hkv][N][d]
    v: np.ndarray                   # [Hkv][N][d]
    probs: np.ndarray               # [Hq][N][N]
    x: Optional[np.ndarray] = None  # [N][hidden]
    y: Optional[np.ndarray] = None  # [N][hidden]


def _attention_modules(model: TinyCausalLM):
    mods = []
    for i, block in enumerate(model.blocks):
        attn = getattr(block, "attn", None)
        if attn is None or not hasattr(attn, "capture_enabled"):
            raise ExportError(
                f"layer {i}: attention block is not capture-capable "
                "(no capture_enabled switch)"
            )
        mods.append((i, block, attn))
    return mods


def _to_f32(t: torch.Tensor) -> np.ndarray:
    return t.detach().to(torch.float32).cpu().numpy()[0]   # drop batch dim


def capture_forward(
    model: TinyCausalLM, ids: List[int], capture_xy: bool, layers: Optional[List[int]] = None
) -> Dict[int, LayerCapture]:
    """Run one forward pass, collecting per-layer tensors via hooks.

    ``layers`` restricts capture to a subset (the chunked fallback);
    None captures every layer in a single pass.
    """
    mods = _attention_modules(model)
    wanted = set(range(len(mods))) if layers is None else set(layers)
    block_inputs: Dict[int, torch.Tensor] = {}
    attn_outputs: Dict[int, torch.Tensor] = {}
    handles = []
    try:
        for i, block, attn in mods:
            if i not in wanted:
                attn.capture_enabled = False
                continue
            attn.capture_enabled = True
            attn.captured = None
            if capture_xy:
                handles.append(block.register_forward_pre_hook(
                    lambda mod, args, i=i: block_inputs.__setitem__(i, args[0].detach())
                ))
                handles.append(attn.register_forward_hook(
                    lambda mod, args, out, i=i: attn_outputs.__setitem__(i, out.detach())
                ))
        with torch.no_grad():
            model(torch.tensor([ids], dtype=torch.long))
        out: Dict[int, LayerCapture] = {}
        for i, block, attn in mods:
            if i not in wanted:
                continue
            if attn.captured is None:
                raise ExportError(f"layer {i}: forward pass produced no capture")
            cap = LayerCapture(
                q=_to_f32(attn.captured["q"]),
                k=_to_f32(attn.captured["k"]),
                v=_to_f32(attn.captured["v"]),
                probs=_to_f32(attn.captured["probs"]),
            )
            if capture_xy:
                cap.x = _to_f32(block_inputs[i])
                cap.y = _to_f32(attn_outputs[i])
            out[i] = cap
        return out
    finally:
        for h in handles:
            h.remove()
        for _, _, attn in mods:
            attn.capture_enabled = False
            attn.captured = None


def capture_prompt(
    model: TinyCausalLM, ids: List[int], capture_xy: bool, chunked: bool = False
) -> List[LayerCapture]:
    """Capture all layers, retrying layer by layer if memory runs out."""
    L = len(model.blocks)
    if not chunked:
        try:
            caps = capture_forward(model, ids, capture_xy)
            return [caps[i] for i in range(L)]
        except (torch.cuda.OutOfMemoryError, RuntimeError) as e:
            if "out of memory" not in str(e).lower():
                raise
    caps = {}
    for layer in range(L):
        caps.update(capture_forward(model, ids, capture_xy, layers=[layer]))
    return [caps[i] for i in range(L)]


def export(config: ExportConfig) -> List[Path]:
    """Export one KSCD trace file per prompt, plus a manifest.

    Prompts are truncated to max_tokens, never padded. An empty prompt
    file yields zero trace files and a clean return.
    """
    config.validate()
    model = load_model(config.model)
    tokenizer = ByteTokenizer()
    prompt_path = Path(config.prompt_file)
    lines = [
        line for line in prompt_path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    entries = []
    for idx, prompt in enumerate(lines):
        ids = tokenizer.encode(prompt)[: config.max_tokens]
        layers = capture_prompt(model, ids, config.capture_xy)
        Q = np.stack([c.q for c in layers])
        K = np.stack([c.k for c in layers])
        V = np.stack([c.v for c in layers])
        X = np.stack([c.x for c in layers]) if config.capture_xy else None
        Y = np.stack([c.y for c in layers]) if config.capture_xy else None
        prompt_id = f"prompt-{idx:04d}"
        path = out_dir / f"{prompt_id}.kscd"
        write_kscd(path, Q=Q, K=K, V=V, X=X, Y=Y, prompt_id=prompt_id)
        written.append(path)
        entries.append({
            "file": path.name,
            "prompt_id": prompt_id,
            "tokens": len(ids),
            "text_prefix": prompt[:64],
        })
    manifest = {
        "model": config.model,
        "model_config": {
            "num_layers": model.cfg.num_layers,
            "num_query_heads": model.cfg.num_query_heads,
            "num_kv_heads": model.cfg.num_kv_heads,
            "head_dim": model.cfg.head_dim,
            "hidden_size": model.cfg.hidden_size,
        },
        "capture": dict(CAPTURE_CONVENTIONS, xy_present=config.capture_xy),
        "dtype": config.dtype,
        "max_tokens": config.max_tokens,
        "format_version": 1,
        "files": entries,
    }
    (out_dir / "export_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return written
