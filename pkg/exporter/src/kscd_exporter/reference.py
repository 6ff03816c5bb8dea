"""Tiny hookable causal transformer used as the reference checkpoint.

GQA attention with rotary position embeddings, eager softmax (so the
exact probabilities the model used are capturable), RMSNorm, SiLU MLP.
Attention modules expose a capture switch; when enabled, each forward
stashes the post-rotary Q/K, the values, and the attention probabilities
for the hooks to collect.
"""

import json
import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

from .errors import ExportError


@dataclass
class TinyConfig:
    vocab_size: int = 257          # raw bytes + BOS
    num_layers: int = 2
    num_query_heads: int = 4
    num_kv_heads: int = 2
    head_dim: int = 16
    mlp_ratio: int = 4
    max_seq: int = 512
    rope_theta: float = 10000.0
    seed: int = 0

    @property
    def hidden_size(self) -> int:
        return self.num_query_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.num_query_heads // self.num_kv_heads


class ByteTokenizer:
    """Bytes are the vocabulary; id 256 is BOS."""

    BOS = 256

    def encode(self, text: str):
        return [self.BOS] + list(text.encode("utf-8"))

    def decode(self, ids):
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


def rope_tables(head_dim, max_seq, theta):
    inv = 1.0 / theta ** (torch.arange(0, head_dim, 2, dtype=torch.float32) / head_dim)
    t = torch.arange(max_seq, dtype=torch.float32)
    freqs = torch.outer(t, inv)                      # [max_seq, d/2]
    return torch.cos(freqs), torch.sin(freqs)


def apply_rope(x, cos, sin):
    """Half-split rotation. x: [B, H, N, d]; cos/sin: [max_seq, d/2]."""
    N = x.shape[2]
    cos_full = torch.cat([cos[:N], cos[:N]], dim=-1)[None, None]
    sin_full = torch.cat([sin[:N], sin[:N]], dim=-1)[None, None]
    half = x.shape[-1] // 2
    rotated = torch.cat([-x[..., half:], x[..., :half]], dim=-1)
    return x * cos_full + rotated * sin_full


class RMSNorm(nn.Module):
    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        scale = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x * scale * self.weight


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: TinyConfig):
        super().__init__()
        self.cfg = cfg
        h, d = cfg.hidden_size, cfg.head_dim
        self.q_proj = nn.Linear(h, cfg.num_query_heads * d, bias=False)
        self.k_proj = nn.Linear(h, cfg.num_kv_heads * d, bias=False)
        self.v_proj = nn.Linear(h, cfg.num_kv_heads * d, bias=False)
        self.o_proj = nn.Linear(cfg.num_query_heads * d, h, bias=False)
        self.capture_enabled = False
        self.captured = None

    def forward(self, x, cos, sin):
        B, N, _ = x.shape
        cfg = self.cfg
        q = self.q_proj(x).view(B, N, cfg.num_query_heads, cfg.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(B, N, cfg.num_kv_heads, cfg.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(B, N, cfg.num_kv_heads, cfg.head_dim).transpose(1, 2)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        k_rep = torch.repeat_interleave(k, cfg.group_size, dim=1)
        v_rep = torch.repeat_interleave(v, cfg.group_size, dim=1)
        scores = q @ k_rep.transpose(-1, -2) / math.sqrt(cfg.head_dim)
        mask = torch.triu(torch.ones(N, N, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        out = (probs @ v_rep).transpose(1, 2).reshape(B, N, -1)
        if self.capture_enabled:
            # post-rotary Q/K so dot products reproduce the model's logits
            self.captured = {
                "q": q.detach(),
                "k": k.detach(),
                "v": v.detach(),
                "probs": probs.detach(),
            }
        return self.o_proj(out)


class DecoderBlock(nn.Module):
    def __init__(self, cfg: TinyConfig):
        super().__init__()
        h = cfg.hidden_size
        self.attn_norm = RMSNorm(h)
        self.attn = CausalSelfAttention(cfg)
        self.mlp_norm = RMSNorm(h)
        self.mlp = nn.Sequential(
            nn.Linear(h, cfg.mlp_ratio * h, bias=False),
            nn.SiLU(),
            nn.Linear(cfg.mlp_ratio * h, h, bias=False),
        )

    def forward(self, x, cos, sin):
        x = x + self.attn(self.attn_norm(x), cos, sin)
        return x + self.mlp(self.mlp_norm(x))


class TinyCausalLM(nn.Module):
    def __init__(self, cfg: TinyConfig):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.hidden_size)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.num_layers))
        self.final_norm = RMSNorm(cfg.hidden_size)
        self.lm_head = nn.Linear(cfg.hidden_size, cfg.vocab_size, bias=False)
        cos, sin = rope_tables(cfg.head_dim, cfg.max_seq, cfg.rope_theta)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)

    def forward(self, ids):
        if ids.shape[1] > self.cfg.max_seq:
            raise ExportError(
                f"sequence of {ids.shape[1]} tokens exceeds max_seq {self.cfg.max_seq}"
            )
        x = self.embed(ids)
        for block in self.blocks:
            x = block(x, self.rope_cos, self.rope_sin)
        return self.lm_head(self.final_norm(x))


def save_checkpoint(model: TinyCausalLM, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(asdict(model.cfg), indent=2))
    torch.save(model.state_dict(), directory / "weights.pt")


def load_checkpoint(directory) -> TinyCausalLM:
    directory = Path(directory)
    cfg = TinyConfig(**json.loads((directory / "config.json").read_text()))
    model = TinyCausalLM(cfg)
    state = torch.load(directory / "weights.pt", map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model


_TINY_SPEC = re.compile(r"^tiny:(.*)$")
_SPEC_KEYS = {
    "layers": "num_layers",
    "q_heads": "num_query_heads",
    "kv_heads": "num_kv_heads",
    "dim": "head_dim",
    "vocab": "vocab_size",
    "seed": "seed",
    "max_seq": "max_seq",
}


def load_model(identifier: str) -> TinyCausalLM:
    """Resolve a model identifier.

    ``tiny:layers=2,kv_heads=2,dim=16,seed=0`` builds a random-weight
    reference model; anything else is treated as a checkpoint directory
    (config.json + weights.pt).
    """
    m = _TINY_SPEC.match(identifier)
    if m:
        kwargs = {}
        spec = m.group(1)
        if spec:
            for part in spec.split(","):
                if "=" not in part:
                    raise ExportError(f"bad tiny model spec fragment {part!r}")
                key, val = part.split("=", 1)
                if key not in _SPEC_KEYS:
                    raise ExportError(f"unknown tiny model spec key {key!r}")
                kwargs[_SPEC_KEYS[key]] = int(val)
        model = TinyCausalLM(TinyConfig(**kwargs))
        model.eval()
        return model
    path = Path(identifier)
    if not (path / "config.json").exists():
        raise ExportError(f"model identifier {identifier!r} is neither a tiny: spec "
                          "nor a checkpoint directory")
    return load_checkpoint(path)
