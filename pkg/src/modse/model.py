"""Toy decoder-only transformer whose feed-forward sublayers are expert layers.

Pre-norm blocks: rmsnorm -> causal multi-head attention with rotary position
mixing -> residual -> rmsnorm -> routed expert layer -> residual, then a final
rmsnorm and an output projection. No biases, no dropout. Weights live in a
flat ordered name->Tensor dict so checkpointing and the optimizer can treat
the model as a list of named buffers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tt
from .moe import (
    ExpertParams,
    GateParams,
    PairedExpertSpec,
    build_paired_spec,
    homogeneous_spec,
    moe_layer_forward,
)
from .rng import stream_rng
from .tensor import Tensor

NORM_EPS = 1e-6
ROPE_BASE = 10000.0
INIT_STD = 0.02

# Table-2-shaped size ratios: four (large, small) pairs that average to h/d.
DEFAULT_EXPERT_RATIOS = ((4.5, 0.5), (4.0, 1.0), (3.0, 2.0), (2.5, 2.5))


@dataclass
class ModelConfig:
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_experts: int = 8
    top_k: int = 2
    vocab_size: int = 258
    h_base: int = 160
    expert_ratios: tuple[tuple[float, float], ...] | str = DEFAULT_EXPERT_RATIOS
    seq_len: int = 256
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if (self.dim // self.n_heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary mixing")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k {self.top_k} outside 1..{self.n_experts}")
        if isinstance(self.expert_ratios, str):
            if self.expert_ratios != "homogeneous":
                raise ValueError(f"expert_ratios string must be 'homogeneous', got {self.expert_ratios!r}")
        else:
            self.expert_ratios = tuple(tuple(p) for p in self.expert_ratios)
            if 2 * len(self.expert_ratios) != self.n_experts:
                raise ValueError(
                    f"{len(self.expert_ratios)} ratio pairs cannot cover {self.n_experts} experts"
                )
        for name in ("seq_len", "batch_size", "vocab_size", "n_layers", "h_base"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def expert_spec(self) -> PairedExpertSpec:
        if self.expert_ratios == "homogeneous":
            return homogeneous_spec(self.dim, self.h_base, self.n_experts)
        return build_paired_spec(self.dim, self.h_base, list(self.expert_ratios))

    def to_dict(self) -> dict:
        d = asdict(self)
        if not isinstance(d["expert_ratios"], str):
            d["expert_ratios"] = [list(p) for p in d["expert_ratios"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def spec_hash(cfg: ModelConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def init_weights(cfg: ModelConfig, dtype=np.float32) -> dict[str, Tensor]:
    """Seeded weight dict; matrices ~ N(0, 0.02), norm scales start at 1."""
    rng = stream_rng(cfg.seed, "init")
    spec = cfg.expert_spec()

    def mat(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, shape), requires_grad=True, dtype=dtype)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)

    w: dict[str, Tensor] = {}
    w["embed"] = mat(cfg.vocab_size, cfg.dim)
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        w[f"{p}.attn_norm.gamma"] = ones(cfg.dim)
        for name in ("wq", "wk", "wv", "wo"):
            w[f"{p}.attn.{name}"] = mat(cfg.dim, cfg.dim)
        w[f"{p}.ffn_norm.gamma"] = ones(cfg.dim)
        w[f"{p}.gate.w_gate"] = mat(cfg.dim, cfg.n_experts)
        w[f"{p}.gate.w_noise"] = mat(cfg.dim, cfg.n_experts)
        w[f"{p}.gate.gamma"] = ones()
        for j, h in enumerate(spec.expert_sizes):
            w[f"{p}.experts.{j}.w_in"] = mat(cfg.dim, h)
            w[f"{p}.experts.{j}.w_gateproj"] = mat(cfg.dim, h)
            w[f"{p}.experts.{j}.w_out"] = mat(h, cfg.dim)
    w["final_norm.gamma"] = ones(cfg.dim)
    w["lm_head"] = mat(cfg.dim, cfg.vocab_size)
    return w


def layer_gate(cfg: ModelConfig, weights: dict[str, Tensor], layer: int) -> GateParams:
    p = f"layers.{layer}.gate"
    return GateParams(w_gate=weights[f"{p}.w_gate"], w_noise=weights[f"{p}.w_noise"], gamma=weights[f"{p}.gamma"])


def layer_experts(cfg: ModelConfig, weights: dict[str, Tensor], layer: int) -> list[ExpertParams]:
    out = []
    for j in range(cfg.n_experts):
        p = f"layers.{layer}.experts.{j}"
        out.append(
            ExpertParams(
                w_in=weights[f"{p}.w_in"],
                w_gateproj=weights[f"{p}.w_gateproj"],
                w_out=weights[f"{p}.w_out"],
            )
        )
    return out


def rope_tables(seq_len: int, head_dim: int, batch: int, dtype, base: float = ROPE_BASE):
    """cos/sin tables [batch*seq_len, head_dim/2], positions repeating per sequence."""
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    cos = np.tile(np.cos(angles), (batch, 1)).astype(dtype)
    sin = np.tile(np.sin(angles), (batch, 1)).astype(dtype)
    return cos, sin


def transformer_forward(cfg: ModelConfig, weights: dict[str, Tensor], tokens: np.ndarray):
    """Forward pass over a [batch, seq] token matrix.

    Returns logits as a [batch*seq, vocab] tensor (row b*seq+s is position s
    of sequence b) and one GateOutput per layer over the same flattened rows.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range for vocab {cfg.vocab_size}")
    b, s = tokens.shape
    head_dim = cfg.dim // cfg.n_heads
    dtype = weights["embed"].values.dtype
    cos, sin = rope_tables(s, head_dim, b, dtype)

    h = tt.embedding_lookup(weights["embed"], tokens.reshape(-1))
    gate_outs = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        a_in = tt.rmsnorm(h, weights[f"{p}.attn_norm.gamma"], eps=NORM_EPS)
        q = tt.matmul(a_in, weights[f"{p}.attn.wq"])
        k = tt.matmul(a_in, weights[f"{p}.attn.wk"])
        v = tt.matmul(a_in, weights[f"{p}.attn.wv"])
        heads = []
        for hh in range(cfg.n_heads):
            lo, hi = hh * head_dim, (hh + 1) * head_dim
            qh = tt.apply_rope(tt.slice_cols(q, lo, hi), cos, sin)
            kh = tt.apply_rope(tt.slice_cols(k, lo, hi), cos, sin)
            vh = tt.slice_cols(v, lo, hi)
            heads.append(tt.causal_attention(qh, kh, vh, s))
        attn = tt.matmul(tt.concat_cols(heads), weights[f"{p}.attn.wo"])
        h = tt.add(h, attn)

        m_in = tt.rmsnorm(h, weights[f"{p}.ffn_norm.gamma"], eps=NORM_EPS)
        y, gate_out = moe_layer_forward(
            layer_gate(cfg, weights, i), layer_experts(cfg, weights, i), m_in, cfg.top_k
        )
        h = tt.add(h, y)
        gate_outs.append(gate_out)

    h = tt.rmsnorm(h, weights["final_norm.gamma"], eps=NORM_EPS)
    logits = tt.matmul(h, weights["lm_head"])
    return logits, gate_outs
