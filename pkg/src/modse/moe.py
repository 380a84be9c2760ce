"""Expert layer with per-expert hidden widths and a noisy top-k gate.

A layer holds N gated-linear experts whose hidden sizes may differ, arranged
in pairs whose widths sum to twice the reference width h_base, so the layer's
parameter count always equals that of N uniform experts of width h_base. The
gate scores each token against every expert, adds a deterministic
softplus/rmsnorm term derived from the token itself, keeps the top-k logits,
and softmaxes them into combination weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .tensor import Tensor

GATE_NORM_EPS = 1e-6


class PairConstraintError(ValueError):
    """An expert-size pair breaks the pair-sum or integrality constraint."""


@dataclass
class GateParams:
    """Router weights: per-expert score matrix, noise matrix, and the noise-norm scale."""

    w_gate: Tensor  # [d_model, n_experts]
    w_noise: Tensor  # [d_model, n_experts]
    gamma: Tensor  # scalar, learnable

    @property
    def n_experts(self) -> int:
        return self.w_gate.shape[1]


@dataclass
class ExpertParams:
    """One gated-linear feed-forward expert, bias-free."""

    w_in: Tensor  # [d_model, hidden]
    w_gateproj: Tensor  # [d_model, hidden]
    w_out: Tensor  # [hidden, d_model]

    @property
    def hidden_size(self) -> int:
        return self.w_in.shape[1]

    @property
    def parameter_count(self) -> int:
        return self.w_in.size + self.w_gateproj.size + self.w_out.size


@dataclass(frozen=True)
class PairedExpertSpec:
    """Expert widths grouped into pairs that each sum to 2*h_base."""

    d_model: int
    h_base: int
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for i, (large, small) in enumerate(self.pairs):
            if not (large >= small >= 1):
                raise PairConstraintError(f"pair {i}: sizes ({large}, {small}) must satisfy large >= small >= 1")
            if large + small != 2 * self.h_base:
                raise PairConstraintError(
                    f"pair {i}: {large} + {small} != 2*h_base = {2 * self.h_base}"
                )

    @property
    def expert_sizes(self) -> list[int]:
        return [h for pair in self.pairs for h in pair]

    @property
    def n_experts(self) -> int:
        return 2 * len(self.pairs)

    @property
    def is_homogeneous(self) -> bool:
        return all(large == small for large, small in self.pairs)


def build_paired_spec(
    d_model: int, h_base: int, ratios: list[tuple[float, float]]
) -> PairedExpertSpec:
    """Turn (large, small) width-to-d_model ratios into integer expert sizes.

    Each ratio pair must average to h_base/d_model (so total parameters match
    the uniform layer) and each ratio times d_model must land on an integer.
    """
    target = 2.0 * h_base / d_model
    pairs = []
    for i, (r_large, r_small) in enumerate(ratios):
        if abs((r_large + r_small) - target) > 1e-9:
            raise PairConstraintError(
                f"pair {i}: ratios ({r_large}, {r_small}) sum to {r_large + r_small}, "
                f"need 2*h_base/d_model = {target}"
            )
        sizes = []
        for r in (r_large, r_small):
            h = r * d_model
            if h < 1 or abs(h - round(h)) > 1e-6:
                raise PairConstraintError(f"pair {i}: ratio {r} gives non-integer width {h}")
            sizes.append(int(round(h)))
        pairs.append((max(sizes), min(sizes)))
    return PairedExpertSpec(d_model=d_model, h_base=h_base, pairs=tuple(pairs))


def homogeneous_spec(d_model: int, h_base: int, n_experts: int) -> PairedExpertSpec:
    if n_experts % 2 != 0:
        raise PairConstraintError(f"n_experts = {n_experts} must be even to form pairs")
    return PairedExpertSpec(d_model, h_base, tuple((h_base, h_base) for _ in range(n_experts // 2)))


def spec_from_sizes(d_model: int, sizes: list[int]) -> PairedExpertSpec:
    """Recover a valid pairing from a bag of expert widths.

    If the widths came from any pairing that sums to 2*h_base per pair, then
    matching widest with narrowest recovers such a pairing (the widest item's
    partner must be the overall minimum, and so on inductively).
    """
    if len(sizes) % 2 != 0 or not sizes:
        raise PairConstraintError(f"cannot pair {len(sizes)} expert widths")
    if sum(sizes) % len(sizes) != 0:
        raise PairConstraintError(f"widths {sizes} do not average to an integer h_base")
    h_base = sum(sizes) // len(sizes)
    srt = sorted(sizes, reverse=True)
    pairs = tuple((srt[i], srt[len(srt) - 1 - i]) for i in range(len(srt) // 2))
    return PairedExpertSpec(d_model=d_model, h_base=h_base, pairs=pairs)


@dataclass
class GateOutput:
    """Routing decision for a batch of tokens.

    `masked_probs` is the full [T, N] matrix of combination weights (exact
    zeros off the top-k); `topk_weights` is its per-token top-k view in rank
    order. `full_probs` is the unmasked softmax of the logits, the input to
    the balance loss.
    """

    topk_indices: np.ndarray  # [T, k] int, rank order (rank 0 = largest logit)
    topk_weights: np.ndarray  # [T, k] float
    full_probs: Tensor  # [T, N]
    logits: Tensor  # [T, N]
    masked_probs: Tensor = field(repr=False, default=None)

    @property
    def n_tokens(self) -> int:
        return self.topk_indices.shape[0]

    @property
    def top_k(self) -> int:
        return self.topk_indices.shape[1]


def gate_forward(params: GateParams, x: Tensor, k: int) -> GateOutput:
    """Score tokens against experts and pick each token's top-k.

    Logits are x @ w_gate plus an rmsnorm-scaled softplus of x @ w_noise,
    computed per token over the expert axis. There is no random sampling:
    the additive term is a deterministic function of the token.
    """
    n = params.n_experts
    if not 1 <= k <= n:
        raise ValueError(f"gate_forward: k={k} outside 1..{n}")
    noise = tt.rmsnorm(tt.softplus(tt.matmul(x, params.w_noise)), params.gamma, eps=GATE_NORM_EPS)
    logits = tt.add(tt.matmul(x, params.w_gate), noise)
    masked_probs = tt.softmax(tt.keep_topk(logits, k))
    full_probs = tt.softmax(logits)
    idx = tt.topk_indices(logits.values, k)
    weights = np.take_along_axis(masked_probs.values, idx, axis=-1)
    return GateOutput(
        topk_indices=idx,
        topk_weights=weights,
        full_probs=full_probs,
        logits=logits,
        masked_probs=masked_probs,
    )


def expert_forward(e: ExpertParams, x: Tensor) -> Tensor:
    """Gated-linear feed-forward: (silu(x W_in) * (x W_gateproj)) W_out."""
    return tt.matmul(tt.mul(tt.silu(tt.matmul(x, e.w_in)), tt.matmul(x, e.w_gateproj)), e.w_out)


def moe_layer_forward(
    gate: GateParams, experts: list[ExpertParams], x: Tensor, k: int
) -> tuple[Tensor, GateOutput]:
    """Route each token to its top-k experts and combine the outputs.

    Each expert runs once, on the rows routed to it; contributions are merged
    by scatter-add in expert-index order, which matches a dense per-token sum
    over experts evaluated in the same order. Tokens outside an expert's
    routing set contribute exactly zero to it and are never evaluated.
    """
    if not experts:
        raise ValueError("moe_layer_forward: experts list is empty")
    out = gate_forward(gate, x, k)
    t = x.shape[0]
    y = tt.zeros((t, x.shape[1]), dtype=x.values.dtype)
    for e_idx, expert in enumerate(experts):
        rows = np.nonzero((out.topk_indices == e_idx).any(axis=1))[0]
        if rows.size == 0:
            continue
        xe = tt.gather_rows(x, rows)
        ye = expert_forward(expert, xe)
        w = tt.gather_pairs(out.masked_probs, rows, np.full(rows.shape, e_idx))
        y = tt.add(y, tt.scatter_rows(tt.scale_rows(ye, w), rows, t))
    return y, out


def count_parameters(experts: list[ExpertParams]) -> int:
    return sum(e.parameter_count for e in experts)


def init_gate(d_model: int, n_experts: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float32) -> GateParams:
    return GateParams(
        w_gate=Tensor(rng.normal(0.0, std, (d_model, n_experts)), requires_grad=True, dtype=dtype),
        w_noise=Tensor(rng.normal(0.0, std, (d_model, n_experts)), requires_grad=True, dtype=dtype),
        gamma=Tensor(np.asarray(1.0), requires_grad=True, dtype=dtype),
    )


def init_experts(
    spec: PairedExpertSpec, rng: np.random.Generator, std: float = 0.02, dtype=np.float32
) -> list[ExpertParams]:
    experts = []
    for h in spec.expert_sizes:
        experts.append(
            ExpertParams(
                w_in=Tensor(rng.normal(0.0, std, (spec.d_model, h)), requires_grad=True, dtype=dtype),
                w_gateproj=Tensor(rng.normal(0.0, std, (spec.d_model, h)), requires_grad=True, dtype=dtype),
                w_out=Tensor(rng.normal(0.0, std, (h, spec.d_model)), requires_grad=True, dtype=dtype),
            )
        )
    return experts
