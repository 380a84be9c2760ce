"""Training loop: next-token cross entropy plus the per-layer balance penalties.

Single-threaded and bitwise deterministic for a fixed config and seed. Each
step logs a TrainStepRecord; optionally every routing decision goes to a
trace file, with the per-token cross entropy attached so the difficult-token
analyses can run on training traces directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tt
from .balance import balance_loss
from .checkpoint import save_checkpoint
from .data import Batcher
from .model import ModelConfig, init_weights, spec_hash, transformer_forward
from .moe import GateOutput
from .optim import AdamState, OptimizerConfig, adam_step, clip_global_norm, lr_at
from .tensor import Tensor, per_token_cross_entropy
from .trace import TraceHeader, TraceWriter, make_records


@dataclass
class TrainStepRecord:
    step: int
    ce_loss: float
    balance_loss_sum: float
    lr: float
    grad_norm_pre_clip: float
    per_layer_f: list[list[float]]
    per_layer_P: list[list[float]]

    def to_json_obj(self) -> dict:
        return {
            "step": self.step,
            "ce_loss": self.ce_loss,
            "balance_loss_sum": self.balance_loss_sum,
            "lr": self.lr,
            "grad_norm_pre_clip": self.grad_norm_pre_clip,
            "per_layer_f": self.per_layer_f,
            "per_layer_P": self.per_layer_P,
        }


def named_params(weights: dict[str, Tensor]) -> list[tuple[str, Tensor]]:
    return [(n, t) for n, t in weights.items() if t.requires_grad]


def _trace_step(
    writer: TraceWriter,
    gate_outs: list[GateOutput],
    token_losses: np.ndarray,
    epoch: int,
    token_base: int,
) -> None:
    n_tokens = gate_outs[0].n_tokens
    token_ids = token_base + np.arange(n_tokens, dtype=np.uint64)
    for layer, go in enumerate(gate_outs):
        for rank in range(go.top_k):
            writer.write(
                make_records(
                    epoch=epoch,
                    layer=layer,
                    token=token_ids,
                    rank=rank,
                    expert=go.topk_indices[:, rank],
                    weight=go.topk_weights[:, rank],
                    ce=token_losses,
                )
            )


def train(
    cfg: ModelConfig,
    opt: OptimizerConfig,
    corpus: np.ndarray,
    steps: int,
    trace_out: str | Path | None = None,
    metrics_out: str | Path | None = None,
    checkpoint_out: str | Path | None = None,
    dtype=np.float32,
    trace_binary: bool = False,
) -> tuple[list[TrainStepRecord], dict[str, Tensor]]:
    """Run `steps` optimizer steps from fresh seeded weights; returns records and weights."""
    weights = init_weights(cfg, dtype=dtype)
    params = named_params(weights)
    state = AdamState()
    batcher = Batcher(corpus, cfg.seq_len, cfg.batch_size, cfg.seed)
    spec = cfg.expert_spec()

    writer = None
    if trace_out is not None:
        header = TraceHeader(
            spec_hash=spec_hash(cfg),
            n_experts=cfg.n_experts,
            n_layers=cfg.n_layers,
            top_k=cfg.top_k,
            expert_sizes=tuple(spec.expert_sizes),
        )
        writer = TraceWriter(trace_out, header, binary=trace_binary)
    metrics_fh = open(metrics_out, "w", encoding="utf-8") if metrics_out is not None else None

    records: list[TrainStepRecord] = []
    token_base = 0
    try:
        for step in range(steps):
            epoch = batcher.epoch
            batch = batcher.next_batch()
            inputs, targets = batch[:, :-1], batch[:, 1:].reshape(-1)

            logits, gate_outs = transformer_forward(cfg, weights, inputs)
            ce = tt.cross_entropy(logits, targets)
            stats = [balance_loss(go, opt.alpha) for go in gate_outs]
            loss = ce
            for st in stats:
                loss = tt.add(loss, st.loss)

            tt.backward(loss)
            gnorm = clip_global_norm(params, opt.grad_clip_norm)
            adam_step(params, state, opt, step + 1)
            for _, p in params:
                p.zero_grad()

            rec = TrainStepRecord(
                step=step,
                ce_loss=float(ce.values),
                balance_loss_sum=float(sum(float(st.loss.values) for st in stats)),
                lr=lr_at(step, opt),
                grad_norm_pre_clip=gnorm,
                per_layer_f=[st.f.tolist() for st in stats],
                per_layer_P=[st.P.tolist() for st in stats],
            )
            records.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(rec.to_json_obj()) + "\n")

            if writer is not None:
                token_losses = per_token_cross_entropy(logits.values, targets).astype(np.float32)
                _trace_step(writer, gate_outs, token_losses, epoch, token_base)
            token_base += inputs.size
    finally:
        if writer is not None:
            writer.close()
        if metrics_fh is not None:
            metrics_fh.close()

    if checkpoint_out is not None:
        save_checkpoint(
            checkpoint_out,
            weights,
            meta={"config": cfg.to_dict(), "expert_sizes": list(spec.expert_sizes), "steps": steps},
        )
    return records, weights


def eval_loss(
    cfg: ModelConfig,
    weights: dict[str, Tensor],
    corpus: np.ndarray,
    with_per_token: bool = False,
) -> tuple[float, np.ndarray | None]:
    """Mean next-token cross entropy over the corpus, windowed at cfg.seq_len.

    Windows tile the corpus back to back; trailing tokens short of a full
    window are skipped. With `with_per_token`, also returns the loss of each
    predicted position, in corpus order (position i is the prediction of
    token i+1 within its window).
    """
    corpus = np.asarray(corpus, dtype=np.int32)
    s = cfg.seq_len
    starts = np.arange(0, len(corpus) - s, s)
    if len(starts) == 0:
        raise ValueError(f"corpus of {len(corpus)} tokens is shorter than one window ({s + 1})")
    losses = []
    for i in range(0, len(starts), cfg.batch_size):
        chunk = starts[i : i + cfg.batch_size]
        batch = np.stack([corpus[j : j + s + 1] for j in chunk])
        logits, _ = transformer_forward(cfg, weights, batch[:, :-1])
        losses.append(per_token_cross_entropy(logits.values, batch[:, 1:].reshape(-1)))
    per_token = np.concatenate(losses)
    return float(per_token.mean()), (per_token if with_per_token else None)
