#!/usr/bin/env python3
"""Train the toy config end to end and print the loss curve.

Usage: python scripts/train_toy.py [--steps N] [--seed S] [--homogeneous]
"""

import argparse
import time

from modse.data import synthetic_corpus
from modse.model import ModelConfig
from modse.optim import OptimizerConfig
from modse.train import train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--homogeneous", action="store_true", help="uniform expert widths baseline")
    args = ap.parse_args()

    cfg = ModelConfig(seed=args.seed)
    if args.homogeneous:
        cfg.expert_ratios = "homogeneous"
    opt = OptimizerConfig(warmup_steps=max(1, args.steps // 10), total_steps=args.steps)
    corpus = synthetic_corpus(cfg.seed)

    print(f"expert widths: {cfg.expert_spec().expert_sizes}")
    t0 = time.time()
    records, _ = train(cfg, opt, corpus, args.steps)
    print(f"{args.steps} steps in {(time.time() - t0) / 60:.1f} min")
    stride = max(1, args.steps // 10)
    for r in records[::stride]:
        print(f"step {r.step:4d}  ce {r.ce_loss:.4f}  balance {r.balance_loss_sum:.4f}  lr {r.lr:.2e}")
    print(f"final ce {records[-1].ce_loss:.4f} (started {records[0].ce_loss:.4f})")


if __name__ == "__main__":
    main()
