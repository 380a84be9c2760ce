#!/usr/bin/env python3
"""Per-device parameter totals for every placement strategy on the 8-expert spec.

Shows why pairing matters: pairwise totals are exactly equal by construction,
contiguous slicing balances only by luck of ordering, and the greedy baseline
depends on the size multiset.
"""

import argparse

from modse.moe import build_paired_spec
from modse.placement import DeviceModel, PlanningError, plan_baselines, plan_pairwise


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dim", type=int, default=1536)
    ap.add_argument("--h-base", type=int, default=3840)
    ap.add_argument("--layers", type=int, default=1)
    args = ap.parse_args()

    spec = build_paired_spec(args.dim, args.h_base, [(4.5, 0.5), (4.0, 1.0), (3.0, 2.0), (2.5, 2.5)])
    print(f"expert widths: {spec.expert_sizes}\n")
    plans = [
        ("pairwise", lambda d: plan_pairwise(spec, args.layers, d)),
        ("contiguous (spec order)", lambda d: plan_baselines(spec, args.layers, d, "naive_contiguous")),
        ("contiguous (descending)", lambda d: plan_baselines(spec, args.layers, d, "naive_contiguous", order="descending")),
        ("size-sorted greedy", lambda d: plan_baselines(spec, args.layers, d, "size_sorted")),
    ]
    for devices in (1, 2, 4):
        print(f"D={devices}")
        for name, make in plans:
            try:
                plan = make(DeviceModel(devices))
            except PlanningError as e:
                print(f"  {name:26s} -> {e}")
                continue
            marker = "equal" if len(set(plan.per_device_params)) == 1 else "UNEQUAL"
            print(f"  {name:26s} -> {plan.per_device_params} ({marker})")
        print()


if __name__ == "__main__":
    main()
