"""One executable, five subcommands: train, plan, analyze, gradcheck, gen-data.

Exit codes are a stable scripting contract: 0 success, 1 usage or config
problem, 2 runtime/IO failure, 3 verification (gradcheck) failure. Logs go
to stderr at the level set by MODSE_LOG (debug|info|warn); machine-readable
results go to stdout or into the --out directory, which also receives a
manifest with digests of every file the command produced.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck
from .analytics import (
    AlignmentError,
    count_routing,
    counts_csv,
    default_size_classes,
    difficult_token_expert_distribution,
    difficult_token_table,
    distribution_csv,
    emit_heatmap,
    thresholds_csv,
)
from .data import load_text_corpus, synthetic_corpus, synthetic_docs
from .manifest import RunOutputs
from .model import ModelConfig
from .moe import PairedExpertSpec, spec_from_sizes
from .optim import OptimizerConfig
from .placement import DeviceModel, PlanningError, plan_baselines, plan_pairwise
from .trace import TraceFormatError, read_trace
from .train import train

log = logging.getLogger("modse")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

THRESHOLD_LADDER = (2.0, 1.8, 1.6, 1.4, 1.2)


class _Parser(argparse.ArgumentParser):
    # argparse defaults to exit code 2 on usage errors; our contract says 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


class ConfigError(ValueError):
    pass


def _setup_logging() -> None:
    level = {"debug": logging.DEBUG, "info": logging.INFO, "warn": logging.WARNING}.get(
        os.environ.get("MODSE_LOG", "warn").lower(), logging.WARNING
    )
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")


def _load_config(path: str | None) -> tuple[ModelConfig, OptimizerConfig]:
    if path is None:
        return ModelConfig(), OptimizerConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(raw) - {"model", "optimizer"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    try:
        model = ModelConfig.from_dict(raw.get("model", {}))
        opt = OptimizerConfig.from_dict(raw.get("optimizer", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e
    return model, opt


def _spec_from_config(cfg: ModelConfig) -> PairedExpertSpec:
    return cfg.expert_spec()


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, argv: list[str]) -> int:
    cfg, opt = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.ratios == "homogeneous":
        cfg.expert_ratios = "homogeneous"
    if args.alpha is not None:
        opt.alpha = args.alpha
    steps = args.steps if args.steps is not None else opt.total_steps

    if args.data:
        corpus = load_text_corpus(args.data)
    else:
        corpus = synthetic_corpus(cfg.seed)
    log.info("training %d steps on %d tokens (out: %s)", steps, len(corpus), args.out)

    run = RunOutputs(args.out, argv, {"model": cfg.to_dict(), "optimizer": opt.__dict__}, cfg.seed)
    try:
        trace_path = run.stage(args.trace) if args.trace else None
        records, weights = train(
            cfg,
            opt,
            corpus,
            steps,
            trace_out=trace_path,
            metrics_out=run.stage("metrics.jsonl"),
            checkpoint_out=run.stage("checkpoint.bin"),
            trace_binary=bool(args.trace and args.trace.endswith(".bin")),
        )
        run.commit()
    except BaseException:
        run.abort()
        raise
    summary = {
        "steps": steps,
        "final_ce": records[-1].ce_loss if records else None,
        "out": str(args.out),
    }
    print(json.dumps(summary))
    return EXIT_OK


def cmd_plan(args, argv: list[str]) -> int:
    cfg, _ = _load_config(args.config)
    spec = _spec_from_config(cfg)
    devices = DeviceModel(args.devices)
    if args.strategy == "pairwise":
        plan = plan_pairwise(spec, cfg.n_layers, devices)
    else:
        plan = plan_baselines(spec, cfg.n_layers, devices, args.strategy, order=args.order)

    run = RunOutputs(args.out, argv, {"model": cfg.to_dict()}, cfg.seed)
    try:
        run.stage("plan.json").write_text(
            json.dumps(plan.to_json_dict(), indent=2) + "\n", encoding="utf-8"
        )
        run.commit()
    except BaseException:
        run.abort()
        raise
    for dev, params in enumerate(plan.per_device_params):
        print(f"device {dev}: {params} parameters")
    return EXIT_OK


def _read_loss_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    ids, losses = [], []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        line = line.strip()
        if not line or (i == 0 and line.lower().startswith("token_index")):
            continue
        try:
            tok, loss = line.split(",")
            ids.append(int(tok))
            losses.append(float(loss))
        except ValueError as e:
            raise AlignmentError(f"{path}:{i + 1}: bad loss row {line!r}") from e
    return np.asarray(ids, dtype=np.int64), np.asarray(losses, dtype=np.float64)


def cmd_analyze(args, argv: list[str]) -> int:
    trace = read_trace(args.trace)
    if len(trace) == 0:
        raise ConfigError("empty trace")
    sizes = list(trace.header.expert_sizes)
    table = count_routing(trace)

    run = RunOutputs(args.out, argv, {"trace": str(args.trace)}, None)
    try:
        run.stage("counts.csv").write_text(counts_csv(table, sizes), encoding="utf-8")
        for r in table.rows:
            ratio = "inf" if r.min == 0 else f"{r.ratio:.2f}"
            print(f"epoch {r.epoch} layer {r.layer} rank {r.rank} max/min: {ratio}")

        if (args.losses_baseline is None) != (args.losses_modse is None):
            raise ConfigError("--losses-baseline and --losses-modse must be given together")
        if args.losses_baseline:
            base_ids, base = _read_loss_csv(args.losses_baseline)
            modse_ids, other = _read_loss_csv(args.losses_modse)
            if base_ids.shape != modse_ids.shape or (base_ids != modse_ids).any():
                raise AlignmentError("loss files do not cover the same tokens in the same order")
            mean = float(base.mean())
            thresholds = sorted({*THRESHOLD_LADDER, round(mean, 6)}, reverse=True)
            rows = difficult_token_table(base, other, thresholds)
            run.stage("thresholds.csv").write_text(thresholds_csv(rows), encoding="utf-8")

            difficult = set(base_ids[base > mean].tolist())
            spec = spec_from_sizes(_infer_d_model(sizes), sizes)
            large, small = default_size_classes(spec)
            report = difficult_token_expert_distribution(trace, difficult, spec, large, small)
            run.stage("distribution.csv").write_text(distribution_csv(report), encoding="utf-8")
            grid = report.per_layer_top1
        else:
            # routing heatmap: rank-0 counts per (layer, expert), summed over epochs
            grid = np.zeros((trace.header.n_layers, trace.header.n_experts), dtype=np.int64)
            for r in table.rows:
                if r.rank == 0:
                    grid[r.layer] += r.counts

        tmp_base = run.out_dir / ".heatmap-stage"
        emit_heatmap(grid, tmp_base, expert_sizes=sizes)
        Path(f"{tmp_base}.csv").replace(run.stage("heatmap.csv"))
        Path(f"{tmp_base}.svg").replace(run.stage("heatmap.svg"))
        run.commit()
    except BaseException:
        run.abort()
        raise
    return EXIT_OK


def _infer_d_model(sizes: list[int]) -> int:
    # only size-class bookkeeping depends on the width spec here, so any d_model
    # that divides every width works; the gcd keeps it integral
    import math as _math

    g = 0
    for s in sizes:
        g = _math.gcd(g, s)
    return max(g, 1)


def cmd_gradcheck(args, argv: list[str]) -> int:
    results = gradcheck.run_all(args.scale)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok = ok and r.passed
        print(f"{r.name}: worst rel err {r.worst_err:.3e} (tol {r.tol:.0e}) {status}")
    if args.out:
        run = RunOutputs(args.out, argv, {"scale": args.scale}, None)
        try:
            payload = [
                {"suite": r.name, "worst_err": r.worst_err, "tol": r.tol, "passed": r.passed}
                for r in results
            ]
            run.stage("gradcheck.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
            run.commit()
        except BaseException:
            run.abort()
            raise
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_gen_data(args, argv: list[str]) -> int:
    docs = synthetic_docs(args.seed, n_docs=args.docs, max_depth=args.max_depth)
    run = RunOutputs(args.out, argv, {"seed": args.seed, "docs": args.docs}, args.seed)
    try:
        run.stage("corpus.txt").write_text("\n".join(docs) + "\n", encoding="utf-8")
        run.commit()
    except BaseException:
        run.abort()
        raise
    print(json.dumps({"docs": len(docs), "out": str(args.out)}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    p = _Parser(prog="modse", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train the toy model")
    t.add_argument("--config", help="JSON config with 'model'/'optimizer' sections")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--ratios", choices=["homogeneous", "paired"], help="override expert sizing")
    t.add_argument("--alpha", type=float, help="balance-loss weight override")
    t.add_argument("--trace", help="routing-trace filename ('.bin' suffix selects binary format)")
    t.add_argument("--out", default="modse-run", help="output directory")
    t.add_argument("--data", nargs="*", help="UTF-8 text corpus files (default: synthetic)")
    t.set_defaults(func=cmd_train)

    pl = sub.add_parser("plan", help="assign experts to logical devices")
    pl.add_argument("--config", help="JSON config (model section)")
    pl.add_argument("--devices", type=int, required=True)
    pl.add_argument("--strategy", default="pairwise", choices=["pairwise", "naive_contiguous", "size_sorted"])
    pl.add_argument("--order", default="as_is", choices=["as_is", "descending"], help="expert order for naive_contiguous")
    pl.add_argument("--out", default="modse-plan", help="output directory")
    pl.set_defaults(func=cmd_plan)

    a = sub.add_parser("analyze", help="run routing-trace analyses")
    a.add_argument("trace", help="trace file (JSONL or binary)")
    a.add_argument("--losses-baseline", help="per-token loss CSV of the uniform-experts model")
    a.add_argument("--losses-modse", help="per-token loss CSV of the diverse-experts model")
    a.add_argument("--out", default="modse-analysis", help="output directory")
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gradcheck", help="finite-difference verification suites")
    g.add_argument("--scale", default="micro", choices=["micro", "small"])
    g.add_argument("--out", help="optional output directory for the report")
    g.set_defaults(func=cmd_gradcheck)

    gd = sub.add_parser("gen-data", help="emit the synthetic corpus")
    gd.add_argument("--seed", type=int, default=0)
    gd.add_argument("--docs", type=int, default=4000)
    gd.add_argument("--max-depth", type=int, default=4)
    gd.add_argument("--out", default="modse-data", help="output directory")
    gd.set_defaults(func=cmd_gen_data)
    return p


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, ["modse", *argv])
    except (ConfigError, PlanningError, TraceFormatError, AlignmentError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - last-resort runtime mapping
        log.debug("unexpected failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def run() -> None:
    raise SystemExit(main())
