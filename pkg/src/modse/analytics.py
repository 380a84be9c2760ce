"""Post-hoc analyses over routing traces and per-token loss files.

Everything here is a pure function of its inputs: token counts per
(epoch, layer, rank, expert) with max/min evenness ratios, loss-threshold
tables comparing two models' per-token losses, the expert-width distribution
of hard tokens, and a CSV/SVG heatmap emitter. Ratios are kept at full
precision in the dataclasses and rounded to two decimals only when rendered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .moe import PairedExpertSpec
from .trace import RoutingTrace


class AlignmentError(ValueError):
    """Per-token loss arrays do not describe the same tokens."""


# ---------------------------------------------------------------------------
# routing counts


@dataclass
class CountRow:
    epoch: int
    layer: int
    rank: int
    counts: np.ndarray  # [N] int64

    @property
    def max(self) -> int:
        return int(self.counts.max())

    @property
    def min(self) -> int:
        return int(self.counts.min())

    @property
    def ratio(self) -> float:
        return math.inf if self.min == 0 else self.max / self.min


@dataclass
class CountTable:
    n_experts: int
    rows: list[CountRow]

    def row(self, epoch: int, layer: int, rank: int) -> CountRow:
        for r in self.rows:
            if (r.epoch, r.layer, r.rank) == (epoch, layer, rank):
                return r
        raise KeyError((epoch, layer, rank))


def count_routing(trace: RoutingTrace) -> CountTable:
    """Exact token counts per (epoch, layer, rank, expert), rows sorted by group key."""
    n = trace.header.n_experts
    rec = trace.records
    if rec.size == 0:
        return CountTable(n_experts=n, rows=[])
    keys = np.stack(
        [rec["epoch"].astype(np.int64), rec["layer"].astype(np.int64), rec["rank"].astype(np.int64)],
        axis=1,
    )
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    counts = np.zeros((len(uniq), n), dtype=np.int64)
    np.add.at(counts, (inv.reshape(-1), rec["expert"].astype(np.int64)), 1)
    rows = [
        CountRow(int(e), int(layer), int(r), counts=c) for (e, layer, r), c in zip(uniq, counts)
    ]
    return CountTable(n_experts=n, rows=rows)


def count_table_from_grid(
    counts: np.ndarray, epoch: int = 0, layers_ranks: list[tuple[int, int]] | None = None
) -> CountTable:
    """Build a CountTable from pre-aggregated per-(layer, rank) count rows."""
    counts = np.asarray(counts, dtype=np.int64)
    if layers_ranks is None:
        layers_ranks = [(i, 0) for i in range(len(counts))]
    rows = [
        CountRow(epoch, layer, rank, counts=c.copy())
        for (layer, rank), c in zip(layers_ranks, counts)
    ]
    return CountTable(n_experts=counts.shape[1], rows=rows)


def counts_csv(table: CountTable, expert_sizes: list[int] | None = None) -> str:
    sizes = expert_sizes or ["?"] * table.n_experts
    lines = ["epoch,layer,rank," + ",".join(str(s) for s in sizes) + ",max,min,max/min"]
    for r in table.rows:
        ratio = "inf" if math.isinf(r.ratio) else f"{r.ratio:.2f}"
        lines.append(
            f"{r.epoch},{r.layer},{r.rank},"
            + ",".join(str(int(c)) for c in r.counts)
            + f",{r.max},{r.min},{ratio}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# difficult tokens


@dataclass
class ThresholdRow:
    threshold: float
    token_count: int
    avg_loss_reduction: float  # 0.0 when no token clears the threshold


def difficult_token_table(
    baseline_losses: np.ndarray, modse_losses: np.ndarray, thresholds: list[float]
) -> list[ThresholdRow]:
    """Loss-reduction rows for tokens whose baseline loss exceeds each threshold.

    Both loss arrays must describe the same tokens in the same order;
    thresholds must be strictly descending, so each selection is a superset
    of the previous one.
    """
    base = np.asarray(baseline_losses, dtype=np.float64).reshape(-1)
    other = np.asarray(modse_losses, dtype=np.float64).reshape(-1)
    if base.shape != other.shape:
        raise AlignmentError(f"loss arrays differ in length: {base.shape[0]} vs {other.shape[0]}")
    if any(later >= earlier for earlier, later in zip(thresholds, thresholds[1:])):
        raise ValueError(f"thresholds must be strictly descending, got {thresholds}")
    rows = []
    for t in thresholds:
        sel = base > t
        n = int(sel.sum())
        red = float((base[sel] - other[sel]).mean()) if n else 0.0
        rows.append(ThresholdRow(threshold=float(t), token_count=n, avg_loss_reduction=red))
    return rows


def thresholds_csv(rows: list[ThresholdRow]) -> str:
    lines = ["loss_threshold,avg_loss_red,n_tokens"]
    for r in rows:
        lines.append(f"{r.threshold:g},{r.avg_loss_reduction:.2f},{r.token_count}")
    return "\n".join(lines) + "\n"


@dataclass
class DifficultTokenReport:
    expert_sizes: list[int]
    per_expert_top1: np.ndarray  # [N] rank-0 events per expert
    per_expert_top12: np.ndarray  # [N] rank-0 and rank-1 events per expert
    sum_large_top1: int
    sum_small_top1: int
    sum_large_top12: int
    sum_small_top12: int
    per_layer_top1: np.ndarray  # [layers, N] rank-0 events, the heatmap grid
    threshold_rows: list[ThresholdRow] = field(default_factory=list)


def difficult_token_expert_distribution(
    trace: RoutingTrace,
    difficult_token_ids: set[int],
    spec: PairedExpertSpec,
    large_sizes: set[int],
    small_sizes: set[int],
) -> DifficultTokenReport:
    """Count where the difficult tokens were routed, by expert and width class.

    `large_sizes`/`small_sizes` are disjoint sets of expert widths; widths in
    neither set (the exactly-average experts) are excluded from both sums.
    Per-index widths come from the trace header, which fixes the expert
    numbering; `spec` must agree with it as a multiset.
    """
    sizes = list(trace.header.expert_sizes)
    if sorted(sizes) != sorted(spec.expert_sizes):
        raise ValueError(
            f"trace expert widths {sorted(sizes)} do not match spec widths {sorted(spec.expert_sizes)}"
        )
    known = set(sizes)
    for s in large_sizes | small_sizes:
        if s not in known:
            raise ValueError(f"size {s} not among expert widths {sorted(known)}")
    if large_sizes & small_sizes:
        raise ValueError("large and small size classes overlap")

    rec = trace.records
    if rec.size:
        difficult = np.isin(rec["token"], np.fromiter(difficult_token_ids, dtype=np.uint64, count=len(difficult_token_ids)))
    else:
        difficult = np.zeros(0, dtype=bool)
    n = spec.n_experts
    layers = trace.header.n_layers

    def tally(mask: np.ndarray) -> np.ndarray:
        return np.bincount(rec["expert"][mask].astype(np.int64), minlength=n).astype(np.int64)

    top1 = tally(difficult & (rec["rank"] == 0))
    top12 = tally(difficult & (rec["rank"] <= 1))
    grid = np.zeros((layers, n), dtype=np.int64)
    sel = difficult & (rec["rank"] == 0)
    np.add.at(grid, (rec["layer"][sel].astype(np.int64), rec["expert"][sel].astype(np.int64)), 1)

    def class_sum(counts: np.ndarray, cls: set[int]) -> int:
        return int(sum(int(c) for c, h in zip(counts, sizes) if h in cls))

    return DifficultTokenReport(
        expert_sizes=list(sizes),
        per_expert_top1=top1,
        per_expert_top12=top12,
        sum_large_top1=class_sum(top1, large_sizes),
        sum_small_top1=class_sum(top1, small_sizes),
        sum_large_top12=class_sum(top12, large_sizes),
        sum_small_top12=class_sum(top12, small_sizes),
        per_layer_top1=grid,
    )


def default_size_classes(spec: PairedExpertSpec) -> tuple[set[int], set[int]]:
    """Wider-than-average vs narrower-than-average; exactly-average excluded."""
    large = {h for h in spec.expert_sizes if h > spec.h_base}
    small = {h for h in spec.expert_sizes if h < spec.h_base}
    return large, small


def distribution_csv(report: DifficultTokenReport) -> str:
    lines = ["expert_size,tokens_top1_and_2,tokens_top1"]
    for h, c12, c1 in zip(report.expert_sizes, report.per_expert_top12, report.per_expert_top1):
        lines.append(f"{h},{int(c12)},{int(c1)}")
    lines.append(f"sum_large,{report.sum_large_top12},{report.sum_large_top1}")
    lines.append(f"sum_small,{report.sum_small_top12},{report.sum_small_top1}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# heatmap


def _fmt_cell(v) -> str:
    f = float(v)
    return str(int(f)) if f.is_integer() else repr(f)


def emit_heatmap(counts, out: str | Path, expert_sizes: list[int] | None = None) -> None:
    """Write `<out>.csv` and a self-contained `<out>.svg` for a layer x expert grid.

    When expert widths are given, columns are reordered widest-first (stable,
    so equal widths keep their relative order) in both outputs.
    """
    grid = np.asarray(counts, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"heatmap needs a rectangular grid, got shape {grid.shape}")
    order = list(range(grid.shape[1]))
    sizes = expert_sizes
    if sizes is not None:
        if len(sizes) != grid.shape[1]:
            raise ValueError("expert_sizes length does not match grid columns")
        order = sorted(order, key=lambda j: -sizes[j])
        grid = grid[:, order]
        sizes = [sizes[j] for j in order]

    out = Path(out)
    csv_text = "\n".join(",".join(_fmt_cell(v) for v in row) for row in grid) + "\n"
    Path(str(out) + ".csv").write_text(csv_text, encoding="utf-8")
    Path(str(out) + ".svg").write_text(_heatmap_svg(grid, sizes), encoding="utf-8")


def _heatmap_svg(grid: np.ndarray, sizes: list[int] | None) -> str:
    rows, cols = grid.shape
    cell, pad_left, pad_top = 42, 64, 28
    width = pad_left + cols * cell + 8
    height = pad_top + rows * cell + 8
    top = float(grid.max()) if grid.size else 0.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for j in range(cols):
        label = str(sizes[j]) if sizes else str(j)
        parts.append(
            f'<text x="{pad_left + j * cell + cell / 2:.0f}" y="{pad_top - 8}" text-anchor="middle">{label}</text>'
        )
    for i in range(rows):
        parts.append(
            f'<text x="{pad_left - 6}" y="{pad_top + i * cell + cell / 2 + 4:.0f}" text-anchor="end">L{i}</text>'
        )
        for j in range(cols):
            frac = 0.0 if top == 0 else grid[i, j] / top
            # white -> dark blue ramp
            r = int(255 - 205 * frac)
            g = int(255 - 165 * frac)
            b = int(255 - 95 * frac)
            x, y = pad_left + j * cell, pad_top + i * cell
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({r},{g},{b})" stroke="#999"/>')
            parts.append(
                f'<text x="{x + cell / 2:.0f}" y="{y + cell / 2 + 4:.0f}" text-anchor="middle">{_fmt_cell(grid[i, j])}</text>'
            )
    parts.append("</svg>")
    return "\n".join(parts)
