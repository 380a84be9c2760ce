"""Published aggregate tables shipped as machine-readable fixtures.

Both tables describe the 8-expert model with d_model 1536 and base width
3840; columns are per-expert token counts, ordered widest expert first.
`routing_epoch7` holds the late-training per-(layer, rank) routing counts;
`difficult_tokens` holds the routing counts of the hard-token subset.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

FIXTURE_D_MODEL = 1536
FIXTURE_H_BASE = 3840


@dataclass(frozen=True)
class CountFixture:
    expert_sizes: tuple[int, ...]  # column order (widest first)
    layers: np.ndarray  # [rows]
    ranks: np.ndarray  # [rows]
    counts: np.ndarray  # [rows, n_experts]

    def row(self, layer: int, rank: int) -> np.ndarray:
        sel = (self.layers == layer) & (self.ranks == rank)
        (idx,) = np.nonzero(sel)
        return self.counts[idx[0]]

    @property
    def n_layers(self) -> int:
        return int(self.layers.max()) + 1


def _load(name: str) -> CountFixture:
    text = resources.files(__package__).joinpath(name).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    sizes = tuple(int(s) for s in lines[0].split(",")[2:])
    rows = [[int(v) for v in ln.split(",")] for ln in lines[1:]]
    arr = np.asarray(rows, dtype=np.int64)
    return CountFixture(
        expert_sizes=sizes, layers=arr[:, 0], ranks=arr[:, 1], counts=arr[:, 2:]
    )


def load_routing_epoch7() -> CountFixture:
    return _load("routing_epoch7.csv")


def load_difficult_tokens() -> CountFixture:
    return _load("difficult_tokens.csv")
