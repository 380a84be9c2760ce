"""Routing-trace files: one record per (token, layer, rank) routing event.

Two on-disk formats carry the same data and must load identically:

* JSONL: a mandatory header line, then one JSON object per record with keys
  epoch, layer, token, rank, expert, weight and optional ce.
* Binary: magic ``MDSTRC01``, a u32 little-endian header length, the same
  header JSON in UTF-8, then fixed-width 28-byte little-endian records.

Gate weights are stored as float32 in both formats (JSON carries the exact
binary64 image of the float32), so reports computed from either file agree
bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

MAGIC = b"MDSTRC01"

RECORD_DTYPE = np.dtype(
    [
        ("epoch", "<u4"),
        ("layer", "<u4"),
        ("token", "<u8"),
        ("rank", "<u2"),
        ("expert", "<u2"),
        ("weight", "<f4"),
        ("ce", "<f4"),  # NaN when the per-token loss was not recorded
    ]
)


class TraceFormatError(ValueError):
    """Malformed trace file or out-of-range record field."""


@dataclass(frozen=True)
class TraceHeader:
    spec_hash: str
    n_experts: int
    n_layers: int
    top_k: int
    expert_sizes: tuple[int, ...]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["expert_sizes"] = list(self.expert_sizes)
        return {"format": "modse-trace", "version": 1, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "TraceHeader":
        if d.get("format") != "modse-trace":
            raise TraceFormatError(f"not a trace header: {d.get('format')!r}")
        return cls(
            spec_hash=d["spec_hash"],
            n_experts=int(d["n_experts"]),
            n_layers=int(d["n_layers"]),
            top_k=int(d["top_k"]),
            expert_sizes=tuple(int(s) for s in d["expert_sizes"]),
        )


@dataclass
class RoutingTrace:
    header: TraceHeader
    records: np.ndarray  # RECORD_DTYPE

    def __post_init__(self):
        self.records = np.asarray(self.records, dtype=RECORD_DTYPE)
        validate_records(self.header, self.records)

    def __len__(self) -> int:
        return len(self.records)


def validate_records(header: TraceHeader, records: np.ndarray) -> None:
    bad = np.nonzero(records["rank"] >= header.top_k)[0]
    if bad.size:
        raise TraceFormatError(f"record {bad[0]}: rank {records['rank'][bad[0]]} >= top_k {header.top_k}")
    bad = np.nonzero(records["expert"] >= header.n_experts)[0]
    if bad.size:
        raise TraceFormatError(
            f"record {bad[0]}: expert {records['expert'][bad[0]]} >= n_experts {header.n_experts}"
        )
    w = records["weight"]
    bad = np.nonzero(~((w >= 0.0) & (w <= 1.0 + 1e-6)))[0]
    if bad.size:
        raise TraceFormatError(f"record {bad[0]}: gate weight {w[bad[0]]} outside [0, 1]")


def make_records(
    epoch, layer, token, rank, expert, weight, ce=None
) -> np.ndarray:
    """Assemble aligned field arrays into a record block."""
    n = len(np.atleast_1d(token))
    rec = np.zeros(n, dtype=RECORD_DTYPE)
    rec["epoch"] = epoch
    rec["layer"] = layer
    rec["token"] = token
    rec["rank"] = rank
    rec["expert"] = expert
    rec["weight"] = weight
    rec["ce"] = np.nan if ce is None else ce
    return rec


class TraceWriter:
    """Streams records to a JSONL or binary trace file."""

    def __init__(self, path: str | Path, header: TraceHeader, binary: bool = False):
        self.path = Path(path)
        self.binary = binary
        if binary:
            self._fh = open(self.path, "wb")
            blob = json.dumps(header.to_dict(), sort_keys=True).encode("utf-8")
            self._fh.write(MAGIC)
            self._fh.write(len(blob).to_bytes(4, "little"))
            self._fh.write(blob)
        else:
            self._fh = open(self.path, "w", encoding="utf-8")
            self._fh.write(json.dumps(header.to_dict(), sort_keys=True) + "\n")

    def write(self, records: np.ndarray) -> None:
        records = np.asarray(records, dtype=RECORD_DTYPE)
        if self.binary:
            self._fh.write(records.tobytes())
            return
        lines = []
        for r in records:
            obj = {
                "epoch": int(r["epoch"]),
                "layer": int(r["layer"]),
                "token": int(r["token"]),
                "rank": int(r["rank"]),
                "expert": int(r["expert"]),
                "weight": float(r["weight"]),
            }
            ce = float(r["ce"])
            if not math.isnan(ce):
                obj["ce"] = ce
            lines.append(json.dumps(obj))
        self._fh.write("\n".join(lines) + "\n" if lines else "")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_trace(path: str | Path, trace: RoutingTrace, binary: bool = False) -> None:
    with TraceWriter(path, trace.header, binary=binary) as w:
        w.write(trace.records)


def read_trace(path: str | Path) -> RoutingTrace:
    """Load a trace file, sniffing JSONL vs binary by the magic prefix."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
        if head == MAGIC:
            raw = fh.read()
            hlen = int.from_bytes(raw[:4], "little")
            try:
                header = TraceHeader.from_dict(json.loads(raw[4 : 4 + hlen]))
            except (json.JSONDecodeError, KeyError) as e:
                raise TraceFormatError(f"{path}: bad binary header: {e}") from e
            body = raw[4 + hlen :]
            if len(body) % RECORD_DTYPE.itemsize != 0:
                raise TraceFormatError(f"{path}: truncated binary record block")
            records = np.frombuffer(body, dtype=RECORD_DTYPE).copy()
            return RoutingTrace(header, records)

    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise TraceFormatError(f"{path}: empty file")
    try:
        header = TraceHeader.from_dict(json.loads(lines[0]))
    except (json.JSONDecodeError, KeyError) as e:
        raise TraceFormatError(f"{path}: bad header line: {e}") from e
    records = np.zeros(len(lines) - 1, dtype=RECORD_DTYPE)
    for i, line in enumerate(lines[1:]):
        try:
            obj = json.loads(line)
            records[i] = (
                obj["epoch"],
                obj["layer"],
                obj["token"],
                obj["rank"],
                obj["expert"],
                obj["weight"],
                obj.get("ce", np.nan),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise TraceFormatError(f"{path}: bad record at offset {i}: {e}") from e
    return RoutingTrace(header, records)
