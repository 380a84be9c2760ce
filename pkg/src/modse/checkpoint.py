"""Single-file checkpoints: one JSON header line, then raw float32 buffers.

The header lists tensor names and shapes in order; the body is each tensor's
little-endian float32 bytes, row-major, concatenated in that order. Metadata
(model config, expert sizes) rides along in the header.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, weights: dict[str, Tensor], meta: dict) -> None:
    header = {
        "format": "modse-ckpt",
        "version": 1,
        "meta": meta,
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in weights.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for t in weights.values():
            fh.write(np.ascontiguousarray(t.values, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, requires_grad: bool = True) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: bad checkpoint header: {e}") from e
        if header.get("format") != "modse-ckpt":
            raise CheckpointError(f"{path}: not a checkpoint file")
        weights: dict[str, Tensor] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise CheckpointError(f"{path}: truncated buffer for {entry['name']}")
            arr = np.frombuffer(buf, dtype="<f4", count=count).reshape(shape)
            weights[entry["name"]] = Tensor(arr.copy(), requires_grad=requires_grad, dtype=np.float32)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return weights, header["meta"]
