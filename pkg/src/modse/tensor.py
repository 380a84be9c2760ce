"""Dense tensors with reverse-mode autodiff, sized for a small expert-routing model.

The op set is deliberately closed: exactly what the gate, the experts and the
toy transformer need, nothing more. Values are row-major numpy arrays in
float32 (training) or float64 (gradient checking); an op's output always keeps
its inputs' dtype. The computation graph is implicit: every recorded output
stores its parents and a backward closure, and carries a monotonically
increasing node id, so `backward` can replay the tape in exact reverse
recording order, visiting each node once.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "tensor",
    "zeros",
    "backward",
    "matmul",
    "add",
    "mul",
    "scale",
    "div_scale",
    "scale_rows",
    "transpose",
    "reshape",
    "sum_all",
    "softplus",
    "silu",
    "rmsnorm",
    "softmax",
    "keep_topk",
    "topk_indices",
    "gather_rows",
    "scatter_rows",
    "gather_pairs",
    "embedding_lookup",
    "slice_cols",
    "concat_cols",
    "apply_rope",
    "causal_attention",
    "cross_entropy",
    "per_token_cross_entropy",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


_FLOAT_DTYPES = (np.float32, np.float64)
_node_counter = itertools.count()


class Tensor:
    """A dense array plus an optional gradient buffer of the same shape.

    Tensors are immutable after creation except for `grad`, which `backward`
    accumulates into; call `zero_grad` between steps. Only float32/float64
    values are supported, and binary ops refuse to mix the two.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn", "_nid")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, order="C")
        if dtype is not None:
            arr = arr.astype(dtype, order="C")
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32, order="C")
        self.values: np.ndarray = arr if arr.flags["C_CONTIGUOUS"] or arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._nid = next(_node_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar for the common binary ops; the module functions are the API.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def tensor(values, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def _record(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    out._nid = next(_node_counter)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into `t.grad` for every tensor reachable from `loss`.

    Repeated calls on the same graph add on top of existing grads. Nodes are
    processed in descending creation order, which is a topological order of
    the tape by construction, so each backward closure runs exactly once.
    """
    if loss.values.ndim != 0:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")

    reachable: dict[int, Tensor] = {id(loss): loss}
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if id(p) not in reachable:
                reachable[id(p)] = p
                stack.append(p)

    flows: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for t in sorted(reachable.values(), key=lambda t: t._nid, reverse=True):
        g = flows.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t._backward_fn is None:
            continue
        for parent, pg in zip(t._parents, t._backward_fn(g)):
            if pg is None or not (parent.requires_grad or parent._parents):
                continue
            acc = flows.get(id(parent))
            flows[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_same_dtype(a, b, "matmul")
    m, k = a.shape
    n = b.shape[1]
    if m <= 16 and k <= 16 and n <= 16:
        # sequential accumulation over k: bit-identical to a naive triple loop,
        # which BLAS (reassociated sums) is not
        out = np.einsum("ik,kj->ij", a.values, b.values)
    else:
        out = a.values @ b.values

    def bw(g):
        return g @ b.values.T, a.values.T @ g

    return _record(out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    _check_same_dtype(a, b, "add")
    return _record(a.values + b.values, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    _check_same_dtype(a, b, "mul")
    return _record(a.values * b.values, (a, b), lambda g: (g * b.values, g * a.values))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _record(x.values * c, (x,), lambda g: (g * c,))


def div_scale(x: Tensor, c: float) -> Tensor:
    """x / c with true division; not the same rounding as scale(x, 1/c)."""
    c = x.dtype.type(c)
    return _record(x.values / c, (x,), lambda g: (g / c,))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of `x` by `s[i]`."""
    if x.values.ndim != 2 or s.values.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows: shapes {x.shape} and {s.shape}")
    _check_same_dtype(x, s, "scale_rows")
    col = s.values[:, None]

    def bw(g):
        return g * col, np.sum(g * x.values, axis=1)

    return _record(x.values * col, (x, s), bw)


def transpose(x: Tensor) -> Tensor:
    if x.values.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _record(np.ascontiguousarray(x.values.T), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        return (np.full_like(x.values, g),)

    return _record(np.asarray(x.values.sum(), dtype=x.dtype), (x,), bw)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form avoids exp overflow on both tails
    return 0.5 * (1.0 + np.tanh(0.5 * v)).astype(v.dtype)


def softplus(x: Tensor) -> Tensor:
    v = x.values
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))

    def bw(g):
        return (g * _sigmoid(v),)

    return _record(out.astype(x.dtype), (x,), bw)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.values)
    out = x.values * s

    def bw(g):
        return (g * (s * (1.0 + x.values * (1.0 - s))),)

    return _record(out, (x,), bw)


def rmsnorm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by `gamma`.

    `gamma` is either a scalar (shape ()) or a per-feature vector matching
    the last axis. `eps` keeps the zero vector a fixed point; eps=0 is
    allowed for exact hand comparisons on nonzero inputs.
    """
    if eps < 0:
        raise ValueError("rmsnorm: eps must be non-negative")
    v = x.values
    n = v.shape[-1]
    if gamma.values.ndim not in (0, 1) or (gamma.values.ndim == 1 and gamma.shape[0] != n):
        raise ShapeError(f"rmsnorm: gamma shape {gamma.shape} does not fit last axis {n}")
    _check_same_dtype(x, gamma, "rmsnorm")
    ms = np.mean(np.square(v), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + x.dtype.type(eps))
    out = gamma.values * (v * r)

    def bw(g):
        gg = g * gamma.values
        dot = np.sum(gg * v, axis=-1, keepdims=True)
        gx = gg * r - v * (r**3 / n) * dot
        ggamma = g * (v * r)
        if gamma.values.ndim == 0:
            ggamma = np.asarray(ggamma.sum(), dtype=x.dtype)
        else:
            ggamma = ggamma.reshape(-1, n).sum(axis=0)
        return gx, ggamma

    return _record(out, (x, gamma), bw)


# ---------------------------------------------------------------------------
# routing primitives


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; -inf entries yield exactly 0."""
    v = x.values
    if np.isneginf(v).all(axis=-1).any():
        raise ValueError("softmax: empty support (a row is entirely masked)")
    m = np.max(v, axis=-1, keepdims=True)
    e = np.exp(v - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record(out, (x,), bw)


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the k largest entries, in rank order.

    Ties break toward the lowest index (stable sort on negated values), the
    same rule `keep_topk` uses.
    """
    v = np.atleast_2d(values)
    if not 1 <= k <= v.shape[-1]:
        raise ValueError(f"topk: k={k} outside 1..{v.shape[-1]}")
    return np.argsort(-v, axis=-1, kind="stable")[:, :k]


def keep_topk(x: Tensor, k: int) -> Tensor:
    """Keep each row's k largest entries, set the rest to -inf.

    The selection pattern is treated as constant during backward: retained
    positions pass gradient through unchanged, masked positions get zero.
    """
    idx = topk_indices(x.values, k)
    mask2 = np.zeros_like(np.atleast_2d(x.values), dtype=bool)
    np.put_along_axis(mask2, idx, True, axis=-1)
    mask = mask2.reshape(x.shape)
    out = np.where(mask, x.values, x.dtype.type(-np.inf))

    def bw(g):
        return (np.where(mask, g, 0),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# gather / scatter


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(x.values[idx], (x,), bw)


def scatter_rows(rows: Tensor, idx: np.ndarray, num_rows: int) -> Tensor:
    """Adjoint of gather_rows: place (and sum) `rows` at positions `idx` in a zero matrix."""
    idx = np.asarray(idx, dtype=np.int64)
    if rows.values.ndim != 2 or len(idx) != rows.shape[0]:
        raise ShapeError(f"scatter_rows: {rows.shape} rows vs {len(idx)} indices")
    out = np.zeros((num_rows, rows.shape[1]), dtype=rows.dtype)
    np.add.at(out, idx, rows.values)
    return _record(out, (rows,), lambda g: (g[idx],))


def gather_pairs(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Vector of x[rows[i], cols[i]]; scatter-adds back on the way down."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _record(x.values[rows, cols], (x,), bw)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ValueError(f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    return gather_rows(table, ids.reshape(-1))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        gx = np.zeros_like(x.values)
        gx[:, start:stop] = g
        return (gx,)

    return _record(np.ascontiguousarray(x.values[:, start:stop]), (x,), bw)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = tuple(parts)
    widths = [p.shape[1] for p in parts]
    out = np.concatenate([p.values for p in parts], axis=1)

    def bw(g):
        return tuple(np.split(g, np.cumsum(widths)[:-1], axis=1))

    return _record(out, parts, bw)


# ---------------------------------------------------------------------------
# attention helpers


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position mixing on half-split features.

    x is [rows, d] with even d; cos/sin are [rows, d/2] constants. With
    x = [x1 | x2], the output is [x1*cos - x2*sin | x1*sin + x2*cos], a
    per-row orthogonal map, so the backward applies the transposed rotation.
    """
    d = x.shape[1]
    if d % 2 != 0 or cos.shape != (x.shape[0], d // 2) or sin.shape != cos.shape:
        raise ShapeError(f"apply_rope: x {x.shape}, cos {cos.shape}, sin {sin.shape}")
    h = d // 2
    x1, x2 = x.values[:, :h], x.values[:, h:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=1)

    def bw(g):
        g1, g2 = g[:, :h], g[:, h:]
        return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=1),)

    return _record(out.astype(x.dtype), (x,), bw)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, seq_len: int) -> Tensor:
    """Scaled dot-product attention with a causal mask, per seq_len-row block.

    q/k/v are [B*seq_len, head_dim]; each block of seq_len consecutive rows
    is one independent sequence. Position i attends to positions j <= i.
    """
    rows, hd = q.shape
    if rows % seq_len != 0 or k.shape != q.shape or v.shape != q.shape:
        raise ShapeError(f"causal_attention: q {q.shape}, k {k.shape}, v {v.shape}, seq_len {seq_len}")
    _check_same_dtype(q, k, "causal_attention")
    _check_same_dtype(q, v, "causal_attention")
    nblocks = rows // seq_len
    inv = q.dtype.type(1.0 / math.sqrt(hd))
    neg = q.dtype.type(-np.inf)
    upper = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)

    out = np.empty_like(v.values)
    attn: list[np.ndarray] = []
    for b in range(nblocks):
        s = slice(b * seq_len, (b + 1) * seq_len)
        scores = (q.values[s] @ k.values[s].T) * inv
        scores[upper] = neg
        m = scores.max(axis=1, keepdims=True)
        e = np.exp(scores - m)
        a = e / e.sum(axis=1, keepdims=True)
        attn.append(a)
        out[s] = a @ v.values[s]

    def bw(g):
        gq = np.empty_like(q.values)
        gk = np.empty_like(k.values)
        gv = np.empty_like(v.values)
        for b in range(nblocks):
            s = slice(b * seq_len, (b + 1) * seq_len)
            a = attn[b]
            gv[s] = a.T @ g[s]
            da = g[s] @ v.values[s].T
            ds = a * (da - np.sum(da * a, axis=1, keepdims=True))
            gq[s] = (ds @ k.values[s]) * inv
            gk[s] = (ds.T @ q.values[s]) * inv
        return gq, gk, gv

    return _record(out, (q, k, v), bw)


# ---------------------------------------------------------------------------
# losses


def _log_softmax(v: np.ndarray) -> np.ndarray:
    m = np.max(v, axis=-1, keepdims=True)
    z = v - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def per_token_cross_entropy(logits_values: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Plain-numpy per-position negative log-likelihood (no graph recording)."""
    targets = np.asarray(targets).reshape(-1)
    ls = _log_softmax(np.asarray(logits_values))
    return -ls[np.arange(len(targets)), targets]


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of `targets` under row-wise softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    t = logits.shape[0]
    if len(targets) != t:
        raise ShapeError(f"cross_entropy: {t} rows vs {len(targets)} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ValueError("cross_entropy: target id out of range")
    ls = _log_softmax(logits.values)
    loss = np.asarray(-ls[np.arange(t), targets].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(ls)
        p[np.arange(t), targets] -= 1.0
        return (p * (g / logits.dtype.type(t)),)

    return _record(loss, (logits,), bw)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar f at x, coordinate by coordinate.

    Evaluates in float64 regardless of x's dtype; the result carries x's shape.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    base = x.values.astype(np.float64)
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(Tensor(base.copy(), dtype=np.float64)))
        flat[i] = orig - h
        dn = float(f(Tensor(base.copy(), dtype=np.float64)))
        flat[i] = orig
        gflat[i] = (up - dn) / (2.0 * h)
    return Tensor(g, dtype=np.float64)
