"""Reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray and remembers the op that produced it (parent
tensors plus a local backward rule).  backward() walks the recorded ops in
reverse topological order and accumulates chain-rule gradients into .grad.
Float width is a process-global switch: float64 for verification, float32
for training.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class GradError(RuntimeError):
    """Backward called on something that is not a differentiable scalar."""


# ---- global precision / recording switches ----------------------------------

_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(name: str) -> None:
    """name: 'float32'/'fp32' or 'float64'/'fp64'. Affects newly created tensors."""
    global _DTYPE
    table = {"float32": np.float32, "fp32": np.float32,
             "float64": np.float64, "fp64": np.float64}
    if name not in table:
        raise ValueError(f"unknown dtype {name!r}, want fp32 or fp64")
    _DTYPE = table[name]


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


@contextlib.contextmanager
def no_grad():
    """Disable op recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def use_dtype(name: str):
    """Temporarily switch the global float width."""
    global _DTYPE
    prev = _DTYPE
    set_default_dtype(name)
    try:
        yield
    finally:
        _DTYPE = prev


# ---- tensor ------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None

    # -- plumbing --

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no history: gradients do not flow past this point."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators --

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("tensor/tensor division not supported; use explicit ops")
        return scale(self, 1.0 / float(c))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes: Sequence[int] | None = None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    # -- backward --

    def backward(self) -> None:
        """Reverse sweep from a scalar. Non-scalar or recording-free root errors."""
        if self.data.ndim != 0:
            raise GradError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradError("backward() on a tensor with no recorded graph")
        order = _toposort(self)
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS; order is deterministic (parent tuples are ordered), which
    # keeps gradient accumulation order stable run to run.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...],
          bwd: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (reverses numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def div(a, b) -> Tensor:
    """Elementwise a / b with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from None

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * data / b.data, b.shape))

    return _make(data, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def bwd(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * data)

    return _make(data, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def bwd(g):
        _accum(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(data, (a,), bwd)


def sigmoid(a) -> Tensor:
    """1 / (1 + e^-x)."""
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), bwd)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow."""
    a = _as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def bwd(g):
        _accum(a, g / (1.0 + np.exp(-a.data)))

    return _make(data, (a,), bwd)


def elu_plus_one(a) -> Tensor:
    """elu(x) + 1: positive feature map for linearized attention."""
    a = _as_tensor(a)
    neg = a.data < 0
    data = np.where(neg, np.exp(np.minimum(a.data, 0.0)), a.data + 1.0)

    def bwd(g):
        _accum(a, g * np.where(neg, data, 1.0))

    return _make(data, (a,), bwd)


# ---- shape ops ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product, numpy semantics on the leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(data, (a, b), bwd)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.shape

    def bwd(g):
        _accum(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(data, tuple(ts), bwd)


def split(a, sections: int, axis: int = 0) -> list[Tensor]:
    """Split into equal parts along axis (size must divide evenly)."""
    a = _as_tensor(a)
    if a.shape[axis] % sections:
        raise ShapeError(f"split: axis {axis} of {a.shape} not divisible by {sections}")
    step = a.shape[axis] // sections
    return [slice_axis(a, i * step, (i + 1) * step, axis) for i in range(sections)]


def slice_axis(a, start: int, stop: int, axis: int = 0) -> Tensor:
    a = _as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bwd(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[sl] += g

    return _make(a.data[sl], (a,), bwd)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), bwd)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# ---- normalization / attention kernels ---------------------------------------


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    """x * gain / rms(x) over the last axis.  gain has shape (width,)."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    d = x.shape[-1]
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    data = x.data * r * gain.data

    def bwd(g):
        gg = g * gain.data
        # d/dx [x_i * r] with r = (mean(x^2)+eps)^-1/2
        dot = np.sum(gg * x.data, axis=-1, keepdims=True)
        _accum(x, gg * r - x.data * (r ** 3) * dot / d)
        _accum(gain, _unbroadcast(g * x.data * r, gain.shape))

    return _make(data, (x, gain), bwd)


_MASK_SENTINEL = -1e30  # finite stand-in for -inf; exp() of it underflows to 0


def masked_softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; mask (broadcastable, 1=valid) zeroes out
    invalid slots.  Rows with no valid slot come back all-zero."""
    x = _as_tensor(x)
    if mask is None:
        m = None
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=x.data.dtype), x.shape)
        masked = np.where(m > 0, x.data, _MASK_SENTINEL)
        shifted = masked - masked.max(axis=-1, keepdims=True)
        e = np.exp(shifted) * m
    denom = e.sum(axis=-1, keepdims=True)
    p = e / np.maximum(denom, np.finfo(x.data.dtype).tiny)

    def bwd(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        _accum(x, p * (g - dot))

    return _make(p, (x,), bwd)


def softmax_rows(x) -> Tensor:
    """Row softmax of a matrix (each row sums to 1)."""
    return masked_softmax(x, None)


def masked_log_softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Log-softmax over the last axis; invalid slots get a large negative value."""
    x = _as_tensor(x)
    if mask is None:
        m = np.ones_like(x.data)
        masked = x.data
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=x.data.dtype), x.shape)
        masked = np.where(m > 0, x.data, _MASK_SENTINEL)
    mx = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - mx) * m
    lse = np.log(np.maximum(e.sum(axis=-1, keepdims=True), np.finfo(x.data.dtype).tiny)) + mx
    data = np.where(m > 0, x.data - lse, _MASK_SENTINEL)

    def bwd(g):
        p = np.exp(data) * m
        gsum = np.sum(g * m, axis=-1, keepdims=True)
        _accum(x, (g - p * gsum) * m)

    return _make(data, (x,), bwd)


# ---- gather ------------------------------------------------------------------


def gather_rows(table, idx: np.ndarray) -> Tensor:
    """table (n, w) indexed by an integer array -> shape idx.shape + (w,).
    Gradient scatters back into the table; none flows through idx."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows wants a 2-D table, got {table.shape}")
    idx = np.asarray(idx)
    data = table.data[idx]

    def bwd(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))

    return _make(data, (table,), bwd)


def gather_cols(x, idx: np.ndarray) -> Tensor:
    """Pick one column per row: x (n, m), idx (n,) -> (n,)."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    rows = np.arange(x.shape[0])
    data = x.data[rows, idx]

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, (rows, idx), g)

    return _make(data, (x,), bwd)


def gather_batch_rows(x, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: x (B, L, w), idx (B, q, k) -> (B, q, k, w).
    Gradient scatter-adds back; duplicate indices accumulate."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.ndim != 3 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_batch_rows: x {x.shape}, idx {idx.shape}")
    b_ix = np.arange(x.shape[0])[:, None, None]
    data = x.data[b_ix, idx]

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, (b_ix, idx), g)

    return _make(data, (x,), bwd)


def gather_batch_cols(x, idx: np.ndarray) -> Tensor:
    """Per-row column gather over the last axis: x (..., n), idx (..., k)
    with matching leading dims -> (..., k)."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if idx.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"gather_batch_cols: x {x.shape}, idx {idx.shape}")
    data = np.take_along_axis(x.data, idx, axis=-1)
    grids = np.ix_(*(np.arange(n) for n in x.shape[:-1]))

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        lead = tuple(a[..., None] for a in grids)  # broadcasts against idx
        np.add.at(x.grad, lead + (idx,), g)

    return _make(data, (x,), bwd)


# ---- top-k (plain numpy in/out; indices carry no gradient) --------------------


def topk_indices(x: np.ndarray, k: int, axis: int = -1) -> np.ndarray:
    """Indices of the k largest values, ordered by value desc then index asc."""
    x = np.asarray(x)
    if k > x.shape[axis]:
        raise ShapeError(f"topk: k={k} exceeds axis size {x.shape[axis]}")
    order = np.argsort(-x, axis=axis, kind="stable")
    return np.take(order, np.arange(k), axis=axis)


def topk_set_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Top-k over the last axis as an index set, ascending per row, O(n).

    Same membership rule as topk_indices (value desc, ties to the lowest
    index) but skips the full sort; used on large score matrices where only
    the selected set matters.  argpartition picks an arbitrary subset of a
    tied boundary value, so rows where that value straddles the cut are
    re-resolved explicitly; with continuous scores that path never runs.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if k > n:
        raise ShapeError(f"topk: k={k} exceeds axis size {n}")
    if k == n:
        return np.broadcast_to(np.arange(n), x.shape).copy()
    flat = x.reshape(-1, n)
    idx = np.argpartition(flat, n - k, axis=-1)[:, n - k:]
    vals = np.take_along_axis(flat, idx, axis=-1)
    kth = vals.min(axis=-1, keepdims=True)
    picked_at_kth = (vals == kth).sum(axis=-1)
    total_at_kth = (flat == kth).sum(axis=-1)
    for r in np.flatnonzero(total_at_kth > picked_at_kth):
        row = flat[r]
        above = np.flatnonzero(row > kth[r, 0])
        ties = np.flatnonzero(row == kth[r, 0])[: k - len(above)]
        idx[r] = np.concatenate([above, ties])
    idx.sort(axis=-1)
    return idx.reshape(x.shape[:-1] + (k,))


# ---- losses ------------------------------------------------------------------


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row logits."""
    lsm = masked_log_softmax(logits)
    picked = gather_cols(lsm, np.asarray(targets))
    return scale(sum_(picked), -1.0 / picked.size)


def kl_div_rows(p, q) -> Tensor:
    """Row-wise KL(p || q) for strictly positive distributions -> (rows,)."""
    p, q = _as_tensor(p), _as_tensor(q)
    return sum_(mul(p, add(log(p), scale(log(q), -1.0))), axis=-1)


def l2_loss(a, b) -> Tensor:
    """Sum of squared differences."""
    d = _as_tensor(a) - _as_tensor(b)
    return sum_(mul(d, d))
