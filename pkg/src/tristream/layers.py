"""Parameter containers and the shared attention/FFN building blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    named_parameters() walks public attributes in insertion order (tensors,
    sub-modules, and lists of either), so parameter naming is deterministic.
    Attributes starting with '_' are ignored, which is how shared references
    (e.g. an embedder reused by several encoders) stay out of duplicate
    namespaces.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix: str, seen: set[int]) -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk_value(f"{prefix}{name}", val, seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _walk_value(name: str, val, seen: set[int]) -> Iterator[tuple[str, Tensor]]:
    if isinstance(val, Tensor):
        if val.requires_grad and id(val) not in seen:
            seen.add(id(val))
            yield name, val
    elif isinstance(val, Module):
        if id(val) not in seen:
            seen.add(id(val))
            yield from val._walk(name + ".", seen)
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk_value(f"{name}.{i}", item, seen)
    elif isinstance(val, dict):
        for key, item in val.items():
            yield from _walk_value(f"{name}.{key}", item, seen)


def init_param(rng: np.random.Generator, *shape: int, scale: float | None = None) -> Tensor:
    """Gaussian init; default scale 1/sqrt(fan_in)."""
    if scale is None:
        scale = 1.0 / np.sqrt(shape[-2] if len(shape) > 1 else shape[-1])
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = False):
        self.weight = init_param(rng, n_in, n_out)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class RMSNorm(Module):
    def __init__(self, width: int, eps: float = 1e-6):
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.rms_norm(x, self.gain, self._eps)


class FeedForward(Module):
    """SiLU-gated feed-forward: down(silu(gate(x)) * up(x))."""

    def __init__(self, rng: np.random.Generator, width: int, mult: int = 4):
        hidden = width * mult
        self.gate = Linear(rng, width, hidden)
        self.up = Linear(rng, width, hidden)
        self.down = Linear(rng, hidden, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.mul(T.silu(self.gate(x)), self.up(x)))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(B, L, d) -> (B, H, L, d/H)."""
    b, l, d = x.shape
    return T.transpose(T.reshape(x, (b, l, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, H, L, dk) -> (B, L, H*dk)."""
    b, h, l, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, l, h * dk))


class MultiHeadAttention(Module):
    """Standard scaled-dot attention with optional key and pairwise masks.

    Returns the mixed output; the pre-softmax per-head scores are kept on
    .last_scores when capture_scores is requested (used for distillation).
    """

    def __init__(self, rng: np.random.Generator, width: int, n_heads: int):
        if width % n_heads:
            raise T.ShapeError(f"width {width} not divisible by {n_heads} heads")
        self.wq = Linear(rng, width, width)
        self.wk = Linear(rng, width, width)
        self.wv = Linear(rng, width, width)
        self.wo = Linear(rng, width, width)
        self.n_heads = n_heads
        self.last_scores: Tensor | None = None
        self.last_probs: np.ndarray | None = None

    def __call__(self, q_in: Tensor, kv_in: Tensor,
                 key_mask: np.ndarray | None = None,
                 pair_mask: np.ndarray | None = None,
                 capture_scores: bool = False,
                 capture_probs: bool = False) -> Tensor:
        b, lq, d = q_in.shape
        dk = d // self.n_heads
        q = split_heads(self.wq(q_in), self.n_heads)   # (B, H, Lq, dk)
        k = split_heads(self.wk(kv_in), self.n_heads)  # (B, H, Lk, dk)
        v = split_heads(self.wv(kv_in), self.n_heads)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
        mask = _combine_masks(key_mask, pair_mask, b, lq, k.shape[2])
        self.last_scores = scores if capture_scores else None
        probs = T.masked_softmax(scores, mask)         # (B, H, Lq, Lk)
        self.last_probs = probs.data.copy() if capture_probs else None
        mixed = T.matmul(probs, v)
        return self.wo(merge_heads(mixed))


def _combine_masks(key_mask: np.ndarray | None, pair_mask: np.ndarray | None,
                   b: int, lq: int, lk: int) -> np.ndarray | None:
    """key_mask (B, Lk) marks valid keys; pair_mask (Lq, Lk) adds structure
    (e.g. causal).  Output broadcasts to (B, H, Lq, Lk)."""
    out = None
    if key_mask is not None:
        out = np.asarray(key_mask).reshape(b, 1, 1, lk)
    if pair_mask is not None:
        pm = np.asarray(pair_mask).reshape(1, 1, lq, lk)
        out = pm if out is None else out * pm
    return out


def causal_mask(n: int) -> np.ndarray:
    """(n, n) lower-triangular validity mask."""
    return np.tril(np.ones((n, n)))
