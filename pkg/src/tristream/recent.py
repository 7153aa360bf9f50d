"""Recent-stream encoder: embedded events plus learned absolute positions,
then a stack of bidirectional self-attention blocks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import FeedForward, Module, MultiHeadAttention, RMSNorm
from .tensor import Tensor


class EncoderBlock(Module):
    """x' = x + Attn(x); out = x' + FFN(RMSN(x'))."""

    def __init__(self, rng: np.random.Generator, d_h: int, n_heads: int):
        self.attn = MultiHeadAttention(rng, d_h, n_heads)
        self.norm = RMSNorm(d_h)
        self.ffn = FeedForward(rng, d_h)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = T.add(x, self.attn(x, x, key_mask=mask))
        return T.add(x, self.ffn(self.norm(x)))


class SelfAttnStack(Module):
    """Bidirectional encoder over a fixed window; position table rows are
    addressed right-aligned so the newest event always gets the last row."""

    def __init__(self, rng: np.random.Generator, d_h: int, n_heads: int,
                 n_layers: int, max_len: int):
        self.pos = Tensor(rng.normal(0.0, 0.05, size=(max_len, d_h)),
                          requires_grad=True)
        self.blocks = [EncoderBlock(rng, d_h, n_heads) for _ in range(n_layers)]
        self.max_len = max_len

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        length = x.data.shape[-2]
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds window {self.max_len}")
        idx = np.arange(self.max_len - length, self.max_len)
        pos = T.gather_rows(self.pos, idx)
        x = T.add(x, T.mul(pos, Tensor(mask[..., None])))
        for blk in self.blocks:
            x = blk(x, mask)
        # keep padded rows exactly zero for downstream consumers
        return T.mul(x, Tensor(mask[..., None]))


def encode_recent(stack: SelfAttnStack, h: Tensor, mask: np.ndarray) -> Tensor:
    return stack(h, mask)
