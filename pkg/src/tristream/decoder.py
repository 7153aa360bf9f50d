"""Semantic-id decoder: causal self-attention over [BOS; code tokens], then
per-block fusion of the three stream memories, then per-level logits against
tied code tables (the same table embeds input codes and scores outputs).

Fusion modes:
  a - one cross-attention branch over a single pre-fused memory (the caller
      encodes the concatenated token streams with one shared encoder)
  b - one cross-attention branch over the three memories concatenated on the
      key axis
  c - three independent cross-attn+FFN paths, combined per token by learned
      softmax gates (zero-init: exact 1/3 each at start)
  d - the same three paths, parameter-free sum (default)
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import (FeedForward, Linear, Module, MultiHeadAttention, RMSNorm,
                     causal_mask)
from .tensor import Tensor

MODES = ("a", "b", "c", "d")
STREAMS = ("recent", "mid", "lifecycle")


class StreamPath(Module):
    """Cross-attention + FFN over one memory; empty (all-masked) memories
    reduce the whole path to residual + FFN."""

    def __init__(self, rng: np.random.Generator, d_h: int, n_heads: int):
        self.cross = MultiHeadAttention(rng, d_h, n_heads)
        self.norm = RMSNorm(d_h)
        self.ffn = FeedForward(rng, d_h)

    def __call__(self, x: Tensor, mem: Tensor, mem_mask: np.ndarray,
                 capture: bool = False) -> Tensor:
        x = T.add(x, self.cross(x, mem, key_mask=mem_mask,
                                capture_probs=capture))
        return T.add(x, self.ffn(self.norm(x)))

    def pre_ffn(self, x: Tensor, mem: Tensor, mem_mask: np.ndarray) -> Tensor:
        return T.add(x, self.cross(x, mem, key_mask=mem_mask))


class DecoderBlock(Module):
    def __init__(self, rng: np.random.Generator, d_h: int, n_heads: int,
                 mode: str):
        if mode not in MODES:
            raise ConfigError(f"unknown fusion mode {mode!r}; want one of {MODES}")
        self.self_attn = MultiHeadAttention(rng, d_h, n_heads)
        self.mode = mode
        if mode in ("a", "b"):
            self.path = StreamPath(rng, d_h, n_heads)
        else:
            self.paths = [StreamPath(rng, d_h, n_heads) for _ in STREAMS]
        if mode == "c":
            self.gate = Linear(rng, d_h, 1)
            self.gate.weight.data[:] = 0.0  # symmetric start: gates exactly 1/3
        self.last_probs: np.ndarray | None = None   # (B, H, P, Lk) modes a/b
        self.last_gates: np.ndarray | None = None   # (B, P, 3) mode c

    def __call__(self, x: Tensor, memories, capture: bool = False) -> Tensor:
        p = x.shape[-2]
        x = T.add(x, self.self_attn(x, x, pair_mask=causal_mask(p)))
        self.last_probs = self.last_gates = None

        if self.mode in ("a", "b"):
            mem, mask = memories[0] if self.mode == "a" else _concat_memories(memories)
            out = self.path(x, mem, mask, capture=capture)
            if capture:
                self.last_probs = self.path.cross.last_probs
                self.path.cross.last_probs = None
            return out

        parts = [path(x, mem, mask)
                 for path, (mem, mask) in zip(self.paths, memories)]
        if self.mode == "d":
            return T.add(T.add(parts[0], parts[1]), parts[2])

        primes = [path.pre_ffn(x, mem, mask)
                  for path, (mem, mask) in zip(self.paths, memories)]
        logits = T.concat([self.gate(pr) for pr in primes], axis=-1)
        gates = T.softmax_rows(logits)                       # (B, P, 3)
        if capture:
            self.last_gates = gates.data.copy()
        out = None
        for s in range(3):
            w = T.slice_axis(gates, s, s + 1, axis=-1)
            term = T.mul(parts[s], w)
            out = term if out is None else T.add(out, term)
        return out


def _concat_memories(memories) -> tuple[Tensor, np.ndarray]:
    mems = [m for m, _ in memories]
    masks = [k for _, k in memories]
    return T.concat(mems, axis=-2), np.concatenate(masks, axis=-1)


class Decoder(Module):
    """Stack of fusion blocks plus tied per-level code tables and BOS."""

    def __init__(self, rng: np.random.Generator, d_h: int, n_heads: int,
                 n_layers: int, level_sizes: list[int], mode: str = "d",
                 init_tables: list[np.ndarray] | None = None):
        if mode not in MODES:
            raise ConfigError(f"unknown fusion mode {mode!r}; want one of {MODES}")
        self.bos = Tensor(rng.normal(0.0, 0.05, size=(d_h,)), requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 0.05, size=(len(level_sizes) + 1, d_h)),
                          requires_grad=True)
        if init_tables is not None:
            if [t.shape for t in init_tables] != [(n, d_h) for n in level_sizes]:
                raise ConfigError("init table shapes do not match level sizes")
            self.tables = [Tensor(t.copy(), requires_grad=True) for t in init_tables]
        else:
            self.tables = [Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_h), size=(n, d_h)),
                                  requires_grad=True)
                           for n in level_sizes]
        self.blocks = [DecoderBlock(rng, d_h, n_heads, mode)
                       for _ in range(n_layers)]
        self.final_norm = RMSNorm(d_h)
        self.level_sizes = list(level_sizes)
        self.mode = mode
        self.d_h = d_h

    def embed_prefix(self, codes: np.ndarray) -> Tensor:
        """codes (B, p) with p < n_levels -> (B, p+1, d_h): BOS then the
        level-1..p code embeddings, plus positions."""
        b, p = codes.shape
        bos = T.mul(T.reshape(self.bos, (1, 1, self.d_h)), Tensor(np.ones((b, 1, 1))))
        parts = [bos]
        for level in range(p):
            emb = T.gather_rows(self.tables[level], codes[:, level])
            parts.append(T.reshape(emb, (b, 1, self.d_h)))
        x = T.concat(parts, axis=1)
        pos = T.slice_axis(self.pos, 0, p + 1)
        return T.add(x, T.reshape(pos, (1, p + 1, self.d_h)))

    def hidden(self, x: Tensor, memories, capture: bool = False) -> Tensor:
        for blk in self.blocks:
            x = blk(x, memories, capture=capture)
        return self.final_norm(x)

    def decode(self, codes: np.ndarray, memories,
               capture: bool = False) -> list[Tensor]:
        """Teacher-forced pass: codes (B, n_levels) -> per-level logits
        [(B, size_l)]; position p-1 scores level p."""
        b, d = codes.shape
        if d != len(self.level_sizes):
            raise ConfigError(f"expected {len(self.level_sizes)} code levels, got {d}")
        x = self.embed_prefix(codes)                        # full input, length d+1
        h = self.hidden(x, memories, capture=capture)
        out = []
        for level in range(d):
            hl = T.slice_axis(h, level, level + 1, axis=-2)
            hl = T.reshape(hl, (b, self.d_h))
            out.append(T.matmul(hl, T.transpose(self.tables[level], (1, 0))))
        return out

    def next_level_logits(self, prefix: np.ndarray, memories) -> Tensor:
        """prefix (B, p) codes for levels 1..p -> logits (B, size_{p+1})."""
        b, p = prefix.shape
        if p >= len(self.level_sizes):
            raise ConfigError("prefix already complete")
        x = self.embed_prefix(prefix)
        h = self.hidden(x, memories)
        hl = T.reshape(T.slice_axis(h, p, p + 1, axis=-2), (b, self.d_h))
        return T.matmul(hl, T.transpose(self.tables[p], (1, 0)))


def empty_memory(d_h: int, batch: int = 1) -> tuple[Tensor, np.ndarray]:
    """Placeholder a disabled or absent stream feeds to the decoder: one
    zero slot that is fully masked, so cross-attention contributes nothing."""
    return Tensor(np.zeros((batch, 1, d_h))), np.zeros((batch, 1))


def attention_mass_report(decoder: Decoder, codes: np.ndarray, memories,
                          spans: list[tuple[str, int, int]] | None = None) -> dict:
    """Per-stream allocation statistics for a teacher-forced batch.

    Modes a/b: fraction of cross-attention mass per memory span (spans for
    mode b are derived from the three memories; mode a needs them passed in).
    Mode c: mean gate per stream.  Mode d: structural 1/3 per stream (no
    learnable allocation exists).
    """
    mode = decoder.mode
    base = {"mode": mode, "per_block": []}
    if mode == "d":
        w = {s: 1.0 / 3.0 for s in STREAMS}
        base["per_stream"] = w
        base["per_block"] = [dict(w) for _ in decoder.blocks]
        return base

    with T.no_grad():
        decoder.decode(codes, memories, capture=True)

    if mode == "c":
        per_block = []
        for blk in decoder.blocks:
            g = blk.last_gates.mean(axis=(0, 1))             # (3,)
            per_block.append({s: float(g[i]) for i, s in enumerate(STREAMS)})
    else:
        if mode == "b":
            spans = []
            start = 0
            for name, (mem, _) in zip(STREAMS, memories):
                spans.append((name, start, start + mem.shape[-2]))
                start += mem.shape[-2]
        elif spans is None:
            raise ConfigError("mode a needs explicit stream spans")
        per_block = []
        for blk in decoder.blocks:
            probs = blk.last_probs                           # (B, H, P, Lk)
            total = max(probs.sum(), 1e-12)
            per_block.append({name: float(probs[..., a:b2].sum() / total)
                              for name, a, b2 in spans})
    agg = {s: float(np.mean([blk[s] for blk in per_block])) for s in STREAMS}
    return {"mode": mode, "per_stream": agg, "per_block": per_block}
