"""Mid-term stream encoder.

Each block runs full multi-head self-attention, shadowed by a lightweight
indexer (few narrow heads plus a positive per-query head-mix).  The indexer
is distilled toward the head-summed main scores and, once trained, drives
top-K sparse attention so long windows stop paying the quadratic softmax.
The indexer branch reads a detached copy of the stream, so it can never
influence main-path outputs or gradients.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .layers import FeedForward, Linear, Module, MultiHeadAttention, RMSNorm, split_heads
from .tensor import Tensor

# softplus(UNIT_MIX_BIAS) == 1.0 in fp64, so a zero-weight mix projection
# starts (and can be pinned) at plain head averaging
UNIT_MIX_BIAS = float(np.log(np.expm1(1.0)))


class IndexerHead(Module):
    """Low-width Q/K heads plus a positive per-query head-mix."""

    def __init__(self, rng: np.random.Generator, d_h: int,
                 n_heads: int, d_head: int):
        self.wq = Linear(rng, d_h, n_heads * d_head)
        self.wk = Linear(rng, d_h, n_heads * d_head)
        self.mix = Linear(rng, d_h, n_heads, bias=True)
        self.mix.weight.data[:] = 0.0
        self.mix.bias.data[:] = UNIT_MIX_BIAS
        self.n_heads = n_heads
        self.d_head = d_head

    def scores(self, h_det: Tensor) -> Tensor:
        """(B, L, d_h) detached input -> mixed scores (B, L, L)."""
        b, length, _ = h_det.shape
        q = split_heads(self.wq(h_det), self.n_heads)       # (B, Hi, L, di)
        k = split_heads(self.wk(h_det), self.n_heads)
        d = T.softplus(self.mix(h_det))                     # (B, L, Hi)
        d = T.reshape(T.transpose(d, (0, 2, 1)), (b, self.n_heads, length, 1))
        # mix folded into the queries, one fewer O(L^2) pass; with a unit mix
        # and copied main weights this still reproduces the head-sum target
        # bitwise (mul by exactly 1.0 is an identity, and the sum over the
        # head axis is the same reduction the target uses)
        s = T.scale(T.matmul(T.mul(q, d), T.transpose(k, (0, 1, 3, 2))),
                    1.0 / np.sqrt(self.d_head))             # (B, Hi, L, L)
        return T.sum_(s, axis=1)


class MidtermBlock(Module):
    def __init__(self, rng: np.random.Generator, d_h: int, n_heads: int,
                 idx_heads: int, idx_width: int):
        self.attn = MultiHeadAttention(rng, d_h, n_heads)
        self.norm = RMSNorm(d_h)
        self.ffn = FeedForward(rng, d_h)
        self.indexer = IndexerHead(rng, d_h, idx_heads, idx_width)
        self.n_heads = n_heads

    def dense(self, x: Tensor, mask: np.ndarray, want_scores: bool):
        """-> (out, head-sum main scores or None, indexer scores or None)."""
        attn_out = self.attn(x, x, key_mask=mask, capture_scores=want_scores)
        s_mid = s_idx = None
        if want_scores:
            # detached head-sum target; same np.sum the mix reduction uses
            s_mid = Tensor(self.attn.last_scores.data.sum(axis=1))
            self.attn.last_scores = None
            s_idx = self.indexer.scores(x.detach())
        x = T.add(x, attn_out)
        return T.add(x, self.ffn(self.norm(x))), s_mid, s_idx

    def sparse(self, x: Tensor, mask: np.ndarray, k: int,
               want_scores: bool = False):
        """Main attention restricted per query to the top-k indexer keys.

        Returns (out, aux) where aux is None or (selected head-sum main
        scores, selected indexer scores, selection validity mask), each
        shaped (B, L, k).
        """
        if k <= 0:
            raise ConfigError(f"top-k must be positive, got {k}")
        b, length, d = x.shape
        dk = d // self.n_heads
        k = min(k, length)

        s_full = self.indexer.scores(x.detach())            # (B, L, L)
        if mask.all():
            idx = T.topk_set_indices(s_full.data, k)        # (B, L, k)
            sel_mask = np.ones((b, length, k), dtype=mask.dtype)
        else:
            ranked = np.where(mask[:, None, :] > 0, s_full.data, -np.inf)
            idx = T.topk_set_indices(ranked, k)
            sel_mask = np.take_along_axis(
                np.broadcast_to(mask[:, None, :], (b, length, length)), idx,
                axis=-1)

        q = split_heads(self.attn.wq(x), self.n_heads)      # (B, H, L, dk)
        q = T.reshape(T.transpose(q, (0, 2, 1, 3)), (b, length, self.n_heads, 1, dk))
        k_sel = T.gather_batch_rows(self.attn.wk(x), idx)   # (B, L, k, d)
        v_sel = T.gather_batch_rows(self.attn.wv(x), idx)
        k_sel = T.transpose(T.reshape(k_sel, (b, length, k, self.n_heads, dk)),
                            (0, 1, 3, 4, 2))                # (B, L, H, dk, k)
        v_sel = T.transpose(T.reshape(v_sel, (b, length, k, self.n_heads, dk)),
                            (0, 1, 3, 2, 4))                # (B, L, H, k, dk)

        scores = T.scale(T.matmul(q, k_sel), 1.0 / np.sqrt(dk))  # (B, L, H, 1, k)
        probs = T.masked_softmax(scores, sel_mask[:, :, None, None, :])
        mixed = T.reshape(T.matmul(probs, v_sel), (b, length, d))
        x = T.add(x, self.attn.wo(mixed))
        out = T.add(x, self.ffn(self.norm(x)))

        aux = None
        if want_scores:
            s_mid_sel = Tensor(np.squeeze(scores.data, axis=3).sum(axis=2))
            s_idx_sel = T.gather_batch_cols(s_full, idx)
            aux = (s_mid_sel, s_idx_sel, sel_mask)
        return out, aux


class MidtermEncoder(Module):
    """Stack of MidtermBlocks; event order is carried by the time-delta
    feature, so no extra position table."""

    def __init__(self, rng: np.random.Generator, d_h: int, n_heads: int,
                 n_layers: int, idx_heads: int, idx_width: int):
        self.blocks = [MidtermBlock(rng, d_h, n_heads, idx_heads, idx_width)
                       for _ in range(n_layers)]

    def dense_forward(self, x: Tensor, mask: np.ndarray,
                      want_scores: bool = False):
        """-> (H_out, [S_mid per block], [S_idx per block])."""
        mids, idxs = [], []
        for blk in self.blocks:
            x, s_mid, s_idx = blk.dense(x, mask, want_scores)
            if want_scores:
                mids.append(s_mid)
                idxs.append(s_idx)
        return T.mul(x, Tensor(mask[..., None])), mids, idxs

    def sparse_forward(self, x: Tensor, mask: np.ndarray, k: int,
                       want_scores: bool = False):
        """-> (H_out, [per-block aux]) with aux as in MidtermBlock.sparse."""
        auxes = []
        for blk in self.blocks:
            x, aux = blk.sparse(x, mask, k, want_scores)
            if want_scores:
                auxes.append(aux)
        return T.mul(x, Tensor(mask[..., None])), auxes


def kl_rows(target_scores: Tensor, pred_scores: Tensor,
            key_mask: np.ndarray | None) -> tuple[Tensor, np.ndarray]:
    """Per-row KL(softmax(target) || softmax(pred)) over the last axis.

    Target side is treated as a constant.  Returns (kl Tensor of the leading
    shape, same as ndarray entropy term already folded in).
    """
    p = _row_softmax(target_scores.data, key_mask)
    tiny = np.finfo(p.dtype).tiny        # fp32-safe floor; 1e-300 would underflow
    ent = np.where(p > 0.0, p * np.log(np.maximum(p, tiny)), 0.0).sum(axis=-1)
    logq = T.masked_log_softmax(pred_scores, key_mask)
    cross = T.sum_(T.mul(logq, Tensor(p)), axis=-1)
    return T.add(T.scale(cross, -1.0), Tensor(ent)), ent


def indexer_loss(s_mid: list[Tensor], s_idx: list[Tensor],
                 mask: np.ndarray,
                 key_masks: list[np.ndarray] | None = None) -> Tensor:
    """Sum over blocks of KL(softmax(head-sum) || softmax(indexer)), averaged
    over valid queries.  The target side carries no gradient.

    mask: (B, L) query validity.  key_masks: per-block key validity
    broadcastable to the score shape; defaults to the query mask applied on
    the key axis (square self-attention case).
    """
    q_mask = np.asarray(mask)
    denom = max(float(q_mask.sum()), 1.0)
    total = None
    for i, (tgt, pred) in enumerate(zip(s_mid, s_idx)):
        km = key_masks[i] if key_masks is not None else q_mask[:, None, :]
        kl, _ = kl_rows(tgt, pred, km)
        term = T.scale(T.sum_(T.mul(kl, Tensor(q_mask))), 1.0 / denom)
        total = term if total is None else T.add(total, term)
    return total


def _row_softmax(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        x = np.where(np.broadcast_to(mask, x.shape) > 0, x, -np.inf)
    with np.errstate(invalid="ignore"):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.where(np.isfinite(shifted), np.exp(shifted), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    return np.divide(e, z, out=np.zeros_like(e), where=z > 0)


def dense_forward(enc: MidtermEncoder, x: Tensor, mask: np.ndarray):
    return enc.dense_forward(x, mask, want_scores=True)


def sparse_forward(enc: MidtermEncoder, x: Tensor, mask: np.ndarray, k: int) -> Tensor:
    out, _ = enc.sparse_forward(x, mask, k)
    return out
