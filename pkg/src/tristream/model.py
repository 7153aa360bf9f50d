"""Three-stream model assembly.

A shared feature embedder feeds three per-stream encoders (recent self-attn,
mid-term with the learned indexer, lifecycle over offline-compressed slots);
the decoder cross-attends to all three and emits per-level code logits.
Stream outputs travel as (memory, mask) pairs so a disabled or empty stream
degrades to a fully-masked placeholder the decoder ignores exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import UserHistory, segment
from .decoder import Decoder, STREAMS, empty_memory
from .errors import ConfigError, DataError
from .features import FeatureEmbedder, pad_feature_batch
from .layers import Linear, Module
from .lifecycle import LifecycleEncoder, MemoryStore
from .midterm import MidtermEncoder
from .recent import SelfAttnStack
from .tensor import Tensor


class MidStream(Module):
    """Mid-term branch: indexer-equipped encoder plus an output projection."""

    def __init__(self, rng: np.random.Generator, d_h: int, n_heads: int,
                 n_layers: int, idx_heads: int, idx_width: int):
        self.encoder = MidtermEncoder(rng, d_h, n_heads, n_layers,
                                      idx_heads, idx_width)
        self.proj = Linear(rng, d_h, d_h)

    def __call__(self, x: Tensor, mask: np.ndarray, *, sparse: bool, k: int,
                 want_scores: bool):
        if sparse:
            h, aux = self.encoder.sparse_forward(x, mask, k,
                                                 want_scores=want_scores)
        else:
            h, mids, idxs = self.encoder.dense_forward(x, mask,
                                                       want_scores=want_scores)
            aux = (mids, idxs)
        out = T.mul(self.proj(h), Tensor(mask[:, :, None]))
        return out, aux


@dataclass
class Batch:
    """Model-ready arrays for one group of users (targets held out)."""
    user_ids: np.ndarray                 # (B,)
    rec_ids: dict[str, np.ndarray]       # each (B, R)
    rec_mask: np.ndarray                 # (B, R)
    mid_ids: dict[str, np.ndarray]       # each (B, L_m)
    mid_mask: np.ndarray                 # (B, L_m)
    life_vecs: np.ndarray                # (B, M, d_h)
    life_mask: np.ndarray                # (B, M)
    targets: np.ndarray                  # (B, depth) semantic codes
    target_vids: np.ndarray              # (B,) held-out item ids

    @property
    def size(self) -> int:
        return len(self.user_ids)


class TriStreamModel(Module):
    def __init__(self, rng: np.random.Generator, *, d_h: int, n_heads: int,
                 level_sizes: list[int], n_items: int, n_authors: int,
                 n_tags: int, recent_layers: int = 2, mid_layers: int = 2,
                 decoder_layers: int = 2, idx_heads: int = 2, idx_width: int = 32,
                 r_window: int = 64, l_window: int = 512, m_slots: int = 16,
                 mode: str = "d", init_tables: list[np.ndarray] | None = None):
        self.d_h = d_h
        self.r_window = r_window
        self.l_window = l_window
        self.m_slots = m_slots
        self.mode = mode
        self.embedder = FeatureEmbedder(rng, d_h, n_items, n_authors, n_tags)
        self.recent = SelfAttnStack(rng, d_h, n_heads, recent_layers,
                                    max_len=r_window)
        self.mid = MidStream(rng, d_h, n_heads, mid_layers, idx_heads, idx_width)
        self.lifecycle = LifecycleEncoder(rng, d_h, n_heads)
        if mode == "a":
            # single prefused memory: one self-attn pass over the
            # chronologically concatenated streams
            self.fuse = SelfAttnStack(rng, d_h, n_heads, 1,
                                      max_len=m_slots + l_window)
        self.decoder = Decoder(rng, d_h, n_heads, decoder_layers, level_sizes,
                               mode=mode, init_tables=init_tables)

    # ---- stream encoders -> decoder memories ----

    def encode(self, batch: Batch, *, sparse: bool = False, topk: int = 0,
               want_scores: bool = False, streams=STREAMS):
        """Returns (memories, aux): memories is the decoder's list of
        (tensor, mask) pairs, aux carries indexer score pairs (dense) or
        selected-set triples (sparse) plus mode-a span labels."""
        for s in streams:
            if s not in STREAMS:
                raise ConfigError(f"unknown stream {s!r}")
        b = batch.size
        aux: dict = {"mid": None, "spans": None}

        if "recent" in streams:
            x = self._embed(batch.rec_ids, batch.rec_mask)
            rec = (self.recent(x, batch.rec_mask), batch.rec_mask)
        else:
            rec = empty_memory(self.d_h, b)

        if "mid" in streams:
            x = self._embed(batch.mid_ids, batch.mid_mask)
            out, mid_aux = self.mid(x, batch.mid_mask, sparse=sparse, k=topk,
                                    want_scores=want_scores)
            mid = (out, batch.mid_mask)
            aux["mid"] = mid_aux if want_scores else None
        else:
            mid = empty_memory(self.d_h, b)

        if "lifecycle" in streams:
            vecs = Tensor(np.asarray(batch.life_vecs, dtype=T.default_dtype()))
            life = (self.lifecycle(vecs, batch.life_mask), batch.life_mask)
        else:
            life = empty_memory(self.d_h, b)

        if self.mode == "a":
            parts = [life, mid, rec]   # oldest to newest
            xcat = T.concat([p[0] for p in parts], axis=1)
            mcat = np.concatenate([p[1] for p in parts], axis=1)
            fused = self.fuse(xcat, mcat)
            spans, at = [], 0
            for name, p in zip(("lifecycle", "mid", "recent"), parts):
                n = p[0].shape[1]
                spans.append((name, at, at + n))
                at += n
            aux["spans"] = spans
            return [(fused, mcat)], aux
        return [rec, mid, life], aux

    def _embed(self, ids: dict[str, np.ndarray], mask: np.ndarray) -> Tensor:
        emb = self.embedder.embed_ids(ids)
        return T.mul(emb, Tensor(mask[:, :, None]))

    def forward(self, batch: Batch, *, sparse: bool = False, topk: int = 0,
                want_scores: bool = False, streams=STREAMS):
        """Teacher-forced pass: (per-level logits, encode aux)."""
        memories, aux = self.encode(batch, sparse=sparse, topk=topk,
                                    want_scores=want_scores, streams=streams)
        logits = self.decoder.decode(batch.targets, memories)
        return logits, aux

    def main_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters()
                if ".indexer." not in n]

    def indexer_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters()
                if ".indexer." in n]


def build_model(cfg: RunConfig, rng: np.random.Generator, *, n_items: int,
                n_authors: int, n_tags: int,
                init_tables: list[np.ndarray] | None = None) -> TriStreamModel:
    return TriStreamModel(
        rng, d_h=cfg.d_h, n_heads=cfg.n_heads, level_sizes=list(cfg.level_sizes),
        n_items=n_items, n_authors=n_authors, n_tags=n_tags,
        recent_layers=cfg.recent_layers, mid_layers=cfg.mid_layers,
        decoder_layers=cfg.decoder_layers, idx_heads=cfg.idx_heads,
        idx_width=cfg.idx_width, r_window=cfg.r_window, l_window=cfg.l_window,
        m_slots=cfg.m_slots, mode=cfg.mode, init_tables=init_tables)


def vocab_sizes(ds) -> tuple[int, int, int]:
    """(n_items, n_authors, n_tags) for sizing embedding tables; tags fall
    back to the catalog's cluster count when that is larger than anything
    observed in the histories."""
    n_items = len(ds.catalog_ids)
    n_authors = 1 + max((int(u.aid.max()) for u in ds.users if u.T), default=0)
    n_tags = 1 + max((int(u.tag.max()) for u in ds.users if u.T), default=0)
    n_tags = max(n_tags, int(ds.meta.get("n_clusters", 0)))
    return n_items, n_authors, n_tags


# ---- batch preparation ----

def make_batch(embedder: FeatureEmbedder, users: list[UserHistory],
               item_codes: np.ndarray, *, r_window: int, l_window: int,
               t_cap: int, m_slots: int, store: MemoryStore | None) -> Batch:
    """Leave-one-out batch: each user's newest event becomes the target, the
    rest is segmented into the three streams.  Lifecycle slots come from the
    offline store; users absent from it (or with an empty lifecycle region)
    get a fully-masked block."""
    b = len(users)
    if b == 0:
        raise ConfigError("empty batch")
    if store is not None and (store.m_slots != m_slots or store.d_h != embedder.d_h):
        raise ConfigError(f"store built for m_slots={store.m_slots} d_h={store.d_h}, "
                          f"run wants m_slots={m_slots} d_h={embedder.d_h}")
    depth = item_codes.shape[1]
    rec_slices, mid_slices, nows = [], [], []
    targets = np.zeros((b, depth), dtype=np.int64)
    target_vids = np.zeros(b, dtype=np.int64)
    life_vecs = np.zeros((b, m_slots, embedder.d_h))
    life_mask = np.zeros((b, m_slots))
    for i, user in enumerate(users):
        hist, held_out = user.drop_last()
        if hist.T > t_cap:
            hist = hist.slice(hist.T - t_cap, hist.T)
        if held_out.vid < 0 or held_out.vid >= len(item_codes):
            raise DataError(f"user {user.user_id}: target item {held_out.vid} "
                            f"outside the quantized catalog")
        seg = segment(hist, r_window, l_window)
        rec_slices.append(seg.recent)
        mid_slices.append(seg.mid_term)
        nows.append(int(hist.ts[-1]))
        targets[i] = item_codes[held_out.vid]
        target_vids[i] = held_out.vid
        if store is not None and user.user_id in store:
            mem = store.get(user.user_id)
            if not mem.empty:
                life_vecs[i] = mem.vectors
                life_mask[i] = 1.0

    rec_ids, rec_mask = pad_feature_batch(embedder, rec_slices, nows, r_window)
    mid_len = max(max((s.T for s in mid_slices), default=1), 1)
    mid_len = min(mid_len, l_window - r_window)
    mid_ids, mid_mask = pad_feature_batch(embedder, mid_slices, nows, mid_len)
    return Batch(np.array([u.user_id for u in users], dtype=np.int64),
                 rec_ids, rec_mask, mid_ids, mid_mask,
                 life_vecs, life_mask, targets, target_vids)
