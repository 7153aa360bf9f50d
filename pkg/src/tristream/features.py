"""Per-event feature embedding shared by all three stream encoders.

Seven raw features (vid, aid, tag, ts, pt, dur, label) plus a derived
completion ratio are embedded (categorical tables or log-scale buckets),
concatenated, and projected to width d_h by a small MLP.  Timestamps enter
as log-bucketed deltas against the query moment ("now" = newest history
event), so the newest event always lands in bucket 0.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import UserHistory
from .layers import Linear, Module
from .tensor import Tensor

TS_BUCKETS = 32    # log2 time-delta-to-now
PT_BUCKETS = 16    # log2 seconds
DUR_BUCKETS = 16
RATIO_BUCKETS = 8  # linear over completion ratio [0, 2)


def log2_bucket(x: np.ndarray, n_buckets: int) -> np.ndarray:
    return np.minimum(np.log2(np.maximum(x, 0.0) + 1.0).astype(np.int64), n_buckets - 1)


def ratio_bucket(pt: np.ndarray, dur: np.ndarray) -> np.ndarray:
    r = pt / np.maximum(dur, 1e-9)
    return np.minimum((r * (RATIO_BUCKETS / 2.0)).astype(np.int64), RATIO_BUCKETS - 1)


class FeatureEmbedder(Module):
    """Embedding tables + projection MLP; unknown categorical ids map to a
    reserved OOV row (the last row of each table)."""

    def __init__(self, rng: np.random.Generator, d_h: int,
                 n_items: int, n_authors: int, n_tags: int, n_labels: int = 3):
        w = max(d_h // 8, 4)
        self.widths = {
            "vid": 4 * w, "aid": w, "tag": 2 * w, "ts": w,
            "pt": w, "dur": w, "ratio": w, "label": w,
        }
        self.sizes = {
            "vid": n_items + 1, "aid": n_authors + 1, "tag": n_tags + 1,
            "ts": TS_BUCKETS, "pt": PT_BUCKETS, "dur": DUR_BUCKETS,
            "ratio": RATIO_BUCKETS, "label": n_labels + 1,
        }
        self.tables = {
            name: Tensor(rng.normal(0.0, 0.08, size=(self.sizes[name], width)),
                         requires_grad=True)
            for name, width in self.widths.items()
        }
        concat_w = sum(self.widths.values())
        self.proj_in = Linear(rng, concat_w, d_h, bias=True)
        self.proj_out = Linear(rng, d_h, d_h, bias=True)
        self.d_h = d_h

    def _clip(self, name: str, ids: np.ndarray) -> np.ndarray:
        size = self.sizes[name]
        ids = np.asarray(ids, dtype=np.int64)
        return np.where((ids < 0) | (ids >= size - 1), size - 1, ids)  # OOV row

    def feature_ids(self, h: UserHistory, now_ts: int) -> dict[str, np.ndarray]:
        """Integer id arrays (T,) per feature for one history slice."""
        return {
            "vid": self._clip("vid", h.vid),
            "aid": self._clip("aid", h.aid),
            "tag": self._clip("tag", h.tag),
            "ts": log2_bucket(now_ts - h.ts, TS_BUCKETS),
            "pt": log2_bucket(h.pt, PT_BUCKETS),
            "dur": log2_bucket(h.dur, DUR_BUCKETS),
            "ratio": ratio_bucket(h.pt, h.dur),
            "label": self._clip("label", h.label),
        }

    def embed_ids(self, ids: dict[str, np.ndarray]) -> Tensor:
        """ids arrays of any common shape -> Tensor shape + (d_h,)."""
        parts = [T.gather_rows(self.tables[name], ids[name]) for name in self.widths]
        x = T.concat(parts, axis=-1)
        return self.proj_out(T.silu(self.proj_in(x)))

    def embed_history(self, h: UserHistory, now_ts: int) -> Tensor:
        """(T, d_h), rows oldest -> newest."""
        return self.embed_ids(self.feature_ids(h, now_ts))


def pad_feature_batch(embedder: FeatureEmbedder, slices: list[UserHistory],
                      now_ts: list[int], length: int,
                      pad_left: bool = True) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Stack variable-length slices into (B, length) id arrays plus a validity
    mask.  Padding slots point at bucket/OOV id 0 and are masked out."""
    b = len(slices)
    ids = {name: np.zeros((b, length), dtype=np.int64) for name in embedder.widths}
    mask = np.zeros((b, length))
    for i, (h, now) in enumerate(zip(slices, now_ts)):
        t = min(h.T, length)
        sl = h.slice(h.T - t, h.T)  # keep the newest `length` events
        feats = embedder.feature_ids(sl, now)
        dst = slice(length - t, length) if pad_left else slice(0, t)
        for name in ids:
            ids[name][i, dst] = feats[name]
        mask[i, dst] = 1.0
    return ids, mask


def embed_events(embedder: FeatureEmbedder, events, R: int) -> tuple[Tensor, np.ndarray]:
    """Embed an event list (oldest -> newest, length <= R) into a left-padded
    (R, d_h) block plus its validity mask.  "Now" is the newest event's ts."""
    if len(events) > R:
        raise ValueError(f"got {len(events)} events for a window of {R}")
    emb = np.zeros((R, embedder.d_h))
    mask = np.zeros(R)
    if not events:
        return Tensor(emb), mask
    cols = {
        "vid": np.array([e.vid for e in events], dtype=np.int64),
        "aid": np.array([e.aid for e in events], dtype=np.int64),
        "tag": np.array([e.tag for e in events], dtype=np.int64),
        "ts": np.array([e.ts for e in events], dtype=np.int64),
        "pt": np.array([e.pt for e in events]),
        "dur": np.array([e.dur for e in events]),
        "label": np.array([e.label for e in events], dtype=np.int64),
    }
    now = int(cols["ts"][-1])
    ids = {
        "vid": embedder._clip("vid", cols["vid"]),
        "aid": embedder._clip("aid", cols["aid"]),
        "tag": embedder._clip("tag", cols["tag"]),
        "ts": log2_bucket(now - cols["ts"], TS_BUCKETS),
        "pt": log2_bucket(cols["pt"], PT_BUCKETS),
        "dur": log2_bucket(cols["dur"], DUR_BUCKETS),
        "ratio": ratio_bucket(cols["pt"], cols["dur"]),
        "label": embedder._clip("label", cols["label"]),
    }
    rows = embedder.embed_ids(ids)
    t = len(events)
    mask[R - t:] = 1.0
    pad = Tensor(np.zeros((R - t, embedder.d_h)))
    return T.concat([pad, rows], axis=0), mask


def embed_batch(embedder: FeatureEmbedder, slices: list[UserHistory],
                now_ts: list[int], length: int,
                pad_left: bool = True) -> tuple[Tensor, np.ndarray]:
    """(B, length, d_h) embedded batch + (B, length) mask."""
    ids, mask = pad_feature_batch(embedder, slices, now_ts, length, pad_left)
    emb = embedder.embed_ids(ids)
    # zero padded rows so downstream sums cannot leak padding content
    return T.mul(emb, Tensor(mask[:, :, None])), mask
