"""Lifecycle stream: offline linear-attention compression of arbitrarily long
history into a fixed number of slots, persisted to a file-backed store, plus a
small online self-attention encoder over the retrieved slots.

The compressor runs in association order: phi(Q) @ (phi(K)^T V) with row
normalization, so cost grows linearly in sequence length and the T x T score
matrix never exists outside the verification oracle.  Compressor parameters
(and the embedder snapshot they read) train in a dedicated phase and are
frozen afterwards; only the online encoder keeps learning with the rest of
the model.
"""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import UserHistory
from .errors import ConfigError, DataError
from .features import FeatureEmbedder
from .layers import Linear, Module
from .recent import EncoderBlock
from .tensor import Tensor


def _phi(name: str, x: Tensor) -> Tensor:
    if name == "elu1":
        return T.elu_plus_one(x)
    if name == "identity":
        return x
    raise ConfigError(f"unknown feature map {name!r}")


class QLUCompressor(Module):
    """Learned query seeds attending over the full lifecycle sequence."""

    def __init__(self, rng: np.random.Generator, d_h: int, m_slots: int = 64,
                 phi: str = "elu1", correction: str = "none", window: int = 64):
        if m_slots < 1:
            raise ConfigError(f"m_slots must be >= 1, got {m_slots}")
        if correction not in ("none", "local"):
            raise ConfigError(f"unknown correction {correction!r}")
        _phi(phi, Tensor(np.zeros(1)))  # validate the name early
        self.seeds = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_h), size=(m_slots, d_h)),
                            requires_grad=True)
        self.wq = Linear(rng, d_h, d_h)
        self.wk = Linear(rng, d_h, d_h)
        self.wv = Linear(rng, d_h, d_h)
        self.gate = Tensor(np.zeros(()), requires_grad=True)
        self.phi_name = phi
        self.correction = correction
        self.window = window
        self.m_slots = m_slots
        self.d_h = d_h


@dataclass
class CompressedMemory:
    user_id: int
    vectors: np.ndarray      # (m_slots, d_h)
    source_length: int
    version: int = 1
    empty: bool = False


def qlu_attend(comp: QLUCompressor, t_seq: Tensor) -> Tensor:
    """(T_l, d_h) sequence -> (m_slots, d_h), association order.

    Empty input (T_l == 0) yields an all-zero memory; callers flag it."""
    t_l = t_seq.shape[0]
    if t_l == 0:
        return Tensor(np.zeros((comp.m_slots, comp.d_h)))
    fq = _phi(comp.phi_name, comp.wq(comp.seeds))           # (M, d)
    fk = _phi(comp.phi_name, comp.wk(t_seq))                # (T, d)
    v = comp.wv(t_seq)
    kv = T.matmul(T.transpose(fk, (1, 0)), v)               # (d, d)
    num = T.matmul(fq, kv)                                  # (M, d)
    ksum = T.sum_(fk, axis=0, keepdims=True)                # (1, d)
    denom = T.matmul(fq, T.transpose(ksum, (1, 0)))         # (M, 1)
    out = T.div(num, denom)
    if comp.correction == "local":
        w = min(comp.window, t_l)
        fk_w = T.slice_axis(fk, t_l - w, t_l)
        v_w = T.slice_axis(v, t_l - w, t_l)
        att = T.softmax_rows(T.scale(T.matmul(fq, T.transpose(fk_w, (1, 0))),
                                     1.0 / np.sqrt(comp.d_h)))
        g = T.sigmoid(comp.gate)
        out = T.add(out, T.mul(T.matmul(att, v_w), g))
    return out


def qlu_attend_quadratic(comp: QLUCompressor, t_seq: Tensor) -> Tensor:
    """Oracle: same map with the full score matrix materialized."""
    t_l = t_seq.shape[0]
    if t_l == 0:
        return Tensor(np.zeros((comp.m_slots, comp.d_h)))
    fq = _phi(comp.phi_name, comp.wq(comp.seeds))
    fk = _phi(comp.phi_name, comp.wk(t_seq))
    v = comp.wv(t_seq)
    p = T.matmul(fq, T.transpose(fk, (1, 0)))               # (M, T)
    num = T.matmul(p, v)
    denom = T.sum_(p, axis=-1, keepdims=True)
    out = T.div(num, denom)
    if comp.correction == "local":
        w = min(comp.window, t_l)
        fk_w = T.slice_axis(fk, t_l - w, t_l)
        v_w = T.slice_axis(v, t_l - w, t_l)
        att = T.softmax_rows(T.scale(T.matmul(fq, T.transpose(fk_w, (1, 0))),
                                     1.0 / np.sqrt(comp.d_h)))
        out = T.add(out, T.mul(T.matmul(att, v_w), T.sigmoid(comp.gate)))
    return out


def compress_offline(history: UserHistory, embedder: FeatureEmbedder,
                     comp: QLUCompressor) -> CompressedMemory:
    """Compress one user's lifecycle slice; deterministic given parameters."""
    if history.T == 0:
        return CompressedMemory(history.user_id, np.zeros((comp.m_slots, comp.d_h)),
                                0, empty=True)
    with T.no_grad():
        emb = embedder.embed_history(history, now_ts=int(history.ts[-1]))
        out = qlu_attend(comp, emb)
    return CompressedMemory(history.user_id, out.data.copy(), history.T)


def chunk_targets(embedded: Tensor, m_slots: int) -> list[np.ndarray | None]:
    """Stop-gradient mean-pooled embeddings of the m_slots contiguous chunks;
    None where a chunk came out empty (sequence shorter than m_slots)."""
    spans = np.array_split(np.arange(embedded.shape[0]), m_slots)
    return [embedded.data[s].mean(axis=0) if len(s) else None for s in spans]


def recon_loss(v: Tensor, embedded: Tensor, m_slots: int) -> Tensor:
    """Sum over i of |v_i - u_{i+1}|^2, u = next-chunk mean embedding."""
    if m_slots < 2:
        warnings.warn("reconstruction needs at least 2 slots; loss is 0")
        return Tensor(np.zeros(()))
    u = chunk_targets(embedded, m_slots)
    total = None
    for i in range(m_slots - 1):
        if u[i + 1] is None:
            continue
        term = T.l2_loss(T.slice_axis(v, i, i + 1), Tensor(u[i + 1][None, :]))
        total = term if total is None else T.add(total, term)
    return total if total is not None else Tensor(np.zeros(()))


class LifecycleEncoder(Module):
    """One bidirectional block over the retrieved slots; trains with the
    decoder (the compressor upstream stays frozen)."""

    def __init__(self, rng: np.random.Generator, d_h: int, n_heads: int):
        self.block = EncoderBlock(rng, d_h, n_heads)

    def __call__(self, memory: Tensor, mask: np.ndarray) -> Tensor:
        return T.mul(self.block(memory, mask), Tensor(mask[..., None]))


def encode_lifecycle_online(enc: LifecycleEncoder,
                            mem: CompressedMemory) -> tuple[Tensor, np.ndarray]:
    """-> ((1, m_slots, d_h) encoded memory, (1, m_slots) mask).  An empty
    memory keeps an all-zero mask so downstream attention skips the stream."""
    m = mem.vectors[None, :, :]
    mask = np.zeros((1, m.shape[1])) if mem.empty else np.ones((1, m.shape[1]))
    return enc(Tensor(m), mask), mask


# ---- file-backed store ---------------------------------------------------------
#
# Layout (little-endian):
#   magic  8s   b"GEMSMEMS"
#   u32    format version (1)
#   u8     float width in bytes (4 or 8)
#   u32    manifest length, then manifest JSON (m_slots, d_h, count)
#   index: count x { u64 user_id, u64 absolute file offset }, user_id ascending
#   records: count x { u64 user_id, u32 source_length, u8 flags (bit0 = empty),
#                      u32 version, payload m_slots*d_h floats }

STORE_MAGIC = b"GEMSMEMS"
STORE_VERSION = 1


class StoreMiss(KeyError):
    """Requested user has no record in the memory store."""


class MemoryStore:
    def __init__(self, m_slots: int, d_h: int):
        self.m_slots = m_slots
        self.d_h = d_h
        self._mem: dict[int, CompressedMemory] = {}

    def put(self, mem: CompressedMemory) -> None:
        if mem.vectors.shape != (self.m_slots, self.d_h):
            raise ConfigError(f"memory shape {mem.vectors.shape} does not match "
                              f"store ({self.m_slots}, {self.d_h})")
        self._mem[int(mem.user_id)] = mem

    def get(self, user_id: int) -> CompressedMemory:
        try:
            return self._mem[int(user_id)]
        except KeyError:
            raise StoreMiss(f"user {user_id} not in memory store") from None

    def __len__(self) -> int:
        return len(self._mem)

    def __contains__(self, user_id: int) -> bool:
        return int(user_id) in self._mem

    def user_ids(self) -> list[int]:
        return sorted(self._mem)

    def save(self, path: str, manifest: dict | None = None) -> None:
        ids = self.user_ids()
        head = dict(manifest or {})
        head.update({"m_slots": self.m_slots, "d_h": self.d_h,
                     "count": len(ids)})
        manifest = json.dumps(head, sort_keys=True).encode()
        fw = 8
        rec_size = 8 + 4 + 1 + 4 + self.m_slots * self.d_h * fw
        head_size = 8 + 4 + 1 + 4 + len(manifest)
        index_size = len(ids) * 16
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(STORE_MAGIC)
            f.write(struct.pack("<IBI", STORE_VERSION, fw, len(manifest)))
            f.write(manifest)
            base = head_size + index_size
            for i, uid in enumerate(ids):
                f.write(struct.pack("<QQ", uid, base + i * rec_size))
            for uid in ids:
                m = self._mem[uid]
                f.write(struct.pack("<QIBI", uid, m.source_length,
                                    1 if m.empty else 0, m.version))
                f.write(np.ascontiguousarray(m.vectors, dtype=np.float64).tobytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "MemoryStore":
        with open(path, "rb") as f:
            blob = f.read()
        off = 0

        def take(n: int, what: str) -> bytes:
            nonlocal off
            if off + n > len(blob):
                raise DataError(f"memory store truncated at byte {off} reading {what}")
            chunk = blob[off:off + n]
            off += n
            return chunk

        if take(8, "magic") != STORE_MAGIC:
            raise DataError(f"{path}: not a memory store file")
        ver, fw, mlen = struct.unpack("<IBI", take(9, "header"))
        if ver != STORE_VERSION:
            raise DataError(f"unsupported store version {ver}")
        manifest = json.loads(take(mlen, "manifest"))
        store = cls(manifest["m_slots"], manifest["d_h"])
        count = manifest["count"]
        index = [struct.unpack("<QQ", take(16, "index entry"))
                 for _ in range(count)]
        width = store.m_slots * store.d_h
        dtype = np.float64 if fw == 8 else np.float32
        for uid, rec_off in index:
            off = rec_off
            ruid, slen, flags, ver = struct.unpack("<QIBI", take(17, "record header"))
            if ruid != uid:
                raise DataError(f"index entry for user {uid} points at record "
                                f"for user {ruid}")
            payload = np.frombuffer(take(width * fw, "payload"), dtype=dtype)
            store._mem[uid] = CompressedMemory(
                uid, payload.reshape(store.m_slots, store.d_h).astype(np.float64),
                slen, ver, empty=bool(flags & 1))
        return store
