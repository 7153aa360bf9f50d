"""Residual K-means tokenization of item vectors into multi-level semantic ids.

Level l is a K-means fit on the residuals left after subtracting the chosen
centroids of levels < l, so mean squared residual is non-increasing in depth.
The fitted level tables are also what grounds the decoder's per-level
input/output embeddings when widths match.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors


class QuantizerError(ValueError):
    pass


@dataclass
class Codebook:
    levels: list[np.ndarray]          # each (M_l, d_h)
    level_mse: list[float] = field(default_factory=list)  # fit diagnostics

    @property
    def d_h(self) -> int:
        return self.levels[0].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [lvl.shape[0] for lvl in self.levels]

    def __post_init__(self):
        if not self.levels:
            raise QuantizerError("codebook needs at least one level")
        widths = {lvl.shape[1] for lvl in self.levels}
        if len(widths) != 1:
            raise QuantizerError(f"level widths differ: {sorted(widths)}")
        for i, lvl in enumerate(self.levels):
            if not np.isfinite(lvl).all():
                raise QuantizerError(f"level {i} has non-finite centroids")


@dataclass(frozen=True)
class SemanticId:
    codes: tuple[int, ...]

    def __iter__(self):
        return iter(self.codes)


# ---- k-means core ----


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """(N, d) x (k, d) -> (N, k) squared euclidean distances."""
    # ||x||^2 - 2 x.c + ||c||^2; clamp tiny negatives from cancellation
    d2 = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=x.dtype)
    centroids[0] = x[rng.integers(n)]
    d2 = _sq_dists(x, centroids[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(n)]  # all points already covered
            continue
        probs = d2 / total
        centroids[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, _sq_dists(x, centroids[j : j + 1]).ravel())
    return centroids


def _kmeans(x: np.ndarray, k: int, rng: np.random.Generator,
            max_iters: int = 50, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Returns (centroids (k, d), assignment (N,)). argmin ties go to the
    lowest centroid index; empty clusters reseed to the point farthest from
    its assigned centroid."""
    centroids = _kmeans_pp_init(x, k, rng)
    assign = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        assign = d2.argmin(axis=1)
        point_err = d2[np.arange(x.shape[0]), assign]
        new = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = int(point_err.argmax())
                new[j] = x[far]
                point_err[far] = 0.0  # one repair per donor point
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    assign = _sq_dists(x, centroids).argmin(axis=1)
    return centroids, assign


# ---- public ops ----


def fit_residual_kmeans(items: np.ndarray, levels: int, sizes: list[int],
                        seed: int) -> Codebook:
    items = np.asarray(items, dtype=np.float64)
    if items.ndim != 2 or items.shape[0] == 0:
        raise QuantizerError(f"need a nonempty (N, d_h) item matrix, got shape {items.shape}")
    if len(sizes) != levels:
        raise QuantizerError(f"sizes length {len(sizes)} != levels {levels}")
    if max(sizes) > items.shape[0]:
        raise QuantizerError(f"codebook size {max(sizes)} exceeds item count {items.shape[0]}")
    rng = np.random.default_rng(seed)
    residual = items.copy()
    tables: list[np.ndarray] = []
    mses: list[float] = []
    for m in sizes:
        centroids, assign = _kmeans(residual, m, rng)
        residual = residual - centroids[assign]
        tables.append(centroids)
        mses.append(float((residual ** 2).sum(axis=1).mean()))
    return Codebook(tables, mses)


def quantize(item: np.ndarray, cb: Codebook) -> SemanticId:
    item = np.asarray(item, dtype=np.float64)
    if item.shape != (cb.d_h,):
        raise QuantizerError(f"item width {item.shape} != codebook width ({cb.d_h},)")
    return SemanticId(tuple(int(c) for c in quantize_batch(item[None, :], cb)[0]))


def quantize_batch(items: np.ndarray, cb: Codebook) -> np.ndarray:
    """(N, d_h) -> (N, levels) greedy code assignment."""
    residual = np.asarray(items, dtype=np.float64).copy()
    codes = np.empty((residual.shape[0], len(cb.levels)), dtype=np.int64)
    for l, table in enumerate(cb.levels):
        idx = _sq_dists(residual, table).argmin(axis=1)
        codes[:, l] = idx
        residual -= table[idx]
    return codes


def reconstruct(sid: SemanticId, cb: Codebook) -> np.ndarray:
    out = np.zeros(cb.d_h)
    for table, c in zip(cb.levels, sid.codes):
        out += table[c]
    return out


@dataclass
class SidIndex:
    by_sid: dict[tuple[int, ...], list[int]]
    collision_rate: float

    def items_for(self, codes: tuple[int, ...]) -> list[int]:
        return self.by_sid.get(tuple(codes), [])


def build_sid_index(item_ids: np.ndarray, vectors: np.ndarray, cb: Codebook) -> SidIndex:
    return index_from_codes(item_ids, quantize_batch(vectors, cb))


def index_from_codes(item_ids: np.ndarray, codes: np.ndarray) -> SidIndex:
    """Group an already-quantized (N, depth) code table into a SidIndex."""
    by_sid: dict[tuple[int, ...], list[int]] = {}
    for vid, row in zip(item_ids, codes):
        by_sid.setdefault(tuple(int(c) for c in row), []).append(int(vid))
    n = len(item_ids)
    rate = (n - len(by_sid)) / n if n else 0.0
    return SidIndex(by_sid, rate)


# ---- file io (same container as checkpoints) ----


def save_codebook(path: str | Path, cb: Codebook, manifest: dict | None = None) -> None:
    entries = {f"level.{i}": lvl for i, lvl in enumerate(cb.levels)}
    entries["fit_mse"] = np.asarray(cb.level_mse)
    save_tensors(path, entries, manifest, precision=8)


def load_codebook(path: str | Path) -> Codebook:
    tensors, _ = load_tensors(path)
    levels = []
    i = 0
    while f"level.{i}" in tensors:
        levels.append(tensors[f"level.{i}"].astype(np.float64))
        i += 1
    if not levels:
        raise QuantizerError(f"{path}: no codebook levels found")
    mse = [float(v) for v in tensors.get("fit_mse", np.empty(0))]
    return Codebook(levels, mse)
