"""Wall-clock harnesses: dense vs indexer-selected sparse attention, and the
compressor's scaling in sequence length.

Cost model (per mid-term block, batch b, length L, H heads of width dk,
model width d, indexer with Hi heads of width di, selection size K):

  dense attention   ~ 4*b*H*L^2*dk            (QK^T and probs@V)
  sparse attention  ~ 4*b*H*L*K*dk            (per-query K keys)
  indexer overhead  ~ 2*b*Hi*L^2*di + b*Hi*L^2  (scores + head mix)
  projections       ~ 8*b*L*d^2               (identical on both paths)

The indexer term stays quadratic in L but its constant is small (few heads,
narrow width, no value mixing), which is where the measured gap comes from.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .lifecycle import QLUCompressor, qlu_attend
from .midterm import MidtermEncoder
from .tensor import Tensor


@dataclass
class BenchRow:
    variant: str
    length: int
    k: int
    wall_s: float
    flops_attn: float

    def line(self) -> str:
        return (f"{self.variant:<8s}{self.length:<8d}{self.k:<8d}"
                f"{self.wall_s:<12.4f}{self.flops_attn:<14.3e}")


def _median_time(fn, trials: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_indexer(lengths=(1024, 4096), k: int = 64, d_h: int = 128,
                  n_heads: int = 4, idx_heads: int = 2, idx_width: int = 32,
                  batch: int = 1, trials: int = 3,
                  dtype: str = "fp32") -> list[BenchRow]:
    """Forward wall-clock, dense vs sparse, one mid-term block."""
    rows = []
    with T.use_dtype(dtype):
        rng = np.random.default_rng(7)
        enc = MidtermEncoder(rng, d_h, n_heads, 1, idx_heads, idx_width)
        dk = d_h // n_heads
        for length in lengths:
            x = Tensor(rng.normal(0.0, 1.0, size=(batch, length, d_h)))
            mask = np.ones((batch, length))
            kk = min(k, length)
            with T.no_grad():
                dense_t = _median_time(
                    lambda: enc.dense_forward(x, mask, want_scores=False), trials)
                sparse_t = _median_time(
                    lambda: enc.sparse_forward(x, mask, kk), trials)
            rows.append(BenchRow("dense", length, length, dense_t,
                                 4.0 * batch * n_heads * length ** 2 * dk))
            rows.append(BenchRow("sparse", length, kk, sparse_t,
                                 4.0 * batch * n_heads * length * kk * dk
                                 + 2.0 * batch * idx_heads * length ** 2
                                 * (idx_width + 0.5)))
    return rows


def bench_table_lines(rows: list[BenchRow]) -> list[str]:
    out = [f"{'variant':<8s}{'L':<8s}{'K':<8s}{'wall_s':<12s}{'flops_attn':<14s}"]
    out.extend(r.line() for r in rows)
    for length in sorted({r.length for r in rows}):
        dense = [r for r in rows if r.variant == "dense" and r.length == length]
        sparse = [r for r in rows if r.variant == "sparse" and r.length == length]
        if dense and sparse and dense[0].wall_s > 0:
            ratio = sparse[0].wall_s / dense[0].wall_s
            out.append(f"ratio @L={length}: sparse/dense = {ratio:.3f}")
    return out


@dataclass
class QluBench:
    lengths: list[int]
    wall_s: list[float]
    r2: float
    per_token_us: float


def bench_qlu(lengths=(1000, 4000, 16000), d_h: int = 64, m_slots: int = 16,
              trials: int = 3, dtype: str = "fp32") -> QluBench:
    """Runtime of the linear-order compressor vs sequence length, with the
    R^2 of a straight-line fit (linear scaling shows up as R^2 near 1)."""
    with T.use_dtype(dtype):
        rng = np.random.default_rng(11)
        comp = QLUCompressor(rng, d_h, m_slots)
        walls = []
        for length in lengths:
            x = Tensor(rng.normal(0.0, 1.0, size=(length, d_h)))
            with T.no_grad():
                walls.append(_median_time(lambda: qlu_attend(comp, x), trials))
    xs = np.asarray(lengths, dtype=float)
    ys = np.asarray(walls)
    slope, intercept = np.polyfit(xs, ys, 1)
    pred = slope * xs + intercept
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / max(ss_tot, 1e-30)
    return QluBench(list(lengths), walls, r2, slope * 1e6)
