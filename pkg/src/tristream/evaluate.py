"""Beam-search generation over the code hierarchy and the retrieval metrics.

Evaluation protocol is leave-one-out: each user's newest event is the
target, everything earlier is context.  One beam run per report cutoff K,
with beam width K (so the level-l beam sets are exactly the "width matching
K" sets hierarchical recall is defined over); prefix dominance across
levels is then structural.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .artifacts import make_manifest, write_text_artifact
from .config import RunConfig
from .data import Dataset
from .decoder import Decoder, STREAMS
from .errors import ConfigError, DataError
from .lifecycle import MemoryStore
from .model import TriStreamModel, make_batch
from .quantizer import SidIndex
from .tensor import Tensor


@dataclass
class BeamResult:
    """Ranked generation output for one user."""
    codes: np.ndarray               # (B_final, depth), best first
    logps: np.ndarray               # (B_final,)
    level_sets: list[np.ndarray]    # level l -> (W_l, l) kept prefixes


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - (np.log(np.exp(x - m).sum(axis=-1, keepdims=True)) + m)


def beam_search_batch(decoder: Decoder, memories, width: int) -> list[BeamResult]:
    """Expand all users in `memories` level by level, keeping the global
    top-`width` partial codes per user by cumulative log-probability.
    Ties break toward the lexicographically smaller code sequence."""
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    sizes = decoder.level_sizes
    total = int(np.prod(sizes))
    if width > total:
        warnings.warn(f"beam width {width} exceeds the {total} possible codes; "
                      f"clamped")
        width = total
    n = memories[0][1].shape[0]
    prefix = np.zeros((n, 1, 0), dtype=np.int64)
    lp = np.zeros((n, 1))
    level_sets: list[np.ndarray] = []
    with T.no_grad():
        for level, size in enumerate(sizes):
            w = prefix.shape[1]
            flat = prefix.reshape(n * w, level)
            mems = [(Tensor(np.repeat(m.data, w, axis=0)),
                     np.repeat(mask, w, axis=0)) for m, mask in memories]
            logits = decoder.next_level_logits(flat, mems)
            lsm = _log_softmax_rows(logits.data.reshape(n, w, size))
            cand = (lp[:, :, None] + lsm).reshape(n, w * size)
            # candidate j extends parent j // size with code j % size
            codes = np.concatenate(
                [np.repeat(prefix, size, axis=1),
                 np.broadcast_to(np.tile(np.arange(size, dtype=np.int64), w),
                                 (n, w * size))[:, :, None]], axis=2)
            keep = min(width, w * size)
            sel = np.empty((n, keep), dtype=np.int64)
            for u in range(n):
                keys = tuple(codes[u, :, i] for i in range(level, -1, -1))
                order = np.lexsort(keys + (-cand[u],))
                sel[u] = order[:keep]
            prefix = np.take_along_axis(codes, sel[:, :, None], axis=1)
            lp = np.take_along_axis(cand, sel, axis=1)
            level_sets.append(prefix.copy())
    return [BeamResult(prefix[u], lp[u], [ls[u] for ls in level_sets])
            for u in range(n)]


def beam_search(decoder: Decoder, memories, width: int) -> BeamResult:
    """Single-user convenience wrapper (memories carry batch size 1)."""
    return beam_search_batch(decoder, memories, width)[0]


# ---- per-user metrics ----

def recall_hit(beams: BeamResult, index: SidIndex, target_vid: int,
               k: int) -> int:
    """1 iff the target item is in the union of items the top-k codes map to."""
    for row in beams.codes[:k]:
        if target_vid in index.items_for(tuple(int(c) for c in row)):
            return 1
    return 0


def ndcg_value(beams: BeamResult, index: SidIndex, target_vid: int,
               k: int) -> float:
    """1/log2(rank+1) at the first code whose item set contains the target."""
    for rank, row in enumerate(beams.codes[:k], start=1):
        if target_vid in index.items_for(tuple(int(c) for c in row)):
            return 1.0 / math.log2(rank + 1)
    return 0.0


def hrecall_hit(level_sets: list[np.ndarray], target_codes: np.ndarray,
                level: int, k: int) -> int:
    """1 iff the target's length-`level` prefix is among the first k kept
    prefixes at that level.  With beams run at width k the slice is the
    whole set."""
    if not 1 <= level <= len(level_sets):
        raise ConfigError(f"level must be in [1, {len(level_sets)}], got {level}")
    kept = level_sets[level - 1][:k]
    return int((kept == np.asarray(target_codes[:level])).all(axis=1).any())


# ---- report ----

@dataclass
class EvalReport:
    ks: list[int]
    recall: dict[int, float]
    ndcg: dict[int, float]
    hrecall: dict[int, dict[int, float]]     # K -> level -> value
    n_users: int
    config_hash: str
    seed: int
    mode: str
    streams: list[str]
    sparse: bool
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name, table in (("recall", self.recall), ("ndcg", self.ndcg)):
            for k, v in table.items():
                if not 0.0 <= v <= 1.0:
                    raise DataError(f"{name}@{k} out of [0,1]: {v}")
        for k, per_level in self.hrecall.items():
            levels = sorted(per_level)
            for a, b in zip(levels, levels[1:]):
                if per_level[a] < per_level[b] - 1e-12:
                    raise DataError(f"hierarchical recall not prefix-dominant "
                                    f"at K={k}: L{a}={per_level[a]} < "
                                    f"L{b}={per_level[b]}")
            for lv, v in per_level.items():
                if not 0.0 <= v <= 1.0:
                    raise DataError(f"hrecall@L{lv}@{k} out of [0,1]: {v}")

    def to_dict(self) -> dict:
        return {"ks": self.ks,
                "recall": {str(k): v for k, v in self.recall.items()},
                "ndcg": {str(k): v for k, v in self.ndcg.items()},
                "hrecall": {str(k): {str(l): v for l, v in d.items()}
                            for k, d in self.hrecall.items()},
                "n_users": self.n_users, "config_hash": self.config_hash,
                "seed": self.seed, "mode": self.mode,
                "streams": self.streams, "sparse": self.sparse,
                **self.extra}

    def table_lines(self) -> list[str]:
        depth = max((max(d) for d in self.hrecall.values()), default=0)
        head = "metric      " + "".join(f"K={k:<8d}" for k in self.ks)
        rows = [head]
        def fmt(name, values):
            cells = "".join(f"{values[k]:<10.4f}" for k in self.ks)
            rows.append(f"{name:<12s}{cells}")
        fmt("recall", self.recall)
        fmt("ndcg", self.ndcg)
        for lv in range(1, depth + 1):
            fmt(f"hrecall@L{lv}", {k: self.hrecall[k][lv] for k in self.ks})
        return rows


def evaluate_model(cfg: RunConfig, model: TriStreamModel, ds: Dataset,
                   store: MemoryStore | None, item_codes: np.ndarray,
                   index: SidIndex, *, streams=STREAMS, split: str = "test",
                   ks: list[int] | None = None, sparse: bool | None = None,
                   chunk: int = 32) -> EvalReport:
    """Leave-one-out metrics over a split, deterministic for a fixed model."""
    ks = list(cfg.eval_ks) if ks is None else list(ks)
    if sparse is None:
        sparse = cfg.stage_steps[3] > 0 and "mid" in streams
    users = sorted(ds.split_users(split), key=lambda u: u.user_id)
    if not users:
        raise DataError(f"dataset has no {split}-split users")
    depth = len(model.decoder.level_sizes)
    n = len(users)
    rec = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    hr = {k: {lv: 0.0 for lv in range(1, depth + 1)} for k in ks}
    for at in range(0, n, chunk):
        group = users[at:at + chunk]
        batch = make_batch(model.embedder, group, item_codes,
                           r_window=model.r_window, l_window=model.l_window,
                           t_cap=cfg.t_cap, m_slots=model.m_slots, store=store)
        with T.no_grad():
            memories, _ = model.encode(batch, sparse=sparse, topk=cfg.topk,
                                       streams=streams)
        for k in ks:
            beams = beam_search_batch(model.decoder, memories, k)
            for i, bm in enumerate(beams):
                tv = int(batch.target_vids[i])
                rec[k] += recall_hit(bm, index, tv, k)
                ndcg[k] += ndcg_value(bm, index, tv, k)
                for lv in range(1, depth + 1):
                    hr[k][lv] += hrecall_hit(bm.level_sets, batch.targets[i],
                                             lv, k)
    report = EvalReport(
        ks=ks,
        recall={k: rec[k] / n for k in ks},
        ndcg={k: ndcg[k] / n for k in ks},
        hrecall={k: {lv: hr[k][lv] / n for lv in hr[k]} for k in ks},
        n_users=n, config_hash=cfg.cfg_hash, seed=cfg.seed, mode=model.mode,
        streams=list(streams), sparse=sparse)
    report.validate()
    return report


def save_eval_report(report: EvalReport, out_dir: str | Path, *,
                     command: str = "eval") -> tuple[str, str]:
    """Emit machine-readable JSON plus an aligned text table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = make_manifest("eval-report", seed=report.seed, command=command,
                             cfg_hash=report.config_hash)
    json_path = out / "eval.json"
    payload = {"manifest": manifest, **report.to_dict()}
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    txt_path = out / "eval.txt"
    write_text_artifact(txt_path, manifest, report.table_lines())
    return str(json_path), str(txt_path)
