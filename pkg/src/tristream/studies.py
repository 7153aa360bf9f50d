"""Comparative studies: stream ablation, fusion-mode grid, width scaling.

Each study shares one synthetic dataset, codebook, and (per hidden width)
memory store across its runs, so rows differ only in the knob under study.
Grids land as JSON records plus an aligned text table, both with manifest
headers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .artifacts import make_manifest, manifest_line, write_text_artifact
from .config import RunConfig
from .data import Dataset, PlantSpec, generate_synthetic
from .decoder import MODES, STREAMS, attention_mass_report
from .evaluate import EvalReport, evaluate_model, save_eval_report
from .lifecycle import MemoryStore
from .model import TriStreamModel, build_model, make_batch, vocab_sizes
from .quantizer import (Codebook, SidIndex, build_sid_index,
                        fit_residual_kmeans, quantize_batch)
from .tensor import use_dtype
from .training import TrainResult, bake_store, train_compressor, train_model

# row order mirrors the expected quality ordering, best first
ABLATION_SETTINGS = (
    ("full", ("recent", "mid", "lifecycle")),
    ("recent+mid", ("recent", "mid")),
    ("recent+lifecycle", ("recent", "lifecycle")),
    ("recent-only", ("recent",)),
)


@dataclass
class DataBundle:
    """Dataset plus the quantizer artifacts every run shares."""
    ds: Dataset
    cb: Codebook
    item_codes: np.ndarray      # (n_items, depth)
    index: SidIndex


def build_data(cfg: RunConfig) -> DataBundle:
    spec = PlantSpec(rate=cfg.plant_rate, mid_rate=cfg.plant_mid_rate,
                     recent_window=cfg.r_window, horizon_window=cfg.l_window)
    ds = generate_synthetic(
        cfg.n_users, cfg.n_items, cfg.horizon, cfg.seed, spec,
        n_clusters=cfg.n_clusters, item_dim=cfg.item_dim,
        test_fraction=cfg.test_fraction, min_len=cfg.min_len,
        workers=cfg.workers)
    cb = fit_residual_kmeans(ds.catalog_vecs, len(cfg.level_sizes),
                             list(cfg.level_sizes), cfg.seed)
    item_codes = quantize_batch(ds.catalog_vecs, cb)
    index = build_sid_index(ds.catalog_ids, ds.catalog_vecs, cb)
    return DataBundle(ds, cb, item_codes, index)


def build_memory(cfg: RunConfig, ds: Dataset) -> MemoryStore:
    """Stage-0 pipeline: fit the compressor, then bake every user's slots."""
    embedder, comp, _ = train_compressor(cfg, ds)
    return bake_store(cfg, ds, embedder, comp)


def centroid_tables(cb: Codebook, d_h: int,
                    rng: np.random.Generator) -> list[np.ndarray]:
    """Code tables seeded from the quantizer centroids.

    Each row gets the unit-normalized centroid in its leading dims and
    default-scale noise in the rest, so level-1 logits start out aligned
    with catalog geometry instead of random.
    """
    tables = []
    for lvl in cb.levels:
        n, dim = lvl.shape
        t = rng.normal(0.0, 1.0 / np.sqrt(d_h), size=(n, d_h))
        rows = lvl / np.maximum(np.linalg.norm(lvl, axis=1, keepdims=True), 1e-12)
        w = min(dim, d_h)
        t[:, :w] = rows[:, :w]
        tables.append(t)
    return tables


def init_model(cfg: RunConfig, bundle: DataBundle) -> TriStreamModel:
    """Model with centroid-seeded code tables.

    The init rng is fixed at [seed, 2] regardless of enabled streams or
    fusion mode, so grid rows start from comparable weights.
    """
    rng = np.random.default_rng([cfg.seed, 2])
    n_items, n_authors, n_tags = vocab_sizes(bundle.ds)
    tables = centroid_tables(bundle.cb, cfg.d_h, rng)
    return build_model(cfg, rng, n_items=n_items, n_authors=n_authors,
                       n_tags=n_tags, init_tables=tables)


def run_one(cfg: RunConfig, bundle: DataBundle, store: MemoryStore | None,
            *, streams=STREAMS, out_dir: str | Path,
            command: str = "train") -> tuple[EvalReport, TrainResult, TriStreamModel]:
    """Train one model under `cfg` and evaluate it on the test split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    use_store = store if "lifecycle" in streams else None
    with use_dtype(cfg.precision):
        model = init_model(cfg, bundle)
        result = train_model(cfg, model, bundle.ds, use_store,
                             bundle.item_codes, out_dir=out,
                             streams=streams, command=command)
        report = evaluate_model(cfg, model, bundle.ds, use_store,
                                bundle.item_codes, bundle.index,
                                streams=streams)
        save_eval_report(report, out, command=command)
    return report, result, model


def _metric_cells(report: EvalReport) -> list[str]:
    k = max(report.ks)
    return [f"{report.recall[k]:.4f}", f"{report.ndcg[k]:.4f}",
            f"{report.hrecall[k][1]:.4f}", f"{report.hrecall[k][2]:.4f}",
            f"{report.hrecall[k][3]:.4f}"]


def _grid_lines(header: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return [fmt.format(*header)] + [fmt.format(*r) for r in rows]


def _write_grid(out_dir: Path, stem: str, kind: str, cfg: RunConfig,
                command: str, rows: list[dict], header: list[str],
                cells: list[list[str]], extra: dict | None = None) -> tuple[str, str]:
    man = make_manifest(kind, seed=cfg.seed, command=command,
                        cfg_hash=cfg.cfg_hash, extra=extra)
    jpath = out_dir / f"{stem}.json"
    jpath.write_text(json.dumps({"manifest": man, "rows": rows}, indent=1,
                                sort_keys=True) + "\n")
    tpath = out_dir / f"{stem}.txt"
    write_text_artifact(tpath, man, _grid_lines(header, cells))
    return str(jpath), str(tpath)


GRID_HEADER = ["setting", "recall", "ndcg", "hr@L1", "hr@L2", "hr@L3"]


def ablation_study(cfg: RunConfig, out_dir: str | Path, *,
                   bundle: DataBundle | None = None,
                   store: MemoryStore | None = None,
                   command: str = "ablate") -> list[dict]:
    """Four rows: full model and the three single-stream removals."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = bundle or build_data(cfg)
    if store is None:
        store = build_memory(cfg, ds=bundle.ds)
    rows, cells = [], []
    for name, streams in ABLATION_SETTINGS:
        report, _, _ = run_one(cfg, bundle, store, streams=streams,
                               out_dir=out / name.replace("+", "_"),
                               command=command)
        rows.append({"setting": name, "streams": list(streams),
                     "report": report.to_dict()})
        cells.append([name] + _metric_cells(report))
    _write_grid(out, "ablation", "ablation-grid", cfg, command, rows,
                GRID_HEADER, cells)
    return rows


def _mass_probe(cfg: RunConfig, model, bundle: DataBundle,
                store: MemoryStore | None, probe_users: int = 64) -> dict:
    """Attention-allocation statistics on a teacher-forced test batch."""
    users = bundle.ds.split_users("test")[:probe_users]
    with use_dtype(cfg.precision):
        batch = make_batch(model.embedder, users, bundle.item_codes,
                           r_window=cfg.r_window, l_window=cfg.l_window,
                           t_cap=cfg.t_cap, m_slots=cfg.m_slots, store=store)
        memories, aux = model.encode(batch)
        spans = aux["spans"] if model.decoder.mode == "a" else None
        return attention_mass_report(model.decoder, batch.targets, memories,
                                     spans=spans)


def fusion_study(cfg: RunConfig, out_dir: str | Path, *,
                 bundle: DataBundle | None = None,
                 store: MemoryStore | None = None,
                 modes=MODES, command: str = "fusion-study") -> list[dict]:
    """One row per fusion mode, plus a per-stream allocation report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = bundle or build_data(cfg)
    if store is None:
        store = build_memory(cfg, ds=bundle.ds)
    rows, cells, mass_lines = [], [], []
    for mode in modes:
        cfg_m = replace(cfg, mode=mode)
        report, _, model = run_one(cfg_m, bundle, store,
                                   out_dir=out / f"mode_{mode}",
                                   command=command)
        mass = _mass_probe(cfg_m, model, bundle, store)
        rows.append({"mode": mode, "report": report.to_dict(), "mass": mass})
        cells.append([f"mode-{mode}"] + _metric_cells(report))
        alloc = "  ".join(f"{s}={mass['per_stream'][s]:.3f}" for s in STREAMS)
        kind = "gate" if mode == "c" else ("1/3 fixed" if mode == "d" else "mass")
        mass_lines.append(f"mode-{mode} ({kind}): {alloc}")
    header = ["mode"] + GRID_HEADER[1:]
    _write_grid(out, "fusion", "fusion-grid", cfg, command, rows, header, cells)
    man = make_manifest("attention-mass", seed=cfg.seed, command=command,
                        cfg_hash=cfg.cfg_hash)
    write_text_artifact(out / "attention_mass.txt", man, mass_lines)
    return rows


def scale_study(cfg: RunConfig, out_dir: str | Path, *, dims=(64, 128),
                bundle: DataBundle | None = None,
                command: str = "scale-study") -> list[dict]:
    """Hidden-width sweep on a fixed dataset.

    The memory store is re-fit per width: baked slot vectors live in the
    model dimension, so they cannot be shared across widths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = bundle or build_data(cfg)
    rows, cells = [], []
    for d_h in dims:
        cfg_d = replace(cfg, d_h=d_h)
        store = build_memory(cfg_d, bundle.ds)
        report, _, _ = run_one(cfg_d, bundle, store, out_dir=out / f"dh_{d_h}",
                               command=command)
        rows.append({"d_h": d_h, "report": report.to_dict()})
        cells.append([f"d_h={d_h}"] + _metric_cells(report))
    header = ["width"] + GRID_HEADER[1:]
    _write_grid(out, "scale", "scale-grid", cfg, command, rows, header, cells,
                extra={"dims": list(dims)})
    return rows


def study_profile(seed: int = 0, **overrides) -> RunConfig:
    """Small-but-meaningful profile for the comparative studies.

    Sized so one train+eval run takes minutes on a laptop CPU while the
    planted long-range dependencies stay learnable: short windows, narrow
    model, small codebook, single report cutoff.
    """
    base = dict(
        d_h=64, n_heads=4, recent_layers=1, mid_layers=1, decoder_layers=2,
        idx_heads=2, idx_width=16, level_sizes=[16, 16, 16], mode="d",
        m_slots=8, topk=24, r_window=48, l_window=192, t_cap=2048,
        n_users=10_000, n_items=2048, horizon=384, plant_rate=0.3,
        plant_mid_rate=0.1, n_clusters=48, item_dim=32, test_fraction=0.1,
        min_len=48, batch_size=16, warmup_steps=10,
        stage_steps=[60, 200, 60, 80], seed=seed, precision="fp32",
        eval_ks=[10], out_dir=f"runs/study_seed{seed}")
    base.update(overrides)
    return RunConfig(**base)
