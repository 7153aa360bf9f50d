"""Command-line surface: every pipeline phase as a subcommand.

Artifacts chain through one run directory: `datagen` writes data/,
`quantize` writes codebook.bin + sid_index.bin, `compress` writes store.bin,
`train` writes checkpoints + losses.jsonl, `eval` writes eval.json/.txt.
The study subcommands (`ablate`, `fusion-study`, `scale-study`) are
self-contained: they build their own data for the configured seed.

Exit codes: 0 ok, 1 config error, 2 data error, 3 internal error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import make_manifest, write_text_artifact
from .bench import bench_indexer, bench_table_lines
from .checkpoint import load_into_module, save_module
from .config import RunConfig, load_config, save_config
from .data import PlantSpec, generate_synthetic
from .data import export as export_data
from .data import ingest as ingest_data
from .decoder import STREAMS
from .errors import ConfigError, DataError
from .evaluate import evaluate_model, save_eval_report
from .lifecycle import MemoryStore, StoreMiss
from .quantizer import (QuantizerError, build_sid_index, fit_residual_kmeans,
                        index_from_codes, load_codebook, load_tensors,
                        quantize_batch, save_codebook, save_tensors)
from .studies import (DataBundle, ablation_study, fusion_study, init_model,
                      scale_study)
from .tensor import use_dtype
from .training import bake_store, train_compressor, train_model


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="INI config file")
    p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                   help="override one config entry (repeatable)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", metavar="DIR", help="override run.out_dir")
    p.add_argument("--workers", type=int, help="override run.workers")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-worker fixed-order execution")


def _load_cfg(args) -> RunConfig:
    """Defaults < config file < --set overrides < dedicated flags."""
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.workers is not None:
        cfg.workers = args.workers
    if args.deterministic:
        cfg.deterministic = True
    if cfg.deterministic:
        cfg.workers = 1
    cfg.validate()
    return cfg


def _outdir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / f"config.{command}.ini")
    return out


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DataError(f"missing artifact {path}; "
                        f"run the `{producer}` subcommand first")
    return path


def _parse_streams(raw: str | None) -> tuple[str, ...] | None:
    if raw is None:
        return None
    streams = tuple(s.strip() for s in raw.split(",") if s.strip())
    bad = [s for s in streams if s not in STREAMS]
    if bad or not streams:
        raise ConfigError(f"--streams must name a subset of {list(STREAMS)}, "
                          f"got {raw!r}")
    return streams


def _load_dataset(args, cfg: RunConfig):
    data_dir = Path(args.data) if args.data else Path(cfg.out_dir) / "data"
    _require(data_dir / "events.tsv", "datagen")
    return ingest_data(data_dir)


def _load_bundle(args, cfg: RunConfig):
    """Dataset + codebook + code table + SID index from their artifacts."""
    ds = _load_dataset(args, cfg)
    out = Path(cfg.out_dir)
    cb_path = Path(args.codebook) if args.codebook else out / "codebook.bin"
    idx_path = Path(args.index) if args.index else out / "sid_index.bin"
    cb = load_codebook(_require(cb_path, "quantize"))
    tensors, _ = load_tensors(_require(idx_path, "quantize"))
    codes = tensors["codes"].astype(np.int64)
    index = index_from_codes(tensors["item_ids"].astype(np.int64), codes)
    return DataBundle(ds, cb, codes, index)


def _load_store(args, cfg: RunConfig) -> MemoryStore:
    path = Path(args.store) if args.store else Path(cfg.out_dir) / "store.bin"
    return MemoryStore.load(str(_require(path, "compress")))


# ---- subcommands ---------------------------------------------------------


def cmd_datagen(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, "datagen")
    spec = PlantSpec(rate=cfg.plant_rate, mid_rate=cfg.plant_mid_rate,
                     recent_window=cfg.r_window, horizon_window=cfg.l_window)
    ds = generate_synthetic(cfg.n_users, cfg.n_items, cfg.horizon, cfg.seed,
                            spec, n_clusters=cfg.n_clusters,
                            item_dim=cfg.item_dim,
                            test_fraction=cfg.test_fraction,
                            min_len=cfg.min_len, workers=cfg.workers)
    export_data(ds, out / "data", command="datagen", cfg_hash=cfg.cfg_hash)
    n_test = len(ds.split_users("test"))
    print(f"datagen: {len(ds.users)} users ({n_test} test), "
          f"{len(ds.catalog_ids)} items -> {out / 'data'}")
    return 0


def cmd_quantize(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, "quantize")
    ds = _load_dataset(args, cfg)
    cb = fit_residual_kmeans(ds.catalog_vecs, len(cfg.level_sizes),
                             list(cfg.level_sizes), cfg.seed)
    codes = quantize_batch(ds.catalog_vecs, cb)
    index = build_sid_index(ds.catalog_ids, ds.catalog_vecs, cb)
    man = make_manifest("codebook", cfg.seed, "quantize", cfg.cfg_hash)
    save_codebook(out / "codebook.bin", cb, man)
    man = make_manifest("sid-index", cfg.seed, "quantize", cfg.cfg_hash,
                        extra={"collision_rate": index.collision_rate})
    save_tensors(out / "sid_index.bin",
                 {"item_ids": np.asarray(ds.catalog_ids, dtype=np.float64),
                  "codes": codes.astype(np.float64)}, man)
    mses = ", ".join(f"{m:.4f}" for m in cb.level_mse)
    print(f"quantize: sizes {cb.sizes}, per-level MSE [{mses}], "
          f"collision rate {index.collision_rate:.4f}")
    return 0


def cmd_compress(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, "compress")
    ds = _load_dataset(args, cfg)
    with use_dtype(cfg.precision):
        embedder, comp, losses = train_compressor(cfg, ds)
        store = bake_store(cfg, ds, embedder, comp)
    man = make_manifest("memory-store", cfg.seed, "compress", cfg.cfg_hash)
    store.save(str(out / "store.bin"), man)
    man = make_manifest("checkpoint", cfg.seed, "compress", cfg.cfg_hash,
                        extra={"part": "compressor"})
    save_module(out / "compressor.ckpt", comp, man)
    first = losses[0] if losses else float("nan")
    last = losses[-1] if losses else float("nan")
    print(f"compress: {len(store)} users baked at {store.m_slots} slots; "
          f"recon loss {first:.4f} -> {last:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, "train")
    streams = _parse_streams(args.streams) or STREAMS
    bundle = _load_bundle(args, cfg)
    store = _load_store(args, cfg) if "lifecycle" in streams else None
    with use_dtype(cfg.precision):
        model = init_model(cfg, bundle)
        result = train_model(cfg, model, bundle.ds, store, bundle.item_codes,
                             out_dir=out, streams=streams)
    last = result.reports[-1]
    print(f"train: {result.steps} steps over stages "
          f"{sorted(result.checkpoints)}; final ntp {last.ntp:.4f} "
          f"-> {result.final_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, "eval")
    bundle = _load_bundle(args, cfg)
    ckpt = Path(args.ckpt) if args.ckpt else out / "final.ckpt"
    with use_dtype(cfg.precision):
        model = init_model(cfg, bundle)
        man = load_into_module(_require(ckpt, "train"), model)
        streams = _parse_streams(args.streams) \
            or tuple(man.get("streams", STREAMS))
        store = _load_store(args, cfg) if "lifecycle" in streams else None
        report = evaluate_model(cfg, model, bundle.ds, store,
                                bundle.item_codes, bundle.index,
                                streams=streams, split=args.split)
    jpath, tpath = save_eval_report(report, out)
    for line in report.table_lines():
        print(line)
    print(f"eval: report -> {jpath}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, "ablate")
    rows = ablation_study(cfg, out)
    k = max(cfg.eval_ks)
    for r in rows:
        hr = r["report"]["hrecall"][str(k)]["3"]
        print(f"ablate: {r['setting']:>17}  hrecall@L3@{k} = {hr:.4f}")
    print(f"ablate: grid -> {out / 'ablation.txt'}")
    return 0


def cmd_fusion_study(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, "fusion-study")
    rows = fusion_study(cfg, out)
    k = max(cfg.eval_ks)
    for r in rows:
        hr = r["report"]["hrecall"][str(k)]["3"]
        alloc = "  ".join(f"{s}={r['mass']['per_stream'][s]:.3f}"
                          for s in STREAMS)
        print(f"fusion-study: mode-{r['mode']}  hrecall@L3@{k} = {hr:.4f}  "
              f"[{alloc}]")
    print(f"fusion-study: grid -> {out / 'fusion.txt'}")
    return 0


def cmd_scale_study(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, "scale-study")
    dims = tuple(int(d) for d in args.dims.split(","))
    rows = scale_study(cfg, out, dims=dims)
    k = max(cfg.eval_ks)
    for r in rows:
        hr = r["report"]["hrecall"][str(k)]["3"]
        print(f"scale-study: d_h={r['d_h']:<4d}  hrecall@L3@{k} = {hr:.4f}")
    print(f"scale-study: grid -> {out / 'scale.txt'}")
    return 0


def cmd_bench_indexer(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(cfg, "bench-indexer")
    lengths = tuple(int(x) for x in args.lengths.split(","))
    rows = bench_indexer(lengths=lengths, k=args.topk, d_h=cfg.d_h,
                         n_heads=cfg.n_heads, idx_heads=cfg.idx_heads,
                         idx_width=cfg.idx_width, trials=args.trials,
                         dtype=cfg.precision)
    lines = bench_table_lines(rows)
    man = make_manifest("bench-indexer", cfg.seed, "bench-indexer",
                        cfg.cfg_hash,
                        extra={"lengths": list(lengths), "k": args.topk})
    write_text_artifact(out / "bench_indexer.txt", man, lines)
    payload = {"manifest": man,
               "rows": [r.__dict__ for r in rows]}
    (out / "bench_indexer.json").write_text(
        json.dumps(payload, indent=1, sort_keys=True) + "\n")
    for line in lines:
        print(line)
    return 0


def main(argv: list[str] | None = None) -> int:
    top = argparse.ArgumentParser(
        prog="tristream",
        description=("Three-stream generative recommender pipeline: data "
                     "synthesis, item quantization, lifecycle compression, "
                     "staged training, beam-search evaluation, and the "
                     "comparison studies."))
    top.add_argument("--version", action="version", version=__version__)
    sub = top.add_subparsers(dest="command", required=True)

    specs = [
        ("datagen", cmd_datagen, "synthesize an event log + item catalog"),
        ("quantize", cmd_quantize, "fit the residual codebook + SID index"),
        ("compress", cmd_compress, "fit the lifecycle compressor, bake the "
                                   "memory store"),
        ("train", cmd_train, "run the staged training schedule"),
        ("eval", cmd_eval, "beam-search evaluation of a checkpoint"),
        ("ablate", cmd_ablate, "four-row stream-ablation grid"),
        ("fusion-study", cmd_fusion_study, "fusion modes a-d + attention "
                                           "allocation"),
        ("scale-study", cmd_scale_study, "hidden-width sweep"),
        ("bench-indexer", cmd_bench_indexer, "sparse vs dense attention "
                                             "latency"),
    ]
    parsers = {}
    for name, fn, help_ in specs:
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        p.set_defaults(fn=fn)
        parsers[name] = p

    for name in ("quantize", "compress", "train", "eval"):
        parsers[name].add_argument("--data", metavar="DIR",
                                   help="dataset directory (default OUT/data)")
    for name in ("train", "eval"):
        parsers[name].add_argument("--codebook", metavar="FILE")
        parsers[name].add_argument("--index", metavar="FILE")
        parsers[name].add_argument("--store", metavar="FILE")
        parsers[name].add_argument("--streams", metavar="CSV",
                                   help="subset of recent,mid,lifecycle")
    parsers["eval"].add_argument("--ckpt", metavar="FILE",
                                 help="checkpoint (default OUT/final.ckpt)")
    parsers["eval"].add_argument("--split", default="test",
                                 choices=("train", "test"))
    parsers["scale-study"].add_argument("--dims", default="64,128",
                                        metavar="CSV")
    parsers["bench-indexer"].add_argument("--lengths", default="1024,4096",
                                          metavar="CSV")
    parsers["bench-indexer"].add_argument("--topk", type=int, default=64)
    parsers["bench-indexer"].add_argument("--trials", type=int, default=3)

    args = top.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (DataError, QuantizerError, StoreMiss, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except Exception as e:                      # noqa: BLE001
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
