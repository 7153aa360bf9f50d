"""Run configuration: typed defaults, INI files, and flag overrides.

One RunConfig drives every pipeline phase.  Precedence is
flags > config file > built-in defaults; the canonical serialization
(`to_text`) is what gets hashed into artifact manifests, so two runs with
the same effective config share a config_hash no matter how it was spelled.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .artifacts import config_hash
from .errors import ConfigError

_MODES = ("a", "b", "c", "d")
_PHIS = ("elu1", "identity")
_CORRECTIONS = ("none", "local")
_PRECISIONS = ("fp32", "fp64")

# Full-scale reference profile (production sizing; not runnable at desk).
# Kept as a record of what the desk defaults below were scaled down from.
REFERENCE_PROFILE = {
    "d_h": 1024,
    "level_sizes": [8192, 8192, 8192],
    "r_window": 256,
    "l_window": 5000,
    "t_cap": 100_000,
    "decoder_layers": 4,
    "n_heads": 8,
    "idx_heads": 2,
}


@dataclass
class RunConfig:
    # [model]
    d_h: int = 128
    n_heads: int = 4
    recent_layers: int = 2
    mid_layers: int = 2
    decoder_layers: int = 2
    idx_heads: int = 2
    idx_width: int = 32
    level_sizes: list[int] = field(default_factory=lambda: [64, 64, 64])
    mode: str = "d"
    m_slots: int = 16
    topk: int = 64
    phi: str = "elu1"
    correction: str = "none"
    local_window: int = 64
    r_window: int = 64
    l_window: int = 512
    t_cap: int = 2048

    # [data]
    n_users: int = 2000
    n_items: int = 4096
    horizon: int = 768
    plant_rate: float = 0.3
    plant_mid_rate: float = 0.1
    n_clusters: int = 64
    item_dim: int = 64
    test_fraction: float = 0.1
    min_len: int = 32

    # [train]
    batch_size: int = 16
    lr_main: float = 1e-3
    lr_indexer: float = 1e-3
    lr_compress: float = 1e-3
    warmup_steps: int = 20
    stage_steps: list[int] = field(default_factory=lambda: [150, 300, 120, 150])
    plateau: bool = False
    plateau_window: int = 200
    plateau_threshold: float = 0.005
    log_every: int = 1

    # [run]
    seed: int = 0
    precision: str = "fp32"
    workers: int = 1
    deterministic: bool = True
    out_dir: str = "runs/default"
    eval_ks: list[int] = field(default_factory=lambda: [10, 50, 100])

    def validate(self) -> None:
        c = self
        checks = [
            (c.d_h >= 8, "model.d_h", "must be >= 8"),
            (c.d_h % max(c.n_heads, 1) == 0, "model.n_heads",
             f"must divide d_h={c.d_h}"),
            (c.n_heads >= 1, "model.n_heads", "must be >= 1"),
            (c.recent_layers >= 1, "model.recent_layers", "must be >= 1"),
            (c.mid_layers >= 1, "model.mid_layers", "must be >= 1"),
            (c.decoder_layers >= 1, "model.decoder_layers", "must be >= 1"),
            (c.idx_heads >= 1, "model.idx_heads", "must be >= 1"),
            (c.idx_width >= 1, "model.idx_width", "must be >= 1"),
            (len(c.level_sizes) >= 1 and all(s >= 2 for s in c.level_sizes),
             "model.level_sizes", "need at least one level, every size >= 2"),
            (c.mode in _MODES, "model.mode", f"must be one of {_MODES}"),
            (c.m_slots >= 1, "model.m_slots", "must be >= 1"),
            (c.topk >= 1, "model.topk", "must be >= 1"),
            (c.phi in _PHIS, "model.phi", f"must be one of {_PHIS}"),
            (c.correction in _CORRECTIONS, "model.correction",
             f"must be one of {_CORRECTIONS}"),
            (c.local_window >= 1, "model.local_window", "must be >= 1"),
            (1 <= c.r_window < c.l_window, "model.r_window",
             f"need 1 <= r_window < l_window, got {c.r_window}/{c.l_window}"),
            (c.t_cap >= 2, "model.t_cap", "must be >= 2"),
            (c.n_users >= 1, "data.n_users", "must be >= 1"),
            (c.n_items >= 100, "data.n_items", "must be >= 100"),
            (c.horizon >= 64, "data.horizon", "must be >= 64"),
            (0.0 <= c.plant_rate <= 1.0, "data.plant_rate", "must be in [0, 1]"),
            (0.0 <= c.plant_mid_rate <= 1.0, "data.plant_mid_rate",
             "must be in [0, 1]"),
            (c.plant_rate + c.plant_mid_rate <= 1.0, "data.plant_mid_rate",
             "plant_rate + plant_mid_rate must be <= 1"),
            (c.n_clusters >= 5, "data.n_clusters", "must be >= 5"),
            (c.item_dim >= 8, "data.item_dim", "must be >= 8"),
            (0.0 < c.test_fraction < 1.0, "data.test_fraction", "must be in (0, 1)"),
            (c.min_len >= 2, "data.min_len", "must be >= 2"),
            (c.batch_size >= 1, "train.batch_size", "must be >= 1"),
            (c.lr_main > 0, "train.lr_main", "must be > 0"),
            (c.lr_indexer > 0, "train.lr_indexer", "must be > 0"),
            (c.lr_compress > 0, "train.lr_compress", "must be > 0"),
            (c.warmup_steps >= 0, "train.warmup_steps", "must be >= 0"),
            (len(c.stage_steps) == 4 and all(s >= 0 for s in c.stage_steps),
             "train.stage_steps", "need 4 non-negative budgets (stages 0-3)"),
            (c.plateau_window >= 10, "train.plateau_window", "must be >= 10"),
            (0.0 < c.plateau_threshold < 1.0, "train.plateau_threshold",
             "must be in (0, 1)"),
            (c.log_every >= 1, "train.log_every", "must be >= 1"),
            (c.precision in _PRECISIONS, "run.precision",
             f"must be one of {_PRECISIONS}"),
            (c.workers >= 1, "run.workers", "must be >= 1"),
            (len(c.eval_ks) >= 1 and all(k >= 1 for k in c.eval_ks)
             and list(c.eval_ks) == sorted(c.eval_ks),
             "run.eval_ks", "need ascending positive cutoffs"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ConfigError(f"{name}: {msg}")

    # ---- serialization ----

    def to_text(self) -> str:
        out = io.StringIO()
        for sec in _SECTIONS:
            out.write(f"[{sec}]\n")
            for key in _SECTION_KEYS[sec]:
                out.write(f"{key} = {_format(getattr(self, key))}\n")
            out.write("\n")
        return out.getvalue()

    @property
    def cfg_hash(self) -> str:
        return config_hash(self.to_text())


_SECTIONS = ("model", "data", "train", "run")
_SECTION_KEYS = {
    "model": ("d_h", "n_heads", "recent_layers", "mid_layers", "decoder_layers",
              "idx_heads", "idx_width", "level_sizes", "mode", "m_slots", "topk",
              "phi", "correction", "local_window", "r_window", "l_window", "t_cap"),
    "data": ("n_users", "n_items", "horizon", "plant_rate", "plant_mid_rate",
             "n_clusters", "item_dim", "test_fraction", "min_len"),
    "train": ("batch_size", "lr_main", "lr_indexer", "lr_compress", "warmup_steps",
              "stage_steps", "plateau", "plateau_window", "plateau_threshold",
              "log_every"),
    "run": ("seed", "precision", "workers", "deterministic", "out_dir", "eval_ks"),
}
_SECTION_OF = {k: sec for sec, keys in _SECTION_KEYS.items() for k in keys}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(key: str, raw: str):
    ftype = _FIELD_TYPES.get(key)
    raw = raw.strip()
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype == "list[int]":
            toks = [t for t in raw.replace(",", " ").split() if t]
            if not toks:
                raise ValueError("empty list")
            return [int(t) for t in toks]
        return raw
    except ValueError as e:
        raise ConfigError(f"{_SECTION_OF.get(key, '?')}.{key}: {e}") from None


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional INI file, and
    `section.key=value` override strings (applied in that order)."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            parser.read_string(p.read_text(), source=str(p))
        except configparser.Error as e:
            raise ConfigError(f"{p}: {e}") from None
        for sec in parser.sections():
            if sec not in _SECTION_KEYS:
                raise ConfigError(f"{p}: unknown section [{sec}]")
            for key, raw in parser.items(sec):
                if key not in _SECTION_KEYS[sec]:
                    raise ConfigError(f"{p}: unknown key {sec}.{key}")
                setattr(cfg, key, _coerce(key, raw))
    for ov in overrides or []:
        apply_override(cfg, ov)
    cfg.validate()
    return cfg


def apply_override(cfg: RunConfig, spec: str) -> None:
    """Apply one `key=value` or `section.key=value` override in place."""
    if "=" not in spec:
        raise ConfigError(f"override must look like key=value, got {spec!r}")
    key, raw = spec.split("=", 1)
    key = key.strip()
    if "." in key:
        sec, key = key.split(".", 1)
        if _SECTION_OF.get(key) != sec:
            raise ConfigError(f"unknown config key {sec}.{key}")
    elif key not in _SECTION_OF:
        raise ConfigError(f"unknown config key {key}")
    setattr(cfg, key, _coerce(key, raw))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_text())
