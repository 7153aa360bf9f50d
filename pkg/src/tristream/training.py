"""Staged optimization.

Stage 0 trains the lifecycle compressor offline (reconstruction objective,
frozen embedder) and bakes the memory store.  Stages 1-3 train the model:
dense warm-up without the indexer objective, dense with KL distillation,
then sparse attention driven by the trained indexer.  The indexer's
parameters are owned by a separate optimizer and receive gradients only
from the distillation loss.
"""

from __future__ import annotations

import json
import queue
import threading
import warnings
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .artifacts import make_manifest, manifest_line
from .checkpoint import save_module
from .config import RunConfig
from .data import Dataset, segment
from .decoder import STREAMS
from .errors import ConfigError, DataError
from .features import FeatureEmbedder
from .lifecycle import MemoryStore, QLUCompressor, compress_offline, qlu_attend, recon_loss
from .midterm import indexer_loss
from .model import Batch, TriStreamModel, make_batch, vocab_sizes
from .optim import Adam
from .tensor import Tensor


@dataclass(frozen=True)
class StagePolicy:
    """What a training stage is allowed to do.

    Invariants: stage 1 runs dense with the distillation weight off;
    stage 2 turns the weight on but stays dense; stage 3 keeps the weight
    on and switches the mid-term encoder to sparse selection.
    """
    stage: int
    lam: float
    sparse: bool

    def validate(self) -> None:
        ok = {1: (0.0, False), 2: (1.0, False), 3: (1.0, True)}
        if self.stage not in ok:
            raise ConfigError(f"stage must be 1, 2, or 3, got {self.stage}")
        if (self.lam, self.sparse) != ok[self.stage]:
            raise ConfigError(
                f"stage {self.stage} requires lam={ok[self.stage][0]} "
                f"sparse={ok[self.stage][1]}, got lam={self.lam} sparse={self.sparse}")


def stage_policy(stage: int) -> StagePolicy:
    table = {1: StagePolicy(1, 0.0, False),
             2: StagePolicy(2, 1.0, False),
             3: StagePolicy(3, 1.0, True)}
    if stage not in table:
        raise ConfigError(f"stage must be 1, 2, or 3, got {stage}")
    return table[stage]


@dataclass
class LossReport:
    step: int
    stage: int
    ntp: float
    indexer: float
    lam: float
    total: float

    def validate(self) -> None:
        if self.total != self.ntp + self.lam * self.indexer:
            raise ConfigError("loss report total does not decompose")

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "stage": self.stage,
                           "ntp": self.ntp, "indexer": self.indexer,
                           "lam": self.lam, "total": self.total})


def ntp_loss(logits: list[Tensor], targets: np.ndarray) -> Tensor:
    """Mean over code levels of cross-entropy against the target codes."""
    targets = np.asarray(targets)
    b, depth = targets.shape
    if len(logits) != depth:
        raise ConfigError(f"got {len(logits)} logit levels for depth {depth}")
    total = None
    for level, lg in enumerate(logits):
        size = lg.shape[-1]
        col = targets[:, level]
        if (col < 0).any() or (col >= size).any():
            raise DataError(f"level {level + 1} code outside [0, {size})")
        onehot = np.zeros((b, size))
        onehot[np.arange(b), col] = 1.0
        logp = T.masked_log_softmax(lg)
        term = T.scale(T.sum_(T.mul(logp, Tensor(onehot))), -1.0 / b)
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / depth)


# ---- batch pipeline ----

def iter_batches(model: TriStreamModel, ds: Dataset, item_codes: np.ndarray,
                 store: MemoryStore | None, cfg: RunConfig):
    """Endless train-split batches in a seed-determined order.  The ragged
    tail of each pass is dropped so batch size stays constant."""
    users = sorted(ds.split_users("train"), key=lambda u: u.user_id)
    if not users:
        raise DataError("dataset has no train-split users")
    order = np.random.default_rng([cfg.seed, 3])
    bs = min(cfg.batch_size, len(users))
    while True:
        perm = order.permutation(len(users))
        for at in range(0, len(users) - bs + 1, bs):
            chunk = [users[i] for i in perm[at:at + bs]]
            yield make_batch(model.embedder, chunk, item_codes,
                             r_window=model.r_window, l_window=model.l_window,
                             t_cap=cfg.t_cap, m_slots=model.m_slots, store=store)


class _Prefetcher:
    """Builds batches ahead on one worker thread; order stays deterministic."""

    def __init__(self, it, depth: int = 4):
        self._q: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._t = threading.Thread(target=self._run, args=(it,), daemon=True)
        self._t.start()

    def _run(self, it) -> None:
        for item in it:
            while not self._stop.is_set():
                try:
                    self._q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if self._stop.is_set():
                return

    def __iter__(self):
        return self

    def __next__(self):
        return self._q.get()

    def close(self) -> None:
        self._stop.set()
        while not self._q.empty():
            self._q.get_nowait()


# ---- main training loop ----

@dataclass
class TrainResult:
    checkpoints: dict[int, str]
    final_path: str
    losses_path: str
    steps: int
    reports: list[LossReport]


def _plateaued(history: deque, window: int, threshold: float) -> bool:
    if len(history) < window:
        return False
    vals = np.array(history)
    half = window // 2
    old = vals[-window:-half].mean()
    new = vals[-half:].mean()
    return (old - new) < threshold * max(abs(old), 1e-9)


def train_model(cfg: RunConfig, model: TriStreamModel, ds: Dataset,
                store: MemoryStore | None, item_codes: np.ndarray, *,
                out_dir: str | Path, streams=STREAMS,
                command: str = "train") -> TrainResult:
    """Stages 1-3.  Fixed step budgets by default; with cfg.plateau the
    monitored total loss can end a stage early once its moving average
    stops improving (budgets stay as hard caps)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if "lifecycle" in streams and store is None:
        raise ConfigError("lifecycle stream enabled but no memory store given; "
                          "run the compress step first")

    main_opt = Adam([p for _, p in model.main_parameters()], lr=cfg.lr_main)
    idx_opt = Adam([p for _, p in model.indexer_parameters()], lr=cfg.lr_indexer)

    batches = iter_batches(model, ds, item_codes, store, cfg)
    prefetch = None
    if cfg.workers > 1:
        prefetch = _Prefetcher(batches, depth=2 + cfg.workers)
        batches = prefetch

    losses_path = out / "losses.jsonl"
    manifest = make_manifest("loss-report", seed=cfg.seed, command=command,
                             cfg_hash=cfg.cfg_hash,
                             extra={"streams": list(streams), "mode": model.mode})
    reports: list[LossReport] = []
    checkpoints: dict[int, str] = {}
    step = 0
    try:
        with open(losses_path, "w") as fh:
            fh.write(manifest_line(manifest) + "\n")
            for stage in (1, 2, 3):
                budget = cfg.stage_steps[stage]
                if budget == 0:
                    continue
                pol = stage_policy(stage)
                history: deque = deque(maxlen=cfg.plateau_window)
                for _ in range(budget):
                    batch = next(batches)
                    rep = _train_step(cfg, model, batch, pol, streams,
                                      main_opt, idx_opt, step)
                    step += 1
                    history.append(rep.total)
                    if step % cfg.log_every == 0:
                        fh.write(rep.to_json() + "\n")
                        reports.append(rep)
                    if cfg.plateau and _plateaued(history, cfg.plateau_window,
                                                  cfg.plateau_threshold):
                        break
                path = out / f"stage{stage}.ckpt"
                _save(path, model, cfg, command, stage, step, streams)
                checkpoints[stage] = str(path)
            final = out / "final.ckpt"
            _save(final, model, cfg, command, max(checkpoints, default=0),
                  step, streams)
    finally:
        if prefetch is not None:
            prefetch.close()
    return TrainResult(checkpoints, str(final), str(losses_path), step, reports)


def _train_step(cfg: RunConfig, model: TriStreamModel, batch: Batch,
                pol: StagePolicy, streams, main_opt: Adam, idx_opt: Adam,
                step: int) -> LossReport:
    want = pol.lam > 0 and "mid" in streams
    logits, aux = model.forward(batch, sparse=pol.sparse, topk=cfg.topk,
                                want_scores=want, streams=streams)
    ntp = ntp_loss(logits, batch.targets)
    idx_loss = None
    if want and aux["mid"] is not None:
        mid_aux = aux["mid"]
        if pol.sparse:
            idx_loss = indexer_loss([a[0] for a in mid_aux],
                                    [a[1] for a in mid_aux], batch.mid_mask,
                                    key_masks=[a[2] for a in mid_aux])
        else:
            idx_loss = indexer_loss(mid_aux[0], mid_aux[1], batch.mid_mask)
    total = ntp if idx_loss is None else T.add(ntp, T.scale(idx_loss, pol.lam))

    scale = 1.0
    if cfg.warmup_steps > 0:
        scale = min(1.0, (step + 1) / cfg.warmup_steps)
    main_opt.lr = cfg.lr_main * scale
    idx_opt.lr = cfg.lr_indexer * scale

    main_opt.zero_grad()
    idx_opt.zero_grad()
    total.backward()
    main_opt.step()
    if pol.lam > 0:
        idx_opt.step()

    ntp_f = float(ntp.data)
    idx_f = float(idx_loss.data) if idx_loss is not None else 0.0
    rep = LossReport(step=step, stage=pol.stage, ntp=ntp_f, indexer=idx_f,
                     lam=pol.lam, total=ntp_f + pol.lam * idx_f)
    rep.validate()
    return rep


def _save(path: Path, model: TriStreamModel, cfg: RunConfig, command: str,
          stage: int, step: int, streams) -> None:
    manifest = make_manifest("checkpoint", seed=cfg.seed, command=command,
                             cfg_hash=cfg.cfg_hash,
                             extra={"stage": stage, "step": step,
                                    "streams": list(streams), "mode": model.mode})
    save_module(path, model, manifest)


# ---- stage 0: compressor pretraining + store baking ----

def lifecycle_slice(user, cfg: RunConfig):
    """The lifecycle region a serving system would have compressed offline:
    everything older than the L-window of the leave-one-out history."""
    hist, _ = user.drop_last()
    if hist.T > cfg.t_cap:
        hist = hist.slice(hist.T - cfg.t_cap, hist.T)
    return segment(hist, cfg.r_window, cfg.l_window).lifecycle


def train_compressor(cfg: RunConfig, ds: Dataset,
                     steps: int | None = None) -> tuple[FeatureEmbedder,
                                                        QLUCompressor,
                                                        list[float]]:
    """Reconstruction pretraining over train-split lifecycle regions.

    The embedder that feeds the compressor is frozen at init: baked memories
    must stay consistent with the features they were computed from, and a
    trainable embedder would let the reconstruction targets drift."""
    steps = cfg.stage_steps[0] if steps is None else steps
    rng = np.random.default_rng([cfg.seed, 1])
    n_items, n_authors, n_tags = vocab_sizes(ds)
    embedder = FeatureEmbedder(rng, cfg.d_h, n_items, n_authors, n_tags)
    comp = QLUCompressor(rng, cfg.d_h, cfg.m_slots, phi=cfg.phi,
                         correction=cfg.correction, window=cfg.local_window)
    pool = [s for u in ds.split_users("train")
            if (s := lifecycle_slice(u, cfg)).T >= 2]
    history: list[float] = []
    if not pool:
        warnings.warn("no train user has a lifecycle region; compressor "
                      "left at init")
        return embedder, comp, history
    order = np.random.default_rng([cfg.seed, 4])
    opt = Adam(comp.parameters(), lr=cfg.lr_compress)
    bs = min(cfg.batch_size, len(pool))
    for step in range(steps):
        picks = order.choice(len(pool), size=bs, replace=False)
        total = None
        for i in picks:
            life = pool[i]
            with T.no_grad():
                emb = embedder.embed_history(life, now_ts=int(life.ts[-1]))
            e = Tensor(emb.data)
            term = recon_loss(qlu_attend(comp, e), e, cfg.m_slots)
            total = term if total is None else T.add(total, term)
        total = T.scale(total, 1.0 / bs)
        opt.zero_grad()
        total.backward()
        opt.step()
        history.append(float(total.data))
    return embedder, comp, history


def bake_store(cfg: RunConfig, ds: Dataset, embedder: FeatureEmbedder,
               comp: QLUCompressor) -> MemoryStore:
    """Compress every user's lifecycle region into the store (train and test:
    serving reads memories for whoever shows up)."""
    store = MemoryStore(cfg.m_slots, cfg.d_h)
    for user in sorted(ds.users, key=lambda u: u.user_id):
        store.put(compress_offline(lifecycle_slice(user, cfg), embedder, comp))
    return store
