"""Event data model, three-way temporal segmentation, synthetic lifelong
histories with planted long-range dependencies, and event-log text IO.

Histories are stored columnar (one numpy array per feature) so segmentation
and feature embedding are cheap slices; InteractionEvent is the per-row view
used at the IO boundary.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .artifacts import make_manifest, read_text_artifact, write_text_artifact
from .errors import ConfigError, DataError

PT_CAP = 2.0  # playtime may exceed duration (replays) up to this factor


@dataclass(frozen=True)
class InteractionEvent:
    vid: int
    aid: int
    tag: int
    ts: int          # seconds since epoch
    pt: float        # playtime seconds >= 0
    dur: float       # duration seconds > 0
    label: int       # 0=skip, 1=like, 2=follow


_FIELDS = ("vid", "aid", "tag", "ts", "pt", "dur", "label")
_INT_FIELDS = {"vid", "aid", "tag", "ts", "label"}


@dataclass
class UserHistory:
    user_id: int
    vid: np.ndarray
    aid: np.ndarray
    tag: np.ndarray
    ts: np.ndarray
    pt: np.ndarray
    dur: np.ndarray
    label: np.ndarray
    split: str = "train"       # train | test
    plant: str = "none"        # none | mid | lifecycle

    @property
    def T(self) -> int:
        return len(self.vid)

    def event(self, i: int) -> InteractionEvent:
        return InteractionEvent(int(self.vid[i]), int(self.aid[i]), int(self.tag[i]),
                                int(self.ts[i]), float(self.pt[i]), float(self.dur[i]),
                                int(self.label[i]))

    def slice(self, start: int, stop: int) -> "UserHistory":
        kw = {f: getattr(self, f)[start:stop] for f in _FIELDS}
        return UserHistory(self.user_id, split=self.split, plant=self.plant, **kw)

    def drop_last(self) -> tuple["UserHistory", InteractionEvent]:
        """Leave-one-out split: (history without newest event, that event)."""
        if self.T < 2:
            raise DataError(f"user {self.user_id}: need >= 2 events to hold one out")
        return self.slice(0, self.T - 1), self.event(self.T - 1)

    def validate(self, pt_cap: float = PT_CAP) -> None:
        if self.T < 1:
            raise DataError(f"user {self.user_id}: empty history")
        if self.T > 1 and not (np.diff(self.ts) > 0).all():
            raise DataError(f"user {self.user_id}: timestamps not strictly increasing")
        if (self.pt < 0).any() or (self.dur <= 0).any():
            raise DataError(f"user {self.user_id}: bad pt/dur values")
        if (self.pt > pt_cap * self.dur).any():
            raise DataError(f"user {self.user_id}: pt exceeds {pt_cap} x dur")


@dataclass
class StreamBundle:
    """Disjoint, order-preserving split: lifecycle + mid_term + recent == history."""
    recent: UserHistory
    mid_term: UserHistory
    lifecycle: UserHistory


def segment(history: UserHistory, R: int, L: int) -> StreamBundle:
    """recent = newest R events, mid = next-newest L-R, lifecycle = remainder."""
    if not (1 <= R < L):
        raise ConfigError(f"need 1 <= R < L, got R={R} L={L}")
    t = history.T
    r_start = max(t - R, 0)
    m_start = max(t - L, 0)
    return StreamBundle(
        recent=history.slice(r_start, t),
        mid_term=history.slice(m_start, r_start),
        lifecycle=history.slice(0, m_start),
    )


# ---- synthetic generation ----


@dataclass(frozen=True)
class PlantSpec:
    """Controls how many users carry a long-range planted dependency.

    rate: fraction per split whose held-out target is predictable only from
    events older than the newest `horizon_window` (they inhabit a dormant
    interest cluster that never appears later).  mid_rate plants the target
    interest strictly inside the mid window instead (older than the newest
    `recent_window`, absent from the lifecycle region).  Windows must match
    the R/L the downstream model will segment with.
    """
    rate: float = 0.0
    mid_rate: float = 0.0
    recent_window: int = 64
    horizon_window: int = 512


@dataclass
class Dataset:
    users: list[UserHistory]
    catalog_ids: np.ndarray     # (n_items,)
    catalog_vecs: np.ndarray    # (n_items, item_dim)
    meta: dict = field(default_factory=dict)

    def user_by_id(self, uid: int) -> UserHistory:
        if not hasattr(self, "_by_id"):
            self._by_id = {u.user_id: u for u in self.users}
        return self._by_id[uid]

    def split_users(self, split: str) -> list[UserHistory]:
        return [u for u in self.users if u.split == split]


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if len(a.users) != len(b.users):
        return False
    if not np.array_equal(a.catalog_ids, b.catalog_ids):
        return False
    if not np.array_equal(a.catalog_vecs, b.catalog_vecs):
        return False
    for ua, ub in zip(a.users, b.users):
        if (ua.user_id, ua.split, ua.plant) != (ub.user_id, ub.split, ub.plant):
            return False
        for f in _FIELDS:
            if not np.array_equal(getattr(ua, f), getattr(ub, f)):
                return False
    return True


_GUARD = 24          # planted events stay this many positions clear of the boundary
_MEAN_BLOCK = 18     # regime block length
_EPOCH_LO, _EPOCH_HI = 24, 48    # transient-interest epoch length bounds
_DORMANT_W = np.array([0.25, 0.20, 0.15, 0.40])   # 3 transients + dormant


def generate_synthetic(n_users: int, n_items: int, horizon: int, seed: int,
                       plant_spec: PlantSpec | None = None,
                       n_clusters: int = 64, item_dim: int = 64,
                       test_fraction: float = 0.1, min_len: int = 32,
                       workers: int = 1) -> Dataset:
    """Synthetic lifelong histories over a clustered item space.

    Items live in `n_clusters` well-separated latent clusters (the catalog
    vectors feed the quantizer; an item's tag is its cluster).  Transient
    interests drift across epochs, so segments older than the newest epoch
    stop predicting the next event; planted users additionally carry a
    persistent interest that is active only in the region their plant kind
    dictates, and their held-out target comes from that interest.
    """
    plant = plant_spec or PlantSpec()
    if n_items < 100:
        raise ConfigError(f"n_items must be >= 100, got {n_items}")
    if horizon < 64:
        raise ConfigError(f"horizon must be >= 64, got {horizon}")
    if plant.rate > 0 and horizon < plant.horizon_window + _GUARD + 72:
        raise ConfigError(
            f"horizon {horizon} too short to plant beyond window {plant.horizon_window}")
    if plant.mid_rate > 0:
        if horizon < plant.recent_window + 96:
            raise ConfigError(f"horizon {horizon} too short for mid-window planting")
        if plant.horizon_window < plant.recent_window + 24:
            raise ConfigError("mid-window planting needs L >= R + 24")
    if n_clusters < 5:
        raise ConfigError("need at least 5 clusters to separate planted interests")

    root = np.random.SeedSequence(seed)
    ss_catalog, ss_assign, *ss_users = root.spawn(2 + n_users)

    # catalog: separated cluster centers + per-item jitter; tag == cluster
    crng = np.random.default_rng(ss_catalog)
    centers = crng.normal(0.0, 1.0, size=(n_clusters, item_dim)) * 3.0
    clusters = np.arange(n_items) % n_clusters
    crng.shuffle(clusters)
    vecs = centers[clusters] + crng.normal(0.0, 0.35, size=(n_items, item_dim))
    item_author = np.arange(n_items) // 4

    # split + plant assignment with exact per-split counts
    arng = np.random.default_rng(ss_assign)
    order = arng.permutation(n_users)
    n_test = int(round(test_fraction * n_users))
    split_of = np.array(["train"] * n_users, dtype=object)
    split_of[order[:n_test]] = "test"
    plant_of = np.array(["none"] * n_users, dtype=object)
    for name in ("train", "test"):
        members = np.flatnonzero(split_of == name)
        arng.shuffle(members)
        k_life = int(round(plant.rate * len(members)))
        k_mid = int(round(plant.mid_rate * len(members)))
        plant_of[members[:k_life]] = "lifecycle"
        plant_of[members[k_life : k_life + k_mid]] = "mid"

    def build(uid: int) -> UserHistory:
        return _gen_user(uid, np.random.default_rng(ss_users[uid]), str(plant_of[uid]),
                         str(split_of[uid]), plant, clusters, item_author,
                         n_clusters, n_items, horizon, min_len)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            users = list(pool.map(build, range(n_users)))
    else:
        users = [build(uid) for uid in range(n_users)]

    meta = {"n_users": n_users, "n_items": n_items, "horizon": horizon, "seed": seed,
            "n_clusters": n_clusters, "item_dim": item_dim,
            "plant_rate": plant.rate, "plant_mid_rate": plant.mid_rate,
            "recent_window": plant.recent_window, "horizon_window": plant.horizon_window}
    return Dataset(users, np.arange(n_items), vecs, meta)


def _blocks(rng: np.random.Generator, n: int, interests: np.ndarray,
            weights: np.ndarray) -> np.ndarray:
    """Regime-switching interest id per event position, length n."""
    out = np.empty(n, dtype=np.int64)
    pos = 0
    while pos < n:
        ln = int(np.clip(rng.geometric(1.0 / _MEAN_BLOCK), 6, 42))
        out[pos : pos + ln] = interests[rng.choice(len(interests), p=weights)]
        pos += ln
    return out


def _drift_blocks(rng: np.random.Generator, n: int, n_clusters: int,
                  w: np.ndarray, exclude: int = -1,
                  dormant: int = -1) -> np.ndarray:
    """Epoch-chained transient interests, oldest first: each epoch draws a
    fresh cluster triple, so segments older than the newest epoch stop
    predicting the next event.  dormant >= 0 additionally folds that one
    persistent cluster into every epoch (and keeps it out of the transient
    draws, as does exclude)."""
    ban = dormant if dormant >= 0 else exclude
    pool = np.flatnonzero(np.arange(n_clusters) != ban)
    out = np.empty(n, dtype=np.int64)
    pos = 0
    while pos < n:
        ln = min(int(rng.integers(_EPOCH_LO, _EPOCH_HI + 1)), n - pos)
        ints = rng.choice(pool, size=3, replace=False)
        if dormant >= 0:
            out[pos : pos + ln] = _blocks(rng, ln, np.append(ints, dormant),
                                          _DORMANT_W)
        else:
            out[pos : pos + ln] = _blocks(rng, ln, ints, w)
        pos += ln
    return out


def _recent_region(rng: np.random.Generator, n: int, base: np.ndarray,
                   w: np.ndarray, n_clusters: int,
                   exclude: int = -1) -> np.ndarray:
    """Drifting epochs capped by the base-interest tail (the newest epoch,
    which is what the held-out target echoes)."""
    tail = min(n, int(rng.integers(_EPOCH_LO, _EPOCH_HI + 1)))
    head = _drift_blocks(rng, n - tail, n_clusters, w, exclude=exclude)
    return np.concatenate([head, _blocks(rng, tail, base, w)])


def _gen_user(uid: int, rng: np.random.Generator, plant_kind: str, split: str,
              plant: PlantSpec, clusters: np.ndarray, item_author: np.ndarray,
              n_clusters: int, n_items: int, horizon: int, min_len: int) -> UserHistory:
    R, L = plant.recent_window, plant.horizon_window
    base = rng.choice(n_clusters, size=3, replace=False)
    special = -1
    if plant_kind != "none":
        while special < 0 or special in base:
            special = int(rng.integers(n_clusters))

    if plant_kind == "lifecycle":
        t_total = int(rng.integers(L + _GUARD + 72, horizon + 1))
    elif plant_kind == "mid":
        lo = min(R + 72, horizon - 8)
        t_total = int(rng.integers(lo, horizon + 1))
    else:
        t_total = int(np.clip(rng.gamma(2.0, horizon / 5.0) + min_len, min_len, horizon))
    t_hist = t_total - 1

    w = rng.dirichlet(np.ones(3) * 2.0)
    cluster_seq = np.empty(t_hist, dtype=np.int64)
    if plant_kind == "lifecycle":
        cut = t_hist - (L + _GUARD)  # newest L+guard of the history excludes `special`
        cluster_seq[:cut] = _drift_blocks(rng, cut, n_clusters, w,
                                          dormant=special)
        cluster_seq[cut:] = _recent_region(rng, t_hist - cut, base, w,
                                           n_clusters, exclude=special)
        if (cluster_seq[:cut] == special).sum() < 12:
            cluster_seq[: min(24, cut)] = special
    elif plant_kind == "mid":
        m_start = max(t_hist - L, 0)
        m_stop = t_hist - R - _GUARD // 2
        cluster_seq[:m_start] = _drift_blocks(rng, m_start, n_clusters, w,
                                              exclude=special)
        mix_i = np.append(base, special)
        cluster_seq[m_start:m_stop] = _blocks(rng, m_stop - m_start, mix_i,
                                              _DORMANT_W)
        cluster_seq[m_stop:] = _blocks(rng, t_hist - m_stop, base, w)
        if (cluster_seq[m_start:m_stop] == special).sum() < 12:
            cluster_seq[m_start : min(m_start + 24, m_stop)] = special
    else:
        cluster_seq = _recent_region(rng, t_hist, base, w, n_clusters)

    # target interest: planted -> the special cluster; else echo the recent window
    if plant_kind != "none":
        target_cluster = special
    elif rng.random() < 0.97:
        recent_clusters = cluster_seq[-R:]
        target_cluster = int(recent_clusters[rng.integers(len(recent_clusters))])
    else:
        target_cluster = int(base[rng.integers(3)])

    cluster_all = np.append(cluster_seq, target_cluster)

    # items: uniform within each event's cluster
    vids = np.empty(t_total, dtype=np.int64)
    for c in np.unique(cluster_all):
        members = np.flatnonzero(clusters == c)
        sel = cluster_all == c
        vids[sel] = members[rng.integers(0, len(members), size=int(sel.sum()))]

    liked = {int(base[np.argmax(w)])} | ({special} if special >= 0 else set())
    eng = np.where(np.isin(cluster_all, list(liked)),
                   rng.beta(5.0, 2.0, size=t_total), rng.beta(2.0, 3.0, size=t_total))
    eng[-1] = rng.beta(6.0, 2.0)
    dur = np.exp(rng.uniform(np.log(15.0), np.log(600.0), size=t_total)).round(1)
    pt = (dur * eng).round(1)
    label = np.where(rng.random(t_total) < 0.02, 2, np.where(eng > 0.75, 1, 0))
    t0 = int(rng.integers(1_500_000_000, 1_600_000_000))
    ts = t0 + np.cumsum(rng.integers(5, 900, size=t_total))

    return UserHistory(uid, vids, item_author[vids], cluster_all.astype(np.int64),
                       ts.astype(np.int64), pt, dur, label.astype(np.int64),
                       split=split, plant=plant_kind)


def recent_oracle_hits(ds: Dataset, R: int) -> float:
    """Fraction of users whose target's interest shows up in the newest R
    history events (the generative oracle for 'predictable from recent')."""
    hits = 0
    for u in ds.users:
        hist, target = u.drop_last()
        hits += int(target.tag in set(hist.tag[-R:].tolist()))
    return hits / len(ds.users)


# ---- text io ----


def export(ds: Dataset, dirpath, command: str = "", cfg_hash: str = "") -> None:
    from pathlib import Path

    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    seed = ds.meta.get("seed")

    ev_lines = []
    for u in ds.users:
        for i in range(u.T):
            ev_lines.append(f"{u.user_id}\t{u.ts[i]}\t{u.vid[i]}\t{u.aid[i]}"
                            f"\t{u.tag[i]}\t{float(u.pt[i])!r}\t{float(u.dur[i])!r}\t{u.label[i]}")
    write_text_artifact(dirpath / "events.tsv",
                        make_manifest("events", seed, command, cfg_hash, ds.meta), ev_lines)

    cat_lines = [f"{vid}\t" + " ".join(repr(float(x)) for x in vec)
                 for vid, vec in zip(ds.catalog_ids, ds.catalog_vecs)]
    write_text_artifact(dirpath / "catalog.tsv",
                        make_manifest("catalog", seed, command, cfg_hash), cat_lines)

    usr_lines = [f"{u.user_id}\t{u.split}\t{u.plant}" for u in ds.users]
    write_text_artifact(dirpath / "users.tsv",
                        make_manifest("users", seed, command, cfg_hash), usr_lines)


def ingest(dirpath, pt_cap: float = PT_CAP) -> Dataset:
    from pathlib import Path

    dirpath = Path(dirpath)
    ev_path = dirpath / "events.tsv"
    if not ev_path.exists():
        raise DataError(f"{ev_path}: missing event log")

    meta_manifest, ev_lines = read_text_artifact(ev_path)
    columns: dict[int, dict[str, list]] = {}
    for lineno, line in ev_lines:
        parts = line.split("\t")
        if len(parts) != 8:
            raise DataError(f"{ev_path} line {lineno}: expected 8 fields, got {len(parts)}")
        try:
            uid = int(parts[0])
            vals = {
                "ts": int(parts[1]), "vid": int(parts[2]), "aid": int(parts[3]),
                "tag": int(parts[4]), "pt": float(parts[5]), "dur": float(parts[6]),
                "label": int(parts[7]),
            }
        except ValueError as e:
            raise DataError(f"{ev_path} line {lineno}: {e}") from None
        cols = columns.setdefault(uid, {f: [] for f in _FIELDS})
        for f in _FIELDS:
            cols[f].append(vals[f])

    split_plant: dict[int, tuple[str, str]] = {}
    usr_path = dirpath / "users.tsv"
    if usr_path.exists():
        _, usr_lines = read_text_artifact(usr_path)
        for lineno, line in usr_lines:
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{usr_path} line {lineno}: expected 3 fields")
            split_plant[int(parts[0])] = (parts[1], parts[2])

    users = []
    for uid in sorted(columns):
        cols = columns[uid]
        arrays = {f: np.asarray(cols[f], dtype=np.int64 if f in _INT_FIELDS else np.float64)
                  for f in _FIELDS}
        split, plant = split_plant.get(uid, ("train", "none"))
        u = UserHistory(uid, split=split, plant=plant, **arrays)
        u.validate(pt_cap)
        users.append(u)
    if not users:
        raise DataError(f"{ev_path}: no events")

    cat_path = dirpath / "catalog.tsv"
    if not cat_path.exists():
        raise DataError(f"{cat_path}: missing catalog")
    _, cat_lines = read_text_artifact(cat_path)
    ids, vec_rows = [], []
    for lineno, line in cat_lines:
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{cat_path} line {lineno}: expected 'vid<TAB>floats'")
        try:
            ids.append(int(parts[0]))
            vec_rows.append([float(x) for x in parts[1].split()])
        except ValueError as e:
            raise DataError(f"{cat_path} line {lineno}: {e}") from None
    widths = {len(r) for r in vec_rows}
    if len(widths) != 1:
        raise DataError(f"{cat_path}: inconsistent vector widths {sorted(widths)}")

    return Dataset(users, np.asarray(ids), np.asarray(vec_rows), dict(meta_manifest))
