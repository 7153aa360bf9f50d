import numpy as np
import pytest

import tristream.tensor as T
from tristream.decoder import STREAMS
from tristream.errors import ConfigError, DataError
from tristream.lifecycle import MemoryStore
from tristream.model import build_model, make_batch, vocab_sizes
from tristream.studies import init_model
from tests.conftest import mini_cfg


@pytest.fixture()
def model(shared_bundle):
    return init_model(mini_cfg(), shared_bundle)


def make_test_batch(model, bundle, store, n=6, split="test", cfg=None):
    cfg = cfg or mini_cfg()
    users = bundle.ds.split_users(split)[:n]
    return make_batch(model.embedder, users, bundle.item_codes,
                      r_window=cfg.r_window, l_window=cfg.l_window,
                      t_cap=cfg.t_cap, m_slots=cfg.m_slots, store=store)


class TestAssembly:
    def test_parameter_namespaces(self, model):
        names = [n for n, _ in model.named_parameters()]
        for prefix in ("embedder.", "recent.", "mid.", "lifecycle.", "decoder."):
            assert any(n.startswith(prefix) for n in names), prefix
        # mode d has no fusion stack
        assert not any(n.startswith("fuse.") for n in names)

    def test_mode_a_owns_a_fusion_stack(self, shared_bundle):
        m = init_model(mini_cfg(mode="a"), shared_bundle)
        assert any(n.startswith("fuse.") for n, _ in m.named_parameters())

    def test_parameter_split_is_a_partition(self, model):
        main = {n for n, _ in model.main_parameters()}
        idx = {n for n, _ in model.indexer_parameters()}
        every = {n for n, _ in model.named_parameters()}
        assert main | idx == every
        assert not (main & idx)
        assert idx and all(".indexer." in n for n in idx)

    def test_same_seed_same_weights(self, shared_bundle):
        a = init_model(mini_cfg(), shared_bundle)
        b = init_model(mini_cfg(), shared_bundle)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_centroid_tables_match_level_geometry(self, shared_bundle, model):
        cb = shared_bundle.cb
        w = cb.levels[0].shape[1]
        rows = cb.levels[0] / np.linalg.norm(cb.levels[0], axis=1, keepdims=True)
        np.testing.assert_allclose(model.decoder.tables[0].data[:, :w], rows,
                                   atol=1e-12)


class TestEncode:
    def test_memories_follow_stream_order(self, model, shared_bundle, shared_store):
        batch = make_test_batch(model, shared_bundle, shared_store)
        memories, aux = model.encode(batch)
        assert len(memories) == 3
        rec, mid, life = memories
        assert rec[0].shape == (batch.size, mini_cfg().r_window, model.d_h)
        assert life[0].shape == (batch.size, mini_cfg().m_slots, model.d_h)
        assert mid[1].shape == mid[0].shape[:2]

    def test_disabled_stream_is_fully_masked(self, model, shared_bundle,
                                             shared_store):
        batch = make_test_batch(model, shared_bundle, shared_store)
        memories, _ = model.encode(batch, streams=("recent",))
        _, mid, life = memories
        assert mid[1].sum() == 0 and life[1].sum() == 0
        assert np.all(mid[0].data == 0) and np.all(life[0].data == 0)

    def test_unknown_stream_rejected(self, model, shared_bundle, shared_store):
        batch = make_test_batch(model, shared_bundle, shared_store)
        with pytest.raises(ConfigError, match="stream"):
            model.encode(batch, streams=("recent", "bogus"))

    def test_disabled_streams_do_not_change_enabled_memory(
            self, model, shared_bundle, shared_store):
        batch = make_test_batch(model, shared_bundle, shared_store)
        full, _ = model.encode(batch)
        only, _ = model.encode(batch, streams=("recent",))
        np.testing.assert_array_equal(full[0][0].data, only[0][0].data)

    def test_mode_a_concatenates_oldest_to_newest(self, shared_bundle,
                                                  shared_store):
        cfg = mini_cfg(mode="a")
        m = init_model(cfg, shared_bundle)
        batch = make_test_batch(m, shared_bundle, shared_store, cfg=cfg)
        memories, aux = m.encode(batch)
        assert len(memories) == 1
        names = [s[0] for s in aux["spans"]]
        assert names == ["lifecycle", "mid", "recent"]
        stops = [s[2] for s in aux["spans"]]
        assert stops[-1] == memories[0][0].shape[1]

    def test_forward_logit_shapes(self, model, shared_bundle, shared_store):
        batch = make_test_batch(model, shared_bundle, shared_store)
        logits, _ = model.forward(batch)
        assert [l.shape for l in logits] == \
            [(batch.size, n) for n in mini_cfg().level_sizes]

    def test_sparse_aux_carries_selected_triples(self, model, shared_bundle,
                                                 shared_store):
        batch = make_test_batch(model, shared_bundle, shared_store)
        _, aux = model.encode(batch, sparse=True, topk=3, want_scores=True)
        (s_mid, s_idx, sel) = aux["mid"][0]
        assert s_mid.shape == s_idx.shape == sel.shape
        assert s_mid.shape[-1] == 3


class TestMakeBatch:
    def test_shapes_and_left_padding(self, model, shared_bundle, shared_store):
        cfg = mini_cfg()
        batch = make_test_batch(model, shared_bundle, shared_store)
        assert batch.rec_mask.shape == (batch.size, cfg.r_window)
        # right-aligned: newest positions are always valid
        assert np.all(batch.rec_mask[:, -1] == 1)
        assert batch.mid_mask.shape[1] <= cfg.l_window - cfg.r_window
        assert batch.targets.shape == (batch.size, 3)

    def test_target_is_newest_event(self, model, shared_bundle, shared_store):
        users = shared_bundle.ds.split_users("test")[:4]
        batch = make_test_batch(model, shared_bundle, shared_store, n=4)
        for i, u in enumerate(users):
            assert batch.target_vids[i] == u.vid[-1]
            np.testing.assert_array_equal(
                batch.targets[i], shared_bundle.item_codes[u.vid[-1]])

    def test_store_miss_leaves_lifecycle_masked(self, model, shared_bundle):
        cfg = mini_cfg()
        empty = MemoryStore(cfg.m_slots, cfg.d_h)
        batch = make_test_batch(model, shared_bundle, empty)
        assert batch.life_mask.sum() == 0

    def test_store_shape_mismatch_rejected(self, model, shared_bundle):
        bad = MemoryStore(mini_cfg().m_slots + 1, mini_cfg().d_h)
        with pytest.raises(ConfigError, match="m_slots"):
            make_test_batch(model, shared_bundle, bad)

    def test_target_outside_catalog_rejected(self, model, shared_bundle,
                                             shared_store):
        cfg = mini_cfg()
        users = [shared_bundle.ds.split_users("test")[0]]
        short = shared_bundle.item_codes[: users[0].vid[-1]]  # drops the target
        with pytest.raises(DataError, match="catalog"):
            make_batch(model.embedder, users, short, r_window=cfg.r_window,
                       l_window=cfg.l_window, t_cap=cfg.t_cap,
                       m_slots=cfg.m_slots, store=shared_store)

    def test_empty_batch_rejected(self, model, shared_bundle, shared_store):
        cfg = mini_cfg()
        with pytest.raises(ConfigError, match="empty"):
            make_batch(model.embedder, [], shared_bundle.item_codes,
                       r_window=cfg.r_window, l_window=cfg.l_window,
                       t_cap=cfg.t_cap, m_slots=cfg.m_slots,
                       store=shared_store)

    def test_vocab_sizes_cover_observations(self, shared_bundle):
        n_items, n_authors, n_tags = vocab_sizes(shared_bundle.ds)
        ds = shared_bundle.ds
        assert n_items == len(ds.catalog_ids)
        assert n_authors > max(int(u.aid.max()) for u in ds.users)
        assert n_tags >= ds.meta["n_clusters"]
