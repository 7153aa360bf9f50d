import json
import warnings
from collections import deque

import numpy as np
import pytest

from tristream.errors import ConfigError, DataError
from tristream.lifecycle import MemoryStore
from tristream.studies import init_model
from tristream.tensor import Tensor
from tristream.training import (LossReport, StagePolicy, iter_batches,
                                lifecycle_slice, ntp_loss, stage_policy,
                                train_compressor, train_model, _plateaued)
from tests.conftest import mini_cfg


class TestStagePolicy:
    def test_schedule_table(self):
        assert stage_policy(1) == StagePolicy(1, 0.0, False)
        assert stage_policy(2) == StagePolicy(2, 1.0, False)
        assert stage_policy(3) == StagePolicy(3, 1.0, True)

    @pytest.mark.parametrize("stage", [0, 4, -1])
    def test_unknown_stage_rejected(self, stage):
        with pytest.raises(ConfigError, match="stage"):
            stage_policy(stage)

    @pytest.mark.parametrize("pol", [
        StagePolicy(1, 1.0, False),    # weight on too early
        StagePolicy(2, 1.0, True),     # sparse too early
        StagePolicy(3, 0.0, True),     # weight off at the end
        StagePolicy(3, 1.0, False),    # never went sparse
    ])
    def test_invariants_enforced(self, pol):
        with pytest.raises(ConfigError):
            pol.validate()


class TestLossReport:
    def test_exact_decomposition_accepted(self):
        rep = LossReport(step=3, stage=2, ntp=1.25, indexer=0.5, lam=1.0,
                         total=1.25 + 1.0 * 0.5)
        rep.validate()
        back = json.loads(rep.to_json())
        assert back == {"step": 3, "stage": 2, "ntp": 1.25, "indexer": 0.5,
                        "lam": 1.0, "total": 1.75}

    def test_drifted_total_rejected(self):
        rep = LossReport(step=0, stage=1, ntp=1.0, indexer=0.0, lam=0.0,
                         total=1.0 + 1e-9)
        with pytest.raises(ConfigError):
            rep.validate()


class TestNtpLoss:
    def test_uniform_logits_hit_log_size(self):
        sizes = [5, 9]
        logits = [Tensor(np.zeros((4, n))) for n in sizes]
        targets = np.array([[0, 1], [2, 3], [4, 8], [1, 0]])
        got = float(ntp_loss(logits, targets).data)
        assert got == pytest.approx(np.mean([np.log(n) for n in sizes]), rel=1e-12)

    def test_confident_correct_logits_vanish(self):
        targets = np.array([[2], [0]])
        raw = np.full((2, 4), -50.0)
        raw[np.arange(2), targets[:, 0]] = 50.0
        got = float(ntp_loss([Tensor(raw)], targets).data)
        assert got < 1e-12

    def test_out_of_range_code_rejected(self):
        with pytest.raises(DataError, match="level 1"):
            ntp_loss([Tensor(np.zeros((1, 4)))], np.array([[4]]))

    def test_level_count_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            ntp_loss([Tensor(np.zeros((1, 4)))], np.array([[1, 1]]))


class TestIterBatches:
    def test_deterministic_and_constant_size(self, shared_bundle, shared_store):
        cfg = mini_cfg()
        model = init_model(cfg, shared_bundle)
        def first_ids(n):
            it = iter_batches(model, shared_bundle.ds, shared_bundle.item_codes,
                              shared_store, cfg)
            return [next(it).user_ids.tolist() for _ in range(n)]
        a, b = first_ids(5), first_ids(5)
        assert a == b
        assert all(len(ids) == cfg.batch_size for ids in a)

    def test_one_pass_covers_each_user_once(self, shared_bundle, shared_store):
        cfg = mini_cfg()
        model = init_model(cfg, shared_bundle)
        train_users = shared_bundle.ds.split_users("train")
        per_pass = len(train_users) // cfg.batch_size
        it = iter_batches(model, shared_bundle.ds, shared_bundle.item_codes,
                          shared_store, cfg)
        seen = np.concatenate([next(it).user_ids for _ in range(per_pass)])
        assert len(seen) == len(set(seen))    # no repeats before reshuffle


class TestPlateau:
    def test_short_history_never_triggers(self):
        assert not _plateaued(deque([1.0] * 9), 10, 0.01)

    def test_flat_loss_triggers(self):
        assert _plateaued(deque([1.0] * 10), 10, 0.01)

    def test_improving_loss_does_not_trigger(self):
        hist = deque(np.linspace(2.0, 1.0, 10))
        assert not _plateaued(hist, 10, 0.01)


class TestTrainModel:
    def test_lifecycle_without_store_names_compress(self, shared_bundle,
                                                    tmp_path):
        cfg = mini_cfg()
        model = init_model(cfg, shared_bundle)
        with pytest.raises(ConfigError, match="compress"):
            train_model(cfg, model, shared_bundle.ds, None,
                        shared_bundle.item_codes, out_dir=tmp_path)

    def test_budgets_checkpoints_and_loss_stream(self, shared_bundle,
                                                 shared_store, tmp_path):
        cfg = mini_cfg(stage_steps=[0, 3, 2, 2])
        model = init_model(cfg, shared_bundle)
        res = train_model(cfg, model, shared_bundle.ds, shared_store,
                          shared_bundle.item_codes, out_dir=tmp_path)
        assert res.steps == 7
        assert sorted(res.checkpoints) == [1, 2, 3]
        for path in list(res.checkpoints.values()) + [res.final_path]:
            assert (tmp_path / path.split("/")[-1]).exists()

        lines = (tmp_path / "losses.jsonl").read_text().splitlines()
        assert lines[0].startswith("# manifest: ")
        man = json.loads(lines[0].split("# manifest: ", 1)[1])
        assert man["kind"] == "loss-report" and man["seed"] == cfg.seed
        recs = [json.loads(ln) for ln in lines[1:]]
        assert [r["stage"] for r in recs] == [1, 1, 1, 2, 2, 3, 3]
        for r in recs:
            LossReport(**r).validate()
        assert all(r["lam"] == 0.0 for r in recs if r["stage"] == 1)
        assert all(r["lam"] == 1.0 for r in recs if r["stage"] >= 2)
        assert all(r["indexer"] > 0 for r in recs if r["stage"] >= 2)

    def test_zero_budget_skips_stage(self, shared_bundle, shared_store,
                                     tmp_path):
        cfg = mini_cfg(stage_steps=[0, 2, 0, 2])
        model = init_model(cfg, shared_bundle)
        res = train_model(cfg, model, shared_bundle.ds, shared_store,
                          shared_bundle.item_codes, out_dir=tmp_path)
        assert sorted(res.checkpoints) == [1, 3]
        assert res.steps == 4

    def test_plateau_caps_a_stage_early(self, shared_bundle, shared_store,
                                        tmp_path):
        cfg = mini_cfg(stage_steps=[0, 50, 0, 0], plateau=True,
                       plateau_window=10, plateau_threshold=0.999)
        model = init_model(cfg, shared_bundle)
        res = train_model(cfg, model, shared_bundle.ds, shared_store,
                          shared_bundle.item_codes, out_dir=tmp_path)
        assert res.steps == 10    # stops the moment the window fills

    def test_indexer_updates_only_under_distillation(self, shared_bundle,
                                                     shared_store, tmp_path):
        def run(stage_steps):
            cfg = mini_cfg(stage_steps=stage_steps)
            model = init_model(cfg, shared_bundle)
            train_model(cfg, model, shared_bundle.ds, shared_store,
                        shared_bundle.item_codes, out_dir=tmp_path / "r")
            return model
        base = init_model(mini_cfg(), shared_bundle)
        stage1 = run([0, 2, 0, 0])
        stage2 = run([0, 0, 2, 0])
        for (n, p0), (_, p1), (_, p2) in zip(base.named_parameters(),
                                             stage1.named_parameters(),
                                             stage2.named_parameters()):
            if ".indexer." in n:
                np.testing.assert_array_equal(p1.data, p0.data, err_msg=n)
                assert not np.array_equal(p2.data, p0.data), n

    def test_main_path_blind_to_indexer_loss(self, shared_bundle,
                                             shared_store, tmp_path):
        """One step with the distillation weight on vs off: identical main
        parameters, bitwise."""
        def run(stage_steps, tag):
            cfg = mini_cfg(stage_steps=stage_steps)
            model = init_model(cfg, shared_bundle)
            train_model(cfg, model, shared_bundle.ds, shared_store,
                        shared_bundle.item_codes, out_dir=tmp_path / tag)
            return model
        lam0 = run([0, 1, 0, 0], "lam0")
        lam1 = run([0, 0, 1, 0], "lam1")
        for (n, p0), (_, p1) in zip(lam0.named_parameters(),
                                    lam1.named_parameters()):
            if ".indexer." not in n:
                np.testing.assert_array_equal(p0.data, p1.data, err_msg=n)


class TestCompressor:
    def test_embedder_stays_frozen(self, shared_bundle):
        cfg = mini_cfg(stage_steps=[3, 0, 0, 0])
        embedder, comp, losses = train_compressor(cfg, shared_bundle.ds)
        fresh_emb, _, _ = train_compressor(cfg, shared_bundle.ds, steps=0)
        for (n, a), (_, b) in zip(embedder.named_parameters(),
                                  fresh_emb.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=n)
        assert len(losses) == 3 and np.isfinite(losses).all()

    def test_empty_pool_warns_and_returns_init(self, shared_bundle):
        # window wider than any history -> no lifecycle region anywhere
        cfg = mini_cfg(l_window=4096, t_cap=4096)
        with warnings.catch_warnings(record=True) as got:
            warnings.simplefilter("always")
            _, _, losses = train_compressor(cfg, shared_bundle.ds)
        assert losses == []
        assert any("lifecycle" in str(w.message) for w in got)

    def test_bake_covers_every_user(self, shared_bundle, shared_store):
        cfg = mini_cfg()
        ds = shared_bundle.ds
        assert len(shared_store) == len(ds.users)
        for u in ds.users:
            mem = shared_store.get(u.user_id)
            life = lifecycle_slice(u, cfg)
            assert mem.source_length == life.T
            assert mem.empty == (life.T == 0)

    def test_store_round_trip_with_manifest(self, shared_store, tmp_path):
        path = tmp_path / "store.bin"
        shared_store.save(str(path), {"config_hash": "cafe", "seed": 7})
        back = MemoryStore.load(str(path))
        assert back.user_ids() == shared_store.user_ids()
        uid = shared_store.user_ids()[0]
        np.testing.assert_array_equal(back.get(uid).vectors,
                                      shared_store.get(uid).vectors)
