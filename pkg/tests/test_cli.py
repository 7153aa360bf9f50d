import json
from pathlib import Path

import numpy as np
import pytest

from tristream.cli import main

MINI_SETS = [
    "model.d_h=16", "model.n_heads=2", "model.recent_layers=1",
    "model.mid_layers=1", "model.decoder_layers=1", "model.idx_width=8",
    "model.level_sizes=5,6,4", "model.m_slots=3", "model.topk=4",
    "model.r_window=8", "model.l_window=48", "model.t_cap=64",
    "data.n_users=40", "data.n_items=120", "data.horizon=160",
    "data.n_clusters=6", "data.item_dim=8", "data.min_len=12",
    "data.test_fraction=0.2", "train.batch_size=4",
    "train.stage_steps=2,2,1,1", "train.warmup_steps=2", "run.eval_ks=4",
    "run.precision=fp64",
]


def flags(out, extra_sets=()):
    args = []
    for s in list(MINI_SETS) + list(extra_sets):
        args += ["--set", s]
    return args + ["--out", str(out)]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One completed datagen -> quantize -> compress -> train chain."""
    out = tmp_path_factory.mktemp("cli")
    for cmd in ("datagen", "quantize", "compress", "train"):
        assert main([cmd] + flags(out)) == 0, cmd
    return out


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        for name in ("data/events.tsv", "data/catalog.tsv", "codebook.bin",
                     "sid_index.bin", "store.bin", "losses.jsonl",
                     "final.ckpt", "stage3.ckpt", "config.train.ini"):
            assert (pipeline / name).exists(), name

    def test_eval_runs_and_repeats_identically(self, pipeline, capsys):
        assert main(["eval"] + flags(pipeline)) == 0
        first = json.loads((pipeline / "eval.json").read_text())
        assert main(["eval"] + flags(pipeline)) == 0
        second = json.loads((pipeline / "eval.json").read_text())
        assert first == second
        assert first["manifest"]["kind"] == "eval-report"

    def test_eval_prints_table(self, pipeline, capsys):
        main(["eval"] + flags(pipeline))
        out = capsys.readouterr().out
        assert "hrecall@L3" in out and "recall" in out

    def test_loss_stream_has_manifest_header(self, pipeline):
        first = (pipeline / "losses.jsonl").read_text().splitlines()[0]
        man = json.loads(first.split("# manifest: ", 1)[1])
        assert man["kind"] == "loss-report"
        assert man["command"] == "train"


class TestErrorPaths:
    def test_invalid_value_exits_1_naming_field(self, tmp_path, capsys):
        rc = main(["train", "--set", "model.d_h=-4", "--out", str(tmp_path)])
        assert rc == 1
        assert "model.d_h" in capsys.readouterr().err

    def test_unknown_key_exits_1(self, tmp_path, capsys):
        rc = main(["train", "--set", "model.bogus=1", "--out", str(tmp_path)])
        assert rc == 1

    def test_missing_data_names_datagen(self, tmp_path, capsys):
        rc = main(["quantize"] + flags(tmp_path))
        assert rc == 2
        assert "datagen" in capsys.readouterr().err

    def test_missing_codebook_names_quantize(self, pipeline, tmp_path, capsys):
        rc = main(["train"] + flags(tmp_path) +
                  ["--data", str(pipeline / "data")])
        assert rc == 2
        assert "quantize" in capsys.readouterr().err

    def test_missing_store_names_compress(self, pipeline, tmp_path, capsys):
        rc = main(["train"] + flags(tmp_path) +
                  ["--data", str(pipeline / "data"),
                   "--codebook", str(pipeline / "codebook.bin"),
                   "--index", str(pipeline / "sid_index.bin")])
        assert rc == 2
        assert "compress" in capsys.readouterr().err

    def test_missing_checkpoint_names_train(self, pipeline, tmp_path, capsys):
        rc = main(["eval"] + flags(tmp_path) +
                  ["--data", str(pipeline / "data"),
                   "--codebook", str(pipeline / "codebook.bin"),
                   "--index", str(pipeline / "sid_index.bin"),
                   "--store", str(pipeline / "store.bin")])
        assert rc == 2
        assert "train" in capsys.readouterr().err

    def test_bad_stream_name_exits_1(self, pipeline, capsys):
        rc = main(["train", "--streams", "recent,nope"] + flags(pipeline))
        assert rc == 1
        assert "streams" in capsys.readouterr().err

    def test_internal_error_exits_3(self, tmp_path, monkeypatch, capsys):
        import tristream.cli as cli_mod
        def boom(*a, **kw):
            raise RuntimeError("synthetic failure")
        monkeypatch.setattr(cli_mod, "generate_synthetic", boom)
        rc = main(["datagen"] + flags(tmp_path))
        assert rc == 3
        assert "internal error" in capsys.readouterr().err


class TestStreamsFlow:
    def test_recent_only_train_needs_no_store(self, pipeline, tmp_path):
        rc = main(["train", "--streams", "recent"] + flags(tmp_path) +
                  ["--data", str(pipeline / "data"),
                   "--codebook", str(pipeline / "codebook.bin"),
                   "--index", str(pipeline / "sid_index.bin")])
        assert rc == 0

    def test_eval_inherits_streams_from_checkpoint(self, pipeline, tmp_path,
                                                   capsys):
        common = flags(tmp_path) + [
            "--data", str(pipeline / "data"),
            "--codebook", str(pipeline / "codebook.bin"),
            "--index", str(pipeline / "sid_index.bin")]
        assert main(["train", "--streams", "recent"] + common) == 0
        assert main(["eval"] + common) == 0
        payload = json.loads((tmp_path / "eval.json").read_text())
        assert payload["streams"] == ["recent"]


class TestStudyCommands:
    def test_ablate_emits_exactly_four_rows(self, tmp_path, capsys):
        rc = main(["ablate"] + flags(tmp_path))
        assert rc == 0
        lines = [l for l in (tmp_path / "ablation.txt").read_text().splitlines()
                 if l and not l.startswith("#")]
        assert len(lines) == 5                   # header + 4 settings

    def test_bench_indexer_writes_table(self, tmp_path, capsys):
        rc = main(["bench-indexer", "--lengths", "64,128", "--topk", "8",
                   "--trials", "1"] + flags(tmp_path))
        assert rc == 0
        payload = json.loads((tmp_path / "bench_indexer.json").read_text())
        assert [r["variant"] for r in payload["rows"]] == \
            ["dense", "sparse", "dense", "sparse"]
        text = (tmp_path / "bench_indexer.txt").read_text()
        assert "ratio @L=128" in text


class TestConfigPrecedence:
    def test_flags_beat_file(self, tmp_path):
        cfgfile = tmp_path / "base.ini"
        cfgfile.write_text("[run]\nseed = 5\n[data]\nn_users = 40\n")
        rc = main(["datagen", "--config", str(cfgfile), "--seed", "9"]
                  + flags(tmp_path))
        assert rc == 0
        man = json.loads((tmp_path / "data" / "users.tsv")
                         .read_text().splitlines()[0].split("# manifest: ")[1])
        assert man["seed"] == 9
