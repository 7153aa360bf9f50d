import numpy as np
import pytest

import tristream.tensor as T
from tristream.decoder import (Decoder, DecoderBlock, attention_mass_report,
                               empty_memory)
from tristream.errors import ConfigError
from tristream.gradcheck import check_gradients
from tristream.tensor import Tensor

SIZES = [5, 6, 4]


def mems(rng, b=2, d_h=16, lens=(3, 4, 2)):
    out = []
    for n in lens:
        out.append((Tensor(rng.normal(size=(b, n, d_h))), np.ones((b, n))))
    return out


def tie_paths(blk: DecoderBlock) -> None:
    src = blk.paths[0]
    for dst in blk.paths[1:]:
        for (_, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
            b.data[:] = a.data


class TestModes:
    def test_all_modes_same_logit_shapes(self, rng):
        codes = np.array([[1, 2, 3], [0, 5, 0]])
        shapes = {}
        for mode in "abcd":
            dec = Decoder(rng, d_h=16, n_heads=2, n_layers=2,
                          level_sizes=SIZES, mode=mode)
            m = mems(rng)
            if mode == "a":
                m = [m[0]]
            logits = dec.decode(codes, m)
            shapes[mode] = [l.shape for l in logits]
        assert len(set(map(tuple, shapes.values()))) == 1
        assert shapes["d"] == [(2, 5), (2, 6), (2, 4)]

    def test_unknown_mode_rejected(self, rng):
        with pytest.raises(ConfigError):
            Decoder(rng, 16, 2, 1, SIZES, mode="e")

    def test_mode_d_is_three_times_single_path(self, rng):
        blk = DecoderBlock(rng, d_h=16, n_heads=2, mode="d")
        tie_paths(blk)
        mem, mask = mems(rng, lens=(4,))[0]
        x = Tensor(rng.normal(size=(2, 4, 16)))
        out = blk(x, [(mem, mask)] * 3)
        from tristream.layers import causal_mask
        x2 = T.add(x, blk.self_attn(x, x, pair_mask=causal_mask(4)))
        single = blk.paths[0](x2, mem, mask)
        np.testing.assert_array_equal(out.data, 3.0 * single.data)

    def test_mode_d_empty_stream_is_residual_path(self, rng):
        blk = DecoderBlock(rng, d_h=16, n_heads=2, mode="d")
        m = mems(rng, lens=(3, 4, 2))
        m[2] = empty_memory(16, batch=2)
        x = Tensor(rng.normal(size=(2, 4, 16)))
        out = blk(x, m)
        from tristream.layers import causal_mask
        x2 = T.add(x, blk.self_attn(x, x, pair_mask=causal_mask(4)))
        p0 = blk.paths[0](x2, *m[0])
        p1 = blk.paths[1](x2, *m[1])
        p2 = T.add(x2, blk.paths[2].ffn(blk.paths[2].norm(x2)))
        expect = T.add(T.add(p0, p1), p2)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_array_equal(out.data, expect.data)

    def test_additivity_of_paths(self, rng):
        # zeroing one path's contribution shifts the sum by exactly that part
        blk = DecoderBlock(rng, d_h=16, n_heads=2, mode="d")
        m = mems(rng, b=1)
        x = Tensor(rng.normal(size=(1, 4, 16)))
        from tristream.layers import causal_mask
        x2 = T.add(x, blk.self_attn(x, x, pair_mask=causal_mask(4)))
        parts = [blk.paths[i](x2, *m[i]) for i in range(3)]
        full = blk(x, m)
        np.testing.assert_allclose(
            full.data - parts[2].data,
            parts[0].data + parts[1].data, rtol=0, atol=1e-12)


class TestCausality:
    def test_later_levels_cannot_leak_back(self, rng):
        dec = Decoder(rng, d_h=16, n_heads=2, n_layers=2,
                      level_sizes=SIZES, mode="d")
        m = mems(rng, b=1)
        a = dec.decode(np.array([[1, 2, 3]]), m)
        b = dec.decode(np.array([[1, 2, 0]]), m)
        # the level-3 token sits at the last input position, whose hidden
        # state scores nothing: every level's logits stay bitwise equal
        for la, lb in zip(a, b):
            assert np.array_equal(la.data, lb.data)
        c = dec.decode(np.array([[4, 2, 3]]), m)
        assert np.array_equal(a[0].data, c[0].data)  # level 1 scored from BOS only
        assert not np.array_equal(a[1].data, c[1].data)
        assert not np.array_equal(a[2].data, c[2].data)

    def test_prefix_decode_matches_teacher_forced(self, rng):
        dec = Decoder(rng, d_h=16, n_heads=2, n_layers=2,
                      level_sizes=SIZES, mode="b")
        m = mems(rng, b=2)
        codes = np.array([[1, 2, 3], [4, 0, 1]])
        full = dec.decode(codes, m)
        for level in range(3):
            step = dec.next_level_logits(codes[:, :level], m)
            np.testing.assert_allclose(step.data, full[level].data,
                                       rtol=0, atol=1e-12)


class TestGates:
    def test_simplex_and_symmetric_init(self, rng):
        dec = Decoder(rng, d_h=16, n_heads=2, n_layers=2,
                      level_sizes=SIZES, mode="c")
        m = mems(rng)
        dec.decode(np.array([[1, 2, 3], [0, 1, 2]]), m, capture=True)
        for blk in dec.blocks:
            g = blk.last_gates
            assert np.all(g >= 0)
            np.testing.assert_allclose(g.sum(axis=-1), 1.0, rtol=0, atol=1e-6)
            np.testing.assert_allclose(g, 1.0 / 3.0, rtol=0, atol=1e-12)

    def test_trained_gate_moves(self, rng):
        dec = Decoder(rng, d_h=8, n_heads=2, n_layers=1,
                      level_sizes=[4, 4], mode="c")
        dec.blocks[0].gate.weight.data[:] = rng.normal(size=(8, 1))
        m = mems(rng, b=1, d_h=8, lens=(2, 2, 2))
        dec.decode(np.array([[1, 2]]), m, capture=True)
        g = dec.blocks[0].last_gates
        assert np.abs(g - 1.0 / 3.0).max() > 1e-4


class TestMassReport:
    def test_mode_b_fractions(self, rng):
        dec = Decoder(rng, d_h=16, n_heads=2, n_layers=2,
                      level_sizes=SIZES, mode="b")
        m = mems(rng)
        rep = attention_mass_report(dec, np.array([[1, 2, 3], [0, 1, 2]]), m)
        assert rep["mode"] == "b"
        for blk in rep["per_block"]:
            assert abs(sum(blk.values()) - 1.0) <= 1e-6
            assert all(v >= 0 for v in blk.values())

    def test_mode_c_init_third(self, rng):
        dec = Decoder(rng, d_h=16, n_heads=2, n_layers=1,
                      level_sizes=SIZES, mode="c")
        rep = attention_mass_report(dec, np.array([[1, 2, 3]]), mems(rng, b=1))
        for v in rep["per_stream"].values():
            assert abs(v - 1.0 / 3.0) <= 0.02

    def test_mode_d_structural(self, rng):
        dec = Decoder(rng, d_h=16, n_heads=2, n_layers=3,
                      level_sizes=SIZES, mode="d")
        rep = attention_mass_report(dec, np.array([[1, 2, 3]]), mems(rng, b=1))
        assert rep["per_stream"] == {"recent": 1 / 3, "mid": 1 / 3, "lifecycle": 1 / 3}

    def test_mode_a_needs_spans(self, rng):
        dec = Decoder(rng, d_h=16, n_heads=2, n_layers=1,
                      level_sizes=SIZES, mode="a")
        m = [mems(rng, b=1, lens=(6,))[0]]
        with pytest.raises(ConfigError):
            attention_mass_report(dec, np.array([[1, 2, 3]]), m)
        rep = attention_mass_report(dec, np.array([[1, 2, 3]]), m,
                                    spans=[("recent", 0, 3), ("mid", 3, 5),
                                           ("lifecycle", 5, 6)])
        assert abs(sum(rep["per_stream"].values()) - 1.0) <= 1e-6


class TestTiedTables:
    def test_same_tensor_embeds_and_scores(self, rng):
        dec = Decoder(rng, d_h=16, n_heads=2, n_layers=1,
                      level_sizes=SIZES, mode="d")
        m = mems(rng, b=1)
        logits = dec.decode(np.array([[1, 2, 3]]), m)
        loss = T.cross_entropy(logits[1], np.array([2]))
        loss.backward()
        # level-2 table received gradient from both its embedding use (input
        # token s2) and its scoring use
        assert dec.tables[1].grad is not None
        assert np.abs(dec.tables[1].grad).sum() > 0

    def test_centroid_init_copies(self, rng):
        tables = [rng.normal(size=(n, 16)) for n in SIZES]
        dec = Decoder(rng, d_h=16, n_heads=2, n_layers=1,
                      level_sizes=SIZES, mode="d", init_tables=tables)
        for t, src in zip(dec.tables, tables):
            np.testing.assert_array_equal(t.data, src)
        tables[0][0, 0] += 1.0  # decoder holds its own copy
        assert dec.tables[0].data[0, 0] != tables[0][0, 0]

    def test_bad_init_shape_rejected(self, rng):
        with pytest.raises(ConfigError):
            Decoder(rng, 16, 2, 1, SIZES, mode="d",
                    init_tables=[np.zeros((5, 16)), np.zeros((6, 16)),
                                 np.zeros((9, 16))])


class TestGradients:
    @pytest.mark.parametrize("mode", ["c", "d"])
    def test_decoder_gradients(self, rng, mode):
        dec = Decoder(rng, d_h=8, n_heads=2, n_layers=1,
                      level_sizes=[3, 4], mode=mode)
        m = mems(rng, b=1, d_h=8, lens=(2, 3, 2))
        codes = np.array([[1, 2]])

        def f():
            logits = dec.decode(codes, m)
            loss = None
            for lg, tgt in zip(logits, codes.T):
                term = T.cross_entropy(lg, tgt)
                loss = term if loss is None else T.add(loss, term)
            return T.scale(loss, 1.0 / 2.0)

        check_gradients(f, dec.parameters(), sample=25, rng=rng)
