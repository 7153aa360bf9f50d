import numpy as np
import pytest

import tristream.tensor as T
from tristream.errors import ConfigError
from tristream.gradcheck import check_gradients
from tristream.midterm import (MidtermBlock, MidtermEncoder, UNIT_MIX_BIAS,
                               indexer_loss, kl_rows)
from tristream.optim import SGDMomentum
from tristream.tensor import Tensor


def copy_main_into_indexer(blk: MidtermBlock) -> None:
    blk.indexer.wq.weight.data[:] = blk.attn.wq.weight.data
    blk.indexer.wk.weight.data[:] = blk.attn.wk.weight.data
    blk.indexer.mix.weight.data[:] = 0.0
    blk.indexer.mix.bias.data[:] = UNIT_MIX_BIAS


class TestIdentity:
    def test_unit_mix_bias_is_exact(self):
        assert T.softplus(Tensor(np.array([UNIT_MIX_BIAS]))).data[0] == 1.0

    def test_parameter_copy_identity(self, rng):
        # full-width indexer with copied weights and unit mix reproduces the
        # head-summed main scores bit for bit
        blk = MidtermBlock(rng, d_h=32, n_heads=4, idx_heads=4, idx_width=8)
        copy_main_into_indexer(blk)
        x = Tensor(rng.normal(size=(2, 7, 32)))
        mask = np.ones((2, 7))
        _, s_mid, s_idx = blk.dense(x, mask, want_scores=True)
        assert s_mid.data.shape == (2, 7, 7)
        assert np.array_equal(s_mid.data, s_idx.data)

    def test_single_token(self, rng):
        blk = MidtermBlock(rng, d_h=16, n_heads=2, idx_heads=1, idx_width=4)
        out, s_mid, s_idx = blk.dense(Tensor(rng.normal(size=(1, 1, 16))),
                                      np.ones((1, 1)), want_scores=True)
        assert out.shape == (1, 1, 16)
        assert s_mid.data.shape == (1, 1, 1) and s_idx.data.shape == (1, 1, 1)
        assert np.all(np.isfinite(out.data))


class TestDetach:
    def grads(self, rng_seed, with_indexer):
        rng = np.random.default_rng(rng_seed)
        enc = MidtermEncoder(rng, d_h=16, n_heads=2, n_layers=2,
                             idx_heads=1, idx_width=4)
        x = Tensor(np.random.default_rng(99).normal(size=(2, 5, 16)))
        mask = np.ones((2, 5)); mask[1, :2] = 0
        out, mids, idxs = enc.dense_forward(x, mask, want_scores=with_indexer)
        loss = T.sum_(T.mul(out, out))
        if with_indexer:
            loss = T.add(loss, T.scale(indexer_loss(mids, idxs, mask), 1.0))
        loss.backward()
        return {n: (p.grad.copy() if p.grad is not None else None)
                for n, p in enc.named_parameters()}, out.data.copy()

    def test_indexer_branch_never_touches_main_grads(self):
        g_off, out_off = self.grads(7, with_indexer=False)
        g_on, out_on = self.grads(7, with_indexer=True)
        assert np.array_equal(out_off, out_on)
        for name in g_off:
            if ".indexer." in name:
                assert g_off[name] is None
                assert g_on[name] is not None
                continue
            assert np.array_equal(g_off[name], g_on[name]), name


class TestIndexerLoss:
    def test_zero_at_identity(self, rng):
        s = Tensor(rng.normal(size=(2, 6, 6)))
        mask = np.ones((2, 6))
        val = indexer_loss([s], [Tensor(s.data.copy())], mask).data
        assert abs(val) <= 1e-10

    def test_nonnegative(self, rng):
        for _ in range(10):
            a = Tensor(rng.normal(size=(1, 5, 5)) * 3)
            b = Tensor(rng.normal(size=(1, 5, 5)) * 3, requires_grad=True)
            mask = (rng.uniform(size=(1, 5)) > 0.3).astype(float)
            mask[0, 0] = 1
            assert indexer_loss([a], [b], mask).data >= -1e-12

    def test_masked_rows_ignored(self, rng):
        a = rng.normal(size=(1, 4, 4))
        b = rng.normal(size=(1, 4, 4))
        mask = np.array([[1.0, 1.0, 0.0, 0.0]])
        noisy_a, noisy_b = a.copy(), b.copy()
        noisy_a[0, 2:] = 1e6
        noisy_b[0, 2:] = -1e6
        v1 = indexer_loss([Tensor(a)], [Tensor(b)], mask).data
        v2 = indexer_loss([Tensor(noisy_a)], [Tensor(noisy_b)], mask).data
        # masked queries contribute nothing; masked keys are excluded
        a2, b2 = a.copy(), b.copy()
        a2[0, :, 2:] = 7.0
        b2[0, :, 2:] = -7.0
        v3 = indexer_loss([Tensor(a2)], [Tensor(b2)], mask).data
        assert np.isfinite(v1) and np.isfinite(v2) and np.isfinite(v3)
        assert abs(v1 - v2) <= 1e-12
        assert abs(v1 - v3) <= 1e-12

    def test_one_step_decreases(self, rng):
        tgt = Tensor(rng.normal(size=(1, 8, 8)))
        pred = Tensor(rng.normal(size=(1, 8, 8)), requires_grad=True)
        mask = np.ones((1, 8))
        opt = SGDMomentum([pred], lr=1e-2)
        before = indexer_loss([tgt], [pred], mask)
        before.backward()
        opt.step()
        after = indexer_loss([tgt], [pred], mask)
        assert after.data < before.data

    def test_gradient_matches_finite_differences(self, rng):
        tgt = Tensor(rng.normal(size=(1, 4, 4)))
        pred = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
        mask = np.array([[1.0, 1.0, 1.0, 0.0]])
        check_gradients(lambda: indexer_loss([tgt], [pred], mask), [pred], rng=rng)


class TestSparse:
    def make(self, rng, layers=1):
        return MidtermEncoder(rng, d_h=16, n_heads=2, n_layers=layers,
                              idx_heads=1, idx_width=4)

    def test_full_selection_matches_dense(self, rng):
        for trial in range(20):
            r = np.random.default_rng(trial)
            enc = self.make(r, layers=2)
            x = Tensor(r.normal(size=(2, 6, 16)))
            mask = np.ones((2, 6))
            if trial % 2:
                mask[0, :2] = 0
            dense, _, _ = enc.dense_forward(x, mask)
            sparse, _ = enc.sparse_forward(x, mask, k=6)
            np.testing.assert_allclose(sparse.data, dense.data, rtol=0, atol=1e-6)

    def test_k_larger_than_length_clamped(self, rng):
        enc = self.make(rng)
        x = Tensor(rng.normal(size=(1, 4, 16)))
        dense, _, _ = enc.dense_forward(x, np.ones((1, 4)))
        sparse, _ = enc.sparse_forward(x, np.ones((1, 4)), k=64)
        np.testing.assert_allclose(sparse.data, dense.data, rtol=0, atol=1e-6)

    def test_k_must_be_positive(self, rng):
        enc = self.make(rng)
        with pytest.raises(ConfigError):
            enc.sparse_forward(Tensor(rng.normal(size=(1, 3, 16))),
                               np.ones((1, 3)), k=0)

    def test_k1_attends_to_argmax_only(self, rng):
        blk = MidtermBlock(rng, d_h=16, n_heads=2, idx_heads=1, idx_width=4)
        x = Tensor(rng.normal(size=(1, 5, 16)))
        mask = np.ones((1, 5))
        s_full = blk.indexer.scores(x.detach()).data
        out, aux = blk.sparse(x, mask, k=1, want_scores=True)
        _, s_idx_sel, sel_mask = aux
        np.testing.assert_array_equal(
            s_idx_sel.data[:, :, 0], s_full.max(axis=-1))
        assert sel_mask.all()
        # weight 1.0 on the selected key: output equals a direct value mix
        idx = s_full.argmax(axis=-1)[0]
        v = blk.attn.wv(x)
        picked = T.gather_batch_rows(v, idx[None, :, None])
        manual = T.add(x, blk.attn.wo(T.reshape(picked, (1, 5, 16))))
        manual = T.add(manual, blk.ffn(blk.norm(manual)))
        np.testing.assert_allclose(out.data, manual.data, rtol=0, atol=1e-10)

    def test_selection_matches_resorted_topk(self, rng):
        blk = MidtermBlock(rng, d_h=16, n_heads=2, idx_heads=1, idx_width=4)
        x = Tensor(rng.normal(size=(2, 8, 16)))
        mask = np.ones((2, 8)); mask[1, 5:] = 0
        _, aux = blk.sparse(x, mask, k=3, want_scores=True)
        _, s_idx_sel, sel_mask = aux
        s_full = blk.indexer.scores(x.detach()).data
        ranked = np.where(mask[:, None, :] > 0, s_full, -np.inf)
        oracle = np.sort(T.topk_indices(ranked, 3), axis=-1)
        # values of the selected set match the top-3 values exactly
        np.testing.assert_array_equal(
            np.sort(s_idx_sel.data, axis=-1),
            np.sort(np.take_along_axis(ranked, oracle, axis=-1), axis=-1))
        assert sel_mask.all()  # only real keys picked (5 >= 3 everywhere)

    def test_padded_keys_never_selected(self, rng):
        blk = MidtermBlock(rng, d_h=16, n_heads=2, idx_heads=1, idx_width=4)
        x = Tensor(rng.normal(size=(1, 6, 16)))
        mask = np.array([[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]])
        _, aux = blk.sparse(x, mask, k=4, want_scores=True)
        assert aux[2].all()

    def test_sparse_gradients(self, rng):
        enc = self.make(rng)
        x = Tensor(rng.normal(size=(1, 5, 16)))
        mask = np.ones((1, 5))

        def f():
            out, _ = enc.sparse_forward(x, mask, k=2)
            return T.sum_(T.mul(out, out))

        check_gradients(f, enc.blocks[0].attn.parameters()
                        + enc.blocks[0].ffn.parameters(), sample=30, rng=rng)

    def test_dense_gradients(self, rng):
        enc = self.make(rng)
        x = Tensor(rng.normal(size=(1, 4, 16)), requires_grad=True)
        mask = np.ones((1, 4))

        def f():
            out, _, _ = enc.dense_forward(x, mask)
            return T.sum_(T.mul(out, out))

        check_gradients(f, [x] + enc.blocks[0].attn.parameters(),
                        sample=30, rng=rng)


class TestKlRows:
    def test_fully_masked_row_safe(self, rng):
        tgt = Tensor(rng.normal(size=(1, 3, 3)))
        pred = Tensor(rng.normal(size=(1, 3, 3)), requires_grad=True)
        km = np.zeros((1, 3, 3)); km[0, 0] = 1
        kl, _ = kl_rows(tgt, pred, km)
        assert np.all(np.isfinite(kl.data))
        assert kl.data[0, 1] == 0 and kl.data[0, 2] == 0
