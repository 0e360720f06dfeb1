"""Mask network shapes, degenerate cases, and influence patterns."""
import numpy as np
import pytest

from gmsep.autodiff import ParamStore, ShapeMismatch, Tensor
from gmsep.model import DualPathBlock, MaskNet, MaskNetConfig, se_apply, separate
from gmsep.signal import Decoder

RNG = np.random.default_rng(33)


def _mask_net(sources, filters=8, chunk=6, blocks=1, hidden=4, seed=0, prefix="net"):
    store = ParamStore(np.float64, seed=seed)
    net = MaskNet(store, MaskNetConfig(filters=filters, chunk=chunk, num_blocks=blocks,
                                       hidden=hidden, sources=sources), prefix)
    return store, net


class TestMaskNet:
    def test_output_shape_two_sources(self):
        _, net = _mask_net(sources=2)
        h = Tensor(RNG.standard_normal((8, 21)))
        masks = net.forward(h)
        assert masks.shape == (2, 8, 21)

    def test_masks_nonnegative(self):
        _, net = _mask_net(sources=3)
        masks = net.forward(Tensor(RNG.standard_normal((8, 17))))
        assert np.all(masks.data >= 0)

    def test_enhancement_is_single_source_case(self):
        # same architecture and parameter layout, only the output head width differs
        store1, net1 = _mask_net(sources=1, seed=5, prefix="n")
        store2, net2 = _mask_net(sources=2, seed=5, prefix="n")
        names1, names2 = store1.names(), store2.names()
        assert names1 == names2
        only_head = [n for n in names1
                     if store1.param(n).shape != store2.param(n).shape]
        assert set(only_head) == {"n.mask_proj.weight", "n.mask_proj.bias"}
        out = net1.forward(Tensor(RNG.standard_normal((8, 15))))
        assert out.shape == (1, 8, 15)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MaskNetConfig(filters=8, chunk=7, num_blocks=1, hidden=4, sources=1)
        with pytest.raises(ValueError):
            MaskNetConfig(filters=8, chunk=6, num_blocks=0, hidden=4, sources=1)
        with pytest.raises(ValueError):
            MaskNetConfig(filters=8, chunk=6, num_blocks=1, hidden=4, sources=0)


class TestDualPathBlock:
    def _block(self, filters=6, hidden=3, seed=0):
        store = ParamStore(np.float64, seed=seed)
        return store, DualPathBlock(store, "blk", filters, hidden)

    def test_shape_preserved(self):
        _, blk = self._block()
        for k, s in [(4, 3), (8, 1), (2, 7)]:
            x = Tensor(RNG.standard_normal((6, k, s)))
            assert blk.forward(x).shape == (6, k, s)

    def test_zero_weights_give_identity(self):
        store, blk = self._block()
        for name, p in store.items():
            p.tensor.data[...] = 0.0
        x = RNG.standard_normal((6, 4, 5))
        out = blk.forward(Tensor(x)).data
        assert np.allclose(out, x, atol=1e-12)

    def test_zeroed_inter_pass_localizes_influence(self):
        store, blk = self._block(seed=9)
        for name, p in store.items():
            if ".inter" in name and name.endswith(("w_in", "w_rec", "weight")):
                p.tensor.data[...] = 0.0
        x = RNG.standard_normal((6, 4, 5))
        base = blk.forward(Tensor(x)).data
        bumped = x.copy()
        bumped[:, :, 2] += RNG.standard_normal((6, 4))
        out = blk.forward(Tensor(bumped)).data
        changed = np.any(np.abs(out - base) > 1e-12, axis=(0, 1))
        assert changed[2]
        assert not changed[[0, 1, 3, 4]].any()

    def test_full_block_spreads_influence_across_chunks(self):
        _, blk = self._block(seed=9)
        x = RNG.standard_normal((6, 4, 5))
        base = blk.forward(Tensor(x)).data
        bumped = x.copy()
        bumped[:, :, 2] += 1.0
        out = blk.forward(Tensor(bumped)).data
        changed = np.any(np.abs(out - base) > 1e-12, axis=(0, 1))
        assert changed.all()


class TestApplyAndSeparate:
    def test_identity_mask(self):
        h = Tensor(RNG.standard_normal((4, 9)))
        out = se_apply(h, Tensor(np.ones((4, 9))))
        assert np.array_equal(out.data, h.data)

    def test_zero_mask(self):
        h = Tensor(RNG.standard_normal((4, 9)))
        assert np.array_equal(se_apply(h, Tensor(np.zeros((1, 4, 9)))).data, np.zeros((4, 9)))

    def test_hand_example(self):
        h = Tensor([[1.0, 2.0], [3.0, 4.0]])
        m = Tensor([[0.0, 1.0], [0.5, 1.0]])
        assert np.array_equal(se_apply(h, m).data, [[0.0, 2.0], [1.5, 4.0]])

    def test_mismatch_rejected(self):
        with pytest.raises(ShapeMismatch):
            se_apply(Tensor(np.ones((4, 9))), Tensor(np.ones((4, 8))))

    def _decoder(self):
        store = ParamStore(np.float64, seed=4)
        return Decoder(store, 4, 6, 3)

    def test_separate_shapes_and_zero_mask(self):
        dec = self._decoder()
        t = 30
        t_prime = (t - 6) // 3 + 1
        h_e = Tensor(RNG.standard_normal((4, t_prime)))
        masks = np.abs(RNG.standard_normal((3, 4, t_prime)))
        masks[1] = 0.0
        waves = separate(h_e, Tensor(masks), dec, t)
        assert len(waves) == 3
        assert all(w.shape == (t,) for w in waves)
        assert np.array_equal(waves[1].data, np.zeros(t))

    def test_identical_masks_identical_outputs(self):
        dec = self._decoder()
        h_e = Tensor(RNG.standard_normal((4, 9)))
        m = np.abs(RNG.standard_normal((1, 4, 9)))
        masks = Tensor(np.concatenate([m, m], axis=0))
        waves = separate(h_e, masks, dec, 30)
        assert np.array_equal(waves[0].data, waves[1].data)
