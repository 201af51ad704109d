"""Spiking conv-bn-LIF feature extractors."""

import numpy as np
import pytest

from sscf.backbone import BackboneConfig, ConfigError, SpikingBackbone
from sscf.spiking import LifParams
from sscf.tensor import Tensor, no_grad


def make(T=2, **kw):
    cfg = BackboneConfig(timesteps=T, **kw)
    return SpikingBackbone(cfg, LifParams(), np.random.default_rng(0))


class TestConfig:
    def test_default_widths(self):
        cfg = BackboneConfig()
        assert cfg.widths == (8, 16, 32, 32, 64, 64, 64, 64)
        assert cfg.downsample == (1, 3, 5)
        assert cfg.output_size() == 4

    def test_scnn_has_four_blocks(self):
        cfg = BackboneConfig(variant="scnn")
        assert len(cfg.widths) == 4
        assert cfg.out_channels == 64

    def test_vggsnn_needs_eight_blocks(self):
        with pytest.raises(ConfigError, match="8"):
            BackboneConfig(widths=(8, 8, 8))

    def test_too_small_output(self):
        with pytest.raises(ConfigError, match="2x2"):
            BackboneConfig(input_size=8)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            BackboneConfig(variant="resnet")

    @pytest.mark.parametrize("size", [16, 24, 32, 40])
    def test_output_size_stride_arithmetic(self, size):
        cfg = BackboneConfig(input_size=size)
        side = size
        for _ in range(3):
            side = (side - 1) // 2 + 1
        assert cfg.output_size() == side


class TestEncode:
    def test_smoke_shape(self):
        bb = make(T=1)
        out = bb.encode_static(Tensor(np.random.default_rng(1).random((1, 1, 32, 32))))
        assert out.shape == (1, 1, 64, 4, 4)

    def test_all_zero_image(self):
        bb = make()
        for training in (True, False):
            bb.train(training)
            with no_grad():
                out = bb.encode_static(Tensor(np.zeros((3, 1, 32, 32))))
            np.testing.assert_array_equal(out.data, 0.0)

    def test_all_zero_events(self):
        bb = make(T=3)
        with no_grad():
            out = bb.encode_events(Tensor(np.zeros((3, 2, 1, 32, 32))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_binary_output(self):
        bb = make()
        with no_grad():
            out = bb.encode_static(Tensor(np.random.default_rng(2).random((4, 1, 32, 32))))
        assert np.isin(out.data, (0.0, 1.0)).all()
        assert out.data.any()

    def test_replicated_first_layer(self):
        bb = make(T=2)
        bb.probe = []
        x = np.random.default_rng(3).random((2, 1, 32, 32))
        with no_grad():
            bb.encode_static(Tensor(x))
            pre = bb.blocks[0].preactivation(Tensor(bb.probe[0][2])).data
        np.testing.assert_array_equal(pre[0], pre[1])

    def test_static_equals_replicated_events(self):
        bb = make(T=3)
        bb.eval()
        x = np.random.default_rng(4).random((2, 1, 32, 32))
        events = np.broadcast_to(x, (3,) + x.shape).copy()
        with no_grad():
            a = bb.encode_static(Tensor(x)).data
            b = bb.encode_events(Tensor(events)).data
        np.testing.assert_array_equal(a, b)

    def test_causality(self):
        # eval mode: BN statistics are fixed, so a step only sees its own past
        bb = make(T=4)
        bb.eval()
        for blk in bb.blocks:
            blk.bn._buffers["running_mean"][:] = -0.5  # make the network responsive
        ev = np.zeros((4, 1, 1, 32, 32))
        ev[2, 0, 0, 10:20, 10:20] = 1.0
        with no_grad():
            out = bb.encode_events(Tensor(ev)).data
            base = bb.encode_events(Tensor(np.zeros_like(ev))).data
        np.testing.assert_array_equal(out[:2], base[:2])
        assert not np.array_equal(out[2:], base[2:])

    def test_time_mismatch(self):
        with pytest.raises(ValueError, match="T="):
            make(T=2).encode_events(Tensor(np.zeros((3, 1, 1, 32, 32))))

    def test_wrong_resolution(self):
        with pytest.raises(ConfigError):
            make().encode_static(Tensor(np.zeros((1, 1, 16, 16))))

    def test_shared_weights_across_batches(self):
        bb = make()
        bb.eval()
        rng = np.random.default_rng(5)
        s, q = rng.random((2, 1, 32, 32)), rng.random((3, 1, 32, 32))
        with no_grad():
            both = bb.encode_static(Tensor(np.concatenate([s, q]))).data
            only_s = bb.encode_static(Tensor(s)).data
            only_q = bb.encode_static(Tensor(q)).data
        np.testing.assert_array_equal(both[:, :2], only_s)
        np.testing.assert_array_equal(both[:, 2:], only_q)

    def test_no_pooling_modules(self):
        names = [n for n, _ in make().named_parameters()]
        assert all(".conv." in n or ".bn." in n for n in names)
        assert len([n for n in names if n.endswith("conv.weight")]) == 8
