"""Cross-feature correlation, 4D refinement, joint attention and pooling."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import conv4d_loops, gradcheck, projected
from sscf import functional as F
from sscf.cfc import (
    CrossFeatureContrast,
    attended_pool,
    attention_maps,
    cross_correlation,
    temporal_mean,
    uniform_attention,
)
from sscf.tensor import Tensor, no_grad


def cosine_loops(q, s):
    C, H, W = q.shape
    out = np.zeros((H, W) + s.shape[1:])
    for a, b in itertools.product(range(H), range(W)):
        for c, d in itertools.product(range(s.shape[1]), range(s.shape[2])):
            u, v = q[:, a, b], s[:, c, d]
            nu, nv = np.linalg.norm(u), np.linalg.norm(v)
            out[a, b, c, d] = 0.0 if nu == 0 or nv == 0 else u @ v / (nu * nv)
    return out


def attention_loops(c, gamma):
    H, W, Hs, Ws = c.shape
    flat = c.reshape(H * W, Hs * Ws) / gamma
    col = np.exp(flat - flat.max(axis=0, keepdims=True))
    col /= col.sum(axis=0, keepdims=True)  # softmax over x_q for each x_s
    row = np.exp(flat - flat.max(axis=1, keepdims=True))
    row /= row.sum(axis=1, keepdims=True)  # softmax over x_s for each x_q
    return col.mean(axis=1).reshape(H, W), row.mean(axis=0).reshape(Hs, Ws)


class TestTemporalMean:
    def test_firing_rate(self):
        spikes = np.zeros((4, 1, 2, 1, 1))
        spikes[:3, 0, 0] = 1.0
        spikes[0, 0, 1] = 1.0
        np.testing.assert_array_equal(temporal_mean(spikes).data[0, :, 0, 0], [0.75, 0.25])

    def test_single_step_identity(self):
        x = np.random.default_rng(0).random((1, 2, 3, 4, 4))
        np.testing.assert_array_equal(temporal_mean(x).data, x[0])


class TestCrossCorrelation:
    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        q, s = rng.standard_normal((5, 3, 4)), rng.standard_normal((5, 2, 3))
        np.testing.assert_allclose(cross_correlation(q, s).data, cosine_loops(q, s), atol=1e-14)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        q, s = rng.random((3, 4, 2, 2)), rng.random((2, 4, 2, 2))
        out = cross_correlation(q, s).data
        assert out.shape == (3, 2, 2, 2, 2, 2)
        for i, j in itertools.product(range(3), range(2)):
            np.testing.assert_allclose(out[i, j], cosine_loops(q[i], s[j]), atol=1e-14)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((6, 3, 3)), rng.standard_normal((6, 3, 3))
        np.testing.assert_allclose(
            cross_correlation(a, b).data, cross_correlation(b, a).data.transpose(2, 3, 0, 1), atol=1e-14
        )

    def test_self_diagonal_is_one(self):
        a = np.random.default_rng(4).standard_normal((6, 3, 3))
        c = cross_correlation(a, a).data.reshape(9, 9)
        np.testing.assert_allclose(np.diag(c), 1.0, atol=1e-12)

    def test_zero_vectors_give_zero(self):
        a = np.zeros((3, 2, 2))
        b = np.random.default_rng(5).random((3, 2, 2))
        np.testing.assert_array_equal(cross_correlation(a, b).data, 0.0)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            cross_correlation(np.ones((3, 2, 2)), np.ones((4, 2, 2)))

    def test_gradcheck(self):
        rng = np.random.default_rng(6)
        q, s = rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 3, 2, 2))
        w = rng.standard_normal((2, 2, 2, 2, 2, 2))
        assert gradcheck(projected(cross_correlation, w), [q, s]) < 1e-6


def make_cfc(seed=0, hidden_norm=True, channels=6):
    return CrossFeatureContrast(channels, 4, 3, 5.0, np.random.default_rng(seed), hidden_norm=hidden_norm)


class TestRefine4d:
    def test_conv4d_loop_oracle(self):
        rng = np.random.default_rng(7)
        x, w = rng.standard_normal((1, 2, 3, 2, 3, 2)), rng.standard_normal((2, 2, 3, 3, 3, 3))
        np.testing.assert_allclose(F.conv4d(Tensor(x), Tensor(w)).data, conv4d_loops(x, w), atol=1e-12)

    def test_delta_kernel_is_identity_on_positive_input(self):
        cfc = make_cfc(hidden_norm=False)
        for conv in (cfc.conv4d_1, cfc.conv4d_2):
            conv.weight.data[:] = 0.0
            conv.weight.data[0, 0, 1, 1, 1, 1] = 1.0
        c = np.random.default_rng(8).random((2, 3, 3, 3, 3)) + 0.1
        np.testing.assert_allclose(cfc.refine_4d(Tensor(c)).data, c, atol=1e-14)

    def test_delta_kernel_rectifies(self):
        cfc = make_cfc(hidden_norm=False)
        for conv in (cfc.conv4d_1, cfc.conv4d_2):
            conv.weight.data[:] = 0.0
            conv.weight.data[0, 0, 1, 1, 1, 1] = 1.0
        c = np.random.default_rng(9).standard_normal((3, 3, 3, 3))
        np.testing.assert_allclose(cfc.refine_4d(Tensor(c)).data, np.maximum(c, 0.0), atol=1e-14)

    def test_zero_weights_give_zero(self):
        cfc = make_cfc()
        cfc.conv4d_2.weight.data[:] = 0.0
        c = np.random.default_rng(10).standard_normal((2, 2, 3, 3, 3, 3))
        np.testing.assert_array_equal(cfc.refine_4d(Tensor(c)).data, 0.0)

    def test_shape_preserved(self):
        c = np.random.default_rng(11).standard_normal((2, 3, 4, 4, 4, 4))
        assert make_cfc().refine_4d(Tensor(c)).shape == c.shape


class TestAttention:
    def test_two_position_oracle(self):
        # H=1, W=2 on both sides: a 2x2 correlation matrix written out by hand
        c = np.array([[0.9, -0.2], [0.3, 0.5]]).reshape(1, 2, 1, 2)
        g = 5.0
        e = np.exp(c.reshape(2, 2) / g)
        a_q = 0.5 * (e[:, 0] / e[:, 0].sum() + e[:, 1] / e[:, 1].sum())
        a_s = 0.5 * (e[0] / e[0].sum() + e[1] / e[1].sum())
        att = attention_maps(c, g)
        np.testing.assert_allclose(att.a_q.data.ravel(), a_q, atol=1e-15)
        np.testing.assert_allclose(att.a_s.data.ravel(), a_s, atol=1e-15)

    def test_loop_oracle(self):
        c = np.random.default_rng(12).standard_normal((3, 2, 2, 3))
        att = attention_maps(c, 0.7)
        ref_q, ref_s = attention_loops(c, 0.7)
        np.testing.assert_allclose(att.a_q.data, ref_q, atol=1e-14)
        np.testing.assert_allclose(att.a_s.data, ref_s, atol=1e-14)

    @given(arrays(np.float64, (3, 3, 3, 3), elements=st.floats(-1, 1)), st.floats(0.05, 20))
    @settings(max_examples=100, deadline=None)
    def test_distributions(self, c, gamma):
        att = attention_maps(c, gamma)
        for a in (att.a_q.data, att.a_s.data):
            assert np.all(a >= 0)
            assert a.sum() == pytest.approx(1.0, abs=1e-9)

    def test_constant_correlation_is_uniform(self):
        att = attention_maps(np.full((2, 2, 2, 2), 0.3), 5.0)
        np.testing.assert_allclose(att.a_q.data, 0.25, atol=1e-15)
        np.testing.assert_allclose(att.a_s.data, 0.25, atol=1e-15)

    def test_batched_leading_axes(self):
        c = np.random.default_rng(13).standard_normal((2, 3, 2, 2, 2, 2))
        att = attention_maps(c, 5.0)
        assert att.a_q.shape == (2, 3, 2, 2)
        ref_q, ref_s = attention_loops(c[1, 2], 5.0)
        np.testing.assert_allclose(att.a_q.data[1, 2], ref_q, atol=1e-14)
        np.testing.assert_allclose(att.a_s.data[1, 2], ref_s, atol=1e-14)

    def test_sharper_with_small_gamma(self):
        c = np.zeros((2, 2, 2, 2))
        c[0, 0, :, :] = 1.0  # one query position matches everything
        soft = attention_maps(c, 10.0).a_q.data[0, 0]
        sharp = attention_maps(c, 0.1).a_q.data[0, 0]
        assert 0.25 < soft < sharp <= 1.0

    def test_gamma_must_be_positive(self):
        with pytest.raises(ValueError):
            attention_maps(np.zeros((2, 2, 2, 2)), 0.0)

    def test_gradcheck(self):
        rng = np.random.default_rng(14)
        c = rng.standard_normal((2, 2, 3, 2))
        w = rng.standard_normal((2, 2))

        def fn(x):
            att = attention_maps(x, 0.8)
            return att.a_q * Tensor(w[0]) + att.a_s.reshape(2, 3)[:, :2] * Tensor(w[1])

        assert gradcheck(projected(fn, np.ones((2, 2))), [c]) < 1e-6


class TestAttendedPool:
    def test_one_hot_selects_position(self):
        f = np.random.default_rng(15).standard_normal((3, 4, 4))
        a = np.zeros((4, 4))
        a[2, 1] = 1.0
        np.testing.assert_allclose(attended_pool(f, a).data, f[:, 2, 1], atol=1e-15)

    def test_uniform_is_mean(self):
        f = np.random.default_rng(16).standard_normal((2, 3, 4, 4))
        att = uniform_attention((2, 4, 4))
        np.testing.assert_allclose(attended_pool(f, att.a_q).data, f.mean(axis=(2, 3)), atol=1e-14)

    def test_loop_oracle(self):
        rng = np.random.default_rng(17)
        f, a = rng.standard_normal((2, 3, 2, 3)), rng.random((2, 2, 3))
        ref = np.einsum("ncxy,nxy->nc", f, a)
        np.testing.assert_allclose(attended_pool(f, a).data, ref, atol=1e-14)

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError, match="spatial"):
            attended_pool(np.ones((2, 3, 3)), np.ones((2, 2)))

    def test_gradcheck(self):
        rng = np.random.default_rng(18)
        f, a, w = rng.standard_normal((2, 3, 2, 2)), rng.random((2, 2, 2)), rng.standard_normal((2, 3))
        assert gradcheck(projected(attended_pool, w), [f, a]) < 1e-6


class TestCrossFeatureContrast:
    def test_output_shapes(self):
        rng = np.random.default_rng(19)
        with no_grad():
            att = make_cfc()(Tensor(rng.random((3, 6, 4, 4))), Tensor(rng.random((2, 6, 4, 4))))
        assert att.a_q.shape == (3, 2, 4, 4)
        assert att.a_s.shape == (3, 2, 4, 4)
        np.testing.assert_allclose(att.a_q.data.sum(axis=(2, 3)), 1.0, atol=1e-12)

    def test_disabled_is_uniform(self):
        cfc = make_cfc()
        cfc.enabled = False
        att = cfc(Tensor(np.ones((2, 6, 3, 3))), Tensor(np.ones((1, 6, 3, 3))))
        np.testing.assert_array_equal(att.a_s.data, 1.0 / 9)

    def test_end_to_end_gradcheck(self):
        rng = np.random.default_rng(20)
        cfc = make_cfc(seed=21, channels=3)
        fq, fs = rng.random((2, 3, 2, 2)), rng.random((2, 3, 2, 2))
        w = rng.standard_normal((2, 2, 2, 2))

        def fn(q, s):
            att = cfc(q, s)
            return att.a_q + att.a_s * 0.5

        assert gradcheck(projected(fn, w), [fq, fs]) < 1e-5
