"""Multi-head attention layers across all four normalizer modes."""

import numpy as np
import pytest

from adaptive_vl import numerics as nx
from adaptive_vl.adaptive_span import similarity_scores
from adaptive_vl.attention import (MECHANISMS, AttentionLayer, MultiHeadAttention, cross_attend,
                                   self_attend, uses_entmax, uses_span)
from adaptive_vl.normalizers import sparsemax_row

D, H = 8, 2


def _layer(mech, seed=0, **kw):
    return AttentionLayer(D, H, mech, seed, "lang.0", std=0.3, **kw)


def _x(seed, *shape):
    return nx.Tensor(np.random.default_rng(seed).normal(size=shape))


class TestConstruction:
    def test_heads_must_divide_dim(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(10, 3, "softmax", 0, "a")

    def test_unknown_mechanism(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(8, 2, "linear", 0, "a")

    @pytest.mark.parametrize("mech", MECHANISMS)
    def test_mode_specific_parameters(self, mech):
        names = {n for n, _ in _layer(mech).named_parameters()}
        assert ("attn.z" in names) == uses_span(mech)
        assert ("attn.relpos_table" in names) == uses_span(mech)
        assert ("attn.raw_alpha" in names) == uses_entmax(mech)

    def test_shared_weights_identical_across_modes(self):
        a = dict(_layer("softmax").named_parameters())
        b = dict(_layer("span+entmax").named_parameters())
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_fresh_alpha_is_one_and_a_half(self):
        np.testing.assert_array_equal(_layer("entmax").attn.alpha, [1.5, 1.5])


class TestSelfAttend:
    @pytest.mark.parametrize("mech", MECHANISMS)
    def test_single_token(self, mech):
        layer = _layer(mech)
        out = self_attend(layer, _x(0, 1, D))
        assert out.shape == (1, D)
        np.testing.assert_array_equal(layer.attn.last_weights, 1.0)
        np.testing.assert_array_equal(self_attend(layer, _x(0, 1, D)).data, out.data)

    @pytest.mark.parametrize("mech", MECHANISMS)
    def test_rows_on_simplex(self, mech):
        layer = _layer(mech)
        self_attend(layer, _x(1, 3, 7, D))
        w = layer.attn.last_weights
        assert w.shape == (3, H, 7, 7)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-8)

    def test_saturated_span_equals_softmax(self):
        x = _x(2, 2, 6, D)
        span = _layer("span")
        span.attn.z.data[:] = 6 + span.attn.span.ramp
        span.attn.relpos_table.data[:] = 0.0
        np.testing.assert_allclose(self_attend(span, x).data, self_attend(_layer("softmax"), x).data,
                                   atol=1e-10, rtol=0)

    def test_sparse_limit_matches_sparsemax_oracle(self):
        layer = _layer("entmax")
        layer.attn.raw_alpha.data[:] = 40.0          # alpha == 2 in float64
        layer.attn.wq.data *= 20.0                   # spread scores so some rows are one-hot
        x = _x(3, 1, 5, D)
        self_attend(layer, x)
        att = layer.attn
        q = att._split(nx.linear(x, att.wq, att.bq))
        k = att._split(nx.linear(x, att.wk, att.bk))
        scores = similarity_scores(q, k, None).data
        w = att.last_weights
        np.testing.assert_allclose(w, sparsemax_row(scores), atol=1e-7)
        top2 = -np.sort(-scores, axis=-1)[..., :2]
        dominant = top2[..., 0] - top2[..., 1] >= 1.0
        assert dominant.any()
        assert np.all((w > 0).sum(-1)[dominant] == 1)

    def test_empty_sequence(self):
        with pytest.raises(ValueError):
            self_attend(_layer("softmax"), nx.Tensor(np.zeros((0, D))))


class TestCrossAttend:
    @pytest.mark.parametrize("mech", MECHANISMS)
    def test_single_key(self, mech):
        layer = _layer(mech)
        cross_attend(layer, _x(4, 5, D), _x(5, 1, D))
        np.testing.assert_array_equal(layer.attn.last_weights, 1.0)

    @pytest.mark.parametrize("mech", MECHANISMS)
    def test_identical_streams_equal_self_attention(self, mech):
        x = _x(6, 4, D)
        np.testing.assert_allclose(cross_attend(_layer(mech), x, x).data,
                                   self_attend(_layer(mech), x).data, atol=1e-12, rtol=0)

    @pytest.mark.parametrize("mech", MECHANISMS)
    def test_weight_shape_and_normalization(self, mech):
        layer = _layer(mech)
        out = cross_attend(layer, _x(7, 2, 3, D), _x(8, 2, 5, D))
        assert out.shape == (2, 3, D)
        w = layer.attn.last_weights
        assert w.shape == (2, H, 3, 5)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-8)

    def test_key_permutation_in_softmax_mode(self):
        layer = _layer("softmax")
        q = _x(9, 3, D)
        kv = np.random.default_rng(10).normal(size=(6, D))
        perm = np.random.default_rng(11).permutation(6)
        out = cross_attend(layer, q, nx.Tensor(kv)).data
        w = layer.attn.last_weights.copy()
        out_p = cross_attend(layer, q, nx.Tensor(kv[perm])).data
        np.testing.assert_allclose(layer.attn.last_weights, w[..., perm], atol=1e-14)
        np.testing.assert_allclose(out_p, out, atol=1e-12)

    def test_empty_keys(self):
        with pytest.raises(ValueError):
            cross_attend(_layer("softmax"), _x(0, 2, D), nx.Tensor(np.zeros((0, D))))


class TestGradientFlow:
    @pytest.mark.parametrize("mech", MECHANISMS)
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_every_parameter_receives_gradient(self, mech, seed):
        layer = _layer(mech, seed=seed, max_span=4, ramp=2.0)
        if uses_span(mech):
            layer.attn.z.data[:] = [1.3, 2.2]     # ramp covers in-range distances
        x = _x(seed + 20, 2, 6, D)
        target = np.random.default_rng(seed).normal(size=(2, 6, D))
        diff = self_attend(layer, x) - nx.Tensor(target)
        (diff * diff).sum().backward()
        names = ["wq", "wk", "wv", "wo"]
        names += ["z"] if uses_span(mech) else []
        names += ["raw_alpha"] if uses_entmax(mech) else []
        for name in names:
            g = getattr(layer.attn, name).grad
            assert g is not None and np.max(np.abs(g)) > 0, name
