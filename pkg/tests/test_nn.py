"""Neural primitives: the contracts every later module leans on."""

import math

import numpy as np
import pytest

import actionmix.autodiff as ad
from actionmix.autodiff import Tensor, make_op
from actionmix.errors import ConfigError
from actionmix.gradcheck import check_gradients
from actionmix.nn import (
    FFN,
    Linear,
    MultiHeadAttention,
    Parameter,
    SelfAttentionBlock,
    layer_norm,
    linear_apply,
)
from actionmix.rng import Rng

from oracles import scalar_attention_oracle


class TestLinearApply:
    def test_identity(self):
        out = linear_apply(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, [1.0, 2.0])

    def test_hand_case(self):
        out = linear_apply(
            Tensor([1.0, 1.0]), Tensor([[1.0], [-1.0]]), Tensor([0.5])
        )
        assert np.allclose(out.data, [0.5])

    def test_annihilation(self):
        x = Tensor(Rng(1).fill_normal((4, 3)))
        out = linear_apply(x, Tensor(np.zeros((3, 2))), Tensor(np.zeros(2)))
        assert np.all(out.data == 0.0)

    def test_shape_error(self):
        from actionmix.errors import ShapeError

        with pytest.raises(ShapeError):
            linear_apply(Tensor(np.ones(3)), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))

    def test_gradients(self):
        rng = Rng(2)
        x = Parameter(rng.fill_normal((3, 4)))
        w = Parameter(rng.fill_normal((4, 2)))
        b = Parameter(rng.fill_normal((2,)))

        def f():
            y = linear_apply(x, w, b)
            return ad.tsum(ad.mul(y, y))

        assert check_gradients(f, [("x", x), ("w", w), ("b", b)], tol=1e-6).passed


class TestLayerNorm:
    def test_zero_mean_unit_variance_input(self):
        out = layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        assert np.allclose(out.data, [1.0, -1.0], atol=1e-6)

    def test_constant_input_gives_zeros(self):
        out = layer_norm(
            Tensor([3.7, 3.7, 3.7]), Tensor(np.ones(3)), Tensor(np.zeros(3))
        )
        assert np.allclose(out.data, 0.0)

    def test_hand_case(self):
        out = layer_norm(Tensor([0.0, 2.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-6)

    def test_standardization_property(self):
        rng = Rng(3)
        x = Tensor(rng.fill_normal((6, 16), 2.0, 3.0))
        out = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12)
        assert np.all(np.abs(out.data.mean(axis=-1)) <= 1e-9)
        assert np.all(np.abs(out.data.var(axis=-1) - 1.0) <= 1e-6)

    def test_eps_must_be_positive(self):
        from actionmix.errors import InputError

        with pytest.raises(InputError):
            layer_norm(Tensor(np.ones(3)), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)

    def test_gradients(self):
        rng = Rng(4)
        x = Parameter(rng.fill_normal((5, 8)))
        g = Parameter(np.ones(8))
        b = Parameter(np.zeros(8))

        def f():
            return ad.tsum(layer_norm(x, g, b))

        report = check_gradients(f, [("x", x), ("g", g), ("b", b)], h=1e-5, tol=1e-6)
        assert report.passed, report.summary()


class TestActivations:
    def test_relu(self):
        assert np.allclose(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_softmax_uniform(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
        assert np.allclose(out.data, 1.0 / 3.0)

    def test_softmax_hand_case(self):
        out = ad.softmax(Tensor([math.log(2.0), 0.0]), axis=-1)
        assert np.allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)


class TestMultiHeadAttention:
    def _mha(self, dim=8, heads=2, seed=5):
        return MultiHeadAttention(dim, heads, Rng(seed))

    def test_single_key_returns_projected_value(self):
        mha = self._mha()
        rng = Rng(6)
        q = Tensor(rng.fill_normal((3, 8)))
        k = Tensor(rng.fill_normal((1, 8)))
        v = Tensor(rng.fill_normal((1, 8)))
        out = mha(q, k, v).data
        vproj = v.data @ mha.v_proj.w.data + mha.v_proj.b.data
        expected = vproj @ mha.out_proj.w.data + mha.out_proj.b.data
        assert np.allclose(out, np.repeat(expected, 3, axis=0), atol=1e-12)

    def test_key_value_permutation_invariance_bitwise(self):
        mha = self._mha()
        rng = Rng(7)
        q = Tensor(rng.fill_normal((4, 8)))
        kv = rng.fill_normal((6, 8))
        base = mha(q, Tensor(kv), Tensor(kv)).data
        perm = Rng(8).permutation(6)
        out = mha(q, Tensor(kv[perm]), Tensor(kv[perm])).data
        assert np.array_equal(base, out)

    def test_matches_scalar_oracle(self):
        mha = self._mha()
        rng = Rng(9)
        q = rng.fill_normal((2, 8))
        kv = rng.fill_normal((2, 8))
        out = mha(Tensor(q), Tensor(kv), Tensor(kv)).data
        expected = scalar_attention_oracle(
            q, kv, kv,
            mha.q_proj.w.data, mha.q_proj.b.data,
            mha.k_proj.w.data, mha.k_proj.b.data,
            mha.v_proj.w.data, mha.v_proj.b.data,
            mha.out_proj.w.data, mha.out_proj.b.data,
            heads=2,
        )
        assert np.abs(out - expected).max() < 1e-10

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention(10, 4, Rng(0))

    def test_gradients(self):
        mha = self._mha(dim=4, heads=2, seed=10)
        rng = Rng(11)
        q = Parameter(rng.fill_normal((3, 4)))
        kv = Parameter(rng.fill_normal((3, 4)))

        def f():
            out = mha(q, kv, kv)
            return ad.tsum(ad.mul(out, out))

        params = [("q", q), ("kv", kv)] + mha.named_parameters()
        report = check_gradients(f, params, tol=1e-4)
        assert report.passed, report.summary()


class TestSelfAttentionBlock:
    def test_fused_value_matches_op_graph(self):
        block = SelfAttentionBlock(8, 2, Rng(12))
        x = Tensor(Rng(13).fill_normal((5, 8)))
        fused = block(x).data
        leaves = (
            x, block.norm.gain, block.norm.bias,
            block.attn.q_proj.w, block.attn.q_proj.b,
            block.attn.k_proj.w, block.attn.k_proj.b,
            block.attn.v_proj.w, block.attn.v_proj.b,
            block.attn.out_proj.w, block.attn.out_proj.b,
        )
        composite = block._ops(*leaves).data
        assert np.abs(fused - composite).max() < 1e-12

    def test_gradients(self):
        block = SelfAttentionBlock(4, 2, Rng(14))
        x = Parameter(Rng(15).fill_normal((3, 4)))

        def f():
            out = block(x)
            return ad.tsum(ad.mul(out, out))

        report = check_gradients(f, [("x", x)] + block.named_parameters(), tol=1e-4)
        assert report.passed, report.summary()


class TestFFN:
    def test_fused_matches_ops(self):
        ffn = FFN(6, 6, 3, Rng(16))
        x = Tensor(Rng(17).fill_normal((4, 6)))
        from actionmix.nn import _ffn_ops

        expected = _ffn_ops(x, ffn.lin1.w, ffn.lin1.b, ffn.lin2.w, ffn.lin2.b).data
        assert np.abs(ffn(x).data - expected).max() < 1e-12

    def test_zero_last_outputs_zero(self):
        ffn = FFN(6, 6, 3, Rng(18), zero_last=True)
        x = Tensor(Rng(19).fill_normal((4, 6)))
        assert np.all(ffn(x).data == 0.0)

    def test_gradients(self):
        ffn = FFN(4, 4, 2, Rng(20))
        x = Parameter(Rng(21).fill_normal((3, 4)))

        def f():
            out = ffn(x)
            return ad.tsum(ad.mul(out, out))

        report = check_gradients(f, [("x", x)] + ffn.named_parameters(), tol=1e-4)
        assert report.passed, report.summary()


def test_gradcheck_detects_broken_gradient():
    x = Parameter(np.array([1.5, -0.5, 2.0]))

    def broken_square(t):
        # Deliberately wrong backward: claims d(x^2)/dx = 3x.
        return make_op(t.data**2, (t,), lambda g: (g * 3.0 * t.data,))

    def f():
        return ad.tsum(broken_square(x))

    report = check_gradients(f, [("x", x)], tol=1e-4)
    assert not report.passed
    assert len(report.failures) == 3


def test_gradcheck_simple_quadratic():
    w = Parameter(np.array([3.0]))

    def f():
        return ad.tsum(ad.mul(w, w))

    w.grad[...] = 0
    f().backward()
    assert np.allclose(w.grad, [6.0])
    report = check_gradients(f, [("w", w)], h=1e-5, tol=1e-8)
    assert report.passed


def test_gradcheck_layer_norm_self_test():
    x = Parameter(Rng(22).fill_normal((4,)))
    gain = Tensor(np.ones(4))
    bias = Tensor(np.zeros(4))

    def f():
        return ad.tsum(layer_norm(x, gain, bias))

    report = check_gradients(f, [("x", x)], h=1e-5, tol=1e-6)
    assert report.passed, report.summary()


def test_parameter_registry_and_zero_grad():
    ffn = FFN(3, 3, 2, Rng(23))
    names = [name for name, _ in ffn.named_parameters()]
    assert names == ["lin1.w", "lin1.b", "lin2.w", "lin2.b"]
    for p in ffn.parameters():
        p.grad[...] = 1.0
    ffn.zero_grad()
    assert all(np.all(p.grad == 0.0) for p in ffn.parameters())
    for name, p in ffn.named_parameters():
        assert p.grad.shape == p.data.shape
        assert p.name == name


def test_linear_zero_init_and_bias_values():
    lin = Linear(3, 2, zero_init=True, bias_values=np.array([0.5, -0.5]))
    assert np.all(lin.w.data == 0.0)
    assert np.allclose(lin.b.data, [0.5, -0.5])
