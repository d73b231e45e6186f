"""Neural primitives on top of the autodiff core.

Layers are thin parameter holders; all math stays in autodiff ops so the
gradient contract holds everywhere. Attention reductions over the key axis
run with exactly rounded sums, making attention outputs invariant (bit for
bit) under any joint permutation of keys and values.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, astensor
from .errors import ConfigError, ShapeError
from .rng import Rng

DEFAULT_LN_EPS = 1e-5


class Parameter(Tensor):
    """A named trainable tensor; ``grad`` always exists and matches ``dims``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name


class Module:
    """Minimal container: parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        found: list[tuple[str, Parameter]] = []
        for attr, value in vars(self).items():
            path = f"{prefix}.{attr}" if prefix else attr
            if isinstance(value, Parameter):
                found.append((path, value))
            elif isinstance(value, Module):
                found.extend(value.named_parameters(path))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        found.append((f"{path}.{i}", item))
                    elif isinstance(item, Module):
                        found.extend(item.named_parameters(f"{path}.{i}"))
        for name, param in found:
            param.name = name
        return found

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0.0


def linear_apply(x, w, b) -> Tensor:
    """y = x @ w + b for x[..., Din], w[Din, Dout], b[Dout]."""
    x, w, b = astensor(x), astensor(w), astensor(b)
    if x.dims[-1] != w.dims[0]:
        raise ShapeError(f"linear: input dim {x.dims[-1]} != weight dim {w.dims[0]}")
    squeeze = x.ndim == 1
    if squeeze:
        x = ad.reshape(x, (1,) + x.dims)
    y = ad.add(ad.matmul(x, w), b)
    if squeeze:
        y = ad.reshape(y, y.dims[1:])
    return y


class Linear(Module):
    """Dense affine layer. Default init: uniform(-1/sqrt(Din), 1/sqrt(Din))."""

    def __init__(
        self,
        din: int,
        dout: int,
        rng: Rng | None = None,
        *,
        zero_init: bool = False,
        weight_std: float | None = None,
        bias_values: np.ndarray | None = None,
    ):
        if zero_init:
            w = np.zeros((din, dout))
        elif weight_std is not None:
            w = rng.fill_normal((din, dout), 0.0, weight_std)
        else:
            bound = 1.0 / np.sqrt(din)
            w = rng.fill_uniform((din, dout), -bound, bound)
        b = np.zeros(dout) if bias_values is None else np.asarray(bias_values, float)
        if b.shape != (dout,):
            raise ShapeError("bias_values must have shape (dout,)")
        self.w = Parameter(w)
        self.b = Parameter(b)

    def __call__(self, x) -> Tensor:
        return linear_apply(x, self.w, self.b)


def layer_norm(x, gain, bias, eps: float = DEFAULT_LN_EPS) -> Tensor:
    """Standardize the last axis, then scale and shift.

    Constant rows map to zero before the affine part (the eps floor keeps the
    division finite).
    """
    return ad.layer_norm_affine(x, gain, bias, eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = DEFAULT_LN_EPS):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


def _ln_np(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


def _ffn_ops(x, w1, b1, w2, b2) -> Tensor:
    return ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(x, w1), b1)), w2), b2)


class FFN(Module):
    """Two linear layers with a ReLU between; hidden width is 2x the model dim.

    Forward is fused (numpy value, rebuilt-graph backward)."""

    def __init__(self, din: int, dmodel: int, dout: int, rng: Rng, *, zero_last: bool = False):
        hidden = 2 * dmodel
        self.lin1 = Linear(din, hidden, rng)
        self.lin2 = Linear(hidden, dout, rng, zero_init=zero_last)

    def __call__(self, x) -> Tensor:
        x = astensor(x)
        w1, b1, w2, b2 = self.lin1.w, self.lin1.b, self.lin2.w, self.lin2.b
        value = (
            np.maximum(x.data @ w1.data + b1.data, 0.0) @ w2.data + b2.data
        )
        return ad.lazy_composite(value, (x, w1, b1, w2, b2), _ffn_ops)


def _sdpa_ops(qh: Tensor, kh: Tensor, vh: Tensor, scale: float) -> Tensor:
    scores = ad.mul(ad.matmul(qh, ad.swap_last_two(kh)), scale)
    attn = ad.softmax(scores, axis=-1, stable_sum=True)
    return ad.matmul(attn, vh, stable_sum=True)


def _sdpa_np(qh: np.ndarray, kh: np.ndarray, vh: np.ndarray, scale: float) -> np.ndarray:
    # Mirrors _sdpa_ops exactly, including the order-invariant reductions.
    scores = np.matmul(qh, np.swapaxes(kh, -1, -2)) * scale
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    attn = e / np.expand_dims(np.sort(e, axis=-1).sum(axis=-1), -1)
    products = attn[..., :, :, None] * vh[..., None, :, :]
    return np.sort(products, axis=-2).sum(axis=-2)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head projections.

    The key-axis reductions (softmax normalizer and the value average) sort
    before summing, so jointly permuting key/value rows changes nothing,
    bit for bit. Accepts any leading batch dims: q[..., Nq, D], k/v[..., Nk, D].
    """

    def __init__(self, dim: int, heads: int, rng: Rng):
        if dim % heads != 0:
            raise ConfigError(f"attention dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def _split_heads(self, x: Tensor) -> Tensor:
        *batch, n, _ = x.dims
        x = ad.reshape(x, (*batch, n, self.heads, self.dim // self.heads))
        order = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
        return ad.transpose(x, order)  # [..., heads, n, dh]

    def _merge_heads(self, x: Tensor) -> Tensor:
        *batch, _, n, _ = x.dims
        order = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
        x = ad.transpose(x, order)
        return ad.reshape(x, (*batch, n, self.dim))

    def __call__(self, q, k, v) -> Tensor:
        q, k, v = astensor(q), astensor(k), astensor(v)
        if k.dims[:-1] != v.dims[:-1]:
            raise ShapeError("key/value row counts differ")
        qh = self._split_heads(self.q_proj(q))
        kh = self._split_heads(self.k_proj(k))
        vh = self._split_heads(self.v_proj(v))
        scale = 1.0 / np.sqrt(self.dim // self.heads)
        mixed = ad.lazy_composite(
            _sdpa_np(qh.data, kh.data, vh.data, scale),
            (qh, kh, vh),
            lambda a, b, c: _sdpa_ops(a, b, c, scale),
        )
        return self.out_proj(self._merge_heads(mixed))


def _split_heads_np(x: np.ndarray, heads: int) -> np.ndarray:
    *batch, n, d = x.shape
    x = x.reshape(*batch, n, heads, d // heads)
    order = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
    return x.transpose(order)


def _merge_heads_np(x: np.ndarray, dim: int) -> np.ndarray:
    *batch, _, n, _ = x.shape
    order = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
    return x.transpose(order).reshape(*batch, n, dim)


class SelfAttentionBlock(Module):
    """Pre-norm residual self-attention: x + MHA(LN(x)).

    The whole block is fused: numpy forward, rebuilt-graph backward."""

    def __init__(self, dim: int, heads: int, rng: Rng):
        self.norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)

    def _ops(self, x, gain, bias, wq, bq, wk, bk, wv, bv, wo, bo) -> Tensor:
        attn = self.attn
        normed = layer_norm(x, gain, bias, self.norm.eps)
        qh = attn._split_heads(ad.add(ad.matmul(normed, wq), bq))
        kh = attn._split_heads(ad.add(ad.matmul(normed, wk), bk))
        vh = attn._split_heads(ad.add(ad.matmul(normed, wv), bv))
        scale = 1.0 / np.sqrt(attn.dim // attn.heads)
        mixed = attn._merge_heads(_sdpa_ops(qh, kh, vh, scale))
        return ad.add(x, ad.add(ad.matmul(mixed, wo), bo))

    def __call__(self, x) -> Tensor:
        x = astensor(x)
        attn = self.attn
        leaves = (
            x,
            self.norm.gain,
            self.norm.bias,
            attn.q_proj.w,
            attn.q_proj.b,
            attn.k_proj.w,
            attn.k_proj.b,
            attn.v_proj.w,
            attn.v_proj.b,
            attn.out_proj.w,
            attn.out_proj.b,
        )
        normed = _ln_np(x.data, self.norm.gain.data, self.norm.bias.data, self.norm.eps)
        heads = attn.heads
        qh = _split_heads_np(normed @ attn.q_proj.w.data + attn.q_proj.b.data, heads)
        kh = _split_heads_np(normed @ attn.k_proj.w.data + attn.k_proj.b.data, heads)
        vh = _split_heads_np(normed @ attn.v_proj.w.data + attn.v_proj.b.data, heads)
        scale = 1.0 / np.sqrt(attn.dim // heads)
        mixed = _merge_heads_np(_sdpa_np(qh, kh, vh, scale), attn.dim)
        value = x.data + (mixed @ attn.out_proj.w.data + attn.out_proj.b.data)
        return ad.lazy_composite(value, leaves, self._ops)


def mean_pool(x, axis: int) -> Tensor:
    return ad.tmean(astensor(x), axis=axis)
