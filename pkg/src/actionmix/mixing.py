"""Query-conditioned channel and point mixing, plus the decoupled strategies.

Given a query q[D] and features f[P, D], a generator Linear(q) emits a
channel-mixing matrix and a point-mixing matrix; the features are multiplied
through both with a LayerNorm + ReLU after each product, flattened, linearly
projected back to D, and added to the query:

    CM(f)  = ReLU(LN(f @ Mc)),            Mc = Linear(q)  [D, D]
    PCM(f) = ReLU(LN(CM(f)^T @ Mp)),      Mp = Linear(q)  [P, P_out]
    q'     = q + Linear(Flatten(PCM(f)))

Channels are split into G groups; each group gets its own generated matrices
and normalizes over its own slice, so G = 1 reproduces ungrouped mixing
exactly. Generators start near zero and the output transform starts at zero,
so a freshly built mixer is an exact identity on the query.

``adaptive=False`` swaps the generated matrices for static learned ones (the
fixed-parameter ablation); everything else is unchanged.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, astensor
from .errors import ConfigError, ShapeError
from .nn import Linear, Module, Parameter
from .rng import Rng

GENERATOR_STD = 1e-3


def temporal_pool(features: Tensor) -> Tensor:
    """Mean over the frame axis: [..., T, P, D] -> [..., P, D]."""
    return ad.tmean(astensor(features), axis=-3)


def spatial_pool(features: Tensor) -> Tensor:
    """Mean over the point axis: [..., T, P, D] -> [..., T, D]."""
    return ad.tmean(astensor(features), axis=-2)


class AdaptiveMixer(Module):
    def __init__(
        self,
        dim: int,
        groups: int,
        p_in: int,
        p_out: int,
        rng: Rng,
        adaptive: bool = True,
    ):
        if dim % groups != 0:
            raise ConfigError(f"dim {dim} not divisible by groups {groups}")
        self.dim = dim
        self.groups = groups
        self.p_in = p_in
        self.p_out = p_out
        self.adaptive = adaptive
        dg = dim // groups
        if adaptive:
            self.channel_gen = Linear(dim, groups * dg * dg, rng, weight_std=GENERATOR_STD)
            self.point_gen = Linear(dim, groups * p_in * p_out, rng, weight_std=GENERATOR_STD)
        else:
            eye = np.tile(np.eye(dg)[None], (groups, 1, 1))
            self.static_mc = Parameter(eye)
            self.static_mp = Parameter(rng.fill_normal((groups, p_in, p_out), 0.0, 1.0 / np.sqrt(p_in)))
        self.ln_channel_gain = Parameter(np.ones(dim))
        self.ln_channel_bias = Parameter(np.zeros(dim))
        self.ln_point_gain = Parameter(np.ones(p_out))
        self.ln_point_bias = Parameter(np.zeros(p_out))
        self.out = Linear(groups * dg * p_out, dim, rng, zero_init=True)

    def _group_norm_channels(self, x: Tensor) -> Tensor:
        # x[..., G, P, Dg]; per-group LayerNorm over the channel slice with
        # the matching slice of the D-wide affine parameters.
        dg = self.dim // self.groups
        gain = ad.reshape(self.ln_channel_gain, (self.groups, 1, dg))
        bias = ad.reshape(self.ln_channel_bias, (self.groups, 1, dg))
        return ad.layer_norm_affine(x, gain, bias, 1e-5)

    def _norm_patterns(self, x: Tensor) -> Tensor:
        # x[..., G, Dg, P_out]; LayerNorm over the pattern axis.
        return ad.layer_norm_affine(x, self.ln_point_gain, self.ln_point_bias, 1e-5)

    def _mixing_matrices(self, q: Tensor) -> tuple[Tensor, Tensor]:
        batch = q.dims[:-1]
        dg = self.dim // self.groups
        if self.adaptive:
            mc = ad.reshape(self.channel_gen(q), batch + (self.groups, dg, dg))
            mp = ad.reshape(self.point_gen(q), batch + (self.groups, self.p_in, self.p_out))
        else:
            mc = ad.broadcast_to(self.static_mc, batch + (self.groups, dg, dg))
            mp = ad.broadcast_to(self.static_mp, batch + (self.groups, self.p_in, self.p_out))
        return mc, mp

    def channel_mix(self, q: Tensor, f: Tensor) -> Tensor:
        """CM: [..., P, D] -> [..., P, D] (grouped)."""
        q, f = astensor(q), astensor(f)
        self._check(q, f)
        mc, _ = self._mixing_matrices(q)
        grouped = self._to_groups(f)
        mixed = ad.relu(self._group_norm_channels(ad.matmul(grouped, mc)))
        return self._from_groups(mixed)

    def point_mix(self, q: Tensor, cm_out: Tensor) -> Tensor:
        """PCM: channel-mixed [..., P, D] -> [..., D, P_out] (grouped)."""
        q, cm_out = astensor(q), astensor(cm_out)
        _, mp = self._mixing_matrices(q)
        grouped = self._to_groups(cm_out)  # [..., G, P, Dg]
        prod = ad.matmul(ad.swap_last_two(grouped), mp)  # [..., G, Dg, P_out]
        mixed = ad.relu(self._norm_patterns(prod))
        batch = cm_out.dims[:-2]
        return ad.reshape(mixed, batch + (self.dim, self.p_out))

    def _to_groups(self, f: Tensor) -> Tensor:
        *batch, p, d = f.dims
        dg = self.dim // self.groups
        x = ad.reshape(f, (*batch, p, self.groups, dg))
        order = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
        return ad.transpose(x, order)  # [..., G, P, Dg]

    def _from_groups(self, x: Tensor) -> Tensor:
        *batch, g, p, dg = x.dims
        order = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
        return ad.reshape(ad.transpose(x, order), (*batch, p, g * dg))

    def _check(self, q: Tensor, f: Tensor) -> None:
        if q.dims[-1] != self.dim or f.dims[-1] != self.dim:
            raise ShapeError(f"expected channel dim {self.dim}")
        if f.dims[-2] != self.p_in:
            raise ShapeError(f"expected {self.p_in} points, got {f.dims[-2]}")
        if q.dims[:-1] != f.dims[:-2]:
            raise ShapeError("query and feature batch dims differ")

    def _mix_ops(self, q: Tensor, f: Tensor, *params) -> Tensor:
        if self.adaptive:
            (cg_w, cg_b, pg_w, pg_b, ln_cg, ln_cb, ln_pg, ln_pb, out_w, out_b) = params
        else:
            (mc_s, mp_s, ln_cg, ln_cb, ln_pg, ln_pb, out_w, out_b) = params
        batch = q.dims[:-1]
        dg = self.dim // self.groups
        if self.adaptive:
            mc = ad.reshape(ad.add(ad.matmul(q, cg_w), cg_b), batch + (self.groups, dg, dg))
            mp = ad.reshape(ad.add(ad.matmul(q, pg_w), pg_b), batch + (self.groups, self.p_in, self.p_out))
        else:
            mc = ad.broadcast_to(mc_s, batch + (self.groups, dg, dg))
            mp = ad.broadcast_to(mp_s, batch + (self.groups, self.p_in, self.p_out))
        grouped = self._to_groups(f)
        gain_c = ad.reshape(ln_cg, (self.groups, 1, dg))
        bias_c = ad.reshape(ln_cb, (self.groups, 1, dg))
        cm = ad.relu(ad.layer_norm_affine(ad.matmul(grouped, mc), gain_c, bias_c, 1e-5))
        prod = ad.matmul(ad.swap_last_two(cm), mp)
        pcm = ad.relu(ad.layer_norm_affine(prod, ln_pg, ln_pb, 1e-5))
        flat = ad.reshape(pcm, batch + (self.groups * dg * self.p_out,))
        return ad.add(q, ad.add(ad.matmul(flat, out_w), out_b))

    def _mix_np(self, q: np.ndarray, f: np.ndarray, params) -> np.ndarray:
        from .nn import _ln_np

        batch = q.shape[:-1]
        g, dg = self.groups, self.dim // self.groups
        if self.adaptive:
            (cg_w, cg_b, pg_w, pg_b, ln_cg, ln_cb, ln_pg, ln_pb, out_w, out_b) = params
            mc = (q @ cg_w.data + cg_b.data).reshape(batch + (g, dg, dg))
            mp = (q @ pg_w.data + pg_b.data).reshape(batch + (g, self.p_in, self.p_out))
        else:
            (mc_s, mp_s, ln_cg, ln_cb, ln_pg, ln_pb, out_w, out_b) = params
            mc = np.broadcast_to(mc_s.data, batch + (g, dg, dg))
            mp = np.broadcast_to(mp_s.data, batch + (g, self.p_in, self.p_out))
        nb = len(batch)
        order = tuple(range(nb)) + (nb + 1, nb, nb + 2)
        grouped = f.reshape(batch + (self.p_in, g, dg)).transpose(order)
        cm = _ln_np(grouped @ mc, ln_cg.data.reshape(g, 1, dg), ln_cb.data.reshape(g, 1, dg), 1e-5)
        cm = np.maximum(cm, 0.0)
        prod = np.swapaxes(cm, -1, -2) @ mp
        pcm = np.maximum(_ln_np(prod, ln_pg.data, ln_pb.data, 1e-5), 0.0)
        flat = pcm.reshape(batch + (g * dg * self.p_out,))
        return q + (flat @ out_w.data + out_b.data)

    def _param_leaves(self) -> tuple:
        if self.adaptive:
            return (
                self.channel_gen.w, self.channel_gen.b,
                self.point_gen.w, self.point_gen.b,
                self.ln_channel_gain, self.ln_channel_bias,
                self.ln_point_gain, self.ln_point_bias,
                self.out.w, self.out.b,
            )
        return (
            self.static_mc, self.static_mp,
            self.ln_channel_gain, self.ln_channel_bias,
            self.ln_point_gain, self.ln_point_bias,
            self.out.w, self.out.b,
        )

    def __call__(self, q: Tensor, f: Tensor) -> Tensor:
        """Full adaptive mix: q' = q + Linear(Flatten(PCM(CM(f)))).

        Fused forward (numpy value, rebuilt-graph backward)."""
        q, f = astensor(q), astensor(f)
        self._check(q, f)
        params = self._param_leaves()
        value = self._mix_np(q.data, f.data, params)
        return ad.lazy_composite(
            value, (q, f) + params, lambda qq, ff, *pp: self._mix_ops(qq, ff, *pp)
        )


class DecoupledMixer(Module):
    """Parallel spatial and temporal mixing over sampled features F[T, P, D]."""

    def __init__(
        self,
        dim: int,
        groups: int,
        p_in: int,
        p_out: int,
        t_in: int,
        t_out: int,
        rng: Rng,
        adaptive: bool = True,
    ):
        self.spatial = AdaptiveMixer(dim, groups, p_in, p_out, rng, adaptive)
        self.temporal = AdaptiveMixer(dim, groups, t_in, t_out, rng, adaptive)

    def keyframe(self, qs: Tensor, qt: Tensor, features: Tensor) -> tuple[Tensor, Tensor]:
        """Symmetric mixing: qs over time-pooled F, qt over point-pooled F."""
        qs_new = self.spatial(qs, temporal_pool(features))
        qt_new = self.temporal(qt, spatial_pool(features))
        return qs_new, qt_new

    def tubelet(self, qs: Tensor, qt: Tensor, features: Tensor) -> tuple[Tensor, Tensor]:
        """Per-frame spatial mixing (qs[..., T, D] against F[..., T, P, D])
        plus the same temporal branch as keyframe mode."""
        qs_new = self.spatial(qs, features)
        qt_new = self.temporal(qt, spatial_pool(features))
        return qs_new, qt_new
