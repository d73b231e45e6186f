"""Query containers and box geometry.

A positional query is the vector (x, y, z, r): box center in frame pixels,
log2 of the box scale and log2 of its aspect ratio, so width = 2**(z - r)
and height = 2**(z + r) are positive by construction. Whole-frame
initialization is x = W/2, y = H/2, z = log2(W*H)/2, r = log2(H/W)/2, which
decodes exactly to [0, 0, W, H].

Sampling offsets regressed from a spatial query displace the box center in
units of box width/height (the scale axis offset is unscaled):

    x_i = x + dx_i * 2**(z - r),  y_i = y + dy_i * 2**(z + r),  z_i = z + dz_i
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, astensor
from .errors import InputError, ShapeError
from .nn import Linear, Parameter
from .rng import Rng

KEYFRAME = "keyframe"
TUBELET = "tubelet"


@dataclass
class PositionalQuery:
    x: float
    y: float
    z: float
    r: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.r])


def whole_frame_query(frame_w: float, frame_h: float) -> PositionalQuery:
    return PositionalQuery(
        x=frame_w / 2.0,
        y=frame_h / 2.0,
        z=0.5 * math.log2(frame_w * frame_h),
        r=0.5 * math.log2(frame_h / frame_w),
    )


def decode_box(q: PositionalQuery) -> tuple[float, float, float, float]:
    """(x1, y1, x2, y2) in frame pixels."""
    if not all(np.isfinite(v) for v in (q.x, q.y, q.z, q.r)):
        raise InputError("positional query has non-finite fields")
    w = 2.0 ** (q.z - q.r)
    h = 2.0 ** (q.z + q.r)
    return (q.x - w / 2.0, q.y - h / 2.0, q.x + w / 2.0, q.y + h / 2.0)


def encode_box(box) -> PositionalQuery:
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    if w <= 0 or h <= 0:
        raise InputError(f"cannot encode box with non-positive area: {box}")
    return PositionalQuery(
        x=(x1 + x2) / 2.0,
        y=(y1 + y2) / 2.0,
        z=0.5 * math.log2(w * h),
        r=0.5 * math.log2(h / w),
    )


def _decode_boxes_ops(qp: Tensor) -> Tensor:
    x = qp[..., 0]
    y = qp[..., 1]
    z = qp[..., 2]
    r = qp[..., 3]
    half_w = ad.mul(ad.exp2(ad.sub(z, r)), 0.5)
    half_h = ad.mul(ad.exp2(ad.add(z, r)), 0.5)
    return ad.stack(
        [
            ad.sub(x, half_w),
            ad.sub(y, half_h),
            ad.add(x, half_w),
            ad.add(y, half_h),
        ],
        axis=-1,
    )


def decode_boxes_np(qp: np.ndarray) -> np.ndarray:
    x, y, z, r = qp[..., 0], qp[..., 1], qp[..., 2], qp[..., 3]
    half_w = 0.5 * np.exp2(z - r)
    half_h = 0.5 * np.exp2(z + r)
    return np.stack([x - half_w, y - half_h, x + half_w, y + half_h], axis=-1)


def decode_boxes(qp) -> Tensor:
    """Vectorized decode: qp[..., 4] (x, y, z, r) -> boxes[..., 4] xyxy."""
    qp = astensor(qp)
    return ad.lazy_composite(decode_boxes_np(qp.data), (qp,), _decode_boxes_ops)


@dataclass
class QuerySet:
    """N action queries: spatial content, positional boxes, temporal content.

    qs[N, L, D], qp[N, L, 4], qt[N, D]. L = 1 for keyframe detection, L = T
    for tubelet detection (per-frame boxes).
    """

    qs: Tensor
    qp: Tensor
    qt: Tensor
    mode: str

    def __post_init__(self):
        if self.mode not in (KEYFRAME, TUBELET):
            raise InputError(f"unknown query mode {self.mode!r}")
        if self.qs.dims[:2] != self.qp.dims[:2]:
            raise ShapeError("qs and qp disagree on (N, L)")
        if self.mode == KEYFRAME and self.l != 1:
            raise ShapeError("keyframe mode requires L=1")

    @property
    def n(self) -> int:
        return self.qs.dims[0]

    @property
    def l(self) -> int:
        return self.qs.dims[1]

    @property
    def d(self) -> int:
        return self.qs.dims[2]

    def positional(self, i: int, frame: int = 0) -> PositionalQuery:
        v = self.qp.data[i, frame]
        return PositionalQuery(*map(float, v))


def init_queries(
    n: int,
    mode: str,
    frame_wh: tuple[float, float],
    d: int,
    rng: Rng,
    t: int = 1,
) -> QuerySet:
    """Whole-frame positional queries; unit-normal content queries.

    In tubelet mode the L = t per-frame spatial queries and boxes share one
    initialization per instance.
    """
    if n < 1:
        raise InputError("need at least one query")
    frame_w, frame_h = frame_wh
    l = 1 if mode == KEYFRAME else t
    base = whole_frame_query(frame_w, frame_h).as_array()
    qp = np.tile(base, (n, l, 1))
    qs_one = rng.fill_normal((n, 1, d))
    qs = np.repeat(qs_one, l, axis=1)
    qt = rng.fill_normal((n, d))
    return QuerySet(qs=Tensor(qs), qp=Tensor(qp), qt=Tensor(qt), mode=mode)


@dataclass
class SamplingPointSet:
    """Per-query sampling state: coords[T_in, G, P_in, 3] and features."""

    coords: Tensor
    groups: int
    features: Tensor | None = None

    @property
    def t_in(self) -> int:
        return self.coords.dims[0]

    @property
    def p_in(self) -> int:
        return self.coords.dims[2]


def make_offset_head(d: int, groups: int, p_in: int, rng: Rng) -> Linear:
    """Offset regressor D -> G*P_in*3, one block per group.

    Weights start at zero; the (dx, dy) biases tile [-0.5, 0.5] uniformly and
    dz starts at zero, so the first iteration samples across the whole
    initial (whole-frame) box.
    """
    bias = np.zeros((groups, p_in, 3))
    bias[..., 0] = rng.fill_uniform((groups, p_in), -0.5, 0.5)
    bias[..., 1] = rng.fill_uniform((groups, p_in), -0.5, 0.5)
    return Linear(d, groups * p_in * 3, rng, zero_init=True, bias_values=bias.reshape(-1))


def _points_ops(offsets: Tensor, qp: Tensor) -> Tensor:
    x = ad.reshape(qp[..., 0], qp.dims[:-1] + (1, 1))
    y = ad.reshape(qp[..., 1], qp.dims[:-1] + (1, 1))
    z = ad.reshape(qp[..., 2], qp.dims[:-1] + (1, 1))
    r = ad.reshape(qp[..., 3], qp.dims[:-1] + (1, 1))
    box_w = ad.exp2(ad.sub(z, r))
    box_h = ad.exp2(ad.add(z, r))
    xs = ad.add(x, ad.mul(offsets[..., 0], box_w))
    ys = ad.add(y, ad.mul(offsets[..., 1], box_h))
    zs = ad.add(ad.broadcast_to(z, offsets.dims[:-1]), offsets[..., 2])
    return ad.stack([xs, ys, zs], axis=-1)


def _points_np(offsets: np.ndarray, qp: np.ndarray) -> np.ndarray:
    lead = qp.shape[:-1] + (1, 1)
    x, y = qp[..., 0].reshape(lead), qp[..., 1].reshape(lead)
    z, r = qp[..., 2].reshape(lead), qp[..., 3].reshape(lead)
    xs = x + offsets[..., 0] * np.exp2(z - r)
    ys = y + offsets[..., 1] * np.exp2(z + r)
    zs = z + offsets[..., 2]
    return np.stack([xs, ys, np.broadcast_to(zs, xs.shape)], axis=-1)


def points_from_offsets(offsets: Tensor, qp: Tensor) -> Tensor:
    """Apply the box-scaled displacement rule.

    offsets[..., G, P, 3] plus qp[..., 4] -> absolute coords[..., G, P, 3]
    holding (x_i, y_i, z_i).
    """
    offsets, qp = astensor(offsets), astensor(qp)
    return ad.lazy_composite(
        _points_np(offsets.data, qp.data), (offsets, qp), _points_ops
    )


def generate_points(
    qs: Tensor,
    qp,
    offset_head: Linear,
    p_in: int,
    groups: int,
    mode: str,
    t_in: int,
) -> SamplingPointSet:
    """Sampling coordinates for one query.

    Keyframe mode regresses one point set from (qs[D], qp) and copies it to
    every input frame. Tubelet mode takes per-frame queries qs[T, D] and
    qp[T, 4] and regresses each frame's points independently.
    """
    qs = astensor(qs)
    if mode == KEYFRAME:
        if qs.ndim != 1:
            raise ShapeError("keyframe point generation expects qs[D]")
        qp_arr = qp.as_array() if isinstance(qp, PositionalQuery) else np.asarray(qp, float)
        offsets = ad.reshape(offset_head(qs), (groups, p_in, 3))
        pts = points_from_offsets(offsets, Tensor(qp_arr))  # [G, P, 3]
        expanded = ad.reshape(pts, (1, groups, p_in, 3))
        coords = ad.broadcast_to(expanded, (t_in, groups, p_in, 3))
    else:
        if qs.ndim != 2 or qs.dims[0] != t_in:
            raise ShapeError("tubelet point generation expects qs[T, D]")
        qp_t = astensor(qp)
        if qp_t.dims != (t_in, 4):
            raise ShapeError("tubelet point generation expects qp[T, 4]")
        offsets = ad.reshape(offset_head(qs), (t_in, groups, p_in, 3))
        coords = points_from_offsets(offsets, qp_t)
    return SamplingPointSet(coords=coords, groups=groups)


def _apply_deltas_ops(qp: Tensor, deltas: Tensor) -> Tensor:
    x, y, z, r = (qp[..., i] for i in range(4))
    dx, dy, dz, dr = (deltas[..., i] for i in range(4))
    box_w = ad.exp2(ad.sub(z, r))
    box_h = ad.exp2(ad.add(z, r))
    return ad.stack(
        [
            ad.add(x, ad.mul(dx, box_w)),
            ad.add(y, ad.mul(dy, box_h)),
            ad.add(z, dz),
            ad.add(r, dr),
        ],
        axis=-1,
    )


def _apply_deltas_np(qp: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    x, y, z, r = qp[..., 0], qp[..., 1], qp[..., 2], qp[..., 3]
    dx, dy, dz, dr = deltas[..., 0], deltas[..., 1], deltas[..., 2], deltas[..., 3]
    return np.stack(
        [x + dx * np.exp2(z - r), y + dy * np.exp2(z + r), z + dz, r + dr], axis=-1
    )


def update_positional(qp, qs_new: Tensor, box_ffn) -> Tensor:
    """Refine boxes from updated spatial queries.

    deltas = FFN(qs'); the (dx, dy) shifts scale by current box width/height
    (mirroring the sampling rule), dz and dr add directly.
    """
    qp = astensor(qp)
    deltas = box_ffn(qs_new)
    if deltas.dims != qp.dims:
        raise ShapeError(f"box head output {deltas.dims} != qp dims {qp.dims}")
    return ad.lazy_composite(
        _apply_deltas_np(qp.data, deltas.data), (qp, deltas), _apply_deltas_ops
    )


def fixed_grid_offsets(grid_m: int, groups: int) -> np.ndarray:
    """RoIAlign-style m*m cell-center offsets inside the box, dz = 0.

    Shared across groups; shape [G, m*m, 3] ready to feed the displacement
    rule in place of regressed offsets.
    """
    centers = (np.arange(grid_m) + 0.5) / grid_m - 0.5
    gx, gy = np.meshgrid(centers, centers, indexing="xy")
    flat = np.stack([gx.reshape(-1), gy.reshape(-1), np.zeros(grid_m * grid_m)], axis=-1)
    return np.tile(flat[None], (groups, 1, 1))
