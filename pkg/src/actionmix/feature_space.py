"""The aligned multi-scale feature volume and its continuous-coordinate reads.

Stage maps (one per pyramid level z, spatial rate 2**z) are projected to a
common channel width, upsampled to the finest used grid by nearest neighbor,
and stacked along a scale axis. The result is indexed by (x, y, t, scale):
reads map frame pixels onto the base grid with pixel-center alignment
(gx = x/stride - 0.5), clamp to the border on all three continuous axes, and
interpolate trilinearly over (x, y, scale). Time stays discrete; sampling is
always per frame.

Reads are linear in the stored features and differentiable in both the
features and the coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, astensor, make_op
from .errors import ConfigError, InputError, ShapeError
from .nn import linear_apply


@dataclass
class StageFeatureMap:
    """One pyramid stage: data[C_z, T_in, H_z, W_z] at spatial rate 2**z."""

    z: int
    data: Tensor

    @property
    def channels(self) -> int:
        return self.data.dims[0]

    @property
    def t_in(self) -> int:
        return self.data.dims[1]

    @property
    def height(self) -> int:
        return self.data.dims[2]

    @property
    def width(self) -> int:
        return self.data.dims[3]


@dataclass
class FeatureSpace4D:
    """Aligned volume data[D, T_in, S, H_base, W_base] over ``scales``.

    ``scales`` must be contiguous (e.g. (2, 3, 4, 5)); the spatial grid is the
    one of the finest used scale, i.e. stride 2**scales[0] in frame pixels.
    """

    data: Tensor
    scales: tuple[int, ...]
    frame_hw: tuple[int, int]

    def __post_init__(self):
        if list(self.scales) != list(range(self.scales[0], self.scales[-1] + 1)):
            raise ConfigError(f"scales must be contiguous, got {self.scales}")
        if self.data.dims[2] != len(self.scales):
            raise ShapeError("scale axis extent does not match scales")
        self._flat_rows = None

    def _rows(self) -> np.ndarray:
        # Cached [T*S*H*W, D] view of the volume for fast point gathers.
        # Tensors are immutable after construction, so this never goes stale.
        if self._flat_rows is None:
            d = self.data.data
            self._flat_rows = np.ascontiguousarray(d.reshape(d.shape[0], -1).T)
        return self._flat_rows

    @property
    def channels(self) -> int:
        return self.data.dims[0]

    @property
    def t_in(self) -> int:
        return self.data.dims[1]

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.data.dims[3], self.data.dims[4]

    @property
    def stride(self) -> int:
        return 2 ** self.scales[0]


def _nearest_indices(n_out: int, factor: int) -> np.ndarray:
    # Exact integer upsampling: output i comes from source i // factor, so
    # half-integer ties resolve toward the lower index.
    return np.arange(n_out) // factor


def _project_stage(stage: StageFeatureMap, weight, bias) -> Tensor:
    """1x1x1 convolution: per-position linear map over channels.

    Returns [T, H, W, D] (channels last, ready for spatial indexing).
    """
    c, t, h, w = stage.data.dims
    moved = ad.transpose(stage.data, (1, 2, 3, 0))  # [T, H, W, C]
    return linear_apply(moved, weight, bias)


def build_from_hierarchy(
    stages: list[StageFeatureMap],
    lateral: list[tuple[Tensor, Tensor]],
    frame_hw: tuple[int, int],
) -> FeatureSpace4D:
    """Project each stage to D channels, align spatially, stack along scale."""
    if len(stages) != len(lateral):
        raise ShapeError("one lateral projection per stage required")
    paired = sorted(zip(stages, lateral), key=lambda p: p[0].z)
    stages = [p[0] for p in paired]
    lateral = [p[1] for p in paired]
    scales = tuple(s.z for s in stages)
    base = stages[0]
    t_in = base.t_in
    h0, w0 = base.height, base.width
    slices = []
    for stage, (w_mat, b_vec) in zip(stages, lateral):
        factor = 2 ** (stage.z - base.z)
        if stage.height * factor != h0 or stage.width * factor != w0:
            raise ShapeError(
                f"stage z={stage.z} extent {stage.height}x{stage.width} does not "
                f"fit a 2^z pyramid under {h0}x{w0}"
            )
        if stage.t_in != t_in:
            raise ShapeError("stages disagree on temporal length")
        proj = _project_stage(stage, w_mat, b_vec)  # [T, Hz, Wz, D]
        if factor > 1:
            rows = _nearest_indices(h0, factor)
            cols = _nearest_indices(w0, factor)
            proj = proj[:, rows][:, :, cols]
        slices.append(proj)
    stacked = ad.stack(slices, axis=0)  # [S, T, H, W, D]
    return FeatureSpace4D(
        data=ad.transpose(stacked, (4, 1, 0, 2, 3)),
        scales=scales,
        frame_hw=frame_hw,
    )


def _block_deconv(x: Tensor, weight, bias, factor: int) -> Tensor:
    """Transposed conv with kernel = stride = factor (independent blocks)."""
    t, h, w, c = x.dims
    d_out = astensor(bias).dims[0]
    y = linear_apply(x, weight, bias)  # [T, H, W, factor*factor*D]
    y = ad.reshape(y, (t, h, w, factor, factor, d_out))
    y = ad.transpose(y, (0, 1, 3, 2, 4, 5))  # [T, H, f, W, f, D]
    return ad.reshape(y, (t, h * factor, w * factor, d_out))


def _block_conv(x: Tensor, weight, bias, factor: int) -> Tensor:
    """Strided conv with kernel = stride = factor (non-overlapping patches)."""
    t, h, w, c = x.dims
    if h % factor or w % factor:
        raise ShapeError(f"extent {h}x{w} not divisible by stride {factor}")
    y = ad.reshape(x, (t, h // factor, factor, w // factor, factor, c))
    y = ad.transpose(y, (0, 1, 3, 2, 4, 5))
    y = ad.reshape(y, (t, h // factor, w // factor, factor * factor * c))
    return linear_apply(y, weight, bias)


def build_from_plain(
    last_map: Tensor,
    heads: list[tuple[Tensor, Tensor]],
    frame_hw: tuple[int, int],
) -> FeatureSpace4D:
    """Build the volume from a single rate-16 map (plain transformer path).

    Four heads with spatial strides (1/4, 1/2, 1, 2) produce maps of rates
    (4, 8, 16, 32); fractional strides are transposed convolutions. Kernel
    size equals stride, so each head is an exact block-linear map.
    """
    if len(heads) != 4:
        raise ShapeError("plain path needs exactly four heads")
    last_map = astensor(last_map)
    c, t, h, w = last_map.dims
    x = ad.transpose(last_map, (1, 2, 3, 0))  # [T, H, W, C]
    up4 = _block_deconv(x, heads[0][0], heads[0][1], 4)
    up2 = _block_deconv(x, heads[1][0], heads[1][1], 2)
    same = linear_apply(x, heads[2][0], heads[2][1])
    down2 = _block_conv(x, heads[3][0], heads[3][1], 2)
    maps = [up4, up2, same, down2]
    h0, w0 = up4.dims[1], up4.dims[2]
    slices = []
    for z_rel, m in enumerate(maps):
        factor = 2**z_rel
        if m.dims[1] * factor != h0 or m.dims[2] * factor != w0:
            raise ShapeError("plain-path head produced a non-pyramid extent")
        if factor > 1:
            rows = _nearest_indices(h0, factor)
            cols = _nearest_indices(w0, factor)
            m = m[:, rows][:, :, cols]
        slices.append(m)
    stacked = ad.stack(slices, axis=0)
    return FeatureSpace4D(
        data=ad.transpose(stacked, (4, 1, 0, 2, 3)),
        scales=(2, 3, 4, 5),
        frame_hw=frame_hw,
    )


def _axis_pieces(raw: np.ndarray, extent: int):
    """Clamped floor/weight decomposition of one continuous axis."""
    clamped = np.clip(raw, 0.0, extent - 1.0)
    lo = np.minimum(np.floor(clamped).astype(np.int64), extent - 1)
    hi = np.minimum(lo + 1, extent - 1)
    frac = clamped - lo
    inside = (raw >= 0.0) & (raw <= extent - 1.0)
    return lo, hi, frac, inside


def sample_points(space: FeatureSpace4D, t_idx: np.ndarray, x, y, z) -> Tensor:
    """Trilinear reads at frame-pixel coordinates; returns [..., D].

    ``t_idx`` is an integer array matching the coordinate dims; x/y are frame
    pixels, z is the continuous scale index. All three continuous axes clamp
    to the border (coordinate gradients are zero past it). One fused
    primitive, differentiable in the coordinates and in ``space.data``.
    """
    x, y, z = astensor(x), astensor(y), astensor(z)
    t_idx = np.asarray(t_idx, dtype=np.int64)
    if t_idx.shape != x.dims or x.dims != y.dims or y.dims != z.dims:
        raise ShapeError("coordinate arrays must share one shape")
    for coord in (x, y, z):
        if not np.all(np.isfinite(coord.data)):
            raise InputError("non-finite sampling coordinate")
    if t_idx.size and (t_idx.min() < 0 or t_idx.max() >= space.t_in):
        raise InputError(f"frame index out of range [0, {space.t_in})")
    h, w = space.grid_hw
    s = space.data.dims[2]
    inv = 1.0 / space.stride
    data = space.data
    rows = space._rows()

    gx = x.data * inv - 0.5
    gy = y.data * inv - 0.5
    gz = z.data - float(space.scales[0])
    x0, x1, fx, in_x = _axis_pieces(gx, w)
    y0, y1, fy, in_y = _axis_pieces(gy, h)
    z0, z1, fz, in_z = _axis_pieces(gz, s)

    # Stack the 8 corners along a leading axis: one gather, one weighted sum.
    plane0 = (t_idx * s + z0) * h
    plane1 = (t_idx * s + z1) * h
    lin = np.stack(
        [
            (plane0 + y0) * w + x0,
            (plane0 + y0) * w + x1,
            (plane0 + y1) * w + x0,
            (plane0 + y1) * w + x1,
            (plane1 + y0) * w + x0,
            (plane1 + y0) * w + x1,
            (plane1 + y1) * w + x0,
            (plane1 + y1) * w + x1,
        ]
    )
    wxs = np.stack([1.0 - fx, fx, 1.0 - fx, fx] * 2)
    wys = np.stack([1.0 - fy, 1.0 - fy, fy, fy] * 2)
    wzs = np.stack([1.0 - fz] * 4 + [fz] * 4)
    sxs = np.array([-1.0, 1.0] * 4).reshape((8,) + (1,) * fx.ndim)
    sys_ = np.array([-1.0, -1.0, 1.0, 1.0] * 2).reshape(sxs.shape)
    szs = np.array([-1.0] * 4 + [1.0] * 4).reshape(sxs.shape)
    weights = wzs * wys * wxs
    vals = rows[lin]  # [8, ..., D]
    out = (vals * weights[..., None]).sum(axis=0)

    def backward(g):
        dots = (g * vals).sum(axis=-1)  # [8, ...]
        dgx = (sxs * (wzs * wys) * dots).sum(axis=0)
        dgy = (sys_ * (wzs * wxs) * dots).sum(axis=0)
        dgz = (szs * (wys * wxs) * dots).sum(axis=0)
        g_data = None
        if data.requires_grad:
            g_rows = np.zeros_like(rows)
            contrib = g * weights[..., None]  # [8, ..., D]
            np.add.at(g_rows, lin.reshape(-1), contrib.reshape(-1, rows.shape[1]))
            g_data = np.ascontiguousarray(g_rows.T).reshape(data.data.shape)
        return (
            g_data,
            dgx * in_x * inv,
            dgy * in_y * inv,
            dgz * in_z,
        )

    return make_op(out, (data, x, y, z), backward)


def read_point(
    space: FeatureSpace4D,
    t: int,
    x: float,
    y: float,
    z: float,
    channels: tuple[int, int] | None = None,
) -> Tensor:
    """Read one point; optionally restrict to a channel slice [c0, c1)."""
    for v in (x, y, z):
        if not np.isfinite(v):
            raise InputError("non-finite sampling coordinate")
    if not 0 <= t < space.t_in:
        raise InputError(f"frame index {t} out of range [0, {space.t_in})")
    coords = np.full((1,), 0.0)
    vals = sample_points(
        space,
        np.full((1,), t, dtype=np.int64),
        ad.Tensor(coords + x),
        ad.Tensor(coords + y),
        ad.Tensor(coords + z),
    )
    vals = ad.reshape(vals, (space.channels,))
    if channels is not None:
        c0, c1 = channels
        vals = vals[c0:c1]
    return vals
