"""The query decoder: stacked adaptive sampling/mixing stages plus heads.

One stage runs, in order: self-attention over the instance axis (tubelet
mode attends per frame across instances, then per instance across frames),
adaptive point sampling from the 4D feature volume, decoupled adaptive
mixing, and a positional-query refinement. Heads decode every stage's
queries so training can supervise each intermediate output; inference reads
the final stage only.

Keyframe mode regresses one point set per instance and reuses it on every
input frame; tubelet mode regresses points per frame from that frame's own
queries. Group-wise sampling gives each of the G channel groups its own
points; group g contributes the channel slice [g*D/G, (g+1)*D/G) of the
sampled feature tensor F[T, P, D].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .feature_space import FeatureSpace4D, sample_points
from .mixing import DecoupledMixer
from .nn import FFN, Linear, Module, MultiHeadAttention, Parameter, SelfAttentionBlock
from .queries import (
    KEYFRAME,
    TUBELET,
    QuerySet,
    decode_boxes,
    fixed_grid_offsets,
    init_queries,
    make_offset_head,
    points_from_offsets,
    update_positional,
)
from .rng import Rng

ADAPTIVE = "adaptive"
FIXED_GRID = "grid"


@dataclass
class ASAMConfig:
    """Decoder architecture knobs. Defaults follow the reference recipe."""

    mode: str = KEYFRAME
    n: int = 100
    d: int = 256
    p_in: int = 32
    groups: int = 4
    heads: int = 8
    m: int | None = None
    c: int = 3
    t_in: int = 4
    frame_wh: tuple[int, int] = (64, 64)
    p_out_factor: int = 4
    t_out_factor: int = 4
    classifier: str = "short"
    bank_top_k: int = 5
    bank_window: int = 60
    cross_attn_layers: int = 3
    sampling: str = ADAPTIVE
    grid_m: int = 7
    mixing: str = "adaptive"
    scales: tuple[int, ...] = (2, 3, 4, 5)

    def __post_init__(self):
        if self.mode not in (KEYFRAME, TUBELET):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.m is None:
            self.m = 6 if self.mode == KEYFRAME else 3
        if self.sampling == FIXED_GRID:
            self.p_in = self.grid_m * self.grid_m
        elif self.sampling != ADAPTIVE:
            raise ConfigError(f"unknown sampling strategy {self.sampling!r}")
        if self.d % self.groups:
            raise ConfigError("query dim must divide into groups")
        if self.d % self.heads:
            raise ConfigError("query dim must divide into attention heads")
        if self.classifier not in ("short", "long"):
            raise ConfigError(f"unknown classifier kind {self.classifier!r}")
        if self.classifier == "long" and self.mode != KEYFRAME:
            raise ConfigError("the long-term classifier is keyframe-only")
        if self.mixing not in ("adaptive", "fixed"):
            raise ConfigError(f"unknown mixing strategy {self.mixing!r}")
        if self.m < 1:
            raise ConfigError("need at least one decoder stage")

    @property
    def p_out(self) -> int:
        return self.p_out_factor * self.p_in

    @property
    def t_out(self) -> int:
        return self.t_out_factor * self.t_in

    @property
    def l(self) -> int:
        return 1 if self.mode == KEYFRAME else self.t_in


@dataclass
class DetectionOutput:
    """Decoded predictions of one stage.

    Keyframe: boxes[N, 4], human[N, 2] (human prob, background prob, rows
    softmax-normalized), action[N, C] (independent sigmoids). Tubelet:
    boxes[N, T, 4], class_probs[N, C+1] softmax-normalized with the last
    column as background.
    """

    mode: str
    boxes: Tensor
    human: Tensor | None = None
    action: Tensor | None = None
    class_probs: Tensor | None = None
    points: Tensor | None = None


@dataclass
class DecoderResult:
    outputs: list[DetectionOutput]
    queries: QuerySet

    @property
    def final(self) -> DetectionOutput:
        return self.outputs[-1]


class ASAMStage(Module):
    def __init__(self, cfg: ASAMConfig, rng: Rng):
        self.cfg = cfg
        d, heads = cfg.d, cfg.heads
        if cfg.mode == KEYFRAME:
            self.attn_spatial = SelfAttentionBlock(d, heads, rng)
        else:
            self.attn_frame = SelfAttentionBlock(d, heads, rng)
            self.attn_tube = SelfAttentionBlock(d, heads, rng)
        self.attn_temporal = SelfAttentionBlock(d, heads, rng)
        if cfg.sampling == ADAPTIVE:
            self.offset_head = make_offset_head(d, cfg.groups, cfg.p_in, rng)
        self.mixer = DecoupledMixer(
            d, cfg.groups, cfg.p_in, cfg.p_out, cfg.t_in, cfg.t_out, rng,
            adaptive=cfg.mixing == "adaptive",
        )
        self.box_ffn = FFN(d, d, 4, rng, zero_last=True)
        self.human_ffn = FFN(d, d, 2, rng)
        if cfg.mode == KEYFRAME:
            self.action_ffn = FFN(2 * d, d, cfg.c, rng)
        else:
            self.class_ffn = FFN(2 * d, d, cfg.c + 1, rng)

    # -- attention ---------------------------------------------------------

    def _attend(self, qs: Tensor, qt: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        if cfg.mode == KEYFRAME:
            flat = ad.reshape(qs, (cfg.n, cfg.d))
            qs = ad.reshape(self.attn_spatial(flat), (cfg.n, 1, cfg.d))
        else:
            per_frame = ad.transpose(qs, (1, 0, 2))  # [T, N, D]
            per_frame = self.attn_frame(per_frame)
            qs = ad.transpose(per_frame, (1, 0, 2))  # [N, T, D]
            qs = self.attn_tube(qs)
        qt = self.attn_temporal(qt)
        return qs, qt

    # -- sampling -----------------------------------------------------------

    def _offsets(self, qs_flat: Tensor, lead: tuple[int, ...]) -> Tensor:
        cfg = self.cfg
        if cfg.sampling == ADAPTIVE:
            raw = self.offset_head(qs_flat)
            return ad.reshape(raw, lead + (cfg.groups, cfg.p_in, 3))
        grid = Tensor(fixed_grid_offsets(cfg.grid_m, cfg.groups))
        return ad.broadcast_to(
            ad.reshape(grid, (1,) * len(lead) + grid.dims),
            lead + (cfg.groups, cfg.p_in, 3),
        )

    def _sample(self, qs: Tensor, qp: Tensor, space: FeatureSpace4D) -> tuple[Tensor, Tensor]:
        """Returns (features[N, T, P, D], points[N, T, G, P, 3])."""
        cfg = self.cfg
        n, t = cfg.n, cfg.t_in
        if cfg.mode == KEYFRAME:
            qs_flat = ad.reshape(qs, (n, cfg.d))
            offsets = self._offsets(qs_flat, (n,))
            pts = points_from_offsets(offsets, ad.reshape(qp, (n, 4)))  # [N, G, P, 3]
            pts = ad.broadcast_to(
                ad.reshape(pts, (n, 1, cfg.groups, cfg.p_in, 3)),
                (n, t, cfg.groups, cfg.p_in, 3),
            )
        else:
            offsets = self._offsets(qs, (n, t))
            pts = points_from_offsets(offsets, qp)  # [N, T, G, P, 3]
        t_idx = np.broadcast_to(
            np.arange(t, dtype=np.int64)[None, :, None, None],
            (n, t, cfg.groups, cfg.p_in),
        )
        sampled = sample_points(space, t_idx, pts[..., 0], pts[..., 1], pts[..., 2])
        dg = cfg.d // cfg.groups
        parts = [
            sampled[:, :, g, :, g * dg : (g + 1) * dg] for g in range(cfg.groups)
        ]
        features = ad.concat(parts, axis=-1)  # [N, T, P, D]
        return features, pts

    # -- heads ---------------------------------------------------------------

    def _heads(self, qs: Tensor, qp: Tensor, qt: Tensor, points: Tensor,
               action_override: Tensor | None = None) -> DetectionOutput:
        cfg = self.cfg
        if cfg.mode == KEYFRAME:
            qs_flat = ad.reshape(qs, (cfg.n, cfg.d))
            boxes = decode_boxes(ad.reshape(qp, (cfg.n, 4)))
            human = ad.softmax(self.human_ffn(qs_flat), axis=-1)
            if action_override is not None:
                action = action_override
            else:
                logits = self.action_ffn(ad.concat([qs_flat, qt], axis=-1))
                action = ad.sigmoid(logits)
            return DetectionOutput(
                mode=cfg.mode, boxes=boxes, human=human, action=action, points=points
            )
        boxes = decode_boxes(qp)  # [N, T, 4]
        pooled = ad.tmean(qs, axis=1)  # [N, D]
        logits = self.class_ffn(ad.concat([pooled, qt], axis=-1))
        class_probs = ad.softmax(logits, axis=-1)
        return DetectionOutput(
            mode=cfg.mode, boxes=boxes, class_probs=class_probs, points=points
        )

    # -- full stage -------------------------------------------------------------

    def __call__(self, queries: QuerySet, space: FeatureSpace4D) -> tuple[QuerySet, Tensor]:
        cfg = self.cfg
        if queries.mode != cfg.mode:
            raise ShapeError("query mode does not match stage configuration")
        qs, qt = self._attend(queries.qs, queries.qt)
        features, pts = self._sample(qs, queries.qp, space)
        if cfg.mode == KEYFRAME:
            qs_flat = ad.reshape(qs, (cfg.n, cfg.d))
            qs_new, qt_new = self.mixer.keyframe(qs_flat, qt, features)
            qp_new = update_positional(
                ad.reshape(queries.qp, (cfg.n, 4)), qs_new, self.box_ffn
            )
            updated = QuerySet(
                qs=ad.reshape(qs_new, (cfg.n, 1, cfg.d)),
                qp=ad.reshape(qp_new, (cfg.n, 1, 4)),
                qt=qt_new,
                mode=cfg.mode,
            )
        else:
            qs_new, qt_new = self.mixer.tubelet(qs, qt, features)
            qp_new = update_positional(queries.qp, qs_new, self.box_ffn)
            updated = QuerySet(qs=qs_new, qp=qp_new, qt=qt_new, mode=cfg.mode)
        return updated, pts


class QueryBank:
    """Per-clip memory of the top-k decoder queries of a whole video."""

    def __init__(self, entries: list[np.ndarray], top_k: int, window: int):
        for e in entries:
            if e.shape != (top_k, entries[0].shape[1]):
                raise ShapeError("bank entries must share the shape [k, d]")
        self.entries = [np.asarray(e, dtype=np.float64) for e in entries]
        self.top_k = top_k
        self.window = window

    @property
    def dim(self) -> int:
        return self.entries[0].shape[1]

    @property
    def clips(self) -> int:
        return len(self.entries)

    def window_rows(self, t: int) -> np.ndarray:
        """Stacked window [w*k, d] centered at clip t; out-of-range clips
        contribute zero rows."""
        rows = []
        start = t - self.window // 2
        for idx in range(start, start + self.window):
            if 0 <= idx < len(self.entries):
                rows.append(self.entries[idx])
            else:
                rows.append(np.zeros((self.top_k, self.dim)))
        return np.concatenate(rows, axis=0)


class LongTermClassifier(Module):
    """Cross-attention readout against a query-bank window.

    The stacked attention layers carry no residual path, so an all-zero bank
    collapses the readout to a constant and the logits reduce to
    FFN(S || const).
    """

    def __init__(self, dim2: int, heads: int, layers: int, d_model: int, classes: int, rng: Rng):
        self.layers = [MultiHeadAttention(dim2, heads, rng) for _ in range(layers)]
        self.ffn = FFN(2 * dim2, d_model, classes, rng)

    def __call__(self, s: Tensor, window: np.ndarray) -> Tensor:
        memory = Tensor(np.asarray(window, dtype=np.float64))
        current = s
        for attn in self.layers:
            current = attn(current, memory, memory)
        return self.ffn(ad.concat([s, current], axis=-1))


class ActionDecoder(Module):
    """M stacked stages over learnable queries, one head set per stage."""

    def __init__(self, cfg: ASAMConfig, rng: Rng):
        self.cfg = cfg
        init = init_queries(cfg.n, cfg.mode, cfg.frame_wh, cfg.d, rng, t=cfg.t_in)
        # Tubelet per-frame queries replicate one shared embedding at forward
        # time, so the parameters stay [N, 1, ...] in both modes.
        self.qs0 = Parameter(init.qs.data[:, :1].copy())
        self.qp0 = Parameter(init.qp.data[:, :1].copy())
        self.qt0 = Parameter(init.qt.data.copy())
        self.stages = [ASAMStage(cfg, rng) for _ in range(cfg.m)]
        if cfg.classifier == "long":
            self.long_term = LongTermClassifier(
                2 * cfg.d, cfg.heads, cfg.cross_attn_layers, cfg.d, cfg.c, rng
            )

    def initial_queries(self) -> QuerySet:
        cfg = self.cfg
        l = cfg.l
        qs = ad.broadcast_to(self.qs0, (cfg.n, l, cfg.d))
        qp = ad.broadcast_to(self.qp0, (cfg.n, l, 4))
        return QuerySet(qs=qs, qp=qp, qt=self.qt0, mode=cfg.mode)

    def forward_stages(
        self,
        space: FeatureSpace4D,
        queries: QuerySet,
        start: int = 0,
        stop: int | None = None,
        bank_window: np.ndarray | None = None,
    ) -> DecoderResult:
        """Run stages [start, stop) from the given queries.

        ``forward`` is the start=0 full pass; partial runs let callers resume
        from cached intermediate queries (the stages are functionally
        independent of everything upstream of their inputs).
        """
        cfg = self.cfg
        if space.t_in != cfg.t_in:
            raise ShapeError(
                f"feature space has T={space.t_in}, decoder expects {cfg.t_in}"
            )
        if cfg.classifier == "long" and bank_window is None:
            raise ConfigError("long-term classifier needs a query-bank window")
        stop = len(self.stages) if stop is None else stop
        current = queries
        outputs: list[DetectionOutput] = []
        for index in range(start, stop):
            stage = self.stages[index]
            current, points = stage(current, space)
            is_last = index == len(self.stages) - 1
            action_override = None
            if is_last and cfg.classifier == "long":
                qs_flat = ad.reshape(current.qs, (cfg.n, cfg.d))
                s_t = ad.concat([qs_flat, current.qt], axis=-1)
                action_override = ad.sigmoid(self.long_term(s_t, bank_window))
            outputs.append(
                stage._heads(current.qs, current.qp, current.qt, points, action_override)
            )
        return DecoderResult(outputs=outputs, queries=current)

    def forward(
        self,
        space: FeatureSpace4D,
        queries: QuerySet | None = None,
        bank_window: np.ndarray | None = None,
    ) -> DecoderResult:
        current = queries if queries is not None else self.initial_queries()
        return self.forward_stages(space, current, 0, None, bank_window)


def build_query_bank(
    decoder: ActionDecoder,
    spaces: list[FeatureSpace4D],
    top_k: int | None = None,
    window: int | None = None,
) -> QueryBank:
    """Run inference per clip and keep the top-k queries by human score.

    Rows are the concatenated spatial and temporal queries of the final
    stage (d = 2D). Ties break toward the lower query index; if fewer than k
    queries exist the entry is zero-padded.
    """
    cfg = decoder.cfg
    if cfg.classifier != "short":
        raise ConfigError("query banks are built with a short-term-classifier model")
    top_k = cfg.bank_top_k if top_k is None else top_k
    window = cfg.bank_window if window is None else window
    entries = []
    for space in spaces:
        with ad.no_grad():
            result = decoder.forward(space)
            qs_flat = ad.reshape(result.queries.qs, (cfg.n, cfg.d))
            rows = ad.concat([qs_flat, result.queries.qt], axis=-1).data
            scores = result.final.human.data[:, 0]
        order = np.argsort(-scores, kind="stable")[:top_k]
        entry = np.zeros((top_k, 2 * cfg.d))
        entry[: len(order)] = rows[order]
        entries.append(entry)
    return QueryBank(entries, top_k, window)
