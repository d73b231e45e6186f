"""Synthetic videos: moving actors rendered directly into stage feature maps.

A scenario is a short ``video'': per-frame actor boxes following simple
trajectories, plus multi-scale stage maps where each actor leaves a
class-specific channel signature shaped like a Gaussian bump at its box
(amplitude on top of background noise). Clips of T frames start at stride 1
so adjacent clips share T-1 frames, which is what tube linking expects.

Two named presets encode the classic failure cases for per-frame linking:

* ``fast-motion``: the actor jumps far enough mid-video that adjacent-frame
  boxes barely overlap (IoU < 0.1).
* ``dropout``: one middle frame where the detector sees nothing (the frame is
  neither painted nor reported in simulated per-frame detections), while the
  ground-truth tube still covers it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .criterion import GroundTruthSet
from .errors import ConfigError
from .feature_space import StageFeatureMap
from .queries import KEYFRAME
from .rng import Rng
from .tubes import ActionTube, FrameDetection, Tubelet

PRESETS = ("fast-motion", "dropout")


@dataclass
class ActorSpec:
    class_id: int
    start_box: tuple[float, float, float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    jumps: dict[int, tuple[float, float]] = field(default_factory=dict)
    dropout_frames: tuple[int, ...] = ()


@dataclass
class ScenarioConfig:
    frame_w: int = 64
    frame_h: int = 64
    t: int = 4
    n_frames: int = 6
    n_classes: int = 3
    actors: list[ActorSpec] = field(default_factory=list)
    scales: tuple[int, ...] = (2, 3, 4, 5)
    base_channels: int = 8
    noise_std: float = 0.1
    signal_amp: float = 3.0

    def channels_at(self, z: int) -> int:
        return self.base_channels * 2 ** (z - self.scales[0])


@dataclass
class Actor:
    class_id: int
    boxes: np.ndarray  # [F, 4]
    dropout_frames: tuple[int, ...]


@dataclass
class Scenario:
    cfg: ScenarioConfig
    actors: list[Actor]
    clip_starts: list[int]
    class_signatures: dict[int, dict[int, np.ndarray]]
    stage_maps: list[list[StageFeatureMap]]  # per clip, per scale

    @property
    def frame_wh(self) -> tuple[int, int]:
        return (self.cfg.frame_w, self.cfg.frame_h)

    def keyframe_of(self, clip_index: int) -> int:
        return self.clip_starts[clip_index] + self.cfg.t // 2

    def gt_keyframe(self, clip_index: int) -> GroundTruthSet:
        frame = self.keyframe_of(clip_index)
        boxes = [a.boxes[frame] for a in self.actors]
        actions = np.zeros((len(self.actors), self.cfg.n_classes))
        for i, a in enumerate(self.actors):
            actions[i, a.class_id] = 1.0
        return GroundTruthSet(
            boxes=np.asarray(boxes).reshape(-1, 4), actions=actions
        )

    def gt_tubelet(self, clip_index: int) -> GroundTruthSet:
        start = self.clip_starts[clip_index]
        boxes = [a.boxes[start : start + self.cfg.t] for a in self.actors]
        labels = np.array([a.class_id for a in self.actors], dtype=np.int64)
        return GroundTruthSet(
            boxes=np.asarray(boxes).reshape(-1, self.cfg.t, 4), labels=labels
        )

    def gt_tubes(self) -> list[ActionTube]:
        return [
            ActionTube(
                start_frame=0,
                boxes=a.boxes.copy(),
                class_id=a.class_id,
                score=1.0,
            )
            for a in self.actors
        ]

    def gt_frame_annotations(self, keyframes_only: bool = True) -> list[tuple[int, int, np.ndarray]]:
        frames = (
            [self.keyframe_of(c) for c in range(len(self.clip_starts))]
            if keyframes_only
            else range(self.cfg.n_frames)
        )
        return [
            (f, a.class_id, a.boxes[f].copy())
            for f in frames
            for a in self.actors
        ]

    # -- simulated perfect detectors (linker fixtures) ----------------------

    def perfect_frame_detections(self) -> list[FrameDetection]:
        """Per-frame GT boxes, minus each actor's dropout frames."""
        out = []
        for a in self.actors:
            for f in range(self.cfg.n_frames):
                if f in a.dropout_frames:
                    continue
                out.append(
                    FrameDetection(frame=f, box=a.boxes[f].copy(), class_id=a.class_id, score=1.0)
                )
        return out

    def perfect_tubelets(self) -> list[Tubelet]:
        """One tubelet per (clip, actor) with the exact GT boxes."""
        out = []
        for start in self.clip_starts:
            for a in self.actors:
                out.append(
                    Tubelet(
                        start_frame=start,
                        boxes=a.boxes[start : start + self.cfg.t].copy(),
                        class_id=a.class_id,
                        score=1.0,
                    )
                )
        return out


def _realize_boxes(spec: ActorSpec, cfg: ScenarioConfig) -> np.ndarray:
    x1, y1, x2, y2 = spec.start_box
    boxes = np.zeros((cfg.n_frames, 4))
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    w, h = x2 - x1, y2 - y1
    for f in range(cfg.n_frames):
        if f in spec.jumps:
            cx, cy = spec.jumps[f]
        boxes[f] = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        cx += spec.velocity[0]
        cy += spec.velocity[1]
    if (
        boxes[:, 0].min() < 0
        or boxes[:, 1].min() < 0
        or boxes[:, 2].max() > cfg.frame_w
        or boxes[:, 3].max() > cfg.frame_h
    ):
        raise ConfigError(f"actor leaves the frame: class {spec.class_id}")
    return boxes


def _paint_clip(
    cfg: ScenarioConfig,
    actors: list[Actor],
    start: int,
    signatures: dict[int, dict[int, np.ndarray]],
    rng: Rng,
) -> list[StageFeatureMap]:
    maps = []
    for z in cfg.scales:
        stride = 2**z
        h_z, w_z = cfg.frame_h // stride, cfg.frame_w // stride
        c_z = cfg.channels_at(z)
        data = rng.fill_normal((c_z, cfg.t, h_z, w_z), 0.0, cfg.noise_std)
        ys = (np.arange(h_z) + 0.5) * stride
        xs = (np.arange(w_z) + 0.5) * stride
        for actor in actors:
            vec = signatures[actor.class_id][z]
            for local_f in range(cfg.t):
                frame = start + local_f
                if frame in actor.dropout_frames:
                    continue
                x1, y1, x2, y2 = actor.boxes[frame]
                cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
                sx = max((x2 - x1) / 4.0, stride / 2.0)
                sy = max((y2 - y1) / 4.0, stride / 2.0)
                bump = np.exp(-0.5 * ((ys - cy) / sy) ** 2)[:, None] * np.exp(
                    -0.5 * ((xs - cx) / sx) ** 2
                )[None, :]
                data[:, local_f] += cfg.signal_amp * vec[:, None, None] * bump
        maps.append(StageFeatureMap(z=z, data=Tensor(data)))
    return maps


def gen_scenario(cfg: ScenarioConfig, seed: int) -> Scenario:
    """Deterministic scenario: same (cfg, seed) gives bit-identical output."""
    if cfg.n_frames < cfg.t:
        raise ConfigError("video must be at least one clip long")
    rng = Rng(seed)
    sig_rng = rng.spawn(1)
    paint_rng = rng.spawn(2)
    actors = [
        Actor(
            class_id=spec.class_id,
            boxes=_realize_boxes(spec, cfg),
            dropout_frames=spec.dropout_frames,
        )
        for spec in cfg.actors
    ]
    signatures: dict[int, dict[int, np.ndarray]] = {}
    for class_id in range(cfg.n_classes):
        per_scale = {}
        for z in cfg.scales:
            vec = sig_rng.fill_normal((cfg.channels_at(z),))
            per_scale[z] = vec / np.linalg.norm(vec)
        signatures[class_id] = per_scale
    clip_starts = list(range(cfg.n_frames - cfg.t + 1))
    stage_maps = [
        _paint_clip(cfg, actors, start, signatures, paint_rng)
        for start in clip_starts
    ]
    return Scenario(
        cfg=cfg,
        actors=actors,
        clip_starts=clip_starts,
        class_signatures=signatures,
        stage_maps=stage_maps,
    )


def preset_config(name: str, frame: int = 64, t: int = 4) -> ScenarioConfig:
    """The two linking-failure archetypes as ready configurations."""
    if name == "fast-motion":
        # One actor teleports across the frame mid-video.
        return ScenarioConfig(
            frame_w=frame,
            frame_h=frame,
            t=t,
            n_frames=t + 2,
            actors=[
                ActorSpec(
                    class_id=0,
                    start_box=(4.0, 4.0, 20.0, 20.0),
                    jumps={t // 2 + 1: (frame - 12.0, frame - 12.0)},
                )
            ],
        )
    if name == "dropout":
        # Static actor, but the detector misses one middle frame.
        return ScenarioConfig(
            frame_w=frame,
            frame_h=frame,
            t=t,
            n_frames=t + 2,
            actors=[
                ActorSpec(
                    class_id=0,
                    start_box=(16.0, 16.0, 40.0, 40.0),
                    dropout_frames=(t // 2 + 1,),
                )
            ],
        )
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


def default_training_scenario(
    n_clips: int = 3,
    frame: int = 64,
    t: int = 4,
    n_actors: int = 2,
    n_classes: int = 3,
    seed: int = 7,
) -> ScenarioConfig:
    """A small moving-actor scene for overfit experiments."""
    rng = Rng(seed)
    drift = 0.02 * frame * (t + n_clips - 1)
    actors = []
    for i in range(n_actors):
        size = frame * (0.20 + 0.12 * rng.uniform())
        margin = size / 2.0 + drift + 2.0
        cx = rng.uniform(margin, frame - margin)
        cy = rng.uniform(margin, frame - margin)
        vx = rng.uniform(-0.02, 0.02) * frame
        vy = rng.uniform(-0.02, 0.02) * frame
        actors.append(
            ActorSpec(
                class_id=i % n_classes,
                start_box=(cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2),
                velocity=(vx, vy),
            )
        )
    return ScenarioConfig(
        frame_w=frame,
        frame_h=frame,
        t=t,
        n_frames=t + n_clips - 1,
        n_classes=n_classes,
        actors=actors,
    )
