"""Run configuration: a flat key=value file with typed, validated fields.

Unknown keys are rejected rather than ignored, so typos fail loudly. The
defaults are the reference recipe (N=100, D=256, P_in=32, 4 groups, out
patterns 4x, 6 keyframe / 3 tubelet stages, loss weights 2/2/2/24, bank
k=5 w=60 with 3 cross-attention layers, learning rate 2e-5, weight decay
1e-4, background thresholds 0.3 keyframe / 0.7 tubelet). Desk-scale runs
override the sizes but keep the same shape of the recipe.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .criterion import LossWeights
from .decoder import ASAMConfig
from .errors import ConfigError
from .queries import KEYFRAME, TUBELET
from .synthetic import ScenarioConfig, default_training_scenario, preset_config


@dataclass
class RunConfig:
    mode: str = KEYFRAME
    seed: int = 0
    # architecture
    n: int = 100
    d: int = 256
    p_in: int = 32
    groups: int = 4
    heads: int = 8
    m: int = -1  # -1: 6 for keyframe, 3 for tubelet
    classes: int = 3
    t: int = 4
    frame: int = 64
    p_out_factor: int = 4
    t_out_factor: int = 4
    classifier: str = "short"
    bank_top_k: int = 5
    bank_window: int = 60
    cross_attn_layers: int = 3
    sampling: str = "adaptive"
    grid_m: int = 7
    mixing: str = "adaptive"
    scales: tuple[int, ...] = (2, 3, 4, 5)
    # losses
    lambda1: float = 2.0
    lambda2: float = 2.0
    lambda3: float = 2.0
    lambda4: float = 24.0
    # optimization
    lr: float = 2.0e-5
    weight_decay: float = 1.0e-4
    momentum: float = 0.0
    iterations: int = 500
    eval_every: int = 25
    early_stop: bool = True
    # inference / evaluation
    bg_threshold: float = -1.0  # -1: 0.3 for keyframe, 0.7 for tubelet
    link_threshold: float = 0.5
    iou_threshold: float = 0.5
    # scenario
    preset: str = ""
    clips: int = 3
    actors: int = 2
    noise_std: float = 0.1
    base_channels: int = 8
    # output
    out: str = ""

    def __post_init__(self):
        if self.mode not in (KEYFRAME, TUBELET):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.m == -1:
            self.m = 6 if self.mode == KEYFRAME else 3
        if self.bg_threshold < 0:
            self.bg_threshold = 0.3 if self.mode == KEYFRAME else 0.7
        if not 0.0 <= self.bg_threshold <= 1.0:
            raise ConfigError("bg_threshold must lie in [0, 1]")
        if self.iterations < 0 or self.eval_every < 1:
            raise ConfigError("iterations must be >= 0 and eval_every >= 1")
        if self.t < 1 or self.clips < 1:
            raise ConfigError("need at least one frame per clip and one clip")

    def asam(self) -> ASAMConfig:
        return ASAMConfig(
            mode=self.mode,
            n=self.n,
            d=self.d,
            p_in=self.p_in,
            groups=self.groups,
            heads=self.heads,
            m=self.m,
            c=self.classes,
            t_in=self.t,
            frame_wh=(self.frame, self.frame),
            p_out_factor=self.p_out_factor,
            t_out_factor=self.t_out_factor,
            classifier=self.classifier,
            bank_top_k=self.bank_top_k,
            bank_window=self.bank_window,
            cross_attn_layers=self.cross_attn_layers,
            sampling=self.sampling,
            grid_m=self.grid_m,
            mixing=self.mixing,
            scales=self.scales,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def stage_channels(self) -> dict[int, int]:
        return {z: self.base_channels * 2 ** (z - self.scales[0]) for z in self.scales}

    def scenario(self) -> ScenarioConfig:
        if self.preset:
            cfg = preset_config(self.preset, frame=self.frame, t=self.t)
        else:
            cfg = default_training_scenario(
                n_clips=self.clips,
                frame=self.frame,
                t=self.t,
                n_actors=self.actors,
                n_classes=self.classes,
                seed=self.seed,
            )
        cfg.scales = self.scales
        cfg.base_channels = self.base_channels
        cfg.noise_std = self.noise_std
        cfg.n_classes = self.classes
        return cfg


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELDS[name]
    raw = raw.strip()
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if f.type in ("bool", bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if f.name == "scales":
        return tuple(int(v) for v in raw.split(",") if v)
    return raw


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse key=value lines (# comments allowed); unknown keys are errors."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    values.update(overrides)
    return RunConfig(**values)


def load_config(path, **overrides) -> RunConfig:
    return parse_config(Path(path).read_text(), **overrides)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.name == "scales":
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"
