"""The full model (lateral projections + decoder), optimizer, and toy loop.

Training iterates forward -> match -> loss -> backward -> update over the
scenario's clips, with plain gradient descent plus decoupled weight decay
and optional momentum. Metrics are evaluated periodically on the training
clips themselves: frame mAP at the configured IoU threshold in keyframe
mode, video mAP after tube linking in tubelet mode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .criterion import GroundTruthSet, LossWeights, training_loss
from .decoder import ActionDecoder, DecoderResult, DetectionOutput, QueryBank
from .errors import ConfigError, NonFiniteError
from .feature_space import FeatureSpace4D, build_from_hierarchy
from .nn import Linear, Module
from .queries import KEYFRAME
from .rng import Rng
from .synthetic import Scenario, gen_scenario
from .tubes import (
    FrameDetection,
    Tubelet,
    frame_map,
    link_tubelets,
    video_map,
)


class DetectorModel(Module):
    """Lateral stage projections plus the query decoder."""

    def __init__(self, run_cfg: RunConfig, stage_channels: dict[int, int], rng: Rng):
        self.run_cfg = run_cfg
        asam = run_cfg.asam()
        self.lateral = [
            Linear(stage_channels[z], run_cfg.d, rng) for z in sorted(stage_channels)
        ]
        self.decoder = ActionDecoder(asam, rng)

    def build_space(self, stage_maps) -> FeatureSpace4D:
        lateral = [(lin.w, lin.b) for lin in self.lateral]
        return build_from_hierarchy(
            stage_maps, lateral, (self.run_cfg.frame, self.run_cfg.frame)
        )

    def forward(self, stage_maps, bank_window: np.ndarray | None = None) -> DecoderResult:
        return self.decoder.forward(self.build_space(stage_maps), bank_window=bank_window)


class GradientDescent:
    """SGD with decoupled weight decay and optional momentum."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            p.grad[...] = 0.0

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if self.momentum:
                v *= self.momentum
                v += p.grad
                update = v
            else:
                update = p.grad
            p.data -= self.lr * update
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data


# -- inference helpers -----------------------------------------------------------


def keyframe_detections(
    result: DecoderResult, scenario: Scenario, clip_index: int, bg_threshold: float
) -> list[FrameDetection]:
    """Thresholded per-class detections on the clip keyframe.

    A query passes when its background probability is below the threshold;
    each foreground class then contributes one detection scored by
    p(human) * p(class).
    """
    out = result.final
    frame = scenario.keyframe_of(clip_index)
    detections = []
    human = out.human.data
    action = out.action.data
    boxes = out.boxes.data
    for i in range(boxes.shape[0]):
        if human[i, 1] >= bg_threshold:
            continue
        for cls in range(action.shape[1]):
            detections.append(
                FrameDetection(
                    frame=frame,
                    box=boxes[i].copy(),
                    class_id=cls,
                    score=float(human[i, 0] * action[i, cls]),
                )
            )
    return detections


def tubelet_detections(
    result: DecoderResult, scenario: Scenario, clip_index: int, bg_threshold: float
) -> list[Tubelet]:
    """Thresholded tubelets: class = argmax foreground probability."""
    out = result.final
    start = scenario.clip_starts[clip_index]
    probs = out.class_probs.data
    boxes = out.boxes.data
    background = probs.shape[1] - 1
    tubelets = []
    for i in range(boxes.shape[0]):
        if probs[i, background] >= bg_threshold:
            continue
        cls = int(np.argmax(probs[i, :background]))
        tubelets.append(
            Tubelet(
                start_frame=start,
                boxes=boxes[i].copy(),
                class_id=cls,
                score=float(probs[i, cls]),
            )
        )
    return tubelets


def evaluate_model(model: DetectorModel, scenario: Scenario, bank: QueryBank | None = None) -> float:
    """Training-set metric: frame mAP (keyframe) or linked video mAP (tubelet)."""
    cfg = model.run_cfg
    with ad.no_grad():
        if cfg.mode == KEYFRAME:
            detections: list[FrameDetection] = []
            for clip_index in range(len(scenario.clip_starts)):
                window = bank.window_rows(clip_index) if bank is not None else None
                result = model.forward(scenario.stage_maps[clip_index], bank_window=window)
                detections.extend(
                    keyframe_detections(result, scenario, clip_index, cfg.bg_threshold)
                )
            value, _ = frame_map(
                detections, scenario.gt_frame_annotations(), cfg.iou_threshold
            )
            return value
        tubelets: list[Tubelet] = []
        for clip_index in range(len(scenario.clip_starts)):
            result = model.forward(scenario.stage_maps[clip_index])
            tubelets.extend(
                tubelet_detections(result, scenario, clip_index, cfg.bg_threshold)
            )
        tubes = link_tubelets(tubelets, cfg.link_threshold)
        value, _ = video_map(tubes, scenario.gt_tubes(), cfg.iou_threshold)
        return value


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DetectorModel
    scenario: Scenario
    trace: list[dict] = field(default_factory=list)
    metric_history: list[tuple[int, float]] = field(default_factory=list)
    reached_perfect_at: int | None = None
    equivariance_deviation: dict[int, float] = field(default_factory=dict)
    elapsed_seconds: float = 0.0

    @property
    def final_metric(self) -> float:
        return self.metric_history[-1][1] if self.metric_history else 0.0


def clip_ground_truth(scenario: Scenario, clip_index: int, mode: str) -> GroundTruthSet:
    if mode == KEYFRAME:
        return scenario.gt_keyframe(clip_index)
    return scenario.gt_tubelet(clip_index)


def _loss_permutation_deviation(
    model: DetectorModel, scenario: Scenario, weights: LossWeights, rng: Rng
) -> float:
    """Max |loss(permuted) - loss| over a random prediction+gt permutation."""
    from .criterion import training_loss as _tl

    cfg = model.run_cfg
    deviations = []
    for clip_index in range(len(scenario.clip_starts)):
        with ad.no_grad():
            result = model.forward(scenario.stage_maps[clip_index])
            gt = clip_ground_truth(scenario, clip_index, cfg.mode)
            base = _tl(result.outputs, gt, weights, (cfg.frame, cfg.frame)).value
            perm_p = rng.permutation(cfg.n)
            perm_g = rng.permutation(gt.count)
            permuted_outputs = [_permute_output(o, perm_p) for o in result.outputs]
            permuted_gt = _permute_gt(gt, perm_g)
            alt = _tl(
                permuted_outputs, permuted_gt, weights, (cfg.frame, cfg.frame)
            ).value
        deviations.append(abs(alt - base))
    return max(deviations)


def _permute_output(output: DetectionOutput, perm: list[int]) -> DetectionOutput:
    idx = np.asarray(perm, dtype=np.int64)
    pick = lambda t: None if t is None else Tensor(t.data[idx])
    return DetectionOutput(
        mode=output.mode,
        boxes=pick(output.boxes),
        human=pick(output.human),
        action=pick(output.action),
        class_probs=pick(output.class_probs),
    )


def _permute_gt(gt: GroundTruthSet, perm: list[int]) -> GroundTruthSet:
    idx = np.asarray(perm, dtype=np.int64)
    return GroundTruthSet(
        boxes=gt.boxes[idx],
        actions=None if gt.actions is None else gt.actions[idx],
        labels=None if gt.labels is None else gt.labels[idx],
    )


def train_toy(
    run_cfg: RunConfig,
    scenario: Scenario | None = None,
    equivariance_check_iters: tuple[int, ...] = (),
) -> TrainResult:
    """Overfit the detector on one synthetic scenario.

    Deterministic under the config seed. Aborts with a diagnostic on a
    non-finite loss. When ``early_stop`` is set, stops once the training
    metric hits 1.0 (evaluated every ``eval_every`` iterations).
    """
    start_time = time.perf_counter()
    seed_rng = Rng(run_cfg.seed)
    if scenario is None:
        scenario = gen_scenario(run_cfg.scenario(), seed_rng.spawn(11).seed)
    stage_channels = {m.z: m.channels for m in scenario.stage_maps[0]}
    model = DetectorModel(run_cfg, stage_channels, seed_rng.spawn(13))
    check_rng = seed_rng.spawn(17)
    weights = run_cfg.loss_weights()
    optimizer = GradientDescent(
        model.parameters(), run_cfg.lr, run_cfg.weight_decay, run_cfg.momentum
    )
    result = TrainResult(model=model, scenario=scenario)
    frame_wh = (run_cfg.frame, run_cfg.frame)
    n_clips = len(scenario.clip_starts)

    for iteration in range(run_cfg.iterations):
        if iteration in equivariance_check_iters:
            result.equivariance_deviation[iteration] = _loss_permutation_deviation(
                model, scenario, weights, check_rng
            )
        optimizer.zero_grad()
        iteration_terms: dict[str, float] = {}
        total_value = 0.0
        for clip_index in range(n_clips):
            out = model.forward(scenario.stage_maps[clip_index])
            gt = clip_ground_truth(scenario, clip_index, run_cfg.mode)
            breakdown = training_loss(out.outputs, gt, weights, frame_wh)
            if not np.isfinite(breakdown.value):
                raise NonFiniteError(
                    f"loss diverged at iteration {iteration}, clip {clip_index}"
                )
            scaled = ad.mul(breakdown.total, 1.0 / n_clips)
            scaled.backward()
            total_value += breakdown.value / n_clips
            for key, val in breakdown.terms.items():
                iteration_terms[key] = iteration_terms.get(key, 0.0) + val / n_clips
        optimizer.step()
        entry = {"iteration": iteration, "loss": total_value}
        entry.update(iteration_terms)
        result.trace.append(entry)

        if (iteration + 1) % run_cfg.eval_every == 0 or iteration == run_cfg.iterations - 1:
            metric = evaluate_model(model, scenario)
            result.metric_history.append((iteration + 1, metric))
            if metric >= 1.0 and result.reached_perfect_at is None:
                result.reached_perfect_at = iteration + 1
                if run_cfg.early_stop and not equivariance_check_iters:
                    break
            if (
                result.reached_perfect_at is not None
                and run_cfg.early_stop
                and equivariance_check_iters
                and iteration >= max(equivariance_check_iters)
            ):
                break

    if run_cfg.iterations in equivariance_check_iters or -1 in equivariance_check_iters:
        result.equivariance_deviation[len(result.trace)] = _loss_permutation_deviation(
            model, scenario, weights, check_rng
        )
    result.elapsed_seconds = time.perf_counter() - start_time
    return result
