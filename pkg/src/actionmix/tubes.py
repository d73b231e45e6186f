"""Tubelet linking, tube IoU, and frame/video mean average precision.

Tubelets from stride-1 clips overlap on T-1 frames; linking greedily seeds a
tube at the highest-scoring unassigned tubelet and extends it clip by clip
in both directions, absorbing the same-class neighbor whose mean box IoU
over the shared frames is maximal and at least tau. Boxes on shared frames
are averaged over all member tubelets, the tube score is the mean member
score, and no clip gaps are bridged. The per-frame baseline links adjacent
frames by plain box IoU instead, which is what fails under fast motion or a
single missed detection.

The 3D IoU of two tubes is their temporal IoU times the mean spatial IoU
over the frames both cover (zero when temporally disjoint). AP uses
all-point interpolation: area under the monotone envelope of the
precision-recall curve, with each ground truth matchable once in score
order. mAP averages the classes that have at least one ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError

LINK_IOU_THRESHOLD = 0.5


@dataclass
class Tubelet:
    """T consecutive per-frame boxes with one class and score."""

    start_frame: int
    boxes: np.ndarray  # [T, 4] xyxy
    class_id: int
    score: float

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 4:
            raise InputError("tubelet boxes must be [T, 4]")
        if not 0.0 <= self.score <= 1.0:
            raise InputError("tubelet score must lie in [0, 1]")

    @property
    def frames(self) -> range:
        return range(self.start_frame, self.start_frame + len(self.boxes))

    def box_at(self, frame: int) -> np.ndarray:
        return self.boxes[frame - self.start_frame]


@dataclass
class ActionTube:
    """A linked, temporally contiguous box sequence for one actor/action."""

    start_frame: int
    boxes: np.ndarray
    class_id: int
    score: float
    members: list[int] = field(default_factory=list)

    @property
    def frames(self) -> range:
        return range(self.start_frame, self.start_frame + len(self.boxes))

    def box_at(self, frame: int) -> np.ndarray:
        return self.boxes[frame - self.start_frame]


def iou_2d(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (
        (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    )
    return inter / union if union > 0 else 0.0


def iou_3d(tube_a, tube_b) -> float:
    """Temporal IoU times mean spatial IoU over the overlapped frames."""
    fa, fb = tube_a.frames, tube_b.frames
    lo = max(fa.start, fb.start)
    hi = min(fa.stop, fb.stop)
    if hi <= lo:
        return 0.0
    t_union = max(fa.stop, fb.stop) - min(fa.start, fb.start)
    t_iou = (hi - lo) / t_union
    spatial = np.mean(
        [iou_2d(tube_a.box_at(f), tube_b.box_at(f)) for f in range(lo, hi)]
    )
    return float(t_iou * spatial)


def _mean_overlap_iou(a: Tubelet, b: Tubelet) -> float:
    lo = max(a.start_frame, b.start_frame)
    hi = min(a.start_frame + len(a.boxes), b.start_frame + len(b.boxes))
    if hi <= lo:
        return 0.0
    return float(np.mean([iou_2d(a.box_at(f), b.box_at(f)) for f in range(lo, hi)]))


def link_tubelets(tubelets: list[Tubelet], threshold: float = LINK_IOU_THRESHOLD) -> list[ActionTube]:
    """Greedy tube building over stride-1 clip tubelets.

    Every tubelet joins at most one tube; extension stops at the first clip
    with no qualifying neighbor (no gaps).
    """
    by_clip: dict[int, list[int]] = {}
    for idx, tl in enumerate(tubelets):
        by_clip.setdefault(tl.start_frame, []).append(idx)
    assigned = [False] * len(tubelets)
    seed_order = sorted(
        range(len(tubelets)),
        key=lambda i: (-tubelets[i].score, tubelets[i].start_frame, i),
    )
    tubes: list[ActionTube] = []
    for seed in seed_order:
        if assigned[seed]:
            continue
        members = [seed]
        assigned[seed] = True
        for step in (1, -1):
            current = seed
            while True:
                neighbor = _best_neighbor(
                    tubelets, by_clip, assigned, tubelets[current],
                    tubelets[current].start_frame + step, threshold,
                )
                if neighbor is None:
                    break
                assigned[neighbor] = True
                members.append(neighbor)
                current = neighbor
        tubes.append(_merge_members(tubelets, sorted(members, key=lambda i: tubelets[i].start_frame)))
    return tubes


def _best_neighbor(tubelets, by_clip, assigned, anchor: Tubelet, clip_start: int, threshold: float):
    # Ties resolve to the lowest tubelet index (clip lists are in index order).
    best = None
    best_iou = -1.0
    for idx in by_clip.get(clip_start, ()):
        cand = tubelets[idx]
        if assigned[idx] or cand.class_id != anchor.class_id:
            continue
        overlap = _mean_overlap_iou(anchor, cand)
        if overlap >= threshold and overlap > best_iou:
            best, best_iou = idx, overlap
    return best


def _merge_members(tubelets: list[Tubelet], members: list[int]) -> ActionTube:
    parts = [tubelets[i] for i in members]
    start = min(p.start_frame for p in parts)
    stop = max(p.start_frame + len(p.boxes) for p in parts)
    sums = np.zeros((stop - start, 4))
    counts = np.zeros(stop - start)
    for p in parts:
        lo = p.start_frame - start
        sums[lo : lo + len(p.boxes)] += p.boxes
        counts[lo : lo + len(p.boxes)] += 1
    boxes = sums / counts[:, None]
    return ActionTube(
        start_frame=start,
        boxes=boxes,
        class_id=parts[0].class_id,
        score=float(np.mean([p.score for p in parts])),
        members=members,
    )


@dataclass
class FrameDetection:
    frame: int
    box: np.ndarray
    class_id: int
    score: float

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)


def link_keyframe_boxes(
    detections: list[FrameDetection], threshold: float = LINK_IOU_THRESHOLD
) -> list[ActionTube]:
    """Adjacent-frame greedy linking of per-frame boxes (the baseline)."""
    assigned = [False] * len(detections)
    by_frame: dict[int, list[int]] = {}
    for idx, det in enumerate(detections):
        by_frame.setdefault(det.frame, []).append(idx)
    seed_order = sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].score, detections[i].frame, i),
    )
    tubes = []
    for seed in seed_order:
        if assigned[seed]:
            continue
        members = [seed]
        assigned[seed] = True
        for step in (1, -1):
            current = seed
            while True:
                best, best_iou = None, threshold
                for idx in by_frame.get(detections[current].frame + step, ()):
                    cand = detections[idx]
                    if assigned[idx] or cand.class_id != detections[seed].class_id:
                        continue
                    overlap = iou_2d(detections[current].box, cand.box)
                    if overlap >= threshold and (overlap > best_iou or best is None):
                        best, best_iou = idx, overlap
                if best is None:
                    break
                assigned[best] = True
                members.append(best)
                current = best
        members.sort(key=lambda i: detections[i].frame)
        tubes.append(
            ActionTube(
                start_frame=detections[members[0]].frame,
                boxes=np.stack([detections[i].box for i in members]),
                class_id=detections[seed].class_id,
                score=float(np.mean([detections[i].score for i in members])),
                members=members,
            )
        )
    return tubes


# -- average precision -------------------------------------------------------------


def _average_precision(scores: list[float], flags: list[bool], total_gt: int) -> float:
    """All-point interpolated AP from per-detection TP flags in rank order."""
    if total_gt == 0:
        return 0.0
    if not scores:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    recall = tp / total_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _evaluate_class(dets, gts, iou_fn, iou_thr) -> float:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    matched = [False] * len(gts)
    flags = []
    scores = []
    for det_idx in order:
        item, score = dets[det_idx]
        best, best_iou = None, iou_thr
        for g, gt in enumerate(gts):
            if matched[g]:
                continue
            overlap = iou_fn(item, gt)
            if overlap >= iou_thr and (best is None or overlap > best_iou):
                best, best_iou = g, overlap
        if best is not None:
            matched[best] = True
            flags.append(True)
        else:
            flags.append(False)
        scores.append(score)
    return _average_precision(scores, flags, len(gts))


def frame_map(
    detections: list[FrameDetection],
    ground_truth: list[tuple[int, int, np.ndarray]],
    iou_thr: float = 0.5,
) -> tuple[float, dict[int, float]]:
    """Frame-level mAP. Ground truth rows are (frame, class_id, box)."""
    classes = sorted({g[1] for g in ground_truth})
    per_class = {}
    for cls in classes:
        dets = [
            ((d.frame, d.box), d.score)
            for d in detections
            if d.class_id == cls
        ]
        gts = [(g[0], np.asarray(g[2], float)) for g in ground_truth if g[1] == cls]
        iou_fn = lambda a, b: iou_2d(a[1], b[1]) if a[0] == b[0] else 0.0
        per_class[cls] = _evaluate_class(dets, gts, iou_fn, iou_thr)
    if not per_class:
        return 0.0, {}
    return float(np.mean(list(per_class.values()))), per_class


def video_map(
    tubes: list[ActionTube],
    gt_tubes: list[ActionTube],
    iou_thr: float = 0.5,
) -> tuple[float, dict[int, float]]:
    """Video-level mAP over linked tubes at a 3D IoU threshold."""
    classes = sorted({t.class_id for t in gt_tubes})
    per_class = {}
    for cls in classes:
        dets = [(t, t.score) for t in tubes if t.class_id == cls]
        gts = [t for t in gt_tubes if t.class_id == cls]
        per_class[cls] = _evaluate_class(dets, gts, iou_3d, iou_thr)
    if not per_class:
        return 0.0, {}
    return float(np.mean(list(per_class.values()))), per_class


# -- JSON interchange -----------------------------------------------------------------


def tubelets_to_json(tubelets: list[Tubelet]) -> list[dict]:
    return [
        {
            "clip_start": t.start_frame,
            "boxes": [[float(v) for v in row] for row in t.boxes],
            "class": int(t.class_id),
            "score": float(t.score),
        }
        for t in tubelets
    ]


def tubelets_from_json(records: list[dict]) -> list[Tubelet]:
    return [
        Tubelet(
            start_frame=int(r["clip_start"]),
            boxes=np.asarray(r["boxes"], dtype=np.float64),
            class_id=int(r["class"]),
            score=float(r.get("score", 1.0)),
        )
        for r in records
    ]


def write_detections(path, tubelets: list[Tubelet]) -> None:
    Path(path).write_text(json.dumps(tubelets_to_json(tubelets), indent=1))


def read_detections(path) -> list[Tubelet]:
    return tubelets_from_json(json.loads(Path(path).read_text()))


def tubes_to_json(tubes: list[ActionTube]) -> list[dict]:
    return [
        {
            "clip_start": t.start_frame,
            "boxes": [[float(v) for v in row] for row in t.boxes],
            "class": int(t.class_id),
            "score": float(t.score),
        }
        for t in tubes
    ]


def tubes_from_json(records: list[dict]) -> list[ActionTube]:
    return [
        ActionTube(
            start_frame=int(r["clip_start"]),
            boxes=np.asarray(r["boxes"], dtype=np.float64),
            class_id=int(r["class"]),
            score=float(r.get("score", 1.0)),
        )
        for r in records
    ]
