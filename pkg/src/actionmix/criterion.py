"""Bipartite matching and the set-prediction training losses.

The matcher minimizes, over injective assignments sigma of ground truths to
predictions, the summed per-pair cost

    lambda1 * L_cls + lambda2 * L_l1 + lambda3 * L_giou

where L_cls is the negative log-probability of the positive class (human for
keyframe detection, the ground-truth action class for tubelet detection) and
the box terms compare normalized (cx, cy, w, h) coordinates resp. 1 - GIoU.
Tubelet box terms average over the clip's frames.

The training loss evaluates the matched cost plus, for keyframe detection, a
lambda4-weighted binary cross entropy over action labels on matched pairs;
unmatched predictions contribute only their background classification term.
Every intermediate decoder output gets its own fresh matching, and the
assignment itself is treated as a constant during backprop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor, astensor
from .errors import InputError, ShapeError

EPS_PROB = 1e-12
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
# Relative slack when deciding two assignment totals are a tie; exact ties in
# the costs are what the lexicographic rule is for, and accumulated rounding
# across partial sums stays far below this.
TIE_REL_TOL = 1e-12


@dataclass
class LossWeights:
    lambda1: float = 2.0
    lambda2: float = 2.0
    lambda3: float = 2.0
    lambda4: float = 24.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4) < 0:
            raise InputError("loss weights must be non-negative")


@dataclass
class GroundTruthSet:
    """Annotated actors for one clip.

    Keyframe mode: boxes[K, 4] on the keyframe plus multi-hot actions[K, C]
    (every actor is a human). Tubelet mode: boxes[K, T, 4] plus one class
    label per tubelet. Boxes must have positive area in every annotated
    frame.
    """

    boxes: np.ndarray
    actions: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.boxes.size:
            w = self.boxes[..., 2] - self.boxes[..., 0]
            h = self.boxes[..., 3] - self.boxes[..., 1]
            if np.any(w <= 0) or np.any(h <= 0):
                raise InputError("ground-truth boxes must have positive area")
        if self.actions is not None:
            self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def count(self) -> int:
        return self.boxes.shape[0]


# -- individual loss terms ----------------------------------------------------


def box_xyxy_to_cxcywh_norm(boxes, frame_wh) -> Tensor:
    """Pixel xyxy -> (cx, cy, w, h) divided by frame width/height."""
    boxes = astensor(boxes)
    fw, fh = frame_wh
    x1, y1, x2, y2 = (boxes[..., i] for i in range(4))
    return ad.stack(
        [
            ad.mul(ad.add(x1, x2), 0.5 / fw),
            ad.mul(ad.add(y1, y2), 0.5 / fh),
            ad.mul(ad.sub(x2, x1), 1.0 / fw),
            ad.mul(ad.sub(y2, y1), 1.0 / fh),
        ],
        axis=-1,
    )


def l1_box_loss(a, b, frame_wh=(1.0, 1.0)) -> Tensor:
    """Mean absolute difference of normalized (cx, cy, w, h) components."""
    an = box_xyxy_to_cxcywh_norm(a, frame_wh)
    bn = box_xyxy_to_cxcywh_norm(b, frame_wh)
    return ad.tmean(ad.tabs(ad.sub(an, bn)), axis=-1)


def giou(a, b) -> Tensor:
    """Generalized IoU of xyxy boxes (broadcasting elementwise over pairs)."""
    a, b = astensor(a), astensor(b)
    ax1, ay1, ax2, ay2 = (a[..., i] for i in range(4))
    bx1, by1, bx2, by2 = (b[..., i] for i in range(4))
    area_a = ad.mul(ad.sub(ax2, ax1), ad.sub(ay2, ay1))
    area_b = ad.mul(ad.sub(bx2, bx1), ad.sub(by2, by1))
    ix1 = ad.maximum(ax1, bx1)
    iy1 = ad.maximum(ay1, by1)
    ix2 = ad.minimum(ax2, bx2)
    iy2 = ad.minimum(ay2, by2)
    iw = ad.maximum(ad.sub(ix2, ix1), 0.0)
    ih = ad.maximum(ad.sub(iy2, iy1), 0.0)
    inter = ad.mul(iw, ih)
    union = ad.sub(ad.add(area_a, area_b), inter)
    hx1 = ad.minimum(ax1, bx1)
    hy1 = ad.minimum(ay1, by1)
    hx2 = ad.maximum(ax2, bx2)
    hy2 = ad.maximum(ay2, by2)
    hull = ad.mul(ad.sub(hx2, hx1), ad.sub(hy2, hy1))
    iou = ad.div(inter, union)
    return ad.sub(iou, ad.div(ad.sub(hull, union), hull))


def giou_loss(a, b) -> Tensor:
    """1 - GIoU, in [0, 2]. Degenerate (non-positive-area) boxes are errors."""
    a, b = astensor(a), astensor(b)
    for boxes in (a.data, b.data):
        w = boxes[..., 2] - boxes[..., 0]
        h = boxes[..., 3] - boxes[..., 1]
        if np.any(w <= 0) or np.any(h <= 0):
            raise InputError("giou_loss requires positive-area boxes")
    return ad.sub(1.0, giou(a, b))


def focal_loss(p, target: int, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA) -> Tensor:
    """-alpha * (1 - p_t)**gamma * log(p_t) for a probability vector p."""
    p = astensor(p)
    if p.ndim != 1:
        raise ShapeError("focal_loss expects one probability vector")
    pt = ad.clip(p[target : target + 1], EPS_PROB, 1.0)
    weight = ad.power(ad.sub(1.0, pt), gamma) if gamma != 0.0 else Tensor(np.ones(1))
    return ad.reshape(ad.mul(ad.mul(weight, ad.neg(ad.log(pt))), alpha), ())


def cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Sum of -log p[target] rows; probs[N, C], integer targets[N]."""
    probs = astensor(probs)
    n = probs.dims[0]
    picked = probs[np.arange(n), np.asarray(targets, dtype=np.int64)]
    return ad.tsum(ad.neg(ad.log(ad.clip(picked, EPS_PROB, 1.0))))


def binary_cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE over the class axis, summed over rows; targets multi-hot."""
    probs = astensor(probs)
    t = np.asarray(targets, dtype=np.float64)
    p = ad.clip(probs, EPS_PROB, 1.0 - EPS_PROB)
    pos = ad.mul(Tensor(t), ad.log(p))
    negt = ad.mul(Tensor(1.0 - t), ad.log(ad.sub(1.0, p)))
    per_row = ad.tmean(ad.neg(ad.add(pos, negt)), axis=-1)
    return ad.tsum(per_row)


# -- matching ------------------------------------------------------------------


@dataclass
class Assignment:
    """sigma maps prediction index -> ground-truth index (-1 for unmatched)."""

    sigma: np.ndarray
    total_cost: float

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return [(i, int(j)) for i, j in enumerate(self.sigma) if j >= 0]

    def matched_predictions(self) -> np.ndarray:
        return np.nonzero(self.sigma >= 0)[0]


def _optimal_value(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return math.fsum(cost[rows, cols].tolist())


def match(cost: np.ndarray) -> Assignment:
    """Minimum-total-cost injective assignment of all K ground truths.

    Requires K <= N and finite costs. Among cost-equal optima the
    lexicographically smallest list of (prediction, gt) pairs wins,
    established by fixing pairs in index order and re-solving the remainder.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InputError("cost must be a 2-D matrix")
    n, k = cost.shape
    if k > n:
        raise InputError(f"more ground truths ({k}) than predictions ({n})")
    if not np.all(np.isfinite(cost)):
        raise InputError("cost matrix holds non-finite entries")
    sigma = np.full(n, -1, dtype=np.int64)
    if k == 0:
        return Assignment(sigma, 0.0)

    best_total = _optimal_value(cost)
    tol = TIE_REL_TOL * max(1.0, abs(best_total))
    free_gts = list(range(k))
    fixed_costs: list[float] = []
    for i in range(n):
        if not free_gts:
            break
        rows_left = n - i - 1
        chosen = None
        for j in free_gts:
            rest = [g for g in free_gts if g != j]
            if rows_left < len(rest):
                continue
            remainder = _optimal_value(cost[i + 1 :, rest]) if rest else 0.0
            candidate = math.fsum(fixed_costs + [cost[i, j], remainder])
            if candidate <= best_total + tol:
                chosen = j
                break
        if chosen is None:
            continue
        sigma[i] = chosen
        free_gts.remove(chosen)
        fixed_costs.append(cost[i, chosen])
    total = math.fsum(cost[i, sigma[i]] for i in range(n) if sigma[i] >= 0)
    return Assignment(sigma, total)


# -- matching costs -------------------------------------------------------------


def _cxcywh_norm_np(boxes: np.ndarray, frame_wh) -> np.ndarray:
    fw, fh = frame_wh
    x1, y1, x2, y2 = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack(
        [
            (x1 + x2) * (0.5 / fw),
            (y1 + y2) * (0.5 / fh),
            (x2 - x1) / fw,
            (y2 - y1) / fh,
        ],
        axis=-1,
    )


def _pairwise_l1(pred_boxes: np.ndarray, gt_boxes: np.ndarray, frame_wh) -> np.ndarray:
    pn = _cxcywh_norm_np(pred_boxes, frame_wh)
    gn = _cxcywh_norm_np(gt_boxes, frame_wh)
    return np.abs(pn[:, None, :] - gn[None, :, :]).mean(axis=-1)


def _pairwise_giou_loss(pred_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    a = pred_boxes[:, None, :]
    b = gt_boxes[None, :, :]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.maximum(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0)
    ih = np.maximum(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * (
        np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    )
    return 1.0 - (inter / union - (hull - union) / hull)


def matching_cost_keyframe(prediction, gt, weights: LossWeights, frame_wh) -> np.ndarray:
    """Cost[i, j] between keyframe predictions and ground-truth actors."""
    k = gt.boxes.shape[0]
    n = prediction.human.dims[0]
    if k == 0:
        return np.zeros((n, 0))
    p_human = np.clip(prediction.human.data[:, 0], EPS_PROB, 1.0)
    cls = -np.log(p_human)[:, None].repeat(k, axis=1)
    l1 = _pairwise_l1(prediction.boxes.data, gt.boxes, frame_wh)
    gl = _pairwise_giou_loss(prediction.boxes.data, gt.boxes)
    return weights.lambda1 * cls + weights.lambda2 * l1 + weights.lambda3 * gl


def matching_cost_tubelet(prediction, gt, weights: LossWeights, frame_wh) -> np.ndarray:
    """Cost[i, j] between tubelet predictions and ground-truth tubelets.

    Box terms average over the clip's frames; the classification term is the
    focal loss of the ground truth's class.
    """
    k = gt.boxes.shape[0]
    n = prediction.class_probs.dims[0]
    if k == 0:
        return np.zeros((n, 0))
    t = gt.boxes.shape[1]
    probs = prediction.class_probs.data
    cls = np.empty((n, k))
    for j, label in enumerate(gt.labels):
        pt = np.clip(probs[:, int(label)], EPS_PROB, 1.0)
        cls[:, j] = -FOCAL_ALPHA * (1.0 - pt) ** FOCAL_GAMMA * np.log(pt)
    l1 = np.zeros((n, k))
    gl = np.zeros((n, k))
    for f in range(t):
        l1 += _pairwise_l1(prediction.boxes.data[:, f], gt.boxes[:, f], frame_wh)
        gl += _pairwise_giou_loss(prediction.boxes.data[:, f], gt.boxes[:, f])
    l1 /= t
    gl /= t
    return weights.lambda1 * cls + weights.lambda2 * l1 + weights.lambda3 * gl


# -- training loss ----------------------------------------------------------------


@dataclass
class LossBreakdown:
    total: Tensor
    value: float
    terms: dict[str, float]
    assignments: list[Assignment] = field(default_factory=list)


def _elementwise_l1_np(pred: np.ndarray, gt: np.ndarray, frame_wh) -> np.ndarray:
    return np.abs(_cxcywh_norm_np(pred, frame_wh) - _cxcywh_norm_np(gt, frame_wh)).mean(axis=-1)


def _elementwise_giou_loss_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.maximum(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0)
    ih = np.maximum(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * (
        np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    )
    return 1.0 - (inter / union - (hull - union) / hull)


def _matched_box_terms(
    pred_boxes: Tensor, gt_boxes: np.ndarray, weights: LossWeights, frame_wh, frames_axis: bool
) -> tuple[Tensor, float, float]:
    """lambda2 * sum(L1) + lambda3 * sum(1 - GIoU) over matched pairs.

    Fused: plain-numpy forward, op-graph backward. Tubelet pairs average the
    box terms over their frame axis first.
    """
    l1_each = _elementwise_l1_np(pred_boxes.data, gt_boxes, frame_wh)
    giou_each = _elementwise_giou_loss_np(pred_boxes.data, gt_boxes)
    if frames_axis:
        l1_each = l1_each.mean(axis=-1)
        giou_each = giou_each.mean(axis=-1)
    l1_value = float(l1_each.sum())
    giou_value = float(giou_each.sum())

    def builder(pb: Tensor) -> Tensor:
        gtt = Tensor(gt_boxes)
        l1 = l1_box_loss(pb, gtt, frame_wh)
        gl = giou_loss(pb, gtt)
        if frames_axis:
            l1 = ad.tmean(l1, axis=-1)
            gl = ad.tmean(gl, axis=-1)
        return ad.add(
            ad.mul(ad.tsum(l1), weights.lambda2), ad.mul(ad.tsum(gl), weights.lambda3)
        )

    combined = ad.lazy_composite(
        weights.lambda2 * l1_value + weights.lambda3 * giou_value, (pred_boxes,), builder
    )
    return combined, l1_value, giou_value


def _keyframe_output_loss(prediction, gt, weights, frame_wh, assignment) -> tuple[Tensor, dict]:
    targets = np.where(assignment.sigma >= 0, 0, 1)  # 0 = human, 1 = background
    cls = cross_entropy(prediction.human, targets)
    matched = assignment.matched_predictions()
    total = ad.mul(cls, weights.lambda1)
    terms = {"cls": cls.item()}
    if matched.size:
        gt_idx = assignment.sigma[matched]
        pred_boxes = prediction.boxes[matched]
        box_terms, l1_value, giou_value = _matched_box_terms(
            pred_boxes, gt.boxes[gt_idx], weights, frame_wh, frames_axis=False
        )
        act = binary_cross_entropy(prediction.action[matched], gt.actions[gt_idx])
        total = ad.add(ad.add(total, box_terms), ad.mul(act, weights.lambda4))
        terms.update(l1=l1_value, giou=giou_value, act=act.item())
    return total, terms


def focal_loss_rows(probs: Tensor, targets: np.ndarray, alphas: np.ndarray,
                    gamma: float = FOCAL_GAMMA) -> Tensor:
    """Sum of per-row focal terms with per-row alpha weights."""
    probs = astensor(probs)
    n = probs.dims[0]
    pt = ad.clip(probs[np.arange(n), np.asarray(targets, dtype=np.int64)], EPS_PROB, 1.0)
    weight = ad.power(ad.sub(1.0, pt), gamma) if gamma != 0.0 else Tensor(np.ones(n))
    per_row = ad.mul(ad.mul(weight, ad.neg(ad.log(pt))), Tensor(alphas))
    return ad.tsum(per_row)


def _tubelet_output_loss(prediction, gt, weights, frame_wh, assignment) -> tuple[Tensor, dict]:
    n = prediction.class_probs.dims[0]
    background = prediction.class_probs.dims[1] - 1
    targets = np.where(
        assignment.sigma >= 0,
        gt.labels[assignment.sigma] if gt.count else background,
        background,
    )
    alphas = np.where(assignment.sigma >= 0, FOCAL_ALPHA, 1.0)
    cls = focal_loss_rows(prediction.class_probs, targets, alphas)
    matched = assignment.matched_predictions()
    total = ad.mul(cls, weights.lambda1)
    terms = {"cls": cls.item()}
    if matched.size:
        gt_idx = assignment.sigma[matched]
        pred_boxes = prediction.boxes[matched]  # [K, T, 4]
        box_terms, l1_value, giou_value = _matched_box_terms(
            pred_boxes, gt.boxes[gt_idx], weights, frame_wh, frames_axis=True
        )
        total = ad.add(total, box_terms)
        terms.update(l1=l1_value, giou=giou_value)
    return total, terms


def training_loss(outputs, gt, weights: LossWeights, frame_wh) -> LossBreakdown:
    """Matched set loss summed over every intermediate decoder output.

    ``outputs`` is the list of per-module detection outputs; each gets a
    fresh matching against the same ground truth.
    """
    total = None
    term_values: dict[str, float] = {}
    assignments = []
    for prediction in outputs:
        if prediction.mode == "keyframe":
            cost = matching_cost_keyframe(prediction, gt, weights, frame_wh)
            assignment = match(cost)
            out_total, terms = _keyframe_output_loss(prediction, gt, weights, frame_wh, assignment)
        else:
            cost = matching_cost_tubelet(prediction, gt, weights, frame_wh)
            assignment = match(cost)
            out_total, terms = _tubelet_output_loss(prediction, gt, weights, frame_wh, assignment)
        assignments.append(assignment)
        total = out_total if total is None else ad.add(total, out_total)
        for name, value in terms.items():
            term_values[name] = term_values.get(name, 0.0) + value
    return LossBreakdown(
        total=total,
        value=total.item(),
        terms=term_values,
        assignments=assignments,
    )
