"""Independent brute-force oracles, kept deliberately naive.

Everything here recomputes from first principles with scalar loops so the
production implementations have something dumb and trustworthy to disagree
with. None of it imports the code under test beyond plain data containers.
"""

import math
from itertools import permutations

import numpy as np


def trilinear_oracle(volume, t, x, y, z, stride, z_min):
    """Scalar-loop trilinear read of volume[D, T, S, H, W] at one point.

    Frame-pixel coordinates, pixel-center alignment (g = x/stride - 0.5),
    border clamping on the three continuous axes.
    """
    d, _, s, h, w = volume.shape
    gx = min(max(x / stride - 0.5, 0.0), w - 1.0)
    gy = min(max(y / stride - 0.5, 0.0), h - 1.0)
    gz = min(max(z - z_min, 0.0), s - 1.0)
    x0 = min(int(math.floor(gx)), w - 1)
    y0 = min(int(math.floor(gy)), h - 1)
    z0 = min(int(math.floor(gz)), s - 1)
    x1, y1, z1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1), min(z0 + 1, s - 1)
    fx, fy, fz = gx - x0, gy - y0, gz - z0
    out = np.zeros(d)
    for ci in range(d):
        acc = 0.0
        for zi, wz in ((z0, 1 - fz), (z1, fz)):
            for yi, wy in ((y0, 1 - fy), (y1, fy)):
                for xi, wx in ((x0, 1 - fx), (x1, fx)):
                    acc += wz * wy * wx * volume[ci, t, zi, yi, xi]
        out[ci] = acc
    return out


def exhaustive_min_assignment(cost):
    """Exact minimum-cost injective assignment by enumerating permutations.

    Returns (best_total, best_pairs) where ties prefer the lexicographically
    smallest sorted pair list. cost is [N, K] with K <= N.
    """
    n, k = cost.shape
    if k == 0:
        return 0.0, []
    best_total, best_pairs = None, None
    for preds in permutations(range(n), k):
        total = math.fsum(cost[preds[j], j] for j in range(k))
        pairs = sorted((preds[j], j) for j in range(k))
        if (
            best_total is None
            or total < best_total
            or (total == best_total and pairs < best_pairs)
        ):
            best_total, best_pairs = total, pairs
    return best_total, best_pairs


def prefix_ap_oracle(ranked_is_tp, total_gt):
    """All-point interpolated AP by brute force over ranking prefixes.

    For each prefix, precision and recall are recounted from scratch; the
    precision envelope is a naive max-over-suffix; the integral walks every
    distinct recall step.
    """
    if total_gt == 0 or not ranked_is_tp:
        return 0.0
    n = len(ranked_is_tp)
    precisions, recalls = [], []
    for k in range(1, n + 1):
        tp = sum(1 for flag in ranked_is_tp[:k] if flag)
        precisions.append(tp / k)
        recalls.append(tp / total_gt)
    area = 0.0
    prev_recall = 0.0
    for k in range(n):
        if recalls[k] > prev_recall:
            envelope = max(precisions[j] for j in range(k, n))
            area += (recalls[k] - prev_recall) * envelope
            prev_recall = recalls[k]
    return area


def scalar_attention_oracle(q, k, v, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Multi-head attention recomputed with explicit per-head loops."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    dim = q.shape[-1]
    dh = dim // heads
    qp = q @ wq + bq
    kp = k @ wk + bk
    vp = v @ wv + bv
    nq, nk = qp.shape[0], kp.shape[0]
    merged = np.zeros((nq, dim))
    for h in range(heads):
        qs = qp[:, h * dh : (h + 1) * dh]
        ks = kp[:, h * dh : (h + 1) * dh]
        vs = vp[:, h * dh : (h + 1) * dh]
        for i in range(nq):
            scores = np.array(
                [sum(qs[i, c] * ks[j, c] for c in range(dh)) / math.sqrt(dh) for j in range(nk)]
            )
            e = np.exp(scores - scores.max())
            weights = e / e.sum()
            for c in range(dh):
                merged[i, h * dh + c] = sum(weights[j] * vs[j, c] for j in range(nk))
    return merged @ wo + bo


def iou_2d_oracle(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0
