"""Hungarian assignment between detection queries and ground-truth boxes,
plus the per-query target construction the detection losses consume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Box3D


def _hungarian_square_rows(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path assignment for n_rows <= n_cols.

    Returns col index per row. Potentials u/v keep reduced costs
    non-negative; each row is inserted by growing an alternating tree until
    a free column is found (the classic O(n^2 m) formulation).
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    # way[j] = previous column on the alternating path to column j
    p = np.zeros(m + 1, dtype=np.int64)  # p[j] = row matched to column j (1-based)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] > 0:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col


def hungarian_match(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost one-to-one assignment of min(Q, G) pairs.

    Args:
        cost: (Q, G) finite cost matrix.

    Returns:
        Pairs (row, col) sorted by row index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if cost.size == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    q, g = cost.shape
    if q <= g:
        cols = _hungarian_square_rows(cost)
        pairs = [(i, int(c)) for i, c in enumerate(cols)]
    else:
        rows = _hungarian_square_rows(cost.T)
        pairs = sorted((int(r), j) for j, r in enumerate(rows))
    return pairs


def assignment_cost(cost: np.ndarray, pairs) -> float:
    rows = np.array([p[0] for p in pairs], dtype=np.int64)
    cols = np.array([p[1] for p in pairs], dtype=np.int64)
    return float(np.sum(cost[rows, cols]))


@dataclass
class DetectionTargets:
    """Per-query supervision produced by matching predictions to GT boxes."""

    class_target: np.ndarray      # (Q,) int, background = num_det_classes
    objectness: np.ndarray        # (Q,) float 0/1
    center_offset: np.ndarray     # (Q, 3) gt center - reference point
    log_size: np.ndarray          # (Q, 3)
    yaw_sincos: np.ndarray        # (Q, 2)
    matched: np.ndarray           # (Q,) bool
    pairs: list                   # (query, gt) index pairs


def match_cost_matrix(
    class_probs: np.ndarray,
    pred_centers: np.ndarray,
    pred_sizes: np.ndarray,
    gt_boxes: list[Box3D],
    thing_class_to_det: dict[int, int],
    lambda_cls: float = 1.0,
    lambda_box: float = 1.0,
) -> np.ndarray:
    """Query-to-GT cost: lambda_cls*(1 - p_class) + lambda_box*(L1 center + L1 size)."""
    q = class_probs.shape[0]
    g = len(gt_boxes)
    cost = np.zeros((q, g))
    for j, box in enumerate(gt_boxes):
        det_class = thing_class_to_det[box.class_id]
        cls_term = 1.0 - class_probs[:, det_class]
        center_term = np.abs(pred_centers - box.center).sum(axis=1)
        size_term = np.abs(pred_sizes - box.size).sum(axis=1)
        cost[:, j] = lambda_cls * cls_term + lambda_box * (center_term + size_term)
    return cost


def detection_targets(
    class_probs: np.ndarray,
    pred_centers: np.ndarray,
    pred_sizes: np.ndarray,
    ref_points: np.ndarray,
    gt_boxes: list[Box3D],
    num_det_classes: int,
    thing_class_to_det: dict[int, int],
    lambda_cls: float = 1.0,
    lambda_box: float = 1.0,
    fixed_tail: int = 0,
) -> DetectionTargets:
    """Hungarian-assign queries to boxes and emit regression targets.

    Matched queries carry the box class, objectness 1, the center offset
    from their reference point, log sizes, and yaw as (sin, cos). Unmatched
    queries become background with objectness 0 and zeroed box targets
    (those rows are masked out of the regression losses).

    fixed_tail > 0 marks the last fixed_tail queries as training-only rows
    seeded from the ground truth, one per box in order. Those rows bypass
    the assignment problem and are pinned to their source box; the
    Hungarian runs over the leading rows only, so the regular queries keep
    competing for positive supervision among themselves.
    """
    q = class_probs.shape[0]
    if fixed_tail and fixed_tail != len(gt_boxes):
        raise ValueError(
            f"fixed_tail={fixed_tail} but {len(gt_boxes)} ground truth boxes")
    class_target = np.full(q, num_det_classes, dtype=np.int64)
    objectness = np.zeros(q)
    center_offset = np.zeros((q, 3))
    log_size = np.zeros((q, 3))
    yaw_sincos = np.zeros((q, 2))
    matched = np.zeros(q, dtype=bool)
    pairs: list[tuple[int, int]] = []
    if gt_boxes:
        n_main = q - fixed_tail
        cost = match_cost_matrix(
            class_probs[:n_main], pred_centers[:n_main], pred_sizes[:n_main],
            gt_boxes, thing_class_to_det, lambda_cls, lambda_box,
        )
        pairs = hungarian_match(cost)
        pairs += [(n_main + j, j) for j in range(fixed_tail)]
        for qi, gj in pairs:
            box = gt_boxes[gj]
            class_target[qi] = thing_class_to_det[box.class_id]
            objectness[qi] = 1.0
            center_offset[qi] = box.center - ref_points[qi]
            log_size[qi] = np.log(box.size)
            yaw_sincos[qi] = (np.sin(box.yaw), np.cos(box.yaw))
            matched[qi] = True
    return DetectionTargets(
        class_target, objectness, center_offset, log_size, yaw_sincos, matched, pairs
    )
