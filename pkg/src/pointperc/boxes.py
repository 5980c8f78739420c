"""Oriented 3D boxes, rotated birds-eye-view IoU, and non-maximum suppression.

IoU intersects the two yaw-rotated ground-plane rectangles with
Sutherland-Hodgman polygon clipping, so it is exact up to floating point
rather than sampled. Heights are ignored on purpose: suppression and
matching for driving scenes conventionally happen in BEV.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AREA_EPS = 1e-12


def wrap_yaw(yaw: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = float(np.remainder(yaw + np.pi, 2.0 * np.pi) - np.pi)
    return np.pi if w == -np.pi else w


@dataclass
class Box3D:
    """Oriented box: center (m), size (dx, dy, dz in m), yaw about +z."""

    center: np.ndarray
    size: np.ndarray
    yaw: float
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.yaw = wrap_yaw(float(self.yaw))

    def bev_corners(self) -> np.ndarray:
        """Ground-plane corners (4, 2), counterclockwise."""
        dx, dy = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def bev_area(self) -> float:
        return float(self.size[0] * self.size[1])

    def contains(self, points: np.ndarray, eps: float = 1e-9) -> np.ndarray:
        """Inclusive membership test via the inverse rigid transform.

        A small tolerance keeps surface-sampled points inside their own box
        despite the rotate/unrotate round trip.
        """
        points = np.atleast_2d(points)
        rel = points - self.center
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        local = np.stack(
            [rel[:, 0] * c + rel[:, 1] * s, -rel[:, 0] * s + rel[:, 1] * c, rel[:, 2]],
            axis=1,
        )
        return (np.abs(local) <= self.size / 2.0 + eps).all(axis=1)


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a 2D polygon given as an (n, 2) vertex array."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip `subject` by each edge of convex `clipper`.

    Both polygons must wind counterclockwise.
    """
    output = list(subject)
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        a = clipper[i]
        b = clipper[(i + 1) % n]
        edge = b - a
        input_pts = output
        output = []

        def inside(p):
            # left of (or on) the directed edge a->b
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0.0

        def intersect(p, q):
            d = q - p
            denom = edge[0] * d[1] - edge[1] * d[0]
            t = (edge[0] * (a[1] - p[1]) - edge[1] * (a[0] - p[0])) / denom
            return p + t * d

        prev = input_pts[-1]
        prev_in = inside(prev)
        for cur in input_pts:
            cur_in = inside(cur)
            if cur_in:
                if not prev_in:
                    output.append(intersect(prev, cur))
                output.append(cur)
            elif prev_in:
                output.append(intersect(prev, cur))
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.empty((0, 2))


def bev_rotated_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two yaw-rotated BEV rectangles, in [0, 1]."""
    area_a, area_b = a.bev_area(), b.bev_area()
    if area_a <= AREA_EPS or area_b <= AREA_EPS:
        return 0.0
    inter_poly = _clip_polygon(a.bev_corners(), b.bev_corners())
    inter = _polygon_area(inter_poly)
    if inter <= AREA_EPS:
        return 0.0
    union = area_a + area_b - inter
    return float(inter / union)


def nms(
    boxes: list[Box3D], iou_thresh: float = 0.4, score_thresh: float = 0.2
) -> list[Box3D]:
    """Greedy class-agnostic suppression on BEV IoU.

    Boxes at or below `score_thresh` are dropped first; the survivors are
    swept in descending score order (ties to the lower input index) and a
    box is kept only if its IoU with every kept box is <= `iou_thresh`.
    """
    if not boxes:
        return []
    scores = np.array([b.score for b in boxes])
    alive = np.flatnonzero(scores > score_thresh)
    order = alive[np.lexsort((alive, -scores[alive]))]
    kept: list[Box3D] = []
    for i in order:
        cand = boxes[i]
        if all(bev_rotated_iou(cand, k) <= iou_thresh for k in kept):
            kept.append(cand)
    return kept


def points_in_any_box(points: np.ndarray, boxes: list[Box3D]) -> np.ndarray:
    """Binary mask: 1 where a point falls inside at least one box."""
    mask = np.zeros(len(points), dtype=bool)
    for b in boxes:
        mask |= b.contains(points)
    return mask.astype(np.int64)
