"""Evaluation metrics: semantic confusion/IoU, 40-point average precision,
window-graph connectivity, and the neighbor-search micro-benchmark.

Everything here is pure computation over numpy arrays and Box3D lists;
rendering to CSV text lives in the format_* helpers so callers control
file placement.
"""

import time
from dataclasses import dataclass

import numpy as np

from .boxes import Box3D, bev_rotated_iou
from .cloud import PointCloud, VoxelGrid, knn_query, voxel_query


class MetricsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# semantic segmentation


class ConfusionMatrix:
    """Rows = ground truth class, columns = predicted class."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise MetricsError("need at least one class")
        self.num_classes = num_classes
        self.mat = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred, dtype=np.int64).ravel()
        gt = np.asarray(gt, dtype=np.int64).ravel()
        if pred.shape != gt.shape:
            raise MetricsError("prediction/label length mismatch")
        k = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= k or gt.min() < 0 or gt.max() >= k):
            raise MetricsError(f"class id out of range for {k} classes")
        flat = gt * k + pred
        self.mat += np.bincount(flat, minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionMatrix") -> None:
        self.mat += other.mat


def miou(cm: ConfusionMatrix):
    """Per-class intersection over union and their mean.

    IoU_c = TP / (TP + FP + FN). Classes absent from both the labels and
    the predictions get nan and are excluded from the mean.
    """
    m = cm.mat.astype(np.float64)
    tp = np.diag(m)
    fp = m.sum(axis=0) - tp
    fn = m.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    if not present.any():
        raise MetricsError("confusion matrix is empty")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[present] = tp[present] / denom[present]
    return per_class, float(per_class[present].mean())


# ---------------------------------------------------------------------------
# detection AP


@dataclass
class CenterDistanceMatcher:
    """Match when BEV center distance is at most max_dist; closer is better."""

    max_dist: float = 2.0

    def pair_quality(self, pred: Box3D, gt: Box3D):
        d = float(np.hypot(*(pred.center[:2] - gt.center[:2])))
        return -d if d <= self.max_dist else None


@dataclass
class IouMatcher:
    """Match when BEV rotated IoU reaches min_iou; higher is better."""

    min_iou: float = 0.5

    def pair_quality(self, pred: Box3D, gt: Box3D):
        v = bev_rotated_iou(pred, gt)
        return v if v >= self.min_iou else None


def _greedy_match(preds: list, gts: list, matcher):
    """Score-descending greedy assignment, each ground truth box used once.

    preds/gts are lists of per-scene Box3D lists. Returns (records, n_gt)
    where records maps class_id -> list of (score, is_true_positive) and
    n_gt maps class_id -> ground truth count.
    """
    if len(preds) != len(gts):
        raise MetricsError("prediction/ground-truth scene count mismatch")
    records: dict = {}
    n_gt: dict = {}
    for scene_gts in gts:
        for g in scene_gts:
            n_gt[g.class_id] = n_gt.get(g.class_id, 0) + 1
    order = sorted(
        ((p, si) for si, scene in enumerate(preds) for p in scene),
        key=lambda t: -t[0].score)
    used: set = set()
    for p, si in order:
        best, best_q = None, None
        for gi, g in enumerate(gts[si]):
            if g.class_id != p.class_id or (si, gi) in used:
                continue
            q = matcher.pair_quality(p, g)
            if q is not None and (best_q is None or q > best_q):
                best, best_q = gi, q
        if best is not None:
            used.add((si, best))
        records.setdefault(p.class_id, []).append((p.score, best is not None))
    return records, n_gt


def _ap_from_records(records: list, n_gt: int) -> float:
    """40-recall-point interpolated AP for one class."""
    if n_gt == 0:
        raise MetricsError("class has no ground truth")
    if not records:
        return 0.0
    flags = np.array([tp for _, tp in records], dtype=np.float64)
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(1.0 - flags)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    total = 0.0
    for r in np.arange(1, 41) / 40.0:
        at_least = precision[recall >= r - 1e-12]
        total += float(at_least.max()) if at_least.size else 0.0
    return total / 40.0


def average_precision(preds: list, gts: list, matcher=None):
    """Per-class AP dict and their mean over classes with ground truth.

    preds/gts are per-scene lists of Box3D; prediction scores drive the
    sweep. Classes that never occur in the ground truth are skipped (their
    predictions count as nothing); no ground truth at all is an error.
    """
    if matcher is None:
        matcher = CenterDistanceMatcher()
    records, n_gt = _greedy_match(preds, gts, matcher)
    if not n_gt:
        raise MetricsError("no ground truth boxes in any scene")
    per_class = {c: _ap_from_records(records.get(c, []), n) for c, n in sorted(n_gt.items())}
    return per_class, float(np.mean(list(per_class.values())))


def detection_recall(preds: list, gts: list, matcher=None) -> float:
    """Fraction of all ground-truth boxes matched by some prediction."""
    if matcher is None:
        matcher = CenterDistanceMatcher()
    records, n_gt = _greedy_match(preds, gts, matcher)
    total = sum(n_gt.values())
    if total == 0:
        raise MetricsError("no ground truth boxes in any scene")
    matched = sum(tp for recs in records.values() for _, tp in recs)
    return matched / total


# ---------------------------------------------------------------------------
# window-graph connectivity


@dataclass
class ConnectivityReport:
    sample_indices: np.ndarray
    hops: np.ndarray  # per sample; inf when the graph is not fully reachable

    @property
    def sample_size(self) -> int:
        return len(self.sample_indices)

    @property
    def hops_min(self) -> float:
        return float(self.hops.min())

    @property
    def hops_mean(self) -> float:
        return float(self.hops.mean())

    @property
    def hops_max(self) -> float:
        return float(self.hops.max())


def _reader_lists(windows, n: int):
    """CSR of the reversed window graph: for each point, who reads it.

    A point's feature propagates one attention layer per reverse edge, so
    spread runs opposite to the gather direction of the windows."""
    src = windows.idx
    dst = windows.seg()
    order = np.argsort(src, kind="stable")
    src_sorted = src[order]
    counts = np.bincount(src_sorted, minlength=n)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    return offsets, dst[order]


def _bfs_hops(offsets, readers, start: int, n: int) -> float:
    """Breadth-first levels until every point is visited; inf if stuck."""
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    frontier = np.array([start], dtype=np.int64)
    hops = 0
    remaining = n - 1
    while remaining > 0:
        nxt = []
        for i in frontier:
            w = readers[offsets[i]:offsets[i + 1]]
            fresh = w[~visited[w]]
            if fresh.size:
                visited[fresh] = True
                nxt.append(np.unique(fresh))
        if not nxt:
            return float("inf")
        frontier = np.concatenate(nxt)
        remaining -= len(frontier)
        hops += 1
    return float(hops)


def connectivity(cloud: PointCloud, windows, samples: int = 20, rng=None) -> ConnectivityReport:
    """Hop counts for a sampled point's feature to reach the whole cloud
    through the directed neighbor-window graph."""
    n = len(cloud)
    if n < 2:
        raise MetricsError("connectivity needs at least two points")
    if len(windows) != n:
        raise MetricsError("windows must cover every point")
    if rng is None:
        rng = np.random.default_rng(0)
    picks = rng.choice(n, size=min(samples, n), replace=False)
    offsets, readers = _reader_lists(windows, n)
    hops = np.array([_bfs_hops(offsets, readers, int(i), n) for i in picks])
    return ConnectivityReport(np.asarray(picks, dtype=np.int64), hops)


# ---------------------------------------------------------------------------
# neighbor-search benchmark


def _exact_radius_sets(coords: np.ndarray, queries: np.ndarray, radius: float) -> list:
    out = []
    for q in queries:
        d2 = ((coords - coords[q]) ** 2).sum(axis=1)
        out.append(set(np.flatnonzero(d2 <= radius * radius).tolist()))
    return out


def bench_search(n_points: int, window_size: int, radius: float, method: str,
                 repeats: int = 3, n_queries: int = 100, check_queries: int = 20,
                 rng=None) -> dict:
    """Median per-query search time plus a correctness verdict.

    The cloud is uniform with density 2 points/m^3. vq windows must be a
    subset of the exact in-radius set (equal when that set fits the window);
    knn windows must be exactly the k nearest by (distance, index).
    """
    if method not in ("vq", "knn"):
        raise MetricsError(f"unknown search method {method!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    side = (n_points / 2.0) ** (1.0 / 3.0)
    coords = rng.uniform(0.0, side, size=(n_points, 3))
    cloud = PointCloud(coords, np.zeros((n_points, 1)))
    queries = rng.choice(n_points, size=min(n_queries, n_points), replace=False)

    grid = VoxelGrid(coords, radius) if method == "vq" else None
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        if method == "vq":
            windows = voxel_query(grid, cloud, queries, radius, window_size)
        else:
            windows = knn_query(cloud, queries, min(window_size, n_points))
        times.append((time.perf_counter() - t0) / len(queries))
    median_us = float(np.median(times) * 1e6)

    check = queries[:min(check_queries, len(queries))]
    correct = True
    if method == "vq":
        exact = _exact_radius_sets(coords, check, radius)
        for i, full in enumerate(exact):
            got = set(windows.window(i).tolist())
            if not got <= full or (len(full) <= window_size and got != full):
                correct = False
    else:
        k = min(window_size, n_points)
        for i, q in enumerate(check):
            d2 = ((coords - coords[q]) ** 2).sum(axis=1)
            best = np.lexsort((np.arange(n_points), d2))[:k]
            if set(windows.window(i).tolist()) != set(best.tolist()):
                correct = False
    return {"method": method, "N": n_points, "M": window_size,
            "median_us": median_us, "correct": correct}


# ---------------------------------------------------------------------------
# CSV rendering


def format_iou_csv(per_class: np.ndarray, mean: float, class_names) -> str:
    lines = ["class,iou"]
    for name, v in zip(class_names, per_class):
        lines.append(f"{name}," + ("" if np.isnan(v) else f"{v:.17g}"))
    lines.append(f"mean,{mean:.17g}")
    return "\n".join(lines) + "\n"


def format_ap_csv(per_class: dict, mean: float, class_names) -> str:
    lines = ["class,ap"]
    for cid in sorted(per_class):
        name = class_names[cid] if 0 <= cid < len(class_names) else str(cid)
        lines.append(f"{name},{per_class[cid]:.17g}")
    lines.append(f"mean,{mean:.17g}")
    return "\n".join(lines) + "\n"


def format_connectivity_csv(report: ConnectivityReport) -> str:
    lines = ["kind,point,hops"]
    for idx, h in zip(report.sample_indices, report.hops):
        lines.append(f"sample,{idx},{h:.17g}")
    lines.append(f"min,,{report.hops_min:.17g}")
    lines.append(f"mean,,{report.hops_mean:.17g}")
    lines.append(f"max,,{report.hops_max:.17g}")
    return "\n".join(lines) + "\n"


def format_bench_csv(rows: list) -> str:
    lines = ["method,N,M,median_us,correct"]
    for r in rows:
        lines.append(f"{r['method']},{r['N']},{r['M']},{r['median_us']:.17g},"
                     f"{'pass' if r['correct'] else 'fail'}")
    return "\n".join(lines) + "\n"
