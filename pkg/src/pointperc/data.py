"""Synthetic scene generation and on-disk formats.

Scenes are desk-scale driving-like layouts: a flat ground plane, a few
vertical walls, and a handful of oriented boxes (cars, pedestrians,
cyclists) with points sampled on their surfaces. Everything is a pure
function of the config and the rng, so a seed pins a scene bit for bit.

File formats: points as little-endian float32 quadruples (x, y, z,
intensity), labels as little-endian uint32, boxes as plain text rows.
"""

import os
from dataclasses import dataclass

import numpy as np

from .boxes import Box3D, wrap_yaw
from .cloud import PointCloud

SEMANTIC_CLASSES = ("ground", "manmade", "car", "pedestrian", "cyclist")
THING_SEMANTIC_IDS = (2, 3, 4)
# class-correlated intensity means, indexed by semantic id
_INTENSITY_BASE = np.array([0.1, 0.3, 0.5, 0.7, 0.9])

# per det class: (low, high) for each of dx, dy, dz
_SIZE_RANGES = (
    ((3.5, 5.0), (1.6, 2.0), (1.4, 1.8)),  # car
    ((0.4, 0.8), (0.4, 0.8), (1.5, 1.9)),  # pedestrian
    ((1.5, 2.0), (0.5, 0.8), (1.4, 1.8)),  # cyclist
)
_BOX_LIFT = 0.1  # box bottoms float above the ground plane


class FormatError(ValueError):
    """Corrupt or inconsistent on-disk data."""


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    range_min: tuple = (-16.0, -16.0, -1.0)
    range_max: tuple = (16.0, 16.0, 5.0)
    ground_density: float = 1.5  # points per square meter
    wall_count: tuple = (1, 3)
    wall_points: int = 150
    object_count: tuple = (2, 6)
    points_per_object: int = 120
    noise_sigma: float = 0.02
    intensity_noise: float = 0.02

    def __post_init__(self):
        lo, hi = np.asarray(self.range_min, float), np.asarray(self.range_max, float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise SynthError("range extents must be 3-vectors")
        if not np.all(hi > lo):
            raise SynthError(f"invalid extents: min {tuple(lo)} max {tuple(hi)}")
        if self.ground_density <= 0:
            raise SynthError("ground density must be positive")
        if self.noise_sigma < 0 or self.intensity_noise < 0:
            raise SynthError("noise levels must be non-negative")
        for name, rng_pair in (("wall_count", self.wall_count),
                               ("object_count", self.object_count)):
            a, b = rng_pair
            if not (0 <= a <= b):
                raise SynthError(f"{name} range must satisfy 0 <= lo <= hi")
        if self.points_per_object < 1 or self.wall_points < 1:
            raise SynthError("per-surface point counts must be >= 1")


@dataclass
class SceneSample:
    cloud: PointCloud  # feats = intensity column, labels = semantic ids
    boxes: list  # Box3D with class_id in detection space (0=car, ...)


def _sample_box_surface(box: Box3D, n: int, rng) -> np.ndarray:
    """Uniform points on the 6 faces, weighted by face area."""
    dx, dy, dz = box.size
    areas = np.array([dy * dz, dy * dz, dx * dz, dx * dz, dx * dy, dx * dy])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.empty((n, 3))
    for f in range(6):
        m = faces == f
        if not m.any():
            continue
        axis, sign = divmod(f, 2)
        fixed = (0.5 if sign == 0 else -0.5)
        if axis == 0:
            local[m] = np.column_stack([np.full(m.sum(), fixed * dx), u[m] * dy, v[m] * dz])
        elif axis == 1:
            local[m] = np.column_stack([u[m] * dx, np.full(m.sum(), fixed * dy), v[m] * dz])
        else:
            local[m] = np.column_stack([u[m] * dx, v[m] * dy, np.full(m.sum(), fixed * dz)])
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1]
    world[:, 1] = s * local[:, 0] + c * local[:, 1]
    world[:, 2] = local[:, 2]
    return world + box.center


def _point_segment_distance(p, a, b) -> float:
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def synth_scene(cfg: SynthConfig, rng: np.random.Generator) -> SceneSample:
    lo = np.asarray(cfg.range_min, float)
    hi = np.asarray(cfg.range_max, float)
    extent = hi - lo

    # ground plane at z = 0
    n_ground = max(1, int(round(extent[0] * extent[1] * cfg.ground_density)))
    ground = np.column_stack([
        rng.uniform(lo[0], hi[0], n_ground),
        rng.uniform(lo[1], hi[1], n_ground),
        np.zeros(n_ground),
    ])

    # walls: vertical strips along random segments
    walls = []
    wall_segs = []
    n_walls = int(rng.integers(cfg.wall_count[0], cfg.wall_count[1] + 1))
    for _ in range(n_walls):
        center = rng.uniform(lo[:2] * 0.8, hi[:2] * 0.8)
        angle = rng.uniform(0, np.pi)
        length = rng.uniform(4.0, 10.0)
        height = rng.uniform(1.5, 3.0)
        d = np.array([np.cos(angle), np.sin(angle)])
        a2, b2 = center - d * length / 2, center + d * length / 2
        t = rng.uniform(0, 1, cfg.wall_points)
        z = rng.uniform(0, height, cfg.wall_points)
        xy = a2 + t[:, None] * (b2 - a2)
        walls.append(np.column_stack([xy, z]))
        wall_segs.append((a2, b2))

    # oriented object boxes, rejection-sampled to stay disjoint
    boxes = []
    n_obj = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    for _ in range(n_obj):
        for _attempt in range(100):
            det_class = int(rng.integers(0, len(_SIZE_RANGES)))
            size = np.array([rng.uniform(a, b) for a, b in _SIZE_RANGES[det_class]])
            margin = np.linalg.norm(size[:2]) / 2 + 0.5
            cx = rng.uniform(lo[0] + margin, hi[0] - margin)
            cy = rng.uniform(lo[1] + margin, hi[1] - margin)
            yaw = wrap_yaw(rng.uniform(-np.pi, np.pi))
            box = Box3D([cx, cy, _BOX_LIFT + size[2] / 2], size, yaw,
                        class_id=det_class)
            clear = all(
                np.linalg.norm(box.center[:2] - b.center[:2])
                > (np.linalg.norm(size[:2]) + np.linalg.norm(b.size[:2])) / 2 + 0.5
                for b in boxes
            ) and all(
                _point_segment_distance(box.center[:2], a2, b2) > margin + 0.3
                for a2, b2 in wall_segs
            )
            if clear:
                boxes.append(box)
                break

    parts = [ground] + walls
    labels = [np.zeros(n_ground, dtype=np.int64)]
    labels += [np.ones(len(w), dtype=np.int64) for w in walls]
    for box in boxes:
        parts.append(_sample_box_surface(box, cfg.points_per_object, rng))
        labels.append(np.full(cfg.points_per_object,
                              THING_SEMANTIC_IDS[box.class_id], dtype=np.int64))
    coords = np.concatenate(parts)
    sem = np.concatenate(labels)

    if cfg.noise_sigma > 0:
        coords = coords + rng.normal(0, cfg.noise_sigma, coords.shape)

    # membership wins over origin: anything inside a box gets its class
    for box in boxes:
        inside = box.contains(coords).astype(bool)
        sem[inside] = THING_SEMANTIC_IDS[box.class_id]

    intensity = _INTENSITY_BASE[sem]
    if cfg.intensity_noise > 0:
        intensity = intensity + rng.normal(0, cfg.intensity_noise, len(sem))

    cloud = PointCloud(coords, intensity[:, None], labels=sem)
    return SceneSample(cloud, boxes)


# ---------------------------------------------------------------------------
# binary / text codecs


def save_points(path, cloud: PointCloud) -> None:
    rows = np.column_stack([cloud.coords, cloud.feats[:, 0]]).astype("<f4")
    rows.tofile(path)


def load_points(path) -> PointCloud:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % 4 != 0:
        raise FormatError(f"{path}: byte length is not a whole number of points")
    rows = raw.reshape(-1, 4).astype(np.float64)
    return PointCloud(rows[:, :3], rows[:, 3:4])


def save_labels(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.size and (arr.min() < 0 or arr.max() > np.iinfo("<u4").max):
        raise FormatError("labels out of uint32 range")
    arr.astype("<u4").tofile(path)


def load_labels(path) -> np.ndarray:
    return np.fromfile(path, dtype="<u4").astype(np.int64)


def save_boxes(path, boxes: list) -> None:
    with open(path, "w") as fh:
        for b in boxes:
            fields = [*b.center, *b.size, b.yaw]
            fh.write(" ".join(f"{v:.17g}" for v in fields) + f" {int(b.class_id)}\n")


def load_boxes(path) -> list:
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(v) for v in parts[:7]]
                cls = int(parts[7])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            boxes.append(Box3D(vals[0:3], vals[3:6], vals[6], class_id=cls))
    return boxes


# ---------------------------------------------------------------------------
# dataset directory layout


def _paths(root, index: int):
    stem = f"{index:04d}"
    return (os.path.join(root, "points", stem + ".bin"),
            os.path.join(root, "labels", stem + ".label"),
            os.path.join(root, "boxes", stem + ".txt"))


def save_scene(root, index: int, scene: SceneSample) -> None:
    for sub in ("points", "labels", "boxes"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    p_path, l_path, b_path = _paths(root, index)
    save_points(p_path, scene.cloud)
    save_labels(l_path, scene.cloud.labels)
    save_boxes(b_path, scene.boxes)


def load_scene(root, index: int) -> SceneSample:
    p_path, l_path, b_path = _paths(root, index)
    cloud = load_points(p_path)
    labels = load_labels(l_path)
    if len(labels) != len(cloud):
        raise FormatError(
            f"{l_path}: {len(labels)} labels for {len(cloud)} points in {p_path}")
    boxes = load_boxes(b_path)
    return SceneSample(PointCloud(cloud.coords, cloud.feats, labels=labels), boxes)


def scene_indices(root) -> list:
    pdir = os.path.join(root, "points")
    if not os.path.isdir(pdir):
        raise FormatError(f"{pdir}: not a dataset directory")
    out = []
    for name in sorted(os.listdir(pdir)):
        if name.endswith(".bin"):
            try:
                out.append(int(name[:-4]))
            except ValueError:
                raise FormatError(f"{pdir}/{name}: unrecognized scene file name") from None
    return out
