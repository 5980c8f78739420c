"""Point-cloud containers plus the geometric kernels everything else runs on:
voxel grid hashing, ball query via breadth-first cell expansion, kNN,
farthest point sampling, and grid pooling/unpooling.

All searches are deterministic: candidate cells are visited in increasing
Chebyshev ring order, cells within a ring in lexicographic key order, and
points within a cell in ascending index order. Windows are stored with
each query's neighbor indices sorted ascending, which makes downstream
attention arithmetic independent of discovery order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import product

import numpy as np

from . import autodiff as ad


class GeometryError(ValueError):
    """Bad geometric input: non-finite coords, out-of-range query, etc."""


@dataclass
class PointCloud:
    """Coordinates in meters plus per-point feature rows.

    Attributes:
        coords: (N, 3) float64 positions.
        feats: (N, C) float64 feature vectors.
        labels: optional (N,) integer semantic class ids.
    """

    coords: np.ndarray
    feats: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        self.feats = np.ascontiguousarray(self.feats, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise GeometryError(f"coords must be (N, 3), got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise GeometryError("coords contain non-finite values")
        if self.feats.shape[0] != self.coords.shape[0]:
            raise GeometryError(
                f"feats rows {self.feats.shape[0]} != coords rows {self.coords.shape[0]}"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.coords.shape[0],):
                raise GeometryError("labels must be one id per point")

    def __len__(self):
        return self.coords.shape[0]


def voxel_keys(coords: np.ndarray, cell_size: float) -> np.ndarray:
    """Integer cell key per point: componentwise floor(coords / cell_size)."""
    if cell_size <= 0:
        raise GeometryError(f"cell_size must be positive, got {cell_size}")
    return np.floor(coords / cell_size).astype(np.int64)


class VoxelGrid:
    """Immutable map from integer cell keys to the point indices they hold.

    Member index lists are ascending. Cell keys are floor(p / cell_size).
    """

    def __init__(self, coords: np.ndarray, cell_size: float):
        coords = np.asarray(coords, dtype=np.float64)
        if not np.isfinite(coords).all():
            raise GeometryError("coords contain non-finite values")
        self.cell_size = float(cell_size)
        keys = voxel_keys(coords, self.cell_size)
        order = np.lexsort((np.arange(len(keys)), keys[:, 2], keys[:, 1], keys[:, 0]))
        sorted_keys = keys[order]
        if len(keys):
            uniq, starts = np.unique(sorted_keys, axis=0, return_index=True)
        else:
            uniq, starts = np.empty((0, 3), np.int64), np.empty(0, np.int64)
        ends = np.append(starts[1:], len(keys))
        self.cells: dict[tuple[int, int, int], np.ndarray] = {
            tuple(k): order[s:e] for k, s, e in zip(uniq.tolist(), starts, ends)
        }

    def __len__(self):
        return len(self.cells)


class NeighborWindows:
    """Ragged per-query neighbor index lists, flattened.

    `idx[offsets[i]:offsets[i+1]]` are query i's neighbors, ascending.
    """

    def __init__(self, idx: np.ndarray, counts: np.ndarray, radius: float, max_size: int):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        self.offsets = np.concatenate(([0], np.cumsum(self.counts)))
        self.radius = float(radius)
        self.max_size = int(max_size)

    def __len__(self):
        return len(self.counts)

    def window(self, i: int) -> np.ndarray:
        return self.idx[self.offsets[i]:self.offsets[i + 1]]

    def seg(self) -> np.ndarray:
        """Query id per flattened entry, sorted ascending by construction."""
        return np.repeat(np.arange(len(self.counts)), self.counts)

    def as_sets(self) -> list[set]:
        return [set(self.window(i).tolist()) for i in range(len(self))]


@lru_cache(maxsize=None)
def _ring_offsets(r: int) -> tuple[tuple[int, int, int], ...]:
    """Cell offsets at Chebyshev distance exactly r, lexicographic order."""
    if r == 0:
        return ((0, 0, 0),)
    return tuple(
        o for o in product(range(-r, r + 1), repeat=3) if max(abs(c) for c in o) == r
    )


def _gather_window(grid, coords, center, radius, budget, skip=-1):
    """Scan cells ring by ring around `center`, collecting in-radius indices."""
    seed = tuple(int(v) for v in np.floor(center / grid.cell_size))
    max_ring = int(np.ceil(radius / grid.cell_size))
    r2 = radius * radius
    out = []
    if budget <= 0:
        return out
    for ring in range(max_ring + 1):
        for off in _ring_offsets(ring):
            members = grid.cells.get((seed[0] + off[0], seed[1] + off[1], seed[2] + off[2]))
            if members is None:
                continue
            diff = coords[members] - center
            hit = members[(diff * diff).sum(axis=1) <= r2]
            for j in hit:
                if j == skip:
                    continue
                out.append(j)
                if len(out) == budget:
                    return out
        if len(out) == budget:
            break
    return out


def voxel_query(
    grid: VoxelGrid, cloud: PointCloud, queries, radius: float, max_size: int
) -> NeighborWindows:
    """Ball query as breadth-first search over voxel cells.

    Expands Chebyshev rings outward from each query's cell, keeps points
    within `radius`, and stops once `max_size` are collected. The query
    point itself always occupies the first slot (it is at distance zero and
    must never be truncated away), so at most max_size - 1 others join it.
    When the in-radius population is <= max_size the result equals an
    exhaustive radius scan.
    """
    if radius <= 0 or max_size < 1:
        raise GeometryError(f"need radius > 0 and max_size >= 1, got {radius}, {max_size}")
    queries = np.asarray(queries, dtype=np.int64)
    n = len(cloud)
    if queries.size and (queries.min() < 0 or queries.max() >= n):
        raise GeometryError(f"query index out of range for {n} points")
    coords = cloud.coords
    idx_parts = []
    counts = np.empty(len(queries), dtype=np.int64)
    for qi, q in enumerate(queries):
        found = _gather_window(grid, coords, coords[q], radius, max_size - 1, skip=q)
        found.append(q)
        w = np.sort(np.asarray(found, dtype=np.int64))
        idx_parts.append(w)
        counts[qi] = len(w)
    idx = np.concatenate(idx_parts) if idx_parts else np.empty(0, np.int64)
    return NeighborWindows(idx, counts, radius, max_size)


def voxel_query_points(
    grid: VoxelGrid, cloud: PointCloud, points: np.ndarray, radius: float, max_size: int
) -> NeighborWindows:
    """Ball query seeded at arbitrary coordinates instead of cloud indices.

    Used for deformable-attention sampling locations. Windows may be empty
    when a seed lands in unoccupied space.
    """
    if radius <= 0 or max_size < 1:
        raise GeometryError(f"need radius > 0 and max_size >= 1, got {radius}, {max_size}")
    points = np.asarray(points, dtype=np.float64)
    coords = cloud.coords
    idx_parts = []
    counts = np.empty(len(points), dtype=np.int64)
    for qi, p in enumerate(points):
        found = _gather_window(grid, coords, p, radius, max_size)
        w = np.sort(np.asarray(found, dtype=np.int64))
        idx_parts.append(w)
        counts[qi] = len(w)
    idx = np.concatenate(idx_parts) if idx_parts else np.empty(0, np.int64)
    return NeighborWindows(idx, counts, radius, max_size)


def knn_query(cloud: PointCloud, queries, k: int) -> NeighborWindows:
    """Exactly k nearest neighbors per query, distance ties to lower index."""
    n = len(cloud)
    if k > n:
        raise GeometryError(f"k={k} exceeds point count {n}")
    if k < 1:
        raise GeometryError("k must be >= 1")
    queries = np.asarray(queries, dtype=np.int64)
    if queries.size and (queries.min() < 0 or queries.max() >= n):
        raise GeometryError(f"query index out of range for {n} points")
    coords = cloud.coords
    idx_parts = []
    for q in queries:
        diff = coords - coords[q]
        d2 = (diff * diff).sum(axis=1)
        order = np.lexsort((np.arange(n), d2))
        idx_parts.append(np.sort(order[:k]))
    idx = np.concatenate(idx_parts) if idx_parts else np.empty(0, np.int64)
    counts = np.full(len(queries), k, dtype=np.int64)
    return NeighborWindows(idx, counts, np.inf, k)


def fps(cloud: PointCloud, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Picks `start` first, then repeatedly the point maximizing the minimum
    distance to everything selected so far. Ties go to the lower index
    (numpy argmax takes the first maximum).
    """
    total = len(cloud)
    if not 1 <= n <= total:
        raise GeometryError(f"need 1 <= n <= {total}, got n={n}")
    if not 0 <= start < total:
        raise GeometryError(f"start index {start} out of range")
    coords = cloud.coords
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    diff = coords - coords[start]
    min_d2 = (diff * diff).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        diff = coords - coords[nxt]
        np.minimum(min_d2, (diff * diff).sum(axis=1), out=min_d2)
    return chosen


@dataclass
class PoolMap:
    """Fine-to-coarse assignment produced by grid pooling."""

    assignment: np.ndarray
    coarse_count: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        present = np.unique(self.assignment)
        if self.assignment.size and not np.array_equal(
            present, np.arange(self.coarse_count)
        ):
            raise GeometryError("pool map must be surjective onto coarse indices")


def pool_structure(coords: np.ndarray, cell_size: float) -> tuple[np.ndarray, PoolMap]:
    """Mean coordinate per occupied cell plus the fine->coarse assignment.

    Coarse rows are ordered by lexicographic cell key, so the layout is a
    pure function of the point set.
    """
    keys = voxel_keys(coords, cell_size)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    n_coarse = len(uniq)
    sums = np.zeros((n_coarse, 3))
    np.add.at(sums, inverse, coords)
    counts = np.bincount(inverse, minlength=n_coarse)
    coarse_coords = sums / counts[:, None]
    return coarse_coords, PoolMap(inverse, n_coarse)


def grid_pool(cloud: PointCloud, cell_size: float) -> tuple[PointCloud, PoolMap]:
    """Downsample: mean-pool coordinates, max-pool features per cell."""
    coarse_coords, pmap = pool_structure(cloud.coords, cell_size)
    coarse_feats, _ = ad.segment_max_forward(cloud.feats, pmap.assignment, pmap.coarse_count)
    return PointCloud(coarse_coords, coarse_feats), pmap


def grid_unpool(coarse_feats: ad.DiffArray, pmap: PoolMap) -> ad.DiffArray:
    """Broadcast each coarse feature row back to its member fine points."""
    if pmap.assignment.size and pmap.assignment.max() >= coarse_feats.shape[0]:
        raise GeometryError(
            f"pool map expects >= {pmap.assignment.max() + 1} coarse rows, "
            f"got {coarse_feats.shape[0]}"
        )
    return ad.gather_rows(coarse_feats, pmap.assignment)


def crop_cloud(cloud: PointCloud, lo, hi) -> tuple[PointCloud, np.ndarray]:
    """Keep points inside the axis-aligned range [lo, hi], inclusive.

    Returns the cropped cloud and the surviving original indices.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    mask = ((cloud.coords >= lo) & (cloud.coords <= hi)).all(axis=1)
    kept = np.flatnonzero(mask)
    labels = cloud.labels[kept] if cloud.labels is not None else None
    return PointCloud(cloud.coords[kept], cloud.feats[kept], labels), kept
