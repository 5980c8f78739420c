"""Multi-task point perception model: a U-shaped encoder/decoder over
attention blocks, a per-point semantic head, and a query-based detection
head driven by deformable cross-attention.

Geometry (coordinates, windows, pooling maps) stays in plain numpy; only
feature tensors ride the autodiff tape.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import DiffArray, ParamBuilder, ParamStore
from .attention import (
    BatchNormParams,
    FeedForwardParams,
    ScaleCloud,
    apply_batch_norm,
    apply_feed_forward,
    deformable_attention,
    make_attention_block,
    make_batch_norm,
    make_deformable_attention,
    make_feed_forward,
    attention_block,
)
from .boxes import Box3D, nms, points_in_any_box, wrap_yaw
from .cloud import (
    PointCloud,
    VoxelGrid,
    fps,
    knn_query,
    pool_structure,
    voxel_query,
)


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture hyperparameters; validated on construction."""

    num_classes: int = 5
    thing_ids: tuple = (2, 3, 4)
    in_dim: int = 1
    stage_dims: tuple = (32, 64, 128, 256)
    stage_cells: tuple = (0.4, 0.8, 1.6)  # pooling cell per stage 1..S-1
    stage_radii: tuple = (0.8, 1.6, 3.2, 6.4)
    stage_depths: tuple = (2, 2, 2, 2)
    window_size: int = 32
    heads: int = 4
    search: str = "vq"  # "vq" | "knn"
    seg_depth: int = 1
    num_queries: int = 200
    fg_threshold: float = 0.2
    decoder_layers: int = 2
    decoder_radii: tuple = (6.4, 3.2)
    decoder_windows: tuple = (16, 16)
    score_threshold: float = 0.2
    nms_iou: float = 0.4

    def __post_init__(self):
        s = len(self.stage_dims)
        if s < 1:
            raise ModelError("need at least one stage")
        if len(self.stage_cells) != s - 1:
            raise ModelError(f"expected {s - 1} pooling cells, got {len(self.stage_cells)}")
        if len(self.stage_radii) != s or len(self.stage_depths) != s:
            raise ModelError("per-stage radius/depth lists must match stage count")
        if any(b <= a for a, b in zip(self.stage_cells, self.stage_cells[1:])):
            raise ModelError("pooling cell sizes must be strictly increasing")
        if any(c <= 0 for c in self.stage_cells):
            raise ModelError("pooling cell sizes must be positive")
        if self.num_queries < 1:
            raise ModelError(f"query count must be >= 1, got {self.num_queries}")
        if not 0.0 < self.fg_threshold < 1.0:
            raise ModelError(f"foreground threshold must lie in (0,1), got {self.fg_threshold}")
        if self.search not in ("vq", "knn"):
            raise ModelError(f"unknown search method {self.search!r}")
        if any(d % self.heads for d in self.stage_dims):
            raise ModelError("every stage width must be divisible by the head count")
        if self.window_size < 1 or self.decoder_layers < 1:
            raise ModelError("window_size and decoder_layers must be >= 1")
        if not set(self.thing_ids) <= set(range(self.num_classes)):
            raise ModelError("thing class ids must be valid semantic class ids")

    @property
    def num_stages(self) -> int:
        return len(self.stage_dims)

    @property
    def num_det_classes(self) -> int:
        return len(self.thing_ids)

    @property
    def query_dim(self) -> int:
        return self.stage_dims[0]

    def det_class_of_thing(self) -> dict:
        return {t: i for i, t in enumerate(self.thing_ids)}


@dataclass
class QuerySet:
    feats: DiffArray  # (Q, d_q)
    refs: np.ndarray  # (Q, 3)
    src: np.ndarray  # (Q,) indices into the full-resolution cloud

    def __len__(self):
        return len(self.src)


@dataclass
class BoxPrediction:
    """Raw per-query detection fields, pre-decode."""

    class_logits: DiffArray  # (Q, det classes + 1), background last
    objectness: DiffArray  # (Q, 1)
    center_offset: DiffArray  # (Q, 3)
    log_size: DiffArray  # (Q, 3)
    yaw_sincos: DiffArray  # (Q, 2)
    refs: np.ndarray  # (Q, 3)

    def __len__(self):
        return len(self.refs)


@dataclass
class Stage:
    coords: np.ndarray
    feats: DiffArray
    windows: object
    pmap: Optional[object]  # fine->coarse map that produced this stage


@dataclass
class _DecoderLayer:
    deform: object
    ffn: FeedForwardParams
    bn2: BatchNormParams


def build_windows(coords, radius, max_size, method):
    """Neighbor windows for every point, by either search method.

    knn caps k at the point count; vq uses the radius both as the grid
    cell size and the search radius."""
    n = len(coords)
    shim = PointCloud(coords, np.zeros((n, 1)))
    if method == "knn":
        return knn_query(shim, np.arange(n), min(max_size, n))
    grid = VoxelGrid(coords, radius)
    return voxel_query(grid, shim, np.arange(n), radius, max_size)


class PerceptionModel:
    """Owns the parameter store, batch-norm buffers, and the forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.store = ParamStore()
        self.buffers: dict = {}
        b = ParamBuilder(self.store, np.random.default_rng(seed), self.buffers)
        c = config

        self.embed_w = b.weight("embed.w", (c.in_dim, c.stage_dims[0]))
        self.embed_b = b.zeros("embed.b", (c.stage_dims[0],))

        self.enc_proj = [None]
        self.enc_blocks = []
        for s in range(c.num_stages):
            if s > 0:
                self.enc_proj.append((
                    b.weight(f"enc.s{s}.proj.w", (c.stage_dims[s - 1], c.stage_dims[s])),
                    b.zeros(f"enc.s{s}.proj.b", (c.stage_dims[s],)),
                ))
            self.enc_blocks.append(make_attention_block(
                b, f"enc.s{s}", c.stage_dims[s], c.heads, c.stage_depths[s]))

        self.dec_proj = {}
        self.dec_blocks = {}
        for s in range(c.num_stages - 2, -1, -1):
            cat_dim = c.stage_dims[s + 1] + c.stage_dims[s]
            self.dec_proj[s] = (
                b.weight(f"dec.s{s}.proj.w", (cat_dim, c.stage_dims[s])),
                b.zeros(f"dec.s{s}.proj.b", (c.stage_dims[s],)),
            )
            self.dec_blocks[s] = make_attention_block(
                b, f"dec.s{s}", c.stage_dims[s], c.heads, c.stage_depths[s])

        d0 = c.stage_dims[0]
        self.seg_block = make_attention_block(b, "seg", d0, c.heads, c.seg_depth)
        self.seg_w = b.weight("seg.cls.w", (d0, c.num_classes))
        self.seg_b = b.zeros("seg.cls.b", (c.num_classes,))

        if c.num_stages >= 2:
            scale_dims = [c.stage_dims[-1], c.stage_dims[-2]]
        else:
            scale_dims = [d0, d0]
        self.det_layers = []
        for i in range(c.decoder_layers):
            deform = make_deformable_attention(b, f"det.l{i}", d0, scale_dims, c.heads)
            ffn = make_feed_forward(b, f"det.l{i}.ffn", d0, 4 * d0)
            bn2 = make_batch_norm(b, f"det.l{i}.bn2", d0)
            self.det_layers.append(_DecoderLayer(deform, ffn, bn2))

        out_dim = (c.num_det_classes + 1) + 1 + 3 + 3 + 2
        self.box_w1 = b.weight("det.box.w1", (d0, d0))
        self.box_b1 = b.zeros("det.box.b1", (d0,))
        self.box_w2 = b.weight("det.box.w2", (d0, out_dim))
        self.box_b2 = b.zeros("det.box.b2", (out_dim,))

    # ----------------------------------------------------------------- encoder

    def encode(self, cloud: PointCloud, training: bool) -> list:
        c = self.config
        if len(cloud) == 0:
            raise ModelError("stage 0 has no points")
        x = ad.linear(DiffArray(cloud.feats), self.embed_w, self.embed_b)
        coords = cloud.coords
        stages = []
        pmap = None
        for s in range(c.num_stages):
            if s > 0:
                coarse_coords, pmap = pool_structure(coords, c.stage_cells[s - 1])
                if len(coarse_coords) == 0:
                    raise ModelError(f"stage {s} pooled to zero points")
                pooled = ad.scatter_max(x, pmap.assignment, pmap.coarse_count)
                w, bias = self.enc_proj[s]
                x = ad.linear(pooled, w, bias)
                coords = coarse_coords
            if len(coords) == 0:
                raise ModelError(f"stage {s} has no points")
            windows = build_windows(coords, c.stage_radii[s], c.window_size, c.search)
            x = attention_block(x, coords, windows, self.enc_blocks[s], self.buffers, training)
            stages.append(Stage(coords, x, windows, pmap))
        return stages

    # ----------------------------------------------------------------- decoder

    def decode_unet(self, stages: list, training: bool):
        """Top-down fusion; returns (full-res feats, per-stage decoded feats)."""
        c = self.config
        decoded = {c.num_stages - 1: stages[-1].feats}
        x = stages[-1].feats
        for s in range(c.num_stages - 2, -1, -1):
            up = ad.gather_rows(x, stages[s + 1].pmap.assignment)
            cat = ad.concat([up, stages[s].feats], axis=1)
            w, bias = self.dec_proj[s]
            x = ad.linear(cat, w, bias)
            x = attention_block(x, stages[s].coords, stages[s].windows, self.dec_blocks[s],
                           self.buffers, training)
            decoded[s] = x
        return x, decoded

    # ------------------------------------------------------------------- heads

    def segment_head(self, feats: DiffArray, coords, windows, training: bool) -> DiffArray:
        x = attention_block(feats, coords, windows, self.seg_block, self.buffers, training)
        return ad.linear(x, self.seg_w, self.seg_b)

    def select_queries(self, seg_logits: DiffArray, feats: DiffArray,
                       coords: np.ndarray) -> QuerySet:
        """Pick Q query points among predicted-foreground candidates.

        Foreground = softmax score on any thing class above the threshold.
        Surplus foreground is thinned by farthest point sampling; shortfall
        is padded with the best-scoring remaining points."""
        c = self.config
        n = len(coords)
        if n < c.num_queries:
            raise ModelError(f"cloud has {n} points but {c.num_queries} queries requested")
        z = seg_logits.data
        z = z - z.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        thing_score = probs[:, list(c.thing_ids)].max(axis=1)
        fg = np.flatnonzero(thing_score > c.fg_threshold)
        if len(fg) >= c.num_queries:
            sub = PointCloud(coords[fg], np.zeros((len(fg), 1)))
            picked = fg[fps(sub, c.num_queries, start=0)]
        else:
            rest = np.setdiff1d(np.arange(n), fg, assume_unique=False)
            order = rest[np.lexsort((rest, -thing_score[rest]))]
            picked = np.concatenate([fg, order[: c.num_queries - len(fg)]])
        picked = np.asarray(picked, dtype=np.int64)
        return QuerySet(ad.gather_rows(feats, picked), coords[picked].copy(), picked)

    def scale_clouds(self, stages: list, decoded: dict) -> list:
        """The two coarsest decode-path representations, coarsest first."""
        c = self.config
        top = c.num_stages - 1
        pick = [top, top - 1] if c.num_stages >= 2 else [0, 0]
        out = []
        for rank, s in enumerate(pick):
            coords = stages[s].coords
            shim = PointCloud(coords, np.zeros((len(coords), 1)))
            radius = c.decoder_radii[rank]
            out.append(ScaleCloud(shim, VoxelGrid(coords, radius), decoded[s],
                                  radius, c.decoder_windows[rank]))
        return out

    def detect_head(self, queries: QuerySet, scale_clouds: list, training: bool) -> BoxPrediction:
        q = queries.feats
        for layer in self.det_layers:
            q = deformable_attention(q, queries.refs, scale_clouds, layer.deform,
                                     self.buffers, training)
            q = ad.add(q, apply_feed_forward(
                apply_batch_norm(q, layer.bn2, self.buffers, training), layer.ffn))
        raw = ad.mlp2(q, self.box_w1, self.box_b1, self.box_w2, self.box_b2,
                      activation=ad.gelu)
        k = self.config.num_det_classes
        return BoxPrediction(
            class_logits=ad.slice_cols(raw, 0, k + 1),
            objectness=ad.slice_cols(raw, k + 1, k + 2),
            center_offset=ad.slice_cols(raw, k + 2, k + 5),
            log_size=ad.slice_cols(raw, k + 5, k + 8),
            yaw_sincos=ad.slice_cols(raw, k + 8, k + 10),
            refs=queries.refs,
        )

    # ----------------------------------------------------------------- forward

    def forward(self, cloud: PointCloud, training: bool = False,
                extra_query_refs: Optional[np.ndarray] = None) -> dict:
        """Full multi-task pass. extra_query_refs appends training-only
        queries at the given reference coordinates (features taken from the
        nearest full-resolution point)."""
        stages = self.encode(cloud, training)
        full, decoded = self.decode_unet(stages, training)
        seg_logits = self.segment_head(full, stages[0].coords, stages[0].windows, training)
        queries = self.select_queries(seg_logits, full, stages[0].coords)
        if extra_query_refs is not None and len(extra_query_refs):
            refs = np.asarray(extra_query_refs, dtype=np.float64).reshape(-1, 3)
            d2 = ((refs[:, None, :] - stages[0].coords[None, :, :]) ** 2).sum(axis=2)
            nearest = d2.argmin(axis=1)
            queries = QuerySet(
                ad.concat([queries.feats, ad.gather_rows(full, nearest)], axis=0),
                np.concatenate([queries.refs, refs]),
                np.concatenate([queries.src, nearest]),
            )
        scales = self.scale_clouds(stages, decoded)
        boxes = self.detect_head(queries, scales, training)
        return {
            "stages": stages,
            "feats": full,
            "seg_logits": seg_logits,
            "queries": queries,
            "boxes": boxes,
        }


def decode_boxes(pred: BoxPrediction, score_threshold: float = 0.2) -> list:
    """Turn raw per-query fields into scored world-frame boxes.

    Score = sigmoid(objectness) * best thing-class softmax probability
    (background excluded); queries at or below the threshold are dropped."""
    z = pred.class_logits.data
    z = z - z.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    thing_probs = probs[:, :-1]
    best = thing_probs.argmax(axis=1)
    obj = special.expit(pred.objectness.data[:, 0])
    scores = obj * thing_probs[np.arange(len(z)), best]
    centers = pred.refs + pred.center_offset.data
    sizes = np.exp(pred.log_size.data)
    yaws = np.arctan2(pred.yaw_sincos.data[:, 0], pred.yaw_sincos.data[:, 1])
    out = []
    for i in np.flatnonzero(scores > score_threshold):
        out.append(Box3D(centers[i], sizes[i], wrap_yaw(yaws[i]),
                         class_id=int(best[i]), score=float(scores[i])))
    return out


def pseudo_foreground_labels(cloud: PointCloud, gt_boxes: list) -> np.ndarray:
    """1 for points inside any ground-truth box (inclusive), else 0."""
    return points_in_any_box(cloud.coords, gt_boxes)


def predict_scene(model: PerceptionModel, cloud: PointCloud):
    """Inference: per-point semantic labels and the post-NMS box list."""
    out = model.forward(cloud, training=False)
    labels = out["seg_logits"].data.argmax(axis=1)
    c = model.config
    boxes = nms(decode_boxes(out["boxes"], c.score_threshold),
                c.nms_iou, c.score_threshold)
    return labels, boxes
