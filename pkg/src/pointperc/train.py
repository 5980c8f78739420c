"""Training loop: augmentation, loss assembly per task mode, optimization,
loss logging, and checkpointing.

Task modes: "seg" trains everything except the detection head on semantic
losses; "det" trains the full network with detection losses plus a binary
foreground focal loss on box-membership pseudo labels (standing in for the
semantic supervision); "multi" trains everything jointly under learnable
uncertainty weights.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray, Tape, save_checkpoint
from .boxes import Box3D, wrap_yaw
from .cloud import PointCloud, crop_cloud
from .data import SceneSample
from .losses import (
    UncertaintyWeights,
    cross_entropy,
    focal_loss,
    lovasz_softmax,
    masked_smooth_l1,
    multitask_loss,
)
from .matching import detection_targets
from .model import ModelConfig, PerceptionModel, pseudo_foreground_labels
from .optim import AdamWState, adamw_step, cosine_lr

LOSS_CSV_HEADER = ("step,lr,L_cls_s,L_lov_s,L_obj_d,L_cls_d,"
                   "L_center_d,L_size_d,L_yaw_d,rho_seg,rho_det,total")

_SEG_COLUMNS = ("L_cls_s", "L_lov_s")
_DET_COLUMNS = ("L_obj_d", "L_cls_d", "L_center_d", "L_size_d", "L_yaw_d")


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str = "multi"
    lr: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 1e-2
    epochs: int = 36
    augment: bool = True
    scale_range: tuple = (0.95, 1.05)
    rotate_range_deg: tuple = (-45.0, 45.0)
    flip_prob: float = 0.5
    noise_scale: float = 0.3
    range_min: tuple = (-50.0, -50.0, -5.0)
    range_max: tuple = (50.0, 50.0, 3.0)
    optimizer: str = "adamw"
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.task not in ("seg", "det", "multi"):
            raise TrainingError(f"unknown task mode {self.task!r}")
        if self.lr <= 0 or self.lr_min < 0 or self.weight_decay < 0:
            raise TrainingError("learning rates and weight decay must be non-negative")
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise TrainingError("flip probability must lie in [0, 1]")
        for name, pair in (("scale_range", self.scale_range),
                           ("rotate_range_deg", self.rotate_range_deg)):
            if pair[0] > pair[1]:
                raise TrainingError(f"{name} is not well-ordered")
        lo, hi = np.asarray(self.range_min), np.asarray(self.range_max)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
            raise TrainingError("point-cloud range must satisfy max > min")
        if self.optimizer != "adamw":
            raise TrainingError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr_schedule != "cosine":
            raise TrainingError(f"unsupported schedule {self.lr_schedule!r}")


# ---------------------------------------------------------------------------
# augmentation and query seeding


def augment(scene: SceneSample, cfg: TrainConfig, rng: np.random.Generator) -> SceneSample:
    """Global scale, z-rotation, and y-flip; applied in that order to both
    points and boxes so box membership is preserved."""
    s = rng.uniform(*cfg.scale_range)
    theta = np.deg2rad(rng.uniform(*cfg.rotate_range_deg))
    flip = bool(rng.uniform() < cfg.flip_prob)
    c, sn = np.cos(theta), np.sin(theta)

    coords = scene.cloud.coords * s
    x = c * coords[:, 0] - sn * coords[:, 1]
    y = sn * coords[:, 0] + c * coords[:, 1]
    if flip:
        y = -y
    coords = np.column_stack([x, y, coords[:, 2]])
    cloud = PointCloud(coords, scene.cloud.feats, labels=scene.cloud.labels)

    boxes = []
    for b in scene.boxes:
        ctr = b.center * s
        cx = c * ctr[0] - sn * ctr[1]
        cy = sn * ctr[0] + c * ctr[1]
        yaw = b.yaw + theta
        if flip:
            cy = -cy
            yaw = -yaw
        boxes.append(Box3D([cx, cy, ctr[2]], b.size * s, wrap_yaw(yaw),
                           class_id=b.class_id, score=b.score))
    return SceneSample(cloud, boxes)


def crop_scene(scene: SceneSample, lo, hi) -> SceneSample:
    cloud, _ = crop_cloud(scene.cloud, lo, hi)
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    boxes = [b for b in scene.boxes
             if np.all(b.center >= lo) and np.all(b.center <= hi)]
    return SceneSample(cloud, boxes)


def noisy_gt_queries(gt_boxes: list, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
    """One reference point per box: center plus uniform noise bounded by
    noise_scale times the box size in each dimension."""
    if not gt_boxes:
        return np.zeros((0, 3))
    centers = np.array([b.center for b in gt_boxes])
    sizes = np.array([b.size for b in gt_boxes])
    return centers + rng.uniform(-1.0, 1.0, centers.shape) * (noise_scale * sizes)


# ---------------------------------------------------------------------------
# loss assembly


def foreground_logits(seg_logits: DiffArray, thing_ids, num_classes: int) -> DiffArray:
    """Per-point log-odds of the summed thing-class probability, computed
    as LSE(thing logits) - LSE(stuff logits) for stability."""
    thing = sorted(thing_ids)
    stuff = [k for k in range(num_classes) if k not in thing]
    perm = np.zeros((num_classes, num_classes))
    for col, k in enumerate(stuff + thing):
        perm[k, col] = 1.0
    z = ad.matmul(seg_logits, ad.constant(perm))

    def lse(cols: DiffArray) -> DiffArray:
        m = ad.reduce_max(cols, axis=1, keepdims=True)
        return ad.add(m, ad.log(ad.reduce_sum(ad.exp(ad.sub(cols, m)), axis=1, keepdims=True)))

    ns = len(stuff)
    return ad.sub(lse(ad.slice_cols(z, ns, num_classes)), lse(ad.slice_cols(z, 0, ns)))


def detection_losses(pred, gt_boxes: list, num_det_classes: int,
                     n_extra: int = 0) -> dict:
    """The five detection terms against Hungarian-matched targets.

    n_extra counts trailing noisy-GT queries; those are pinned to their
    source boxes instead of entering the assignment pool."""
    probs = pred.class_logits.data
    probs = np.exp(probs - probs.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    centers = pred.refs + pred.center_offset.data
    with np.errstate(over="ignore"):
        sizes = np.exp(pred.log_size.data)
    identity = {d: d for d in range(num_det_classes)}
    tgt = detection_targets(probs[:, :num_det_classes], centers, sizes, pred.refs,
                            gt_boxes, num_det_classes, identity,
                            fixed_tail=n_extra)
    return {
        "L_obj_d": focal_loss(pred.objectness, tgt.objectness[:, None]),
        "L_cls_d": cross_entropy(pred.class_logits, tgt.class_target),
        "L_center_d": masked_smooth_l1(pred.center_offset, tgt.center_offset, tgt.matched),
        "L_size_d": masked_smooth_l1(pred.log_size, tgt.log_size, tgt.matched),
        "L_yaw_d": masked_smooth_l1(pred.yaw_sincos, tgt.yaw_sincos, tgt.matched),
    }


def compute_step_loss(model: PerceptionModel, scene: SceneSample, task: str,
                      uncert: UncertaintyWeights | None, training: bool,
                      extra_refs=None) -> tuple:
    """Forward plus per-mode loss assembly.

    Returns (total DiffArray, component dict of DiffArrays)."""
    cfg = model.config
    comps: dict = {}
    tasks: dict = {}
    if task == "seg":
        stages = model.encode(scene.cloud, training)
        full, _ = model.decode_unet(stages, training)
        seg_logits = model.segment_head(full, stages[0].coords, stages[0].windows, training)
        comps["L_cls_s"] = cross_entropy(seg_logits, scene.cloud.labels)
        comps["L_lov_s"] = lovasz_softmax(ad.softmax(seg_logits, axis=1), scene.cloud.labels)
        tasks["seg"] = ad.add(comps["L_cls_s"], comps["L_lov_s"])
    else:
        out = model.forward(scene.cloud, training, extra_query_refs=extra_refs)
        seg_logits = out["seg_logits"]
        n_extra = 0 if extra_refs is None else len(extra_refs)
        det = detection_losses(out["boxes"], scene.boxes, cfg.num_det_classes,
                               n_extra=n_extra)
        comps.update(det)
        det_sum = det["L_obj_d"]
        for key in ("L_cls_d", "L_center_d", "L_size_d", "L_yaw_d"):
            det_sum = ad.add(det_sum, det[key])
        if task == "det":
            fg = foreground_logits(seg_logits, cfg.thing_ids, cfg.num_classes)
            pseudo = np.zeros((len(scene.cloud), 1))
            if scene.boxes:
                pseudo = pseudo_foreground_labels(scene.cloud, scene.boxes)[:, None].astype(float)
            comps["L_cls_s"] = focal_loss(fg, pseudo)
            tasks["det"] = ad.add(det_sum, comps["L_cls_s"])
        else:
            comps["L_cls_s"] = cross_entropy(seg_logits, scene.cloud.labels)
            comps["L_lov_s"] = lovasz_softmax(ad.softmax(seg_logits, axis=1),
                                              scene.cloud.labels)
            tasks["seg"] = ad.add(comps["L_cls_s"], comps["L_lov_s"])
            tasks["det"] = det_sum
    total = multitask_loss(tasks, uncert)
    return total, comps


def trainable_names(model: PerceptionModel, task: str) -> list:
    names = list(model.store.names())
    if task == "seg":
        names = [n for n in names if not n.startswith("det.")]
    return names


# ---------------------------------------------------------------------------
# the loop


def _fmt(v) -> str:
    return f"{v:.17g}"


def format_loss_rows(rows: list) -> str:
    lines = [LOSS_CSV_HEADER]
    for r in rows:
        cells = [str(r["step"]), _fmt(r["lr"])]
        for key in _SEG_COLUMNS + _DET_COLUMNS + ("rho_seg", "rho_det"):
            cells.append("" if r.get(key) is None else _fmt(r[key]))
        cells.append(_fmt(r["total"]))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def train_loop(scenes: list, model_cfg: ModelConfig, train_cfg: TrainConfig,
               out_dir=None, seed: int = 42, max_steps=None,
               model: PerceptionModel | None = None, echo=None):
    """Run the optimization; returns (model, loss rows).

    Writes per-epoch checkpoints and a loss CSV when out_dir is given;
    epochs == 0 writes only the initial state. Deterministic per seed."""
    if not scenes:
        raise TrainingError("dataset is empty")
    if model is None:
        model = PerceptionModel(model_cfg, seed=seed)
    uncert = UncertaintyWeights(model.store) if train_cfg.task == "multi" else None
    state = AdamWState(model.store, names=trainable_names(model, train_cfg.task))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    def write_ckpt(tag):
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, f"{tag}.ckpt"), model.store,
                            buffers=model.buffers, echo=echo or [])

    rng = np.random.default_rng(seed)
    total_steps = max_steps if max_steps is not None else train_cfg.epochs * len(scenes)
    rows: list = []
    step = 0
    if train_cfg.epochs == 0 or total_steps == 0:
        write_ckpt("epoch_0000")
        if out_dir is not None:
            with open(os.path.join(out_dir, "losses.csv"), "w") as fh:
                fh.write(format_loss_rows(rows))
        return model, rows

    lo, hi = train_cfg.range_min, train_cfg.range_max
    done = False
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(scenes))
        for idx in order:
            scene = scenes[int(idx)]
            if train_cfg.augment:
                scene = augment(scene, train_cfg, rng)
            scene = crop_scene(scene, lo, hi)
            extra = None
            if train_cfg.task in ("det", "multi"):
                extra = noisy_gt_queries(scene.boxes, train_cfg.noise_scale, rng)
            lr = cosine_lr(step, total_steps, train_cfg.lr, train_cfg.lr_min)
            model.store.zero_grad()
            tape = Tape()
            try:
                with tape:
                    total, comps = compute_step_loss(
                        model, scene, train_cfg.task, uncert, training=True,
                        extra_refs=extra)
            except (ValueError, FloatingPointError) as e:
                raise TrainingError(
                    f"optimization diverged at step {step} (epoch {epoch}): {e}") from e
            value = float(total.data.reshape(()))
            if not np.isfinite(value):
                detail = ", ".join(f"{k}={float(v.data.reshape(())):.6g}"
                                   for k, v in comps.items())
                raise TrainingError(
                    f"non-finite loss {value} at step {step} (epoch {epoch}): {detail}")
            row = {"step": step, "lr": lr, "total": value}
            for key in _SEG_COLUMNS + _DET_COLUMNS:
                row[key] = float(comps[key].data.reshape(())) if key in comps else None
            row["rho_seg"] = uncert.value("seg") if uncert else None
            row["rho_det"] = uncert.value("det") if uncert else None
            rows.append(row)

            tape.backward(total)
            adamw_step(model.store, state, lr, train_cfg.weight_decay)
            step += 1
            if max_steps is not None and step >= max_steps:
                done = True
                break
        if done:
            write_ckpt("final")
            break
        write_ckpt(f"epoch_{epoch + 1:04d}")

    if out_dir is not None:
        with open(os.path.join(out_dir, "losses.csv"), "w") as fh:
            fh.write(format_loss_rows(rows))
    return model, rows
