"""Finite-difference verification suite for every differentiable piece.

Each named entry builds a fresh parameter store plus a scalar-valued
closure over it, suitable for autodiff.gradcheck. The registry backs the
command-line gradient checker and the acceptance gate, so the two always
agree on what "every differentiable operator" means.

Discrete choices inside the composites (window membership, query
selection, matching) must not flip under the +/-eps probes, so the model
entry uses oversized search radii and a foreground threshold far below
the operating point; selection then depends on coordinates only, which
gradcheck never perturbs.
"""

import numpy as np

from . import autodiff as ad
from .attention import (
    ScaleCloud,
    apply_batch_norm,
    attention_bias,
    deformable_attention,
    make_batch_norm,
    make_deformable_attention,
    make_neighborhood_attention,
    make_attention_layer,
    neighborhood_attention,
    attention_layer,
    rel_pos_encode,
)
from .autodiff import DiffArray, ParamBuilder, ParamStore, gradcheck
from .boxes import Box3D
from .cloud import PointCloud, VoxelGrid, voxel_query
from .losses import (
    UncertaintyWeights,
    cross_entropy,
    focal_loss,
    lovasz_softmax,
    masked_smooth_l1,
    multitask_loss,
)
from .model import ModelConfig, PerceptionModel
from .train import compute_step_loss
from .data import SceneSample


def _param(store: ParamStore, name: str, rng, shape, scale=0.5):
    return store.add(name, DiffArray(rng.normal(0.0, scale, shape), requires_grad=True))


def _windows_for(coords, radius, max_size):
    cloud = PointCloud(coords, np.zeros((len(coords), 1)))
    grid = VoxelGrid(coords, radius)
    return voxel_query(grid, cloud, np.arange(len(coords)), radius, max_size)


def _sum_sq(x: DiffArray) -> DiffArray:
    return ad.reduce_sum(ad.mul(x, x))


# --- primitive composites ---------------------------------------------------


def _build_linear(rng):
    store = ParamStore()
    x = _param(store, "x", rng, (6, 4))
    w = _param(store, "w", rng, (4, 3))
    b = _param(store, "b", rng, (3,))
    return lambda: _sum_sq(ad.linear(x, w, b)), store, {}


def _build_mlp2(rng):
    store = ParamStore()
    x = _param(store, "x", rng, (5, 3))
    w1 = _param(store, "w1", rng, (3, 6))
    b1 = _param(store, "b1", rng, (6,))
    w2 = _param(store, "w2", rng, (6, 2))
    b2 = _param(store, "b2", rng, (2,))
    return lambda: _sum_sq(ad.mlp2(x, w1, b1, w2, b2, activation=ad.gelu)), store, {}


def _build_batch_norm(rng):
    store = ParamStore()
    buffers = {}
    builder = ParamBuilder(store, rng, buffers)
    bn = make_batch_norm(builder, "bn", 4)
    x = _param(store, "x", rng, (8, 4))
    weight = ad.constant(rng.normal(size=(8, 4)))
    return (lambda: ad.reduce_sum(ad.mul(apply_batch_norm(x, bn, buffers, True), weight)),
            store, {})


def _build_softmax(rng):
    store = ParamStore()
    x = _param(store, "x", rng, (6, 5))
    weight = ad.constant(rng.normal(size=(6, 5)))
    return lambda: ad.reduce_sum(ad.mul(ad.softmax(x, axis=1), weight)), store, {}


def _build_segment_softmax(rng):
    store = ParamStore()
    x = _param(store, "x", rng, (11, 1))
    seg = np.repeat(np.arange(4), [3, 2, 5, 1])
    weight = ad.constant(rng.normal(size=(11, 1)))
    return lambda: ad.reduce_sum(ad.mul(ad.segment_softmax(x, seg, 4), weight)), store, {}


def _build_scatter_max(rng):
    store = ParamStore()
    x = _param(store, "x", rng, (10, 4))
    assign = rng.integers(0, 4, size=10)
    assign[:4] = np.arange(4)  # every slot populated
    weight = ad.constant(rng.normal(size=(4, 4)))
    return lambda: ad.reduce_sum(ad.mul(ad.scatter_max(x, assign, 4), weight)), store, {}


def _build_gather_scatter(rng):
    store = ParamStore()
    x = _param(store, "x", rng, (6, 3))
    idx = np.array([0, 2, 2, 5, 1])
    back = np.array([1, 3, 4, 0, 2])
    def f():
        picked = ad.gather_rows(x, idx)
        spread = ad.scatter_rows(picked, back, 6)
        return _sum_sq(spread)
    return f, store, {}


# --- losses -------------------------------------------------------------


def _build_cross_entropy(rng):
    store = ParamStore()
    logits = _param(store, "logits", rng, (7, 4))
    labels = rng.integers(0, 4, size=7)
    return lambda: cross_entropy(logits, labels), store, {}


def _build_lovasz(rng):
    store = ParamStore()
    logits = _param(store, "logits", rng, (9, 3))
    labels = rng.integers(0, 3, size=9)
    return lambda: lovasz_softmax(ad.softmax(logits, axis=1), labels), store, {}


def _build_focal(rng):
    store = ParamStore()
    logits = _param(store, "logits", rng, (8, 1))
    targets = rng.integers(0, 2, size=(8, 1)).astype(float)
    return lambda: focal_loss(logits, targets), store, {}


def _build_smooth_l1(rng):
    store = ParamStore()
    pred = _param(store, "pred", rng, (6, 3))
    target = rng.normal(size=(6, 3)) + 2.5  # keep |diff| clear of the huber knee
    mask = np.array([1, 0, 1, 1, 0, 1])
    return lambda: masked_smooth_l1(pred, target, mask), store, {}


def _build_uncertainty(rng):
    store = ParamStore()
    a = _param(store, "a", rng, (3,))
    b = _param(store, "b", rng, (2,))
    weights = UncertaintyWeights(store)
    return (lambda: multitask_loss({"seg": _sum_sq(a), "det": _sum_sq(b)}, weights),
            store, {})


# --- attention ---------------------------------------------------------


def _build_attention_bias(rng):
    store = ParamStore()
    builder = ParamBuilder(store, rng)
    params = make_neighborhood_attention(builder, "na", 8, 2)
    xq = _param(store, "xq", rng, (5, 8))
    diffs = rng.normal(0.0, 1.0, size=(5, 3))
    def f():
        codes = rel_pos_encode(diffs, params)
        return _sum_sq(attention_bias(xq, params.w_r, codes))
    return f, store, {}


def _build_neighborhood_attention(rng):
    store = ParamStore()
    builder = ParamBuilder(store, rng)
    params = make_neighborhood_attention(builder, "na", 8, 2)
    coords = rng.uniform(0.0, 3.0, size=(12, 3))
    windows = _windows_for(coords, 2.0, 6)
    x = _param(store, "x", rng, (12, 8))
    return lambda: _sum_sq(neighborhood_attention(x, coords, windows, params)), store, {}


def _build_attention_layer(rng):
    store = ParamStore()
    buffers = {}
    builder = ParamBuilder(store, rng, buffers)
    params = make_attention_layer(builder, "layer", 8, 2)
    coords = rng.uniform(0.0, 3.0, size=(10, 3))
    windows = _windows_for(coords, 2.0, 5)
    x = _param(store, "x", rng, (10, 8))
    return (lambda: _sum_sq(attention_layer(x, coords, windows, params, buffers, True)),
            store, {})


def _build_deformable(rng):
    store = ParamStore()
    buffers = {}
    builder = ParamBuilder(store, rng, buffers)
    params = make_deformable_attention(builder, "def", 8, [6], 2)
    refs = rng.uniform(0.0, 3.0, size=(3, 3))
    coords = rng.uniform(0.0, 3.0, size=(10, 3))
    feats = _param(store, "scale_feats", rng, (10, 6))
    q = _param(store, "q", rng, (3, 8))
    # radius big enough that sampling offsets cannot change membership
    scale = ScaleCloud(PointCloud(coords, np.zeros((10, 1))),
                       VoxelGrid(coords, 50.0), feats, 50.0, 10)
    return (lambda: _sum_sq(deformable_attention(q, refs, [scale], params, buffers, True)),
            store, {})


# --- the full multi-task objective on a tiny model ----------------------


def _tiny_scene(rng):
    coords = rng.uniform([-4.0, -4.0, 0.0], [4.0, 4.0, 2.0], size=(64, 3))
    feats = rng.uniform(0.0, 1.0, size=(64, 1))
    labels = rng.integers(0, 5, size=64)
    cloud = PointCloud(coords, feats, labels=labels)
    boxes = [Box3D([1.0, -0.5, 0.6], [2.0, 1.5, 1.0], 0.4, class_id=0),
             Box3D([-2.0, 2.0, 0.8], [1.0, 1.0, 1.5], -1.1, class_id=2)]
    return SceneSample(cloud, boxes)


def _build_full_model(rng):
    cfg = ModelConfig(stage_dims=(8, 16), stage_cells=(2.0,),
                      stage_radii=(2.0, 4.0), stage_depths=(1, 1),
                      window_size=8, heads=2, seg_depth=1, num_queries=4,
                      fg_threshold=0.02, decoder_layers=1,
                      decoder_radii=(50.0, 50.0), decoder_windows=(8, 8))
    model = PerceptionModel(cfg, seed=int(rng.integers(1 << 31)))
    uncert = UncertaintyWeights(model.store)
    scene = _tiny_scene(rng)
    def f():
        total, _ = compute_step_loss(model, scene, "multi", uncert, training=True)
        return total
    return f, model.store, {"entries_per_param": 1}


SUITE = {
    "linear": _build_linear,
    "mlp2": _build_mlp2,
    "batch_norm": _build_batch_norm,
    "softmax": _build_softmax,
    "segment_softmax": _build_segment_softmax,
    "scatter_max": _build_scatter_max,
    "gather_scatter": _build_gather_scatter,
    "cross_entropy": _build_cross_entropy,
    "lovasz_softmax": _build_lovasz,
    "focal_loss": _build_focal,
    "smooth_l1": _build_smooth_l1,
    "uncertainty": _build_uncertainty,
    "attention_bias": _build_attention_bias,
    "neighborhood_attention": _build_neighborhood_attention,
    "attention_layer": _build_attention_layer,
    "deformable_attention": _build_deformable,
    "full_model": _build_full_model,
}


def run_suite(names=None, tol: float = 1e-4, seed: int = 0):
    """Gradcheck the named entries (all by default); returns
    [(name, GradCheckReport)] in registry order."""
    if names is None:
        names = list(SUITE)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise KeyError(f"unknown gradcheck entries: {unknown}")
    out = []
    for name in names:
        rng = np.random.default_rng(seed)
        f, store, kwargs = SUITE[name](rng)
        report = gradcheck(f, store, tol=tol, rng=np.random.default_rng(seed + 1),
                           **kwargs)
        out.append((name, report))
    return out
