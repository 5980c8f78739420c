"""Neighborhood self-attention over ragged point windows, and deformable
cross-attention used by the detection decoder.

Both operators are built from the autodiff primitives so every parameter
receives exact reverse-mode gradients. Ragged windows are handled in
flattened (pair-list) form: a window set with P total membership pairs
becomes arrays of length P segmented by query index, softmax-normalised
per segment.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray, ParamBuilder
from .cloud import NeighborWindows, PointCloud, VoxelGrid, voxel_query_points


class AttentionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# batch norm wrapper


@dataclass
class BatchNormParams:
    gamma: DiffArray
    beta: DiffArray
    mean_key: str
    var_key: str


def make_batch_norm(builder: ParamBuilder, prefix: str, dim: int) -> BatchNormParams:
    gamma = builder.ones(prefix + ".gamma", (dim,))
    beta = builder.zeros(prefix + ".beta", (dim,))
    mean_key = builder.buffer(prefix + ".running_mean", np.zeros(dim))
    var_key = builder.buffer(prefix + ".running_var", np.ones(dim))
    return BatchNormParams(gamma, beta, mean_key, var_key)


def apply_batch_norm(x: DiffArray, bn: BatchNormParams, buffers: dict, training: bool) -> DiffArray:
    return ad.batch_norm(
        x, bn.gamma, bn.beta, buffers[bn.mean_key], buffers[bn.var_key], training=training
    )


# ---------------------------------------------------------------------------
# feed-forward block (shared by both attention layer types)


@dataclass
class FeedForwardParams:
    w1: DiffArray
    b1: DiffArray
    w2: DiffArray
    b2: DiffArray


def make_feed_forward(builder: ParamBuilder, prefix: str, dim: int, hidden: int) -> FeedForwardParams:
    return FeedForwardParams(
        w1=builder.weight(prefix + ".w1", (dim, hidden)),
        b1=builder.zeros(prefix + ".b1", (hidden,)),
        w2=builder.weight(prefix + ".w2", (hidden, dim)),
        b2=builder.zeros(prefix + ".b2", (dim,)),
    )


def apply_feed_forward(x: DiffArray, ffn: FeedForwardParams) -> DiffArray:
    return ad.mlp2(x, ffn.w1, ffn.b1, ffn.w2, ffn.b2, activation=ad.gelu)


# ---------------------------------------------------------------------------
# neighborhood attention


@dataclass
class NeighborhoodAttentionParams:
    w_q: DiffArray  # (d, d)
    w_k: DiffArray  # (d, d)
    w_v: DiffArray  # (d, d)
    w_r: DiffArray  # (d, d_z) query-side projection for the pair bias
    pos_w1: DiffArray  # (3, d_z)
    pos_b1: DiffArray
    pos_w2: DiffArray  # (d_z, d_z)
    pos_b2: DiffArray
    heads: int

    @property
    def dim(self) -> int:
        return self.w_q.data.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def make_neighborhood_attention(
    builder: ParamBuilder, prefix: str, dim: int, heads: int
) -> NeighborhoodAttentionParams:
    if dim % heads != 0:
        raise AttentionError(f"feature dim {dim} not divisible by {heads} heads")
    d_z = dim // heads
    return NeighborhoodAttentionParams(
        w_q=builder.weight(prefix + ".w_q", (dim, dim)),
        w_k=builder.weight(prefix + ".w_k", (dim, dim)),
        w_v=builder.weight(prefix + ".w_v", (dim, dim)),
        w_r=builder.weight(prefix + ".w_r", (dim, d_z)),
        pos_w1=builder.weight(prefix + ".pos.w1", (3, d_z)),
        pos_b1=builder.zeros(prefix + ".pos.b1", (d_z,)),
        pos_w2=builder.weight(prefix + ".pos.w2", (d_z, d_z)),
        pos_b2=builder.zeros(prefix + ".pos.b2", (d_z,)),
        heads=heads,
    )


def rel_pos_encode(diffs: np.ndarray, params: NeighborhoodAttentionParams) -> DiffArray:
    """Encode per-pair coordinate offsets (P, 3) to (P, d_z) codes.

    Smooth activation on purpose: every self pair evaluates this MLP at
    exactly zero, which would pin a relu kink to the operating point."""
    d = DiffArray(np.asarray(diffs, dtype=np.float64))
    return ad.mlp2(d, params.pos_w1, params.pos_b1, params.pos_w2, params.pos_b2, activation=ad.gelu)


def attention_bias(x_query: DiffArray, w_r: DiffArray, rel_codes: DiffArray) -> DiffArray:
    """Scalar additive logit bias per pair: (x_i W_r) . r_ij, shape (P, 1).

    x_query holds the query point's features repeated per pair (P, d)."""
    proj = ad.matmul(x_query, w_r)
    return ad.reduce_sum(ad.mul(proj, rel_codes), axis=1, keepdims=True)


def neighborhood_attention(
    x: DiffArray,
    coords: np.ndarray,
    windows: NeighborWindows,
    params: NeighborhoodAttentionParams,
) -> DiffArray:
    """Multi-head attention where point i attends over its window members.

    The pair bias is shared across heads; softmax is taken per query over
    that query's window. Returns (N, d)."""
    n, d = x.data.shape
    if d != params.dim:
        raise AttentionError(f"feature dim {d} != parameter dim {params.dim}")
    if len(windows.counts) != n:
        raise AttentionError("window set does not cover every point")
    if np.any(windows.counts < 1):
        raise AttentionError("empty attention window")

    qidx = windows.seg()
    jidx = windows.idx
    heads, dh = params.heads, params.head_dim
    inv_sqrt = 1.0 / np.sqrt(dh)

    q_all = ad.matmul(x, params.w_q)
    k_all = ad.matmul(x, params.w_k)
    v_all = ad.matmul(x, params.w_v)
    q_pairs = ad.gather_rows(q_all, qidx)
    k_pairs = ad.gather_rows(k_all, jidx)
    v_pairs = ad.gather_rows(v_all, jidx)

    rel = coords[qidx] - coords[jidx]
    codes = rel_pos_encode(rel, params)
    bias = attention_bias(ad.gather_rows(x, qidx), params.w_r, codes)

    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        q_h = ad.slice_cols(q_pairs, lo, hi)
        k_h = ad.slice_cols(k_pairs, lo, hi)
        v_h = ad.slice_cols(v_pairs, lo, hi)
        logits = ad.scale(ad.reduce_sum(ad.mul(q_h, k_h), axis=1, keepdims=True), inv_sqrt)
        logits = ad.add(logits, bias)
        weights = ad.segment_softmax(logits, qidx, n)
        outs.append(ad.segment_sum(ad.mul(weights, v_h), qidx, n))
    return outs[0] if heads == 1 else ad.concat(outs, axis=1)


# ---------------------------------------------------------------------------
# encoder layer / block


@dataclass
class AttentionLayerParams:
    attn: NeighborhoodAttentionParams
    ffn: FeedForwardParams
    bn1: BatchNormParams
    bn2: BatchNormParams


def make_attention_layer(
    builder: ParamBuilder, prefix: str, dim: int, heads: int, ffn_mult: int = 4
) -> AttentionLayerParams:
    return AttentionLayerParams(
        attn=make_neighborhood_attention(builder, prefix + ".attn", dim, heads),
        ffn=make_feed_forward(builder, prefix + ".ffn", dim, ffn_mult * dim),
        bn1=make_batch_norm(builder, prefix + ".bn1", dim),
        bn2=make_batch_norm(builder, prefix + ".bn2", dim),
    )


def attention_layer(
    x: DiffArray,
    coords: np.ndarray,
    windows: NeighborWindows,
    params: AttentionLayerParams,
    buffers: dict,
    training: bool,
) -> DiffArray:
    """Pre-norm residual layer: x + Attn(BN(x)), then + FFN(BN(.))."""
    h = ad.add(x, neighborhood_attention(
        apply_batch_norm(x, params.bn1, buffers, training), coords, windows, params.attn))
    return ad.add(h, apply_feed_forward(
        apply_batch_norm(h, params.bn2, buffers, training), params.ffn))


def make_attention_block(
    builder: ParamBuilder, prefix: str, dim: int, heads: int, depth: int, ffn_mult: int = 4
) -> list:
    return [
        make_attention_layer(builder, f"{prefix}.l{i}", dim, heads, ffn_mult)
        for i in range(depth)
    ]


def attention_block(
    x: DiffArray,
    coords: np.ndarray,
    windows: NeighborWindows,
    layers: list,
    buffers: dict,
    training: bool,
) -> DiffArray:
    """Stack of layers sharing one window set (searched once per block)."""
    for layer in layers:
        x = attention_layer(x, coords, windows, layer, buffers, training)
    return x


# ---------------------------------------------------------------------------
# deformable cross-attention (detection decoder)


@dataclass
class DeformableScaleParams:
    w_q: DiffArray  # (d_q, d_q), heads packed along columns
    w_k: DiffArray  # (d_s, d_q)
    w_v: DiffArray  # (d_s, d_q)
    off_w1: list  # per head: (d_q, d_q)
    off_b1: list
    off_w2: list  # per head: (d_q, 3)
    off_b2: list


@dataclass
class DeformableAttentionParams:
    scales: list  # DeformableScaleParams per scale cloud
    w_o: DiffArray  # (d_q, d_q)
    b_o: DiffArray
    bn: BatchNormParams
    heads: int

    @property
    def dim(self) -> int:
        return self.w_o.data.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class ScaleCloud:
    """One source cloud the decoder gathers from: coordinates with their
    search structure plus the feature rows living on the tape."""

    cloud: PointCloud
    grid: VoxelGrid
    feats: DiffArray
    radius: float
    max_size: int


def make_deformable_attention(
    builder: ParamBuilder,
    prefix: str,
    d_q: int,
    scale_dims: list,
    heads: int,
) -> DeformableAttentionParams:
    if d_q % heads != 0:
        raise AttentionError(f"query dim {d_q} not divisible by {heads} heads")
    scales = []
    for s, d_s in enumerate(scale_dims):
        sp = f"{prefix}.scale{s}"
        scales.append(DeformableScaleParams(
            w_q=builder.weight(sp + ".w_q", (d_q, d_q)),
            w_k=builder.weight(sp + ".w_k", (d_s, d_q)),
            w_v=builder.weight(sp + ".w_v", (d_s, d_q)),
            off_w1=[builder.weight(f"{sp}.h{h}.off.w1", (d_q, d_q)) for h in range(heads)],
            off_b1=[builder.zeros(f"{sp}.h{h}.off.b1", (d_q,)) for h in range(heads)],
            off_w2=[builder.weight(f"{sp}.h{h}.off.w2", (d_q, 3)) for h in range(heads)],
            off_b2=[builder.zeros(f"{sp}.h{h}.off.b2", (3,)) for h in range(heads)],
        ))
    return DeformableAttentionParams(
        scales=scales,
        w_o=builder.weight(prefix + ".w_o", (d_q, d_q)),
        b_o=builder.zeros(prefix + ".b_o", (d_q,)),
        bn=make_batch_norm(builder, prefix + ".bn", d_q),
        heads=heads,
    )


def _head_gather_attend(
    q_rows: DiffArray,
    keys: DiffArray,
    values: DiffArray,
    windows: NeighborWindows,
    num_queries: int,
    head_dim: int,
) -> DiffArray:
    """Softmax attention over ragged windows where some windows may be
    empty; empty ones contribute an all-zero output row."""
    nonempty = np.flatnonzero(windows.counts > 0)
    if len(nonempty) == 0:
        return ad.constant(np.zeros((num_queries, head_dim)))
    # compress to active query rows so segment ids stay gap-free
    active_of = np.full(num_queries, -1, dtype=np.int64)
    active_of[nonempty] = np.arange(len(nonempty))
    seg = active_of[windows.seg()]

    q_pairs = ad.gather_rows(q_rows, windows.seg())
    logits = ad.scale(
        ad.reduce_sum(ad.mul(q_pairs, keys), axis=1, keepdims=True), 1.0 / np.sqrt(head_dim)
    )
    weights = ad.segment_softmax(logits, seg, len(nonempty))
    pooled = ad.segment_sum(ad.mul(weights, values), seg, len(nonempty))
    return ad.scatter_rows(pooled, nonempty, num_queries)


def deformable_attention(
    query_feats: DiffArray,
    query_refs: np.ndarray,
    scale_clouds: list,
    params: DeformableAttentionParams,
    buffers: dict,
    training: bool,
) -> DiffArray:
    """Cross-attention from each query onto points gathered near a learned
    sampling location, run per scale cloud and per head.

    Each head predicts a coordinate offset from the query feature; the
    window is searched at ref + offset. Gathering is discrete, so the
    offset path carries no continuous gradient (the offset MLPs still sit
    on the tape and receive exact zero gradients). Scale outputs are
    averaged, projected, and added residually to the input queries."""
    if len(scale_clouds) != len(params.scales):
        raise AttentionError(
            f"got {len(scale_clouds)} scale clouds for {len(params.scales)} parameter sets")
    nq = query_feats.data.shape[0]
    heads, dh = params.heads, params.head_dim
    xn = apply_batch_norm(query_feats, params.bn, buffers, training)

    per_scale = []
    for sc, sp in zip(scale_clouds, params.scales):
        q_all = ad.matmul(xn, sp.w_q)
        k_all = ad.matmul(sc.feats, sp.w_k)
        v_all = ad.matmul(sc.feats, sp.w_v)
        head_outs = []
        for h in range(heads):
            lo, hi = h * dh, (h + 1) * dh
            offsets = ad.mlp2(xn, sp.off_w1[h], sp.off_b1[h], sp.off_w2[h], sp.off_b2[h])
            samples = query_refs + offsets.data
            windows = voxel_query_points(sc.grid, sc.cloud, samples, sc.radius, sc.max_size)
            keys = ad.slice_cols(ad.gather_rows(k_all, windows.idx), lo, hi)
            values = ad.slice_cols(ad.gather_rows(v_all, windows.idx), lo, hi)
            q_h = ad.slice_cols(q_all, lo, hi)
            head_outs.append(_head_gather_attend(q_h, keys, values, windows, nq, dh))
        per_scale.append(head_outs[0] if heads == 1 else ad.concat(head_outs, axis=1))

    avg = per_scale[0]
    for extra in per_scale[1:]:
        avg = ad.add(avg, extra)
    avg = ad.scale(avg, 1.0 / len(per_scale))
    return ad.add(query_feats, ad.linear(avg, params.w_o, params.b_o))
