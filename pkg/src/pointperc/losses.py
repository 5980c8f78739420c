"""Training losses, all expressed through the autodiff primitives so every
one of them is finite-difference checkable.

The segmentation pair is cross-entropy plus Lovasz-softmax; detection adds
binary focal objectness, box classification cross-entropy, and smooth-L1
regression heads. Task groups are balanced with learnable log-variances.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray


class LossError(ValueError):
    """Raised when a loss receives inputs it cannot score (e.g. no targets)."""


def _log_softmax_rows(logits: DiffArray) -> DiffArray:
    """Row-wise log-softmax built from max-shift + log-sum-exp."""
    m = ad.reduce_max(logits, axis=1, keepdims=True)
    shifted = ad.sub(logits, m)
    lse = ad.log(ad.reduce_sum(ad.exp(shifted), axis=1, keepdims=True))
    return ad.sub(shifted, lse)


def cross_entropy(logits: DiffArray, labels: np.ndarray, ignore_id: int | None = None) -> DiffArray:
    """Mean negative log-probability of the true class.

    Args:
        logits: (N, K) unnormalized scores.
        labels: (N,) integer class ids.
        ignore_id: label value excluded from the mean, or None.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    valid = np.ones(n, dtype=bool) if ignore_id is None else labels != ignore_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise LossError("cross_entropy: every point carries the ignore label")
    onehot = np.zeros((n, k))
    onehot[valid, labels[valid]] = 1.0
    logp = _log_softmax_rows(logits)
    picked = ad.reduce_sum(ad.mul(logp, ad.constant(onehot)))
    return ad.scale(picked, -1.0 / n_valid)


def _lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient vector of the Jaccard-loss Lovasz extension.

    With ground-truth flags sorted by descending error, entry i is the
    marginal jump of the Jaccard loss when the i-th point joins the
    mispredicted set.
    """
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def lovasz_softmax(probs: DiffArray, labels: np.ndarray) -> DiffArray:
    """Lovasz extension of the Jaccard loss, averaged over present classes.

    `probs` must already be softmax outputs, one row per point. The sort
    permutation is taken from the forward values and treated as constant
    under differentiation, which is the piecewise-linear region gradient.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    present = np.unique(labels)
    terms = []
    for c in present.tolist():
        fg = (labels == c).astype(np.float64)[:, None]
        sign = ad.constant(1.0 - 2.0 * fg)
        p_c = ad.slice_cols(probs, c, c + 1)
        errors = ad.add(ad.constant(fg), ad.mul(sign, p_c))
        order = np.argsort(-errors.data[:, 0], kind="stable")
        sorted_errors = ad.gather_rows(errors, order)
        grad = _lovasz_grad(fg[order, 0])
        terms.append(ad.reduce_sum(ad.mul(sorted_errors, ad.constant(grad[:, None]))))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def focal_loss(logits: DiffArray, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> DiffArray:
    """Binary focal loss on raw logits, mean over entries.

    Per entry with p_t the probability of the true side:
    -alpha_t * (1 - p_t)^gamma * log(p_t), alpha_t = alpha for positives
    and 1 - alpha for negatives.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    sign = ad.constant(2.0 * targets - 1.0)
    z = ad.mul(logits, sign)  # logit of the true side
    log_pt = ad.scale(ad.softplus(ad.scale(z, -1.0)), -1.0)
    one_minus_pt = ad.sigmoid(ad.scale(z, -1.0))
    alpha_t = ad.constant(alpha * targets + (1.0 - alpha) * (1.0 - targets))
    weighted = ad.mul(alpha_t, ad.mul(ad.powc(one_minus_pt, gamma), ad.scale(log_pt, -1.0)))
    return ad.reduce_mean(weighted)


def smooth_l1(pred: DiffArray, target: np.ndarray, beta: float = 1.0) -> DiffArray:
    """Huber-style regression loss, mean over all elements."""
    diff = ad.sub(pred, ad.constant(target))
    return ad.reduce_mean(ad.huber(diff, beta))


def masked_smooth_l1(pred: DiffArray, target: np.ndarray, row_mask: np.ndarray, beta: float = 1.0) -> DiffArray:
    """Smooth-L1 averaged over the selected rows only.

    Rows with mask 0 contribute nothing; with no selected rows the loss is
    exactly zero (a constant, so gradients vanish too).
    """
    n_sel = int(row_mask.sum())
    if n_sel == 0:
        return ad.constant(np.zeros(()))
    cols = pred.shape[1]
    m = ad.constant(np.asarray(row_mask, dtype=np.float64)[:, None])
    diff = ad.mul(ad.sub(pred, ad.constant(target)), m)
    return ad.scale(ad.reduce_sum(ad.huber(diff, beta)), 1.0 / (n_sel * cols))


class UncertaintyWeights:
    """Learnable per-task log-variances for loss balancing."""

    def __init__(self, store: ad.ParamStore, tasks=("seg", "det")):
        self.rho = {t: store.add(f"uncertainty.rho_{t}", DiffArray(np.zeros(1), requires_grad=True)) for t in tasks}

    def value(self, task: str) -> float:
        return float(self.rho[task].data[0])


def multitask_loss(task_losses: dict[str, DiffArray], weights: UncertaintyWeights | None) -> DiffArray:
    """Combine per-task scalars into the optimized objective.

    With weights: sum over tasks of exp(-rho_t) * L_t + rho_t / 2. Without
    (single-task mode): plain sum of whatever is present.
    """
    if not task_losses:
        raise LossError("no task losses to combine")
    terms = []
    for name, loss in task_losses.items():
        if weights is None:
            terms.append(loss)
        else:
            rho = weights.rho[name]
            scaled = ad.mul(ad.exp(ad.scale(rho, -1.0)), loss)
            terms.append(ad.add(scaled, ad.scale(rho, 0.5)))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.reduce_sum(total)
