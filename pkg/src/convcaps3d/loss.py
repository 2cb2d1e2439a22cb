"""Training objectives: margin loss on capsule lengths, weighted cross-entropy
on the segmentation output, masked reconstruction MSE, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ops

PROB_FLOOR = 1e-7
M_POS, M_NEG, NEG_WEIGHT = 0.9, 0.1, 0.5


def one_hot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return np.eye(classes, dtype=dtype)[labels]


def downsample_labels(labels: np.ndarray, factor: int, classes: int) -> np.ndarray:
    """Majority class of each ``factor^3`` block, one-hot; ties go to the lower class."""
    labels = np.asarray(labels)
    spatial = labels.shape[-3:]
    if any(n % factor for n in spatial):
        raise ValueError(f"extents {spatial} not divisible by {factor}")
    lead = labels.shape[:-3]
    coarse = tuple(n // factor for n in spatial)
    blocks = labels.reshape(*lead, coarse[0], factor, coarse[1], factor, coarse[2], factor)
    counts = one_hot(blocks, classes, np.int64).sum(axis=(-6, -4, -2))
    # argmax returns the first maximum, i.e. the smallest tied class
    return one_hot(counts.argmax(axis=-1), classes)


def margin_loss(lengths: Tensor, target) -> Tensor:
    """Mean over all (voxel, class) entries of the capsule margin loss.

    ``target`` is one-hot with the same shape as ``lengths``.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target,
                        dtype=lengths.dtype)
    if target.shape != lengths.shape:
        raise ValueError(f"shape mismatch: lengths {lengths.shape} vs target {target.shape}")
    pos = ops.square(ops.relu(ops.sub(M_POS, lengths)))
    neg = ops.square(ops.relu(ops.sub(lengths, M_NEG)))
    per_entry = ops.add(ops.mul(pos, target), ops.mul(neg, NEG_WEIGHT * (1.0 - target)))
    return ops.mean(per_entry)


def class_weights(labels: np.ndarray, classes: int) -> np.ndarray:
    """Inverse relative class frequency, normalized to mean 1 over present classes.

    Classes absent from ``labels`` get weight 1; they never contribute to the
    loss of this batch anyway.
    """
    counts = np.bincount(np.asarray(labels).ravel(), minlength=classes)[:classes]
    present = counts > 0
    w = np.ones(classes, dtype=np.float64)
    inv = counts.sum() / counts[present]
    w[present] = inv / inv.mean()
    return w


def weighted_ce(seg: Tensor, labels, weights=None) -> Tensor:
    """``-mean_v w[y_v] log p_v[y_v]`` with probabilities floored at 1e-7."""
    labels = np.asarray(labels)
    classes = seg.shape[-1]
    if labels.shape != seg.shape[:-1]:
        raise ValueError(f"labels {labels.shape} do not match predictions {seg.shape}")
    if labels.max() >= classes:
        raise ValueError(f"label {labels.max()} out of range for {classes} classes")
    if weights is None:
        weights = np.ones(classes)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (classes,) or np.any(weights <= 0):
        raise ValueError("class weights must be positive, one per class")
    picked = one_hot(labels, classes, seg.dtype) * weights.astype(seg.dtype)
    logp = ops.log(ops.clamp_min(seg, PROB_FLOOR))
    return ops.neg(ops.mean(ops.sum(ops.mul(logp, picked), axis=-1)))


def masked_mse(recon: Tensor, target, labels) -> Tensor:
    """Mean squared error over foreground voxels (label > 0) and channels."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target,
                        dtype=recon.dtype)
    labels = np.asarray(labels)
    if target.shape != recon.shape or labels.shape != recon.shape[:-1]:
        raise ValueError(f"shape mismatch: recon {recon.shape}, input {target.shape}, "
                         f"labels {labels.shape}")
    mask = (labels > 0).astype(recon.dtype)[..., None]
    count = mask.sum() * recon.shape[-1]
    diff = ops.mul(ops.sub(recon, target), mask)
    total = ops.sum(ops.square(diff))
    if count == 0:
        return ops.mul(total, 0.0)
    return ops.mul(total, 1.0 / count)


@dataclass
class LossReport:
    margin: float
    ce: float
    recon: float
    total: float
    weights: tuple[float, float, float]


def total_loss(margin, ce, recon, weights=(1.0, 1.0, 1.0)):
    """Weighted sum of the three losses.

    Works on scalars (returns a :class:`LossReport`) and on tensors (returns
    the differentiable total).
    """
    wm, wc, wr = (float(w) for w in weights)
    if min(wm, wc, wr) < 0:
        raise ValueError(f"loss weights must be non-negative, got {weights}")
    if isinstance(margin, Tensor):
        return ops.add(ops.add(ops.mul(margin, wm), ops.mul(ce, wc)), ops.mul(recon, wr))
    margin, ce, recon = float(margin), float(ce), float(recon)
    return LossReport(margin, ce, recon, wm * margin + wc * ce + wr * recon, (wm, wc, wr))
