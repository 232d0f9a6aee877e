"""Class-weighted binary cross-entropy over per-voxel class probabilities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class LossConfig:
    """Per-class weights plus the clamp keeping log arguments finite."""

    class_weights: list = field(default_factory=lambda: [1.0])
    clip_epsilon: float = 1e-7

    def __post_init__(self):
        if any(w <= 0 for w in self.class_weights):
            raise ValueError("class_weights must all be positive")
        if not 0.0 < self.clip_epsilon < 0.5:
            raise ValueError(f"clip_epsilon must be in (0, 0.5), got {self.clip_epsilon}")


def _check_one_hot(target):
    sums = target.sum(axis=0)
    if not np.all(np.abs(sums - 1.0) <= 1e-6):
        bad = int(np.abs(sums - 1.0).argmax())
        raise ValueError(
            f"target is not one-hot: channel sum {sums.flat[bad]:.6g} at voxel index {bad}"
        )


def weighted_cross_entropy(pred, target, cfg):
    """Mean class-weighted binary cross-entropy over all voxel-channel elements.

    pred: (C, D, H, W) probabilities; target: matching one-hot labels;
    weights apply per channel. Returns ``(loss, grad)`` where ``loss`` is a
    scalar graph tensor (``loss.backward()`` routes through ``pred``) and
    ``grad`` is the analytic d(loss)/d(pred) array, consistent with the
    clipped forward (zero where the clamp is active).
    """
    pred_t = pred if isinstance(pred, Tensor) else Tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred_t.data.dtype)
    if t.shape != pred_t.data.shape:
        raise ValueError(f"pred shape {pred_t.data.shape} != target shape {t.shape}")
    _check_one_hot(t)

    dt = pred_t.data.dtype
    eps = dt.type(cfg.clip_epsilon)
    weights = np.asarray(cfg.class_weights, dtype=dt)
    if weights.shape != (pred_t.data.shape[0],):
        raise ValueError(
            f"need one class weight per channel: {weights.size} weights, "
            f"{pred_t.data.shape[0]} channels"
        )

    p = np.clip(pred_t.data, eps, 1 - eps)
    inside = (pred_t.data > eps) & (pred_t.data < 1 - eps)
    w = weights[:, None, None, None]
    n = pred_t.data.size
    loss_val = -(w * (t * np.log(p) + (1 - t) * np.log1p(-p))).sum() / n
    grad = np.where(inside, -(w / n) * (t / p - (1 - t) / (1 - p)), dt.type(0))

    def backward(g):
        if pred_t.requires_grad:
            pred_t.accumulate_grad(g * grad)

    loss = Tensor(
        np.asarray(loss_val, dtype=dt),
        requires_grad=pred_t.requires_grad,
        _parents=(pred_t,),
        _backward_fn=backward,
    )
    return loss, grad


def compute_class_weights(labels):
    """Inverse-frequency class weights from a dataset of one-hot label tensors.

    weight[c] = total_voxels / (num_classes * count_of_class_c), rescaled so
    the smallest weight is 1. Computed once over the whole training set.
    """
    counts = None
    for lab in labels:
        arr = lab.data if isinstance(lab, Tensor) else np.asarray(lab)
        _check_one_hot(arr)
        per_class = arr.reshape(arr.shape[0], -1).sum(axis=1, dtype=np.float64)
        counts = per_class if counts is None else counts + per_class
    if counts is None:
        raise ValueError("empty label dataset")
    if np.any(counts == 0):
        missing = int(np.argmin(counts))
        raise ValueError(f"class {missing} never occurs in the label dataset")
    total = counts.sum()
    weights = total / (counts.size * counts)
    weights = weights / weights.min()
    return [float(w) for w in weights]
