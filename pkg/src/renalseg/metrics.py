"""Overlap and volume metrics for binary segmentation masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, truth):
    """Voxelwise confusion counts between two equally sized binary masks."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask dims differ: {pred.shape} vs {truth.shape}")
    p = pred.astype(bool)
    t = truth.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def _ratio(num, den, counts):
    # Two empty masks agree perfectly; otherwise an empty denominator is 0.
    if counts.tp + counts.fp + counts.fn == 0:
        return 1.0
    if den == 0:
        return 0.0
    return num / den


def precision(counts):
    return _ratio(counts.tp, counts.tp + counts.fp, counts)


def recall(counts):
    return _ratio(counts.tp, counts.tp + counts.fn, counts)


def dice(counts):
    return _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn, counts)


def volumetric_error(pred, truth, voxel_spacing_mm):
    """Absolute volume difference in millilitres."""
    if any(s <= 0 for s in voxel_spacing_mm):
        raise ValueError("voxel spacing components must be positive")
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask dims differ: {pred.shape} vs {truth.shape}")
    voxel_mm3 = float(np.prod(voxel_spacing_mm))
    diff = abs(int(np.count_nonzero(pred)) - int(np.count_nonzero(truth)))
    return diff * voxel_mm3 / 1000.0
