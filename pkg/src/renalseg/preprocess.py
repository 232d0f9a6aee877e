"""Transforms between raw 4D volumes and network inputs.

All functions are pure: inputs are never mutated. Arrays are channels-first
float32; label volumes are integer class maps of shape (D, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Volume4D:
    """A spatial grid sampled over time, with physical voxel spacing.

    data: (T, D, H, W) float32; voxel_spacing_mm: (x, y, z) with x along the
    W axis, y along H, z along D; time_points_sec: strictly increasing,
    length T.
    """

    data: np.ndarray
    voxel_spacing_mm: tuple
    time_points_sec: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"Volume4D data must be (T, D, H, W), got {self.data.ndim} axes")
        self.time_points_sec = np.asarray(self.time_points_sec, dtype=np.float64)
        if self.time_points_sec.shape != (self.data.shape[0],):
            raise ValueError(
                f"need one time point per frame: {self.time_points_sec.size} times, "
                f"{self.data.shape[0]} frames"
            )
        if self.data.shape[0] > 1 and not np.all(np.diff(self.time_points_sec) > 0):
            raise ValueError("time_points_sec must be strictly increasing")
        if any(s <= 0 for s in self.voxel_spacing_mm):
            raise ValueError("voxel spacing components must be positive")

    @property
    def spatial_dims(self):
        return self.data.shape[1:]

    @property
    def n_timepoints(self):
        return self.data.shape[0]


@dataclass
class PCABasis:
    """Orthonormal temporal components sorted by descending variance."""

    mean_curve: np.ndarray
    components: np.ndarray  # (K, T), rows orthonormal
    explained_variance: np.ndarray  # (K,), non-increasing
    degenerate: bool = False


def _axis_coords(target, source, dtype):
    """Corner-aligned source coordinates for ``target`` samples of an axis."""
    if target < 1:
        raise ValueError("target dims must be >= 1")
    if target == 1 or source == 1:
        return np.zeros(target, dtype=dtype)
    return np.arange(target, dtype=dtype) * (dtype(source - 1) / dtype(target - 1))


def resample_trilinear(vol, target_dims):
    """Trilinear resampling of a (C, D, H, W) array to ``target_dims``.

    Corner-aligned coordinates; the identity (bitwise) when the target
    equals the source, and exact on affine intensity fields.
    """
    vol = np.asarray(vol)
    if vol.ndim != 4:
        raise ValueError(f"expected (C, D, H, W), got {vol.ndim} axes")
    dt = vol.dtype.type if vol.dtype in (np.float32, np.float64) else np.float32
    coords = [_axis_coords(t, s, dt) for t, s in zip(target_dims, vol.shape[1:])]

    idx0, idx1, frac = [], [], []
    for pos, source in zip(coords, vol.shape[1:]):
        i0 = np.floor(pos).astype(np.intp)
        i0 = np.minimum(i0, source - 1)
        i1 = np.minimum(i0 + 1, source - 1)
        idx0.append(i0)
        idx1.append(i1)
        frac.append((pos - i0).astype(dt))

    wz, wy, wx = frac
    out = np.zeros((vol.shape[0],) + tuple(target_dims), dtype=dt)
    for dz, zi in ((0, idx0[0]), (1, idx1[0])):
        fz = (wz if dz else 1 - wz)[:, None, None]
        for dy, yi in ((0, idx0[1]), (1, idx1[1])):
            fy = (wy if dy else 1 - wy)[None, :, None]
            for dx, xi in ((0, idx0[2]), (1, idx1[2])):
                fx = (wx if dx else 1 - wx)[None, None, :]
                corner = vol[:, zi[:, None, None], yi[None, :, None], xi[None, None, :]]
                out += (fz * fy * fx) * corner
    return out


def resample_nearest(vol, target_dims):
    """Nearest-neighbour resampling of a (D, H, W) array (labels stay labels)."""
    vol = np.asarray(vol)
    if vol.ndim != 3:
        raise ValueError(f"expected (D, H, W), got {vol.ndim} axes")
    coords = [
        np.rint(_axis_coords(t, s, np.float64)).astype(np.intp).clip(0, s - 1)
        for t, s in zip(target_dims, vol.shape)
    ]
    return vol[coords[0][:, None, None], coords[1][None, :, None], coords[2][None, None, :]]


def fit_pca_time(vol, n_components=5):
    """Principal components of the voxel time curves of one subject.

    Each voxel's length-T curve is one sample. The T-by-T covariance is
    eigendecomposed at float64, the top components (descending variance) are
    kept, and each component's largest-magnitude entry is made positive.
    All-constant data yields a valid basis flagged as degenerate.
    """
    t = vol.n_timepoints
    if t < 2:
        raise ValueError("temporal PCA needs at least 2 time points")
    curves = vol.data.reshape(t, -1).T.astype(np.float64)
    mean_curve = curves.mean(axis=0)
    centered = curves - mean_curve
    cov = (centered.T @ centered) / max(curves.shape[0] - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    k = min(n_components, t)
    comps = eigvecs[:, order[:k]].T
    variances = np.clip(eigvals[order[:k]], 0.0, None)

    for row in comps:
        if row[np.abs(row).argmax()] < 0:
            row *= -1.0

    degenerate = bool(np.all(eigvals <= 1e-12 * max(1.0, np.abs(cov).max())))
    return PCABasis(
        mean_curve=mean_curve.astype(np.float32),
        components=np.ascontiguousarray(comps, dtype=np.float32),
        explained_variance=variances.astype(np.float32),
        degenerate=degenerate,
    )


def project_pca(vol, basis):
    """Centered projection of every voxel curve onto the basis components.

    Returns (K, D, H, W): channel k holds the coefficients on component k.
    """
    t = vol.n_timepoints
    if basis.components.shape[1] != t:
        raise ValueError(
            f"basis covers {basis.components.shape[1]} time points, volume has {t}"
        )
    flat = vol.data.reshape(t, -1)
    centered = flat - basis.mean_curve[:, None]
    coeffs = basis.components @ centered
    return np.ascontiguousarray(
        coeffs.reshape((basis.components.shape[0],) + vol.spatial_dims), dtype=np.float32
    )


def resample_time(vol, n_samples=50, duration_sec=300.0):
    """Per-voxel linear interpolation onto a uniform time grid.

    The grid spans [0, duration_sec] inclusive; queries outside the acquired
    range clamp to the nearest acquired frame.
    """
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    src_t = vol.time_points_sec
    new_t = np.linspace(0.0, float(duration_sec), n_samples)

    if vol.n_timepoints == 1:
        data = np.broadcast_to(vol.data, (n_samples,) + vol.spatial_dims).copy()
        return Volume4D(data, vol.voxel_spacing_mm, new_t)

    idx = np.searchsorted(src_t, new_t, side="right") - 1
    idx = np.clip(idx, 0, vol.n_timepoints - 2)
    span = (src_t[idx + 1] - src_t[idx])
    frac = np.clip((new_t - src_t[idx]) / span, 0.0, 1.0).astype(np.float32)
    w = frac[:, None, None, None]
    data = vol.data[idx] * (1 - w) + vol.data[idx + 1] * w
    return Volume4D(data, vol.voxel_spacing_mm, new_t)


def normalize(x):
    """Per-channel z-score over spatial positions; constant channels map to 0."""
    x = np.asarray(x)
    flat = x.reshape(x.shape[0], -1)
    mean = flat.mean(axis=1, dtype=np.float64)
    var = flat.var(axis=1, dtype=np.float64)
    std = np.sqrt(var)
    safe = np.where(std > 1e-12, std, 1.0)
    out = (flat - mean[:, None]) / safe[:, None]
    out[std <= 1e-12] = 0.0
    return np.ascontiguousarray(out.reshape(x.shape), dtype=np.float32)


def augment_scale(vol, labels, factor):
    """Rescale spatial content about the volume centre, keeping the dims.

    Intensities are interpolated trilinearly, labels by nearest neighbour so
    the label set is preserved; sampling positions outside the volume clamp
    to the border. Factor 1.0 is the identity.
    """
    if not 0.5 <= factor <= 2.0:
        raise ValueError(f"scale factor must be in [0.5, 2.0], got {factor}")
    vol = np.asarray(vol)
    labels = np.asarray(labels)
    if vol.ndim != 4 or labels.ndim != 3 or vol.shape[1:] != labels.shape:
        raise ValueError(
            f"expected data (C, D, H, W) with matching (D, H, W) labels; "
            f"got {vol.shape} and {labels.shape}"
        )
    if factor == 1.0:
        return vol.copy(), labels.copy()

    coords = []
    for size in labels.shape:
        centre = (size - 1) / 2.0
        coords.append(np.clip(centre + (np.arange(size) - centre) / factor, 0, size - 1))

    i0 = [np.floor(c).astype(np.intp) for c in coords]
    i1 = [np.minimum(a + 1, s - 1) for a, s in zip(i0, labels.shape)]
    fr = [np.asarray(c - a, dtype=np.float32) for c, a in zip(coords, i0)]

    out = np.zeros_like(vol, dtype=np.float32)
    wz, wy, wx = fr
    for dz, zi in ((0, i0[0]), (1, i1[0])):
        fz = (wz if dz else 1 - wz)[:, None, None]
        for dy, yi in ((0, i0[1]), (1, i1[1])):
            fy = (wy if dy else 1 - wy)[None, :, None]
            for dx, xi in ((0, i0[2]), (1, i1[2])):
                fx = (wx if dx else 1 - wx)[None, None, :]
                out += (fz * fy * fx) * vol[:, zi[:, None, None], yi[None, :, None], xi[None, None, :]]

    nn = [np.rint(c).astype(np.intp).clip(0, s - 1) for c, s in zip(coords, labels.shape)]
    new_labels = labels[nn[0][:, None, None], nn[1][None, :, None], nn[2][None, None, :]]
    return out, np.ascontiguousarray(new_labels)


def one_hot(labels, num_classes):
    """Indicator channels per class: (D, H, W) int map to (C, D, H, W) float32."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        bad = labels[(labels < 0) | (labels >= num_classes)].flat[0]
        raise ValueError(f"label {bad} outside [0, {num_classes})")
    out = np.zeros((num_classes,) + labels.shape, dtype=np.float32)
    for c in range(num_classes):
        out[c] = labels == c
    return out
