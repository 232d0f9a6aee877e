"""Procedural 4D phantoms with kidney-like geometry and tissue enhancement curves.

Each phantom is two ellipsoidal kidneys (parenchyma shell around an optional
enlarged-pelvis cavity), an aorta-like cylinder and a liver-like blob on a
flat background. Every tissue follows its own gamma-variate enhancement
curve, so voxel time courses separate the classes by construction. Labels
mark parenchyma only: 0 background, 1 right kidney, 2 left kidney.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .preprocess import Volume4D

BACKGROUND, LIVER, AORTA, PARENCHYMA, PELVIS = range(5)


@dataclass
class TissueCurve:
    """Gamma-variate enhancement model: onset, rise to peak, decay."""

    tissue: str
    A: float
    t0: float
    tp: float
    alpha: float
    baseline: float

    def __post_init__(self):
        if self.tp <= 0 or self.alpha <= 0 or self.A < 0:
            raise ValueError("need tp > 0, alpha > 0, A >= 0")


DEFAULT_CURVES = {
    BACKGROUND: TissueCurve("background", A=0.0, t0=0.0, tp=1.0, alpha=1.0, baseline=0.30),
    LIVER: TissueCurve("liver-like", A=0.8, t0=20.0, tp=60.0, alpha=2.0, baseline=0.45),
    AORTA: TissueCurve("aorta-like", A=3.0, t0=10.0, tp=15.0, alpha=3.0, baseline=0.40),
    PARENCHYMA: TissueCurve("parenchyma", A=2.0, t0=15.0, tp=40.0, alpha=2.0, baseline=0.35),
    PELVIS: TissueCurve("pelvis", A=1.5, t0=90.0, tp=120.0, alpha=2.0, baseline=0.30),
}


def gamma_variate(curve, t):
    """Evaluate the curve at time(s) ``t`` (seconds); peak is baseline + A."""
    t = np.asarray(t, dtype=np.float64)
    rel = (t - curve.t0) / curve.tp
    rising = rel > 0
    value = np.full(t.shape, curve.baseline)
    r = np.where(rising, rel, 1.0)
    value = np.where(
        rising,
        curve.baseline + curve.A * r**curve.alpha * np.exp(curve.alpha * (1.0 - r)),
        value,
    )
    return value if value.ndim else float(value)


@dataclass
class PhantomSpec:
    """Geometry, enhancement, noise and sampling of one synthetic subject.

    Grid axes are (D, H, W); spacing is (x, y, z) mm with x along W, y along
    H, z along D. Kidney centres and semi-axes are in mm, ordered (z, y, x).
    ``pelvis_fraction`` scales the inner cavity: 0 is a normal kidney, values
    toward 1 model hydronephrosis (enlarged pelvis, thinned parenchyma).
    """

    grid_dims: tuple = (32, 224, 224)
    voxel_spacing_mm: tuple = (1.25, 1.25, 3.0)
    kidney_centers: tuple = ((48.0, 150.0, 85.0), (48.0, 150.0, 195.0))
    parenchyma_radii_mm: tuple = ((22.0, 35.0, 24.0), (22.0, 35.0, 24.0))
    pelvis_fraction: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    n_timepoints: int = 40
    duration_sec: float = 300.0
    curves: dict = field(default_factory=lambda: dict(DEFAULT_CURVES))

    def __post_init__(self):
        if not 0.0 <= self.pelvis_fraction < 1.0:
            raise ValueError("pelvis_fraction must be in [0, 1)")
        if self.n_timepoints < 2:
            raise ValueError("n_timepoints must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def fov_mm(self):
        """(z, y, x) physical extent of the grid."""
        d, h, w = self.grid_dims
        sx, sy, sz = self.voxel_spacing_mm
        return ((d - 1) * sz, (h - 1) * sy, (w - 1) * sx)


def acquisition_times(spec):
    """Two-phase sampling: dense early (arterial) frames, sparse late frames."""
    n = spec.n_timepoints
    if spec.duration_sec <= 120.0:
        return np.linspace(0.0, spec.duration_sec, n)
    n_early = max(int(round(0.6 * n)), 1)
    early = np.linspace(0.0, 120.0, n_early, endpoint=False)
    late = np.linspace(120.0, spec.duration_sec, n - n_early)
    return np.concatenate([early, late])


def _mm_grids(spec):
    d, h, w = spec.grid_dims
    sx, sy, sz = spec.voxel_spacing_mm
    z = (np.arange(d) * sz)[:, None, None]
    y = (np.arange(h) * sy)[None, :, None]
    x = (np.arange(w) * sx)[None, None, :]
    return z, y, x


def _ellipsoid_mask(spec, center, radii):
    z, y, x = _mm_grids(spec)
    cz, cy, cx = center
    rz, ry, rx = radii
    if min(radii) <= 0:
        return np.zeros(spec.grid_dims, dtype=bool)
    return ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


def min_curve_separation(spec):
    """Smallest pairwise L2 distance between distinct tissue curves."""
    times = acquisition_times(spec)
    sampled = [gamma_variate(c, times) for c in spec.curves.values()]
    best = np.inf
    for i in range(len(sampled)):
        for j in range(i + 1, len(sampled)):
            best = min(best, float(np.linalg.norm(sampled[i] - sampled[j])))
    return best


def generate(spec):
    """Rasterize the phantom; returns (Volume4D, labels).

    Noise is zero-mean Gaussian, seeded, so generation is a pure function of
    the spec. Labels cover parenchyma shells only (the segmentation target);
    the pelvis cavity, distractor tissues and background are class 0.
    """
    fov_z, fov_y, fov_x = spec.fov_mm
    tissue = np.full(spec.grid_dims, BACKGROUND, dtype=np.uint8)
    labels = np.zeros(spec.grid_dims, dtype=np.uint8)

    # Distractors first so kidneys take precedence on any overlap.
    liver_center = (0.35 * fov_z, 0.45 * fov_y, 0.22 * fov_x)
    liver_radii = (0.30 * fov_z, 0.28 * fov_y, 0.16 * fov_x)
    tissue[_ellipsoid_mask(spec, liver_center, liver_radii)] = LIVER

    z, y, x = _mm_grids(spec)
    aorta_radius = 0.03 * min(fov_y, fov_x)
    aorta = ((y - 0.5 * fov_y) ** 2 + (x - 0.5 * fov_x) ** 2) <= aorta_radius**2
    tissue[np.broadcast_to(aorta, spec.grid_dims)] = AORTA

    kidney_masks = []
    for center, radii in zip(spec.kidney_centers, spec.parenchyma_radii_mm):
        for c, r, extent in zip(center, radii, (fov_z, fov_y, fov_x)):
            if c - r < 0 or c + r > extent:
                raise ValueError(
                    f"kidney at {center} with radii {radii} extends outside the grid"
                )
        outer = _ellipsoid_mask(spec, center, radii)
        inner = _ellipsoid_mask(
            spec, center, tuple(spec.pelvis_fraction * r for r in radii)
        )
        kidney_masks.append((outer & ~inner, inner))

    if np.any(
        (kidney_masks[0][0] | kidney_masks[0][1]) & (kidney_masks[1][0] | kidney_masks[1][1])
    ):
        raise ValueError("kidneys overlap; adjust centers or radii")

    for class_id, (shell, cavity) in enumerate(kidney_masks, start=1):
        tissue[shell] = PARENCHYMA
        tissue[cavity] = PELVIS
        labels[shell] = class_id

    times = acquisition_times(spec)
    curve_table = np.zeros((max(spec.curves) + 1, times.size), dtype=np.float32)
    for tissue_id, curve in spec.curves.items():
        curve_table[tissue_id] = gamma_variate(curve, times)

    data = np.ascontiguousarray(np.moveaxis(curve_table[tissue], -1, 0))
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape).astype(np.float32)

    vol = Volume4D(data, spec.voxel_spacing_mm, times)
    return vol, labels
