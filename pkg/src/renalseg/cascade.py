"""Two-stage pipeline: coarse localization, per-kidney segmentation, reassembly.

Stage one runs the localizer on a downsampled, temporally PCA-reduced copy
of the volume and turns its per-class prediction into bounding boxes. Stage
two crops each box at full resolution, resamples the crop to the segmenter's
fixed input size and time grid, and maps the predicted mask back into the
original voxel coordinates.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .engine import Adam, Tensor, softmax_channels, weighted_cross_entropy
from .engine.loss import LossConfig, compute_class_weights
from .preprocess import (
    Volume4D,
    augment_scale,
    fit_pca_time,
    normalize,
    one_hot,
    project_pca,
    resample_nearest,
    resample_time,
    resample_trilinear,
)
from .unet import UNet3D, localizer_config, segmenter_config

RIGHT_KIDNEY, LEFT_KIDNEY = 1, 2
_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass
class BoundingBox:
    """Axis-aligned voxel region: ``lo`` inclusive, ``hi`` exclusive, (z, y, x)."""

    lo: tuple
    hi: tuple
    class_id: int

    def __post_init__(self):
        if any(l >= h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"empty bounding box lo={self.lo} hi={self.hi}")

    @property
    def sides(self):
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    def slices(self):
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    def volume(self):
        return int(np.prod(self.sides))


def box_iou(a, b):
    inter = 1
    for al, ah, bl, bh in zip(a.lo, a.hi, b.lo, b.hi):
        side = min(ah, bh) - max(al, bl)
        if side <= 0:
            return 0.0
        inter *= side
    union = a.volume() + b.volume() - inter
    return inter / union


@dataclass
class CascadeModel:
    """Both trained networks plus the preprocessing constants they assume."""

    localizer: UNet3D
    segmenter: UNet3D
    pca_components: int = 5
    loc_dims: tuple = (64, 64, 64)
    seg_dims: tuple = (64, 64, 64)
    time_samples: int = 50
    duration_sec: float = 300.0
    bbox_margin: float = 0.10

    def __post_init__(self):
        if self.localizer.config.in_channels != self.pca_components:
            raise ValueError(
                f"localizer expects {self.localizer.config.in_channels} channels, "
                f"pipeline produces {self.pca_components}"
            )
        if self.segmenter.config.in_channels != self.time_samples:
            raise ValueError(
                f"segmenter expects {self.segmenter.config.in_channels} channels, "
                f"pipeline produces {self.time_samples}"
            )


@dataclass
class SegmentationResult:
    """Combined label map in original coordinates plus bookkeeping."""

    labels: np.ndarray
    boxes: list
    localization_ms: float
    segmentation_ms: float
    total_ms: float
    empty: bool = False

    def kidney_mask(self, class_id):
        return self.labels == class_id


def _largest_component(mask):
    """Largest 6-connected component; ties pick the earliest raster start."""
    labeled, count = ndimage.label(mask, structure=_SIX_CONNECTED)
    if count == 0:
        return None
    sizes = ndimage.sum_labels(np.ones_like(labeled, dtype=np.int64), labeled, range(1, count + 1))
    # scipy assigns component ids in raster-scan order of first voxel, so the
    # smallest id among equal-sized components starts at the lowest index.
    winner = int(np.argmax(sizes)) + 1
    return labeled == winner


def _mask_bbox(mask, class_id):
    idx = np.nonzero(mask)
    if idx[0].size == 0:
        return None
    lo = tuple(int(a.min()) for a in idx)
    hi = tuple(int(a.max()) + 1 for a in idx)
    return BoundingBox(lo=lo, hi=hi, class_id=class_id)


def _scale_box(box, from_dims, to_dims):
    """Map a box between grids using the corner-aligned resampling scale."""
    lo, hi = [], []
    for l, h, src, dst in zip(box.lo, box.hi, from_dims, to_dims):
        if src == 1:
            lo.append(0)
            hi.append(dst)
            continue
        scale = (dst - 1) / (src - 1)
        lo.append(int(np.floor(l * scale)))
        hi.append(int(np.ceil((h - 1) * scale)) + 1)
    return BoundingBox(lo=tuple(lo), hi=tuple(hi), class_id=box.class_id)


def _expand_box(box, margin, bounds):
    lo, hi = [], []
    for l, h, n in zip(box.lo, box.hi, bounds):
        pad = int(round(margin * (h - l)))
        lo.append(max(0, l - pad))
        hi.append(min(n, h + pad))
    return BoundingBox(lo=tuple(lo), hi=tuple(hi), class_id=box.class_id)


def label_bounding_boxes(labels, class_ids=(RIGHT_KIDNEY, LEFT_KIDNEY), margin=0.0):
    """Tight box around each class present in a ground-truth label map."""
    boxes = []
    for class_id in class_ids:
        box = _mask_bbox(np.asarray(labels) == class_id, class_id)
        if box is not None:
            if margin > 0:
                box = _expand_box(box, margin, labels.shape)
            boxes.append(box)
    return boxes


def localizer_input(vol, loc_dims, pca_components):
    """Shared preprocessing: downsample, temporal PCA projection, z-score."""
    small = resample_trilinear(vol.data, loc_dims)
    small_vol = Volume4D(small, vol.voxel_spacing_mm, vol.time_points_sec)
    basis = fit_pca_time(small_vol, n_components=pca_components)
    channels = project_pca(small_vol, basis)
    if channels.shape[0] < pca_components:
        pad = np.zeros((pca_components - channels.shape[0],) + channels.shape[1:], np.float32)
        channels = np.concatenate([channels, pad], axis=0)
    return normalize(channels)


def boxes_from_classmap(classes, orig_dims, margin):
    """Bounding boxes from a predicted class map on the localizer grid.

    Per kidney class: keep the largest 6-connected component, take its tight
    box, map it to the original grid by the inverse resampling scale, then
    expand by ``margin`` per side (clamped to bounds). An empty class yields
    no box.
    """
    boxes = []
    for class_id in (RIGHT_KIDNEY, LEFT_KIDNEY):
        component = _largest_component(classes == class_id)
        if component is None:
            continue
        box = _mask_bbox(component, class_id)
        box = _scale_box(box, classes.shape, orig_dims)
        box = _expand_box(box, margin, orig_dims)
        boxes.append(box)
    return boxes


def localize(model, vol):
    """Predict per-kidney bounding boxes in original voxel coordinates.

    A class whose prediction is empty yields no box; spurious blobs are
    discarded by keeping only the largest 6-connected component per class.
    """
    x = localizer_input(vol, model.loc_dims, model.pca_components)
    logits = model.localizer.forward(Tensor(x), mode="eval")
    classes = np.argmax(logits.data, axis=0)
    return boxes_from_classmap(classes, vol.spatial_dims, model.bbox_margin)


def segmenter_input(vol, box, seg_dims, time_samples, duration_sec):
    """Crop one kidney region and shape it for the segmenter."""
    crop = Volume4D(
        vol.data[(slice(None),) + box.slices()], vol.voxel_spacing_mm, vol.time_points_sec
    )
    uniform = resample_time(crop, n_samples=time_samples, duration_sec=duration_sec)
    cube = resample_trilinear(uniform.data, seg_dims)
    return normalize(cube)


def segment_crop(model, vol, box):
    """Segment the kidney inside ``box``; returns a mask at the crop's dims."""
    for axis, (l, h) in zip("DHW", zip(box.lo, box.hi)):
        if h - l < 2:
            raise ValueError(f"degenerate bounding box: axis {axis} spans [{l}, {h})")
        if l < 0 or h > vol.spatial_dims["DHW".index(axis)]:
            raise ValueError(f"bounding box exceeds volume bounds on axis {axis}")
    x = segmenter_input(vol, box, model.seg_dims, model.time_samples, model.duration_sec)
    logits = model.segmenter.forward(Tensor(x), mode="eval")
    mask = (np.argmax(logits.data, axis=0) == 1).astype(np.uint8)
    return resample_nearest(mask, box.sides)


def reassemble(masks, out_dims):
    """Place per-box masks onto a background canvas of ``out_dims``.

    Overlapping foreground claims resolve to the lower class id.
    """
    canvas = np.zeros(out_dims, dtype=np.uint8)
    for box, mask in sorted(masks, key=lambda bm: -bm[0].class_id):
        if mask.shape != box.sides:
            raise ValueError(f"mask shape {mask.shape} does not fill box {box.sides}")
        region = canvas[box.slices()]
        region[mask > 0] = box.class_id
    return canvas


def predict(model, vol):
    """Full cascade on one volume; cost is dominated by two fixed-size passes."""
    t0 = time.perf_counter()
    boxes = localize(model, vol)
    t1 = time.perf_counter()
    masks = []
    for box in boxes:
        masks.append((box, segment_crop(model, vol, box)))
    labels = reassemble(masks, vol.spatial_dims)
    t2 = time.perf_counter()
    if not boxes:
        warnings.warn("localization produced no bounding boxes; returning empty segmentation")
    return SegmentationResult(
        labels=labels,
        boxes=boxes,
        localization_ms=(t1 - t0) * 1e3,
        segmentation_ms=(t2 - t1) * 1e3,
        total_ms=(t2 - t0) * 1e3,
        empty=not boxes,
    )


@dataclass
class TrainConfig:
    """Knobs for both training stages; defaults are the desk-scale choices."""

    epochs: int = 60
    learning_rate: float = 1e-4
    seed: int = 0
    depth: int = 3
    base_filters: int = 8
    dropout_rate: float = 0.25
    pca_components: int = 5
    loc_dims: tuple = (64, 64, 64)
    seg_dims: tuple = (64, 64, 64)
    time_samples: int = 50
    duration_sec: float = 300.0
    augment_copies: int = 4
    scale_min: float = 0.8
    scale_max: float = 1.2
    bbox_margin: float = 0.10

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.5 <= self.scale_min <= self.scale_max <= 2.0:
            raise ValueError("scale range must satisfy 0.5 <= min <= max <= 2.0")


def _train(net, samples, targets, config, rng, use_dropout):
    """Shared loop: class-weighted softmax cross-entropy, Adam, batch of one."""
    weights = compute_class_weights([Tensor(t) for t in targets])
    loss_cfg = LossConfig(class_weights=weights)
    optimizer = Adam(net.parameters(), learning_rate=config.learning_rate)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        for idx in order:
            x = Tensor(samples[idx])
            target = Tensor(targets[idx])
            logits = net.forward(x, mode="train", rng=rng if use_dropout else None)
            probs = softmax_channels(logits)
            loss, _ = weighted_cross_entropy(probs, target, loss_cfg)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
        history.append(epoch_loss / len(samples))
    return history


def train_localizer(dataset, config):
    """Train the low-resolution localizer on (Volume4D, labels) pairs.

    Per subject: resample to the localizer grid, project onto the leading
    temporal components, z-score, then add seeded scale-augmented copies.
    Returns the trained network and the per-epoch loss history.
    """
    if len(dataset) < 2:
        raise ValueError("training needs at least 2 subjects")
    rng = np.random.default_rng(config.seed)

    samples, targets = [], []
    for vol, labels in dataset:
        x = localizer_input(vol, config.loc_dims, config.pca_components)
        small_labels = resample_nearest(np.asarray(labels), config.loc_dims)
        variants = [(x, small_labels)]
        for _ in range(config.augment_copies):
            factor = float(rng.uniform(config.scale_min, config.scale_max))
            variants.append(augment_scale(x, small_labels, factor))
        for data, lab in variants:
            samples.append(data)
            targets.append(one_hot(lab, 3))

    net = UNet3D.build(
        localizer_config(
            pca_components=config.pca_components,
            depth=config.depth,
            base_filters=config.base_filters,
            dropout_rate=config.dropout_rate,
        ),
        rng=rng,
    )
    history = _train(net, samples, targets, config, rng, use_dropout=True)
    return net, history


def segmenter_training_samples(dataset, config, boxes_per_subject=None):
    """Crop, resample and one-hot-encode per-kidney training pairs.

    Boxes default to the tight ground-truth boxes (plus margin); a crop whose
    resampled target contains no foreground is rejected with a warning.
    """
    samples, targets = [], []
    for subject, (vol, labels) in enumerate(dataset):
        labels = np.asarray(labels)
        if boxes_per_subject is None:
            boxes = label_bounding_boxes(labels, margin=config.bbox_margin)
        else:
            boxes = boxes_per_subject[subject]
        for box in boxes:
            crop_labels = (labels[box.slices()] == box.class_id).astype(np.uint8)
            target = resample_nearest(crop_labels, config.seg_dims)
            if not target.any():
                warnings.warn(
                    f"subject {subject}: crop for class {box.class_id} has no foreground "
                    "after resampling; excluded from training"
                )
                continue
            x = segmenter_input(
                vol, box, config.seg_dims, config.time_samples, config.duration_sec
            )
            samples.append(x)
            targets.append(one_hot(target, 2))
    return samples, targets


def train_segmenter(dataset, config):
    """Train the per-kidney segmenter on ground-truth-box crops.

    Both kidneys of a subject are independent samples (no mirroring).
    """
    if len(dataset) < 2:
        raise ValueError("training needs at least 2 subjects")
    rng = np.random.default_rng(config.seed + 1)

    samples, targets = segmenter_training_samples(dataset, config)
    if len(samples) < 2:
        raise ValueError("segmenter training needs at least 2 non-empty kidney crops")

    net = UNet3D.build(
        segmenter_config(
            time_samples=config.time_samples,
            depth=config.depth,
            base_filters=config.base_filters,
        ),
        rng=rng,
    )
    history = _train(net, samples, targets, config, rng, use_dropout=False)
    return net, history
