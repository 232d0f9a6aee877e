"""Cascaded 3D convolutional segmentation of kidneys in 4D contrast volumes.

A compact low-resolution network localizes both kidneys on temporally
PCA-reduced data; a second network segments each localized kidney at full
resolution from its resampled time curves. Everything — tensor engine,
networks, preprocessing, synthetic phantoms, metrics, file formats — lives
in this package with no deep-learning framework dependency.
"""

from .cascade import (
    BoundingBox,
    CascadeModel,
    SegmentationResult,
    TrainConfig,
    localize,
    predict,
    reassemble,
    segment_crop,
    train_localizer,
    train_segmenter,
)
from .preprocess import PCABasis, Volume4D
from .unet import UNet3D, UNetConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "CascadeModel",
    "PCABasis",
    "SegmentationResult",
    "TrainConfig",
    "UNet3D",
    "UNetConfig",
    "Volume4D",
    "load_checkpoint",
    "localize",
    "predict",
    "reassemble",
    "save_checkpoint",
    "segment_crop",
    "train_localizer",
    "train_segmenter",
    "__version__",
]
