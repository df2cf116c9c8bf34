"""Uncertainty-based refining of pseudo labels.

A frozen model's tri-planar prediction ``z`` on a pseudo subject becomes a
per-voxel, per-class confidence ``um = |2z - 1|`` (0 at ``z = 0.5``, 1 at
saturated predictions), which then weights the element-wise BCE.
"""

from __future__ import annotations

import numpy as np

from .segmentation import SliceClassifier, _reduce, bce_elements, predict_subject
from .volume import ShapeMismatchError, load_volume, save_volume

__all__ = [
    "FrozenModelMutated",
    "uncertainty_transform",
    "uncertainty_map_for_subject",
    "weighted_bce_loss",
    "save_uncertainty",
    "load_uncertainty",
]


class FrozenModelMutated(RuntimeError):
    pass


def uncertainty_transform(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.where(z > 0.5, 2.0 * z - 1.0, 1.0 - 2.0 * z)


def uncertainty_map_for_subject(model_a: SliceClassifier, pseudo) -> np.ndarray:
    """Confidence map of the frozen ``model_a`` on one pseudo subject."""
    before = model_a.checksum()
    um = uncertainty_transform(predict_subject(model_a, pseudo))
    if model_a.checksum() != before:
        raise FrozenModelMutated("model A parameters changed while computing an uncertainty map")
    return um


def weighted_bce_loss(pred, label, um) -> float:
    """Element-wise BCE scaled by ``um`` and reduced like :func:`bce_loss`."""
    elems = bce_elements(pred, label)
    um = np.asarray(um, dtype=np.float64)
    if um.shape != elems.shape:
        raise ShapeMismatchError(f"uncertainty map {um.shape} does not match predictions {elems.shape}")
    return _reduce(elems * um)


def save_uncertainty(um, path):
    return save_volume(um, path, kind="uncertainty", dtype="f32")


def load_uncertainty(path) -> np.ndarray:
    return load_volume(path).astype(np.float64)
