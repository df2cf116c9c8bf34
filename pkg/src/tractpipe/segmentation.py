"""Per-slice multi-label voxel classification with tri-planar aggregation.

A 3D subject is cut into 2D slices along the sagittal, coronal and axial
planes; one shared classifier maps every pixel of a slice to per-class
probabilities, the slices are restacked per plane and the three volumes are
averaged. The reference classifier is :class:`PatchMLP`, a two-layer
perceptron over the clamped ``(2r+1) x (2r+1)`` in-plane neighbourhood.
"""

from __future__ import annotations

import abc
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .volume import (
    PlaneAxis,
    ShapeMismatchError,
    Slice2D,
    as_labels,
    as_peaks,
    assemble_slices,
    check_same_grid,
    extract_slices,
)

__all__ = [
    "EPS",
    "TrainConfig",
    "TrainResult",
    "SliceClassifier",
    "PatchMLP",
    "bce_elements",
    "bce_loss",
    "forward_slice",
    "train",
    "predict_subject",
    "binarize",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

EPS = 1e-7
PLANES = (PlaneAxis.SAGITTAL, PlaneAxis.CORONAL, PlaneAxis.AXIAL)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 50
    batch_voxels: int = 256
    seed: int = 0
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (isinstance(self.epochs, int) and self.epochs >= 1):
            raise ValueError("epochs must be a positive integer")
        if not (isinstance(self.batch_voxels, int) and self.batch_voxels >= 1):
            raise ValueError("batch_voxels must be a positive integer")
        if not 0 < self.binarize_threshold < 1:
            raise ValueError("binarize_threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def _sigmoid(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class SliceClassifier(abc.ABC):
    """Maps a ``(W, H, C)`` slice to ``(W, H, N)`` probabilities."""

    channels: int
    classes: int

    @abc.abstractmethod
    def forward_slice(self, data: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def checksum(self) -> str: ...


class PatchMLP(SliceClassifier):
    """Two dense layers (ReLU hidden, sigmoid output) over an in-plane patch.

    Parameters are one flat float64 vector laid out as ``W1 (F x H)``, ``b1``,
    ``W2 (H x N)``, ``b2`` with ``F = (2r+1)^2 * C`` features ordered
    offset-major, channel-minor.
    """

    architecture = "patch_mlp"

    def __init__(self, channels: int, classes: int, patch_radius: int = 2, hidden_size: int = 32, params=None, seed: int = 0):
        if channels < 1 or classes < 1 or patch_radius < 0 or hidden_size < 1:
            raise ValueError("invalid PatchMLP dimensions")
        self.channels = int(channels)
        self.classes = int(classes)
        self.patch_radius = int(patch_radius)
        self.hidden_size = int(hidden_size)
        self.seed = int(seed)
        if params is None:
            params = self._init_params(seed)
        params = np.array(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params

    @property
    def n_features(self) -> int:
        return (2 * self.patch_radius + 1) ** 2 * self.channels

    @property
    def n_params(self) -> int:
        return (self.n_features + 1) * self.hidden_size + (self.hidden_size + 1) * self.classes

    def _init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        f, h, n = self.n_features, self.hidden_size, self.classes
        w1 = rng.standard_normal((f, h)) * math.sqrt(2.0 / f)
        w2 = rng.standard_normal((h, n)) * math.sqrt(1.0 / h)
        return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(n)])

    def unpack(self, params=None):
        p = self.params if params is None else params
        f, h, n = self.n_features, self.hidden_size, self.classes
        i = 0
        w1 = p[i : i + f * h].reshape(f, h)
        i += f * h
        b1 = p[i : i + h]
        i += h
        w2 = p[i : i + h * n].reshape(h, n)
        i += h * n
        b2 = p[i : i + n]
        return w1, b1, w2, b2

    def copy(self) -> "PatchMLP":
        return PatchMLP(self.channels, self.classes, self.patch_radius, self.hidden_size, self.params.copy(), self.seed)

    def checksum(self) -> str:
        return hashlib.sha256(self.params.tobytes()).hexdigest()

    # -- features ---------------------------------------------------------

    def offsets(self) -> list[tuple[int, int]]:
        r = self.patch_radius
        return [(a, b) for a in range(-r, r + 1) for b in range(-r, r + 1)]

    def slice_features(self, data: np.ndarray) -> np.ndarray:
        """``(W, H, C)`` slice to ``(W*H, F)`` patch features, border-clamped."""
        w, h, c = data.shape
        r = self.patch_radius
        padded = np.pad(np.asarray(data, dtype=np.float64), ((r, r), (r, r), (0, 0)), mode="edge")
        feats = np.stack([padded[r + a : r + a + w, r + b : r + b + h] for a, b in self.offsets()], axis=2)
        return feats.reshape(w * h, -1)

    # -- forward / backward ----------------------------------------------

    def logits(self, feats: np.ndarray, params=None):
        w1, b1, w2, b2 = self.unpack(params)
        pre = feats @ w1 + b1
        hidden = np.maximum(pre, 0.0)
        return hidden @ w2 + b2, pre, hidden

    def forward_features(self, feats: np.ndarray, params=None) -> np.ndarray:
        return _sigmoid(self.logits(feats, params)[0])

    def forward_slice(self, data: np.ndarray) -> np.ndarray:
        data = np.asarray(data)
        if data.ndim != 3 or data.shape[2] != self.channels:
            raise ShapeMismatchError(f"slice must be (W, H, {self.channels}), got {data.shape}")
        probs = self.forward_features(self.slice_features(data))
        return probs.reshape(data.shape[0], data.shape[1], self.classes)

    def batch_loss(self, feats, labels, weights=None, params=None) -> float:
        probs = self.forward_features(feats, params)
        elems = bce_elements(probs, labels)
        if weights is not None:
            elems = elems * weights
        return float(np.mean(elems))

    def loss_and_grad(self, feats, labels, weights=None, params=None):
        """Mean (optionally weighted) BCE over a batch and its parameter gradient.

        The output-layer error is ``p - l``, the gradient of the unclipped
        loss; it equals the clipped one wherever ``p`` lies inside the clip.
        """
        w1, b1, w2, b2 = self.unpack(params)
        z, pre, hidden = self.logits(feats, params)
        probs = _sigmoid(z)
        elems = bce_elements(probs, labels)
        delta = probs - labels
        if weights is not None:
            elems = elems * weights
            delta = delta * weights
        loss = float(np.mean(elems))
        delta = delta / delta.size
        g_w2 = hidden.T @ delta
        g_b2 = delta.sum(axis=0)
        back = (delta @ w2.T) * (pre > 0)
        g_w1 = feats.T @ back
        g_b1 = back.sum(axis=0)
        return loss, np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])


def bce_elements(pred, label) -> np.ndarray:
    p = np.clip(np.asarray(pred, dtype=np.float64), EPS, 1.0 - EPS)
    l = np.asarray(label, dtype=np.float64)
    if p.shape != l.shape:
        raise ShapeMismatchError(f"prediction {p.shape} and label {l.shape} shapes differ")
    return -(l * np.log(p) + (1.0 - l) * np.log(1.0 - p))


def _reduce(elems: np.ndarray) -> float:
    # mean over voxels per class, then mean over classes
    return float(np.mean(elems.reshape(-1, elems.shape[-1]).mean(axis=0)))


def bce_loss(pred, label) -> float:
    """Binary cross-entropy: per-class mean over voxels, averaged over classes."""
    return _reduce(bce_elements(pred, label))


def forward_slice(model: SliceClassifier, slc: Slice2D) -> np.ndarray:
    return model.forward_slice(slc.data)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: PatchMLP
    trace: list[float]


class _VoxelSampler:
    """Draws (subject, plane, voxel) samples and gathers their patch features."""

    def __init__(self, model: PatchMLP, volumes, labels, weights):
        r = model.patch_radius
        self.r = r
        padded = np.stack([np.pad(v, ((r, r), (r, r), (r, r), (0, 0)), mode="edge") for v in volumes])
        self.padded_shape = padded.shape
        self.flat = padded.reshape(-1, padded.shape[-1])
        self.labels = np.stack(labels).astype(np.float64)
        self.weights = None if weights is None else np.stack(weights).astype(np.float64)
        self.dims = volumes[0].shape[:3]
        _, px, py, pz, _ = padded.shape
        strides = np.array([py * pz, pz, 1], dtype=np.intp)
        offs = np.array(model.offsets(), dtype=np.intp)
        # per plane, flat offsets of the patch along its two in-plane axes
        plane_offsets = []
        for plane in PLANES:
            a1, a2 = plane.in_plane_axes
            plane_offsets.append(offs[:, 0] * strides[a1] + offs[:, 1] * strides[a2])
        self.plane_offsets = np.stack(plane_offsets)
        self.strides = strides
        self.subject_stride = px * py * pz

    @property
    def n_voxels(self) -> int:
        return self.labels.shape[0] * int(np.prod(self.dims))

    def draw(self, rng: np.random.Generator, n: int):
        s = rng.integers(0, self.labels.shape[0], n)
        plane = rng.integers(0, 3, n)
        xyz = np.stack([rng.integers(0, d, n) for d in self.dims], axis=1)
        return s, plane, xyz

    def gather(self, s, plane, xyz):
        centre = s * self.subject_stride + (xyz + self.r) @ self.strides
        idx = centre[:, None] + self.plane_offsets[plane]
        feats = np.take(self.flat, idx.ravel(), axis=0).reshape(len(s), -1)
        x, y, z = xyz.T
        labels = self.labels[s, x, y, z]
        weights = None if self.weights is None else self.weights[s, x, y, z]
        return feats, labels, weights


def train(model: PatchMLP, dataset, cfg: TrainConfig, weight_source=None) -> TrainResult:
    """Mini-batch SGD on (optionally voxel-weighted) BCE.

    ``dataset`` is a sequence of ``(peaks, labels)`` pairs on a common grid;
    ``weight_source`` is ``None`` or one ``(X, Y, Z, N)`` weight map per pair.
    Each batch samples subject, plane and voxel uniformly. One epoch is
    ``ceil(total voxels / batch_voxels)`` steps. The input model is not modified.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    volumes, labels = [], []
    for peaks, lab in dataset:
        peaks = as_peaks(peaks)
        lab = as_labels(lab)
        check_same_grid(peaks, lab, "peaks and labels")
        if peaks.shape[:3] != dataset[0][0].shape[:3]:
            raise ShapeMismatchError("all training subjects must share one grid")
        if peaks.shape[3] != model.channels or lab.shape[3] != model.classes:
            raise ShapeMismatchError(
                f"model expects {model.channels} channels / {model.classes} classes, "
                f"got {peaks.shape[3]} / {lab.shape[3]}"
            )
        volumes.append(peaks)
        labels.append(lab)
    weights = None
    if weight_source is not None:
        weights = [np.asarray(w, dtype=np.float64) for w in weight_source]
        if len(weights) != len(volumes) or any(w.shape != l.shape for w, l in zip(weights, labels)):
            raise ShapeMismatchError("weight maps must match the labels one to one")

    sampler = _VoxelSampler(model, volumes, labels, weights)
    steps = math.ceil(sampler.n_voxels / cfg.batch_voxels)
    rng = np.random.default_rng(cfg.seed)
    params = model.params.copy()
    trace = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(steps):
            feats, lab, w = sampler.gather(*sampler.draw(rng, cfg.batch_voxels))
            loss, grad = model.loss_and_grad(feats, lab, w, params)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            params -= cfg.learning_rate * grad
            if not np.all(np.isfinite(params)):
                raise FloatingPointError(f"parameters diverged at epoch {epoch}")
            total += loss
        trace.append(total / steps)
        log.debug("epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, trace[-1])
    trained = model.copy()
    trained.params = params
    return TrainResult(trained, trace)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def predict_plane(model: SliceClassifier, vol: np.ndarray, plane: PlaneAxis) -> np.ndarray:
    out = [Slice2D(plane, s.index, model.forward_slice(s.data)) for s in extract_slices(vol, plane)]
    return assemble_slices(out, plane)


def predict_subject(model: SliceClassifier, vol, planes=PLANES) -> np.ndarray:
    """Tri-planar prediction: mean of the three restacked per-plane volumes."""
    vol = as_peaks(vol)
    if vol.shape[3] != model.channels:
        raise ShapeMismatchError(f"model expects {model.channels} channels, volume has {vol.shape[3]}")
    per_plane = {plane: predict_plane(model, vol, plane) for plane in planes}
    if set(per_plane) != set(PLANES):
        raise ValueError("prediction needs all three planes")
    # fixed summation order keeps the result independent of processing order
    total = per_plane[PLANES[0]] + per_plane[PLANES[1]] + per_plane[PLANES[2]]
    return total / 3.0


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(pred) >= threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _model_paths(path):
    p = Path(path)
    name = p.name
    for suffix in (".model.json", ".model.bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return p.with_name(name + ".model.json"), p.with_name(name + ".model.bin")


def save_model(model: PatchMLP, path) -> Path:
    hpath, bpath = _model_paths(path)
    hpath.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "architecture": model.architecture,
        "channels": model.channels,
        "classes": model.classes,
        "patch_radius": model.patch_radius,
        "hidden_size": model.hidden_size,
        "seed": model.seed,
        "n_params": model.n_params,
        "dtype": "f64",
        "sha256": model.checksum(),
    }
    bpath.write_bytes(model.params.astype("<f8").tobytes())
    hpath.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    return hpath


def load_model(path) -> PatchMLP:
    hpath, bpath = _model_paths(path)
    if not hpath.exists():
        raise FileNotFoundError(f"model checkpoint not found: {hpath}")
    header = json.loads(hpath.read_text(encoding="utf-8"))
    if header.get("architecture") != PatchMLP.architecture:
        raise ValueError(f"{hpath}: unknown architecture {header.get('architecture')!r}")
    params = np.frombuffer(bpath.read_bytes(), dtype="<f8").astype(np.float64)
    if params.size != header["n_params"]:
        raise ValueError(f"{bpath}: expected {header['n_params']} parameters, found {params.size}")
    return PatchMLP(
        header["channels"], header["classes"], header["patch_radius"], header["hidden_size"], params, header["seed"]
    )
