"""Dense multi-channel volumes: validation, trilinear sampling, tri-planar
slicing and the on-disk format.

Volumes are plain numpy arrays shaped ``(X, Y, Z, C)``. Peak volumes are
real valued, label volumes hold 0/1 bytes with one channel per tract.

On disk a volume is a JSON header ``<name>.vol.json`` next to a raw
little-endian payload ``<name>.vol.bin``. The payload is ordered channel
fastest, then x, then y, then z (z slowest).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "PlaneAxis",
    "Slice2D",
    "VolumeError",
    "ShapeMismatchError",
    "VolumeFormatError",
    "TruncatedPayloadError",
    "NonFiniteError",
    "as_peaks",
    "as_labels",
    "check_same_grid",
    "sample_trilinear",
    "extract_slices",
    "assemble_slices",
    "volume_paths",
    "read_header",
    "load_volume",
    "save_volume",
]

ORDER = "c-fastest-xyz"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeError(ValueError):
    pass


class ShapeMismatchError(VolumeError):
    pass


class VolumeFormatError(VolumeError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class NonFiniteError(VolumeFormatError):
    pass


class PlaneAxis(enum.Enum):
    """Slicing plane, valued by the array axis held fixed."""

    SAGITTAL = 0
    CORONAL = 1
    AXIAL = 2

    @property
    def axis(self) -> int:
        return self.value

    @property
    def in_plane_axes(self) -> tuple[int, int]:
        return tuple(a for a in range(3) if a != self.value)


@dataclass(frozen=True)
class Slice2D:
    """One 2D slice; ``data`` is ``(width, height, C)`` over the two in-plane
    axes in increasing axis order."""

    plane: PlaneAxis
    index: int
    data: np.ndarray

    @property
    def width(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def as_peaks(vol) -> np.ndarray:
    """Validate a peak volume and return it as float64."""
    arr = np.asarray(vol, dtype=np.float64)
    if arr.ndim != 4 or min(arr.shape) < 1:
        raise ShapeMismatchError(f"expected a (X, Y, Z, C) volume, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("volume contains NaN or Inf")
    return arr


def as_labels(lab) -> np.ndarray:
    """Validate a binary label volume and return it as uint8."""
    arr = np.asarray(lab)
    if arr.ndim != 4 or min(arr.shape) < 1:
        raise ShapeMismatchError(f"expected a (X, Y, Z, N) label volume, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise VolumeError("label volume must contain only 0 and 1")
    return arr.astype(np.uint8, copy=False)


def check_same_grid(a: np.ndarray, b: np.ndarray, what: str = "volumes") -> None:
    if a.shape[:3] != b.shape[:3]:
        raise ShapeMismatchError(f"{what} disagree on dims: {a.shape[:3]} vs {b.shape[:3]}")


def _axis_weights(c: float, n: int) -> tuple[int, int, float]:
    c = min(max(c, 0.0), float(n - 1))
    if n == 1:
        return 0, 0, 0.0
    i0 = min(int(math.floor(c)), n - 2)
    return i0, i0 + 1, c - i0


def sample_trilinear(vol: np.ndarray, point) -> np.ndarray:
    """Trilinear sample of every channel at a voxel-space ``point``.

    Out-of-range coordinates are clamped to the border.
    """
    x, y, z = (float(p) for p in point)
    if not all(math.isfinite(p) for p in (x, y, z)):
        raise ValueError("sample point must be finite")
    nx, ny, nz = vol.shape[:3]
    x0, x1, fx = _axis_weights(x, nx)
    y0, y1, fy = _axis_weights(y, ny)
    z0, z1, fz = _axis_weights(z, nz)
    wx, wy, wz = (1.0 - fx, fx), (1.0 - fy, fy), (1.0 - fz, fz)
    xs, ys, zs = (x0, x1), (y0, y1), (z0, z1)
    out = np.zeros(vol.shape[3], dtype=np.float64)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                out += wx[a] * wy[b] * wz[c] * np.asarray(vol[xs[a], ys[b], zs[c]], dtype=np.float64)
    return out


def extract_slices(vol: np.ndarray, plane: PlaneAxis) -> list[Slice2D]:
    """Decompose a volume into the ordered 2D slices of ``plane``."""
    vol = np.asarray(vol)
    if vol.ndim != 4:
        raise ShapeMismatchError(f"expected a 4D volume, got shape {vol.shape}")
    moved = np.moveaxis(vol, plane.axis, 0)
    return [Slice2D(plane, i, moved[i]) for i in range(moved.shape[0])]


def assemble_slices(slices, plane: PlaneAxis) -> np.ndarray:
    """Stack slices back into a volume; inverse of :func:`extract_slices`."""
    slices = list(slices)
    if not slices:
        raise ShapeMismatchError("cannot assemble an empty slice list")
    shape = slices[0].data.shape
    for pos, s in enumerate(slices):
        if s.plane is not plane:
            raise ShapeMismatchError(f"slice {pos} belongs to plane {s.plane.name}, expected {plane.name}")
        if s.index != pos:
            raise ShapeMismatchError(f"slice indices must run 0..n-1 in order; got {s.index} at position {pos}")
        if s.data.shape != shape:
            raise ShapeMismatchError(f"slice {pos} has shape {s.data.shape}, expected {shape}")
    return np.moveaxis(np.stack([s.data for s in slices], axis=0), 0, plane.axis)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def volume_paths(path) -> tuple[Path, Path]:
    """Return ``(header, payload)`` paths for a volume stem or either file."""
    p = Path(path)
    name = p.name
    for suffix in (".vol.json", ".vol.bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    stem = p.with_name(name)
    return stem.with_name(name + ".vol.json"), stem.with_name(name + ".vol.bin")


def save_volume(vol, path, kind: str | None = None, dtype: str | None = None) -> Path:
    """Write ``vol`` to ``<path>.vol.json`` + ``<path>.vol.bin``.

    ``dtype`` defaults to ``u8`` for integer/bool arrays and ``f32`` otherwise.
    Returns the header path.
    """
    arr = np.asarray(vol)
    if arr.ndim != 4:
        raise ShapeMismatchError(f"expected a 4D volume, got shape {arr.shape}")
    if dtype is None:
        dtype = "u8" if (arr.dtype == bool or np.issubdtype(arr.dtype, np.integer)) else "f32"
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}")
    if dtype == "f32" and not np.all(np.isfinite(arr)):
        raise NonFiniteError("refusing to save a volume with NaN or Inf")
    header = {
        "dims": [int(d) for d in arr.shape[:3]],
        "channels": int(arr.shape[3]),
        "dtype": dtype,
        "order": ORDER,
    }
    if kind is not None:
        header["kind"] = kind
    hpath, bpath = volume_paths(path)
    hpath.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(arr.transpose(2, 1, 0, 3), dtype=_DTYPES[dtype])
    bpath.write_bytes(payload.tobytes())
    hpath.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    return hpath


def read_header(path) -> dict:
    hpath, _ = volume_paths(path)
    try:
        header = json.loads(hpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{hpath}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise VolumeFormatError(f"{hpath}: header must be a JSON object")
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d > 0 for d in dims)):
        raise VolumeFormatError(f"{hpath}: 'dims' must be three positive integers")
    channels = header.get("channels")
    if not (isinstance(channels, int) and channels > 0):
        raise VolumeFormatError(f"{hpath}: 'channels' must be a positive integer")
    if header.get("dtype") not in _DTYPES:
        raise VolumeFormatError(f"{hpath}: 'dtype' must be one of {sorted(_DTYPES)}")
    if header.get("order") != ORDER:
        raise VolumeFormatError(f"{hpath}: 'order' must be {ORDER!r}")
    return header


def load_volume(path) -> np.ndarray:
    """Read a volume written by :func:`save_volume`.

    Returns float32 or uint8 data shaped ``(X, Y, Z, C)``.
    """
    header = read_header(path)
    _, bpath = volume_paths(path)
    (nx, ny, nz), nc = header["dims"], header["channels"]
    dt = _DTYPES[header["dtype"]]
    raw = bpath.read_bytes()
    expected = nx * ny * nz * nc * dt.itemsize
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{bpath}: payload has {len(raw)} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype=dt).reshape(nz, ny, nx, nc).transpose(2, 1, 0, 3)
    arr = np.ascontiguousarray(arr).astype(dt.newbyteorder("="), copy=False)
    if header["dtype"] == "f32" and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{bpath}: payload contains NaN or Inf")
    if header.get("kind") == "labels":
        as_labels(arr)
    return arr
