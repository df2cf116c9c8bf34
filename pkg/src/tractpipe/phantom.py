"""Synthetic peak-volume cohorts with exact ground-truth tract labels.

An atlas holds ``N`` tubular tracts around smooth centerlines; each in-tube
voxel carries the unit tangent of its nearest centerline as its peak vector.
Cohort members are the atlas deformed by independent random smooth fields,
plus clipped Gaussian noise on the peaks. Member 0 is the one labeled
subject, the next ones are unlabeled, the last ``n_test`` are the test set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
from scipy.ndimage import gaussian_filter

from .registration import warp, warp_labels
from .rpa import LabeledSubject

__all__ = [
    "PhantomConfig",
    "PhantomSubject",
    "Cohort",
    "tube_centerline",
    "generate_atlas",
    "random_smooth_field",
    "generate_cohort",
]


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    n_tracts: int = 3
    channels: int = 3
    tube_radius: float = 2.5
    deform_amplitude: float = 2.0
    deform_smoothness: float = 4.0
    noise_sigma: float = 0.1
    cohort_size: int = 16
    n_test: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError("phantom dims must be three integers >= 8")
        if self.n_tracts < 1:
            raise ValueError("n_tracts must be >= 1")
        if self.channels < 3 or self.channels % 3:
            raise ValueError("channels must be a positive multiple of 3")
        if not self.tube_radius > 0:
            raise ValueError("tube_radius must be > 0")
        if self.deform_amplitude < 0:
            raise ValueError("deform_amplitude must be >= 0")
        if not self.deform_smoothness > 0:
            raise ValueError("deform_smoothness must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_test < 1 or self.cohort_size - 1 - self.n_test < 1:
            raise ValueError("cohort_size must leave one labeled, >= 1 unlabeled and >= 1 test member")

    @property
    def n_unlabeled(self) -> int:
        return self.cohort_size - 1 - self.n_test

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


@dataclass
class PhantomSubject:
    peaks: np.ndarray
    truth: np.ndarray
    id: str = "atlas"


@dataclass
class Cohort:
    labeled: LabeledSubject
    unlabeled: list[np.ndarray]
    unlabeled_ids: list[str]
    test: list[PhantomSubject]
    # kept in memory for audits; never written next to the training data
    hidden_truth: dict[str, np.ndarray] = dc_field(default_factory=dict, repr=False)
    fields: dict[str, np.ndarray] = dc_field(default_factory=dict, repr=False)


def tube_centerline(dims, rng: np.random.Generator, axis: int, n_points: int = 64) -> np.ndarray:
    """A smooth random curve crossing the volume roughly along ``axis``.

    Quadratic Bezier through a random interior control point, sampled into
    ``n_points`` vertices.
    """
    dims = np.asarray(dims, dtype=np.float64)
    margin = 0.2 * dims
    start = rng.uniform(margin, dims - 1 - margin)
    end = rng.uniform(margin, dims - 1 - margin)
    start[axis] = -1.0
    end[axis] = dims[axis]
    mid = 0.5 * (start + end) + rng.uniform(-0.15, 0.15, 3) * dims
    mid[axis] = 0.5 * (dims[axis] - 1)
    t = np.linspace(0.0, 1.0, n_points)[:, None]
    return (1 - t) ** 2 * start + 2 * (1 - t) * t * mid + t**2 * end


def _distance_to_polyline(points: np.ndarray, line: np.ndarray):
    """Distance from each point to the polyline and the unit tangent of the nearest segment."""
    best = np.full(points.shape[0], np.inf)
    tangent = np.zeros((points.shape[0], 3))
    for a, b in zip(line[:-1], line[1:]):
        ab = b - a
        length2 = float(ab @ ab)
        if length2 == 0.0:
            continue
        t = np.clip((points - a) @ ab / length2, 0.0, 1.0)
        d = np.linalg.norm(points - (a + t[:, None] * ab), axis=1)
        closer = d < best
        best[closer] = d[closer]
        tangent[closer] = ab / np.sqrt(length2)
    return best, tangent


def generate_atlas(cfg: PhantomConfig, centerlines=None) -> PhantomSubject:
    """Render ``cfg.n_tracts`` tubes; ``centerlines`` overrides the random curves.

    Voxels inside several tubes get every overlapping label; their peak is the
    tangent of the nearest centerline, and with ``channels > 3`` the further
    peak slots hold the next-nearest overlapping tangents.
    """
    rng = np.random.default_rng(cfg.seed)
    if centerlines is None:
        centerlines = [tube_centerline(cfg.dims, rng, axis=t % 3) for t in range(cfg.n_tracts)]
    centerlines = [np.asarray(c, dtype=np.float64) for c in centerlines]
    if len(centerlines) != cfg.n_tracts:
        raise ValueError(f"expected {cfg.n_tracts} centerlines, got {len(centerlines)}")
    nx, ny, nz = cfg.dims
    grid = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1)
    points = grid.reshape(-1, 3).astype(np.float64)

    dist = np.empty((points.shape[0], cfg.n_tracts))
    tang = np.empty((points.shape[0], cfg.n_tracts, 3))
    for t, line in enumerate(centerlines):
        dist[:, t], tang[:, t] = _distance_to_polyline(points, line)
    inside = dist <= cfg.tube_radius

    n_peaks = cfg.channels // 3
    order = np.argsort(np.where(inside, dist, np.inf), axis=1, kind="stable")
    peaks = np.zeros((points.shape[0], n_peaks, 3))
    rows = np.arange(points.shape[0])
    for slot in range(min(n_peaks, cfg.n_tracts)):
        t = order[:, slot]
        hit = inside[rows, t]
        peaks[hit, slot] = tang[rows[hit], t[hit]]
    return PhantomSubject(
        peaks=peaks.reshape(nx, ny, nz, cfg.channels),
        truth=inside.reshape(nx, ny, nz, cfg.n_tracts).astype(np.uint8),
        id="atlas",
    )


def random_smooth_field(dims, amplitude: float, smoothness: float, seed) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled to a maximum displacement norm of ``amplitude``."""
    dims = tuple(int(d) for d in dims)
    if amplitude == 0:
        return np.zeros(dims + (3,))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(dims + (3,))
    field = np.stack([gaussian_filter(noise[..., c], smoothness, mode="reflect") for c in range(3)], axis=-1)
    peak = float(np.max(np.linalg.norm(field, axis=-1)))
    return field * (amplitude / peak)


def _member(atlas: PhantomSubject, cfg: PhantomConfig, index: int):
    rng = np.random.default_rng([cfg.seed, index])
    field = random_smooth_field(cfg.dims, cfg.deform_amplitude, cfg.deform_smoothness, rng.integers(2**63))
    peaks = warp(atlas.peaks, field)
    truth = warp_labels(atlas.truth, field)
    if cfg.noise_sigma > 0:
        bound = 1.0 + 3.0 * cfg.noise_sigma
        peaks = np.clip(peaks + cfg.noise_sigma * rng.standard_normal(peaks.shape), -bound, bound)
    return peaks, truth, field


def generate_cohort(atlas: PhantomSubject, cfg: PhantomConfig) -> Cohort:
    if atlas.peaks.shape[:3] != cfg.dims:
        raise ValueError("atlas dims do not match the phantom config")
    members = [_member(atlas, cfg, k) for k in range(cfg.cohort_size)]
    peaks0, truth0, field0 = members[0]
    cohort = Cohort(
        labeled=LabeledSubject(peaks0, truth0, id="labeled"),
        unlabeled=[],
        unlabeled_ids=[],
        test=[],
        fields={"labeled": field0},
    )
    for k in range(1, 1 + cfg.n_unlabeled):
        sid = f"unlabeled_{k - 1:03d}"
        peaks, truth, field = members[k]
        cohort.unlabeled.append(peaks)
        cohort.unlabeled_ids.append(sid)
        cohort.hidden_truth[sid] = truth
        cohort.fields[sid] = field
    for j, k in enumerate(range(1 + cfg.n_unlabeled, cfg.cohort_size)):
        sid = f"test_{j:03d}"
        peaks, truth, field = members[k]
        cohort.test.append(PhantomSubject(peaks, truth, sid))
        cohort.fields[sid] = field
    return cohort
