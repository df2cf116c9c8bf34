"""Deformable registration by direct optimisation of a dense displacement field.

The deformation is ``phi = id + u``; a volume is deformed by sampling it at
``p + u(p)`` for every voxel ``p``. The objective is

    L_reg(u) = sum_p ||grad u(p)||_F^2  +  gamma * mean((x o phi - y)^2)

with forward differences for ``grad u`` (zero across the far boundary) and
the mean taken over every voxel-channel element.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from . import kernels
from .volume import ShapeMismatchError, as_labels, as_peaks, check_same_grid, load_volume, save_volume

__all__ = [
    "RegistrationConfig",
    "RegistrationResult",
    "RegistrationDivergedError",
    "as_field",
    "warp",
    "warp_labels",
    "smooth_loss",
    "smooth_loss_grad",
    "sim_loss",
    "reg_loss",
    "grad_reg_loss",
    "reg_loss_and_grad",
    "optimize_registration",
    "save_field",
    "load_field",
]

log = logging.getLogger(__name__)

MAX_HALVINGS = 20


class RegistrationDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegistrationConfig:
    gamma: float = 0.02
    step_size: float = 0.1
    max_iters: int = 200
    rel_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if not (isinstance(self.max_iters, int) and self.max_iters >= 0):
            raise ValueError("max_iters must be a non-negative integer")
        if not self.rel_tol >= 0:
            raise ValueError("rel_tol must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RegistrationResult:
    field: np.ndarray
    trace: list[float] = dc_field(default_factory=list)
    sim_trace: list[float] = dc_field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1


def as_field(field, dims=None) -> np.ndarray:
    u = np.ascontiguousarray(field, dtype=np.float64)
    if u.ndim != 4 or u.shape[3] != 3:
        raise ShapeMismatchError(f"displacement field must be (X, Y, Z, 3), got {u.shape}")
    if dims is not None and u.shape[:3] != tuple(dims):
        raise ShapeMismatchError(f"field dims {u.shape[:3]} do not match volume dims {tuple(dims)}")
    if not np.all(np.isfinite(u)):
        raise ValueError("displacement field contains NaN or Inf")
    return u


def warp(vol, field) -> np.ndarray:
    """Resample ``vol`` at ``p + u(p)``: the composition ``vol o (id + u)``."""
    vol = np.ascontiguousarray(as_peaks(vol))
    u = as_field(field, vol.shape[:3])
    return kernels.warp_field(vol, u)


def warp_labels(lab, field, threshold: float = 0.5) -> np.ndarray:
    """Warp each class mask as a real image, then binarise at ``threshold``."""
    lab = as_labels(lab)
    moved = warp(lab.astype(np.float64), field)
    return (moved >= threshold).astype(np.uint8)


def smooth_loss(field) -> float:
    u = np.asarray(field, dtype=np.float64)
    total = 0.0
    for axis in range(3):
        d = np.diff(u, axis=axis)
        total += float(np.sum(d * d))
    return total


def smooth_loss_grad(field) -> np.ndarray:
    u = np.asarray(field, dtype=np.float64)
    g = np.zeros_like(u)
    for axis in range(3):
        d = np.diff(u, axis=axis)
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        g[tuple(lo)] -= 2.0 * d
        g[tuple(hi)] += 2.0 * d
    return g


def sim_loss(moved, target) -> float:
    a = np.asarray(moved, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"volumes disagree: {a.shape} vs {b.shape}")
    r = a - b
    return float(np.mean(r * r))


def reg_loss(field, x, y, gamma: float) -> float:
    x = as_peaks(x)
    y = as_peaks(y)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"moving and fixed volumes disagree: {x.shape} vs {y.shape}")
    return smooth_loss(field) + gamma * sim_loss(warp(x, field), y)


def reg_loss_and_grad(field, x, y, gamma: float) -> tuple[float, float, np.ndarray]:
    """Return ``(L_reg, L_sim, dL_reg/du)``."""
    x = np.ascontiguousarray(as_peaks(x))
    y = as_peaks(y)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"moving and fixed volumes disagree: {x.shape} vs {y.shape}")
    u = as_field(field, x.shape[:3])
    moved, jac = kernels.warp_field_jacobian(x, u)
    r = moved - y
    sim = float(np.mean(r * r))
    # each u(p) only moves the sample at p, so the data term gradient is local
    g_sim = np.einsum("xyzc,xyzcd->xyzd", r, jac) * (2.0 / r.size)
    grad = smooth_loss_grad(u) + gamma * g_sim
    return smooth_loss(u) + gamma * sim, sim, grad


def grad_reg_loss(field, x, y, gamma: float) -> np.ndarray:
    return reg_loss_and_grad(field, x, y, gamma)[2]


def _loss_terms(u, x, y, gamma):
    moved = kernels.warp_field(x, u)
    sim = sim_loss(moved, y)
    return smooth_loss(u) + gamma * sim, sim


def optimize_registration(x, y, cfg: RegistrationConfig) -> RegistrationResult:
    """Register moving ``x`` onto fixed ``y`` by backtracking gradient descent.

    Starts from the zero field. Each iteration tries ``cfg.step_size`` and
    halves it (at most 20 times) until the loss does not increase. Stops
    after ``cfg.max_iters`` iterations, when no halving is accepted, or when
    the relative decrease drops below ``cfg.rel_tol``.
    """
    x = np.ascontiguousarray(as_peaks(x))
    y = as_peaks(y)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"moving and fixed volumes disagree: {x.shape} vs {y.shape}")
    u = np.zeros(x.shape[:3] + (3,), dtype=np.float64)
    loss, sim = _loss_terms(u, x, y, cfg.gamma)
    if not math.isfinite(loss):
        raise RegistrationDivergedError("initial registration loss is not finite")
    result = RegistrationResult(u, [loss], [sim])
    for it in range(cfg.max_iters):
        _, _, grad = reg_loss_and_grad(u, x, y, cfg.gamma)
        step = cfg.step_size
        accepted = None
        for _ in range(MAX_HALVINGS + 1):
            cand = u - step * grad
            c_loss, c_sim = _loss_terms(cand, x, y, cfg.gamma)
            if math.isfinite(c_loss) and c_loss <= loss:
                accepted = cand
                break
            step *= 0.5
        if accepted is None:
            log.debug("registration: no descent step after %d halvings at iteration %d", MAX_HALVINGS, it)
            break
        decrease = (loss - c_loss) / loss if loss > 0 else 0.0
        u, loss, sim = accepted, c_loss, c_sim
        result.trace.append(loss)
        result.sim_trace.append(sim)
        if decrease < cfg.rel_tol:
            break
    if not math.isfinite(loss):
        raise RegistrationDivergedError("registration loss became non-finite")
    result.field = u
    return result


def save_field(field, path):
    return save_volume(as_field(field), path, kind="displacement", dtype="f32")


def load_field(path) -> np.ndarray:
    return as_field(load_volume(path))
