"""Independent reference implementations used only by the tests."""

import itertools
import math

import numpy as np


def naive_sample(vol, point):
    """Per-corner trilinear sample with border clamping, written from scratch.

    Weights are ``(1 - f, f)`` per axis, multiplied x-then-y-then-z, and corners
    are visited x-major; corners beyond the last voxel are skipped (their
    weight is exactly zero).
    """
    shape = vol.shape[:3]
    lo, frac = [], []
    for c, n in zip(point, shape):
        c = min(max(float(c), 0.0), float(n - 1))
        i = int(math.floor(c))
        lo.append(i)
        frac.append(c - i)
    acc = np.zeros(vol.shape[3])
    for corner in itertools.product((0, 1), repeat=3):
        idx = [lo[a] + corner[a] for a in range(3)]
        if any(idx[a] >= shape[a] for a in range(3)):
            continue
        w = [(1.0 - frac[a]) if corner[a] == 0 else frac[a] for a in range(3)]
        acc = acc + w[0] * w[1] * w[2] * vol[idx[0], idx[1], idx[2]]
    return acc


def naive_warp(vol, field):
    out = np.zeros(vol.shape)
    nx, ny, nz = vol.shape[:3]
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                out[i, j, k] = naive_sample(vol, (i + field[i, j, k, 0], j + field[i, j, k, 1], k + field[i, j, k, 2]))
    return out


def central_differences(f, x, h=1e-4):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def brute_force_dice(pred, truth):
    """Dice from explicit voxel coordinate sets."""
    p = {tuple(v) for v in np.argwhere(pred)}
    t = {tuple(v) for v in np.argwhere(truth)}
    if not p and not t:
        return 1.0
    return 2.0 * len(p & t) / (len(p) + len(t))


def kink_free_field(rng, dims, margin=0.02):
    """Random field whose sample coordinates keep ``margin`` away from every
    integer, so trilinear interpolation and clamping are differentiable there."""
    dims = np.asarray(dims)
    grid = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=-1)
    base = rng.integers(-1, dims + 1, size=tuple(dims) + (3,))
    frac = rng.uniform(margin, 1.0 - margin, size=tuple(dims) + (3,))
    return (base + frac) - grid
