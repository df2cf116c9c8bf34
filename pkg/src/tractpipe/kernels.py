"""Hot loops of the registration: trilinear resampling under a displacement field.

Each kernel exists twice, a numba ``@njit`` loop and a vectorised numpy
version. Both evaluate the eight-corner weighted sum in the same order
(x-corner outermost, z-corner innermost, weight product ``(wx*wy)*wz``) so
their outputs agree bit for bit. ``warp_field`` and ``warp_field_jacobian``
are bound to one of them according to :mod:`tractpipe._accel`.

Coordinate convention: output voxel ``p`` samples the input at ``p + u(p)``.
Coordinates outside ``[0, n-1]`` are clamped to the border, and a clamped
axis contributes zero derivative.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "warp_field",
    "warp_field_jacobian",
    "warp_field_numpy",
    "warp_field_numba",
    "warp_field_jacobian_numpy",
    "warp_field_jacobian_numba",
]


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------


@njit(cache=True)
def _axis_setup(c, n):
    inside = True
    if c < 0.0:
        c = 0.0
        inside = False
    elif c > n - 1:
        c = float(n - 1)
        inside = False
    if n == 1:
        return 0, 0, 0.0, False
    i0 = int(math.floor(c))
    if i0 > n - 2:
        i0 = n - 2
    return i0, i0 + 1, c - i0, inside


@njit(cache=True)
def warp_field_numba(vol, field):
    nx, ny, nz, nc = vol.shape
    out = np.empty((nx, ny, nz, nc), dtype=np.float64)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x0, x1, fx, _ = _axis_setup(i + field[i, j, k, 0], nx)
                y0, y1, fy, _ = _axis_setup(j + field[i, j, k, 1], ny)
                z0, z1, fz, _ = _axis_setup(k + field[i, j, k, 2], nz)
                wx0 = 1.0 - fx
                wy0 = 1.0 - fy
                wz0 = 1.0 - fz
                for c in range(nc):
                    acc = 0.0
                    acc += wx0 * wy0 * wz0 * vol[x0, y0, z0, c]
                    acc += wx0 * wy0 * fz * vol[x0, y0, z1, c]
                    acc += wx0 * fy * wz0 * vol[x0, y1, z0, c]
                    acc += wx0 * fy * fz * vol[x0, y1, z1, c]
                    acc += fx * wy0 * wz0 * vol[x1, y0, z0, c]
                    acc += fx * wy0 * fz * vol[x1, y0, z1, c]
                    acc += fx * fy * wz0 * vol[x1, y1, z0, c]
                    acc += fx * fy * fz * vol[x1, y1, z1, c]
                    out[i, j, k, c] = acc
    return out


@njit(cache=True)
def warp_field_jacobian_numba(vol, field):
    nx, ny, nz, nc = vol.shape
    out = np.empty((nx, ny, nz, nc), dtype=np.float64)
    jac = np.zeros((nx, ny, nz, nc, 3), dtype=np.float64)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x0, x1, fx, inx = _axis_setup(i + field[i, j, k, 0], nx)
                y0, y1, fy, iny = _axis_setup(j + field[i, j, k, 1], ny)
                z0, z1, fz, inz = _axis_setup(k + field[i, j, k, 2], nz)
                wx0 = 1.0 - fx
                wy0 = 1.0 - fy
                wz0 = 1.0 - fz
                for c in range(nc):
                    v000 = vol[x0, y0, z0, c]
                    v001 = vol[x0, y0, z1, c]
                    v010 = vol[x0, y1, z0, c]
                    v011 = vol[x0, y1, z1, c]
                    v100 = vol[x1, y0, z0, c]
                    v101 = vol[x1, y0, z1, c]
                    v110 = vol[x1, y1, z0, c]
                    v111 = vol[x1, y1, z1, c]
                    acc = 0.0
                    acc += wx0 * wy0 * wz0 * v000
                    acc += wx0 * wy0 * fz * v001
                    acc += wx0 * fy * wz0 * v010
                    acc += wx0 * fy * fz * v011
                    acc += fx * wy0 * wz0 * v100
                    acc += fx * wy0 * fz * v101
                    acc += fx * fy * wz0 * v110
                    acc += fx * fy * fz * v111
                    out[i, j, k, c] = acc
                    if inx:
                        jac[i, j, k, c, 0] = (
                            wy0 * wz0 * (v100 - v000)
                            + wy0 * fz * (v101 - v001)
                            + fy * wz0 * (v110 - v010)
                            + fy * fz * (v111 - v011)
                        )
                    if iny:
                        jac[i, j, k, c, 1] = (
                            wx0 * wz0 * (v010 - v000)
                            + wx0 * fz * (v011 - v001)
                            + fx * wz0 * (v110 - v100)
                            + fx * fz * (v111 - v101)
                        )
                    if inz:
                        jac[i, j, k, c, 2] = (
                            wx0 * wy0 * (v001 - v000)
                            + wx0 * fy * (v011 - v010)
                            + fx * wy0 * (v101 - v100)
                            + fx * fy * (v111 - v110)
                        )
    return out, jac


# ---------------------------------------------------------------------------
# numpy
# ---------------------------------------------------------------------------


def _axis_setup_numpy(c, n):
    inside = (c >= 0.0) & (c <= n - 1)
    c = np.clip(c, 0.0, n - 1)
    if n == 1:
        zero = np.zeros(c.shape, dtype=np.intp)
        return zero, zero, np.zeros(c.shape), np.zeros(c.shape, dtype=bool)
    i0 = np.minimum(np.floor(c).astype(np.intp), n - 2)
    return i0, i0 + 1, c - i0, inside


def _corners(vol, field):
    nx, ny, nz, _ = vol.shape
    gi, gj, gk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    x0, x1, fx, inx = _axis_setup_numpy(gi + field[..., 0], nx)
    y0, y1, fy, iny = _axis_setup_numpy(gj + field[..., 1], ny)
    z0, z1, fz, inz = _axis_setup_numpy(gk + field[..., 2], nz)
    return (x0, x1, fx[..., None], inx), (y0, y1, fy[..., None], iny), (z0, z1, fz[..., None], inz)


def warp_field_numpy(vol, field):
    (x0, x1, fx, _), (y0, y1, fy, _), (z0, z1, fz, _) = _corners(vol, field)
    wx0, wy0, wz0 = 1.0 - fx, 1.0 - fy, 1.0 - fz
    acc = np.zeros(vol.shape, dtype=np.float64)
    acc += wx0 * wy0 * wz0 * vol[x0, y0, z0]
    acc += wx0 * wy0 * fz * vol[x0, y0, z1]
    acc += wx0 * fy * wz0 * vol[x0, y1, z0]
    acc += wx0 * fy * fz * vol[x0, y1, z1]
    acc += fx * wy0 * wz0 * vol[x1, y0, z0]
    acc += fx * wy0 * fz * vol[x1, y0, z1]
    acc += fx * fy * wz0 * vol[x1, y1, z0]
    acc += fx * fy * fz * vol[x1, y1, z1]
    return acc


def warp_field_jacobian_numpy(vol, field):
    (x0, x1, fx, inx), (y0, y1, fy, iny), (z0, z1, fz, inz) = _corners(vol, field)
    wx0, wy0, wz0 = 1.0 - fx, 1.0 - fy, 1.0 - fz
    v000 = vol[x0, y0, z0]
    v001 = vol[x0, y0, z1]
    v010 = vol[x0, y1, z0]
    v011 = vol[x0, y1, z1]
    v100 = vol[x1, y0, z0]
    v101 = vol[x1, y0, z1]
    v110 = vol[x1, y1, z0]
    v111 = vol[x1, y1, z1]
    acc = np.zeros(vol.shape, dtype=np.float64)
    acc += wx0 * wy0 * wz0 * v000
    acc += wx0 * wy0 * fz * v001
    acc += wx0 * fy * wz0 * v010
    acc += wx0 * fy * fz * v011
    acc += fx * wy0 * wz0 * v100
    acc += fx * wy0 * fz * v101
    acc += fx * fy * wz0 * v110
    acc += fx * fy * fz * v111
    jac = np.empty(vol.shape + (3,), dtype=np.float64)
    jac[..., 0] = np.where(
        inx[..., None],
        wy0 * wz0 * (v100 - v000) + wy0 * fz * (v101 - v001) + fy * wz0 * (v110 - v010) + fy * fz * (v111 - v011),
        0.0,
    )
    jac[..., 1] = np.where(
        iny[..., None],
        wx0 * wz0 * (v010 - v000) + wx0 * fz * (v011 - v001) + fx * wz0 * (v110 - v100) + fx * fz * (v111 - v101),
        0.0,
    )
    jac[..., 2] = np.where(
        inz[..., None],
        wx0 * wy0 * (v001 - v000) + wx0 * fy * (v011 - v010) + fx * wy0 * (v101 - v100) + fx * fy * (v111 - v110),
        0.0,
    )
    return acc, jac


if USE_NUMBA:
    warp_field = warp_field_numba
    warp_field_jacobian = warp_field_jacobian_numba
else:
    warp_field = warp_field_numpy
    warp_field_jacobian = warp_field_jacobian_numpy
