import os
import subprocess
import sys

import numpy as np
import pytest

from oracles import naive_warp
from tractpipe import kernels
from tractpipe._accel import HAS_NUMBA, USE_NUMBA

needs_numba = pytest.mark.skipif(not HAS_NUMBA, reason="numba not installed")


def _case(rng, dims=(6, 6, 6), channels=3, spread=3.0):
    vol = rng.normal(size=dims + (channels,))
    field = rng.uniform(-spread, spread, size=dims + (3,))
    return np.ascontiguousarray(vol), np.ascontiguousarray(field)


def test_numpy_warp_matches_naive(rng):
    for _ in range(10):
        vol, field = _case(rng)
        np.testing.assert_array_equal(kernels.warp_field_numpy(vol, field), naive_warp(vol, field))


@needs_numba
def test_backends_bit_identical(rng):
    for dims in [(6, 6, 6), (1, 4, 5), (2, 1, 3), (7, 5, 3)]:
        vol, field = _case(rng, dims, channels=2)
        a = kernels.warp_field_numba(vol, field)
        b = kernels.warp_field_numpy(vol, field)
        assert a.tobytes() == b.tobytes()
        ma, ja = kernels.warp_field_jacobian_numba(vol, field)
        mb, jb = kernels.warp_field_jacobian_numpy(vol, field)
        assert ma.tobytes() == a.tobytes()
        assert mb.tobytes() == b.tobytes()
        assert ja.tobytes() == jb.tobytes()


def test_zero_field_is_identity(rng):
    vol = rng.normal(size=(4, 5, 3, 2))
    np.testing.assert_array_equal(kernels.warp_field(vol, np.zeros((4, 5, 3, 3))), vol)


def test_integer_shift_inside_is_exact(rng):
    vol = rng.normal(size=(6, 6, 6, 1))
    field = np.zeros((6, 6, 6, 3))
    field[..., 1] = 1.0
    out = kernels.warp_field(vol, field)
    np.testing.assert_array_equal(out[:, :-1], vol[:, 1:])
    np.testing.assert_array_equal(out[:, -1], vol[:, -1])


def test_clamped_axis_has_zero_jacobian(rng):
    vol = rng.normal(size=(4, 4, 4, 2))
    field = np.zeros((4, 4, 4, 3))
    field[..., 0] = -10.0
    _, jac = kernels.warp_field_jacobian(vol, field)
    assert np.all(jac[..., 0] == 0.0)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, TRACTPIPE_DISABLE_NUMBA="1")
    code = "import tractpipe; print(tractpipe.backend_name())"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_backend_flag_consistent():
    assert kernels.warp_field is (kernels.warp_field_numba if USE_NUMBA else kernels.warp_field_numpy)
