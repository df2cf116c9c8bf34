import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_differences, kink_free_field, naive_warp, rel_error
from tractpipe.phantom import random_smooth_field
from tractpipe.registration import (
    RegistrationConfig,
    optimize_registration,
    reg_loss,
    reg_loss_and_grad,
    load_field,
    save_field,
    sim_loss,
    smooth_loss,
    smooth_loss_grad,
    warp,
    warp_labels,
)
from tractpipe.volume import ShapeMismatchError, read_header


def _smooth_blob(rng, dims=(10, 10, 10), channels=2):
    grid = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=-1).astype(float)
    out = np.zeros(dims + (channels,))
    for c in range(channels):
        centre = rng.uniform(3, 7, size=3)
        out[..., c] = np.exp(-np.sum((grid - centre) ** 2, axis=-1) / 8.0)
    return out


def test_warp_matches_naive(rng):
    vol = rng.normal(size=(5, 4, 6, 2))
    field = rng.uniform(-2, 2, size=(5, 4, 6, 3))
    np.testing.assert_array_equal(warp(vol, field), naive_warp(vol, field))


def test_warp_rejects_bad_field(rng):
    vol = rng.normal(size=(4, 4, 4, 1))
    with pytest.raises(ShapeMismatchError):
        warp(vol, np.zeros((4, 4, 3, 3)))
    with pytest.raises(ShapeMismatchError):
        warp(vol, np.zeros((4, 4, 4, 2)))
    bad = np.zeros((4, 4, 4, 3))
    bad[0, 0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        warp(vol, bad)


def test_warp_labels_stays_binary(rng):
    lab = (rng.random((6, 6, 6, 2)) > 0.5).astype(np.uint8)
    out = warp_labels(lab, rng.uniform(-1.5, 1.5, size=(6, 6, 6, 3)))
    assert out.dtype == np.uint8
    assert set(np.unique(out)) <= {0, 1}
    np.testing.assert_array_equal(warp_labels(lab, np.zeros((6, 6, 6, 3))), lab)


def test_smooth_loss_of_constant_field_is_zero():
    assert smooth_loss(np.full((4, 5, 6, 3), 1.7)) == 0.0


def test_smooth_loss_known_value():
    u = np.zeros((3, 1, 1, 3))
    u[:, 0, 0, 0] = [0.0, 1.0, 3.0]
    assert smooth_loss(u) == 1.0 + 4.0


def test_smooth_loss_grad_matches_fd(rng):
    for _ in range(10):
        u = rng.normal(size=(3, 4, 2, 3))
        g = central_differences(smooth_loss, u, h=1e-3)
        assert rel_error(smooth_loss_grad(u), g) < 1e-8


def test_sim_loss_shape_check():
    with pytest.raises(ShapeMismatchError):
        sim_loss(np.zeros((2, 2, 2, 1)), np.zeros((2, 2, 2, 2)))


def test_reg_loss_and_grad_consistent(rng):
    x = rng.normal(size=(4, 4, 4, 2))
    y = rng.normal(size=(4, 4, 4, 2))
    u = kink_free_field(rng, (4, 4, 4))
    total, sim, _ = reg_loss_and_grad(u, x, y, 3.0)
    assert total == pytest.approx(reg_loss(u, x, y, 3.0), rel=1e-14)
    assert sim == pytest.approx(sim_loss(warp(x, u), y), rel=1e-14)


def test_reg_gradient_fd(rng):
    for _ in range(20):
        dims = tuple(int(d) for d in rng.integers(2, 5, size=3))
        x = rng.normal(size=dims + (2,))
        y = rng.normal(size=dims + (2,))
        u = kink_free_field(rng, dims)
        gamma = float(rng.uniform(0.1, 50))
        g = central_differences(lambda f: reg_loss(f, x, y, gamma), u)
        assert rel_error(reg_loss_and_grad(u, x, y, gamma)[2], g) < 1e-4


def test_optimizer_reduces_loss_on_shifted_blob(rng):
    fixed = _smooth_blob(rng)
    shift = random_smooth_field((10, 10, 10), 1.0, 3.0, seed=1)
    moving = warp(fixed, -shift)
    cfg = RegistrationConfig(gamma=1e5, step_size=0.01, max_iters=100)
    res = optimize_registration(moving, fixed, cfg)
    assert res.sim_trace[-1] < 0.5 * res.sim_trace[0]
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    assert res.field.shape == (10, 10, 10, 3)
    assert res.iterations == len(res.trace) - 1 <= 100


def test_zero_iterations_returns_identity(rng):
    x = rng.normal(size=(4, 4, 4, 1))
    res = optimize_registration(x, rng.normal(size=(4, 4, 4, 1)), RegistrationConfig(max_iters=0))
    assert np.all(res.field == 0.0)
    assert len(res.trace) == 1


def test_identical_volumes_stop_immediately(rng):
    x = rng.normal(size=(5, 5, 5, 2))
    res = optimize_registration(x, x, RegistrationConfig())
    assert np.all(res.field == 0.0)
    assert res.trace[-1] == 0.0


def test_optimizer_is_deterministic(rng):
    x, y = _smooth_blob(rng, (8, 8, 8)), _smooth_blob(rng, (8, 8, 8))
    cfg = RegistrationConfig(gamma=1e4, step_size=0.01, max_iters=20)
    a = optimize_registration(x, y, cfg)
    b = optimize_registration(x, y, cfg)
    assert a.field.tobytes() == b.field.tobytes()
    assert a.trace == b.trace


def test_optimizer_shape_mismatch(rng):
    with pytest.raises(ShapeMismatchError):
        optimize_registration(np.zeros((4, 4, 4, 1)), np.zeros((4, 4, 5, 1)), RegistrationConfig())


@pytest.mark.parametrize(
    "kwargs", [{"gamma": 0}, {"step_size": -1.0}, {"max_iters": -1}, {"max_iters": 2.5}, {"rel_tol": -1e-3}]
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        RegistrationConfig(**kwargs)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), gamma=st.floats(1e-2, 1e4), step=st.floats(1e-4, 10.0))
def test_trace_never_increases(seed, gamma, step):
    r = np.random.default_rng(seed)
    x = r.normal(size=(4, 4, 4, 2))
    y = r.normal(size=(4, 4, 4, 2))
    res = optimize_registration(x, y, RegistrationConfig(gamma=gamma, step_size=step, max_iters=15))
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    assert np.all(np.isfinite(res.field))


def test_field_file_round_trip(tmp_path, rng):
    u = rng.normal(size=(3, 4, 5, 3))
    save_field(u, tmp_path / "u")
    assert read_header(tmp_path / "u")["kind"] == "displacement"
    np.testing.assert_array_equal(load_field(tmp_path / "u"), u.astype(np.float32))
