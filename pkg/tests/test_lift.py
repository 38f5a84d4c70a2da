import io
import math

import numpy as np
import pytest

import oracles
from pathflow.errors import ContractError, IntegrationError
from pathflow.lift import develop, dump_csv, horizontal_lift, itomap_vjp, parallel_transport, roll
from pathflow.wiener import DiscretePath, TimeGrid, sample_brownian


def test_flat_roll_is_the_identity(flat2, small_batch):
    path, X = roll(small_batch, flat2.default_frame(), flat2)
    assert np.array_equal(path.values, small_batch.values)
    assert np.allclose(develop(X).values, small_batch.values)


def test_dimension_mismatch_is_rejected(sphere3, small_batch):
    with pytest.raises(ContractError):
        roll(small_batch, sphere3.default_frame(), sphere3)


def test_great_circle_roll(sphere2):
    # a straight driving line rolls onto a great circle at unit speed; the
    # scheme is second order on smooth drivers
    length, errs = 2.0, []
    for n in (100, 200, 400):
        inc = np.zeros((n, 2, 1))
        inc[:, 0, 0] = length / n
        path, X = roll(DiscretePath.from_increments(TimeGrid(n), inc), sphere2.default_frame(), sphere2)
        exact = np.array([math.sin(length), 0.0, math.cos(length)])
        errs.append(np.max(np.abs(path.values[-1, :, 0] - exact)))
        assert np.allclose(X.frames[-1, :, 0, 0], [math.cos(length), 0.0, -math.sin(length)], atol=1e-3)
    assert errs[-1] < 1e-5
    assert 3.5 < errs[0] / errs[1] < 4.5 and 3.5 < errs[1] / errs[2] < 4.5


def test_octant_holonomy(sphere2):
    w = DiscretePath.from_increments(TimeGrid(1024), oracles.octant_driver()[:, :, None])
    path, X = roll(w, sphere2.default_frame(), sphere2)
    assert np.allclose(path.values[-1, :, 0], sphere2.origin(), atol=1e-4)
    hol = X.frames[0, :, :, 0].T @ X.frames[-1, :, :, 0]
    angle = math.atan2(hol[1, 0], hol[0, 0])
    assert abs(angle - oracles.OCTANT_HOLONOMY) < 1e-3


def test_heat_kernel_moments(sphere2):
    w = sample_brownian(TimeGrid(128), 2, 3, 20000)
    path, _ = roll(w, sphere2.default_frame(), sphere2)
    z = path.values[-1, 2]
    se = z.std() / np.sqrt(z.size)
    assert abs(z.mean() - oracles.HEAT_Z_T1) < 3 * se + 1 / 128
    se2 = (z**2).std() / np.sqrt(z.size)
    assert abs((z**2).mean() - oracles.HEAT_Z2_T1) < 3 * se2 + 1 / 128


def test_corrections_keep_frames_orthonormal_and_are_small(sphere2):
    for n in (64, 256):
        w = sample_brownian(TimeGrid(n), 2, 1, 50)
        _, X = roll(w, sphere2.default_frame(), sphere2)
        gram = np.einsum("tkip,tkjp->tijp", X.frames, X.frames)
        assert np.max(np.abs(gram - np.eye(2)[None, :, :, None])) < 1e-10
        assert X.corrections["frame"].max() < 20 * (1 / n) ** 1.5


def test_uncorrected_frames_drift_at_order_ds(sphere2):
    drift = []
    for n in (64, 128, 256, 512):
        w = sample_brownian(TimeGrid(n), 2, 1, 100)
        _, X = roll(w, sphere2.default_frame(), sphere2, correct=False)
        gram = np.einsum("kip,kjp->ijp", X.frames[-1], X.frames[-1])
        drift.append(np.mean(np.abs(gram - np.eye(2)[:, :, None])))
    slopes = np.diff(np.log(drift)) / np.log(0.5)
    assert np.all(slopes > 0.6) and np.all(slopes < 1.6)


def test_horizontal_lift_reproduces_rolled_frames(sphere2):
    w = sample_brownian(TimeGrid(512), 2, 8, 20)
    path, X = roll(w, sphere2.default_frame(), sphere2)
    H = horizontal_lift(path, sphere2.default_frame(), sphere2)
    assert np.max(np.abs(H.frames - X.frames)) < 0.05
    with pytest.raises(ContractError):
        horizontal_lift(DiscretePath(path.grid, -path.values), sphere2.default_frame(), sphere2)


def test_parallel_transport_is_an_isometry(sphere2, rng):
    w = sample_brownian(TimeGrid(64), 2, 2, 10)
    _, X = roll(w, sphere2.default_frame(), sphere2)
    basis = np.stack([sphere2.tangent_basis(X.base.values[k, :, 0]) for k in (10, 50)])
    T = parallel_transport(X.subset([0]), 10, 50, basis[0], basis[1])[:, :, 0]
    v = rng.normal(size=2)
    assert abs(np.linalg.norm(T @ v) - np.linalg.norm(v)) < 1e-8


def test_leaving_the_tube_reports_the_step(sphere2):
    inc = np.zeros((8, 2, 1))
    inc[5, 0, 0] = 40.0
    with pytest.raises(IntegrationError) as info:
        roll(DiscretePath.from_increments(TimeGrid(8), inc), sphere2.default_frame(), sphere2)
    assert info.value.step == 5


def test_itomap_vjp_matches_finite_differences(sphere2):
    g = TimeGrid(16)
    w = sample_brownian(g, 2, 4, 3)
    path, X = roll(w, sphere2.default_frame(), sphere2)
    cot = np.zeros((3, 1, 3))
    cot[2, 0] = 1.0  # F = z(p_1)
    grad = itomap_vjp(w, X, {16: cot})[:, :, 0, :]
    h = 1e-6
    for k in (0, 7, 15):
        for j in range(2):
            dw = w.increments.copy()
            dw[k, j] += h
            up = roll(DiscretePath.from_increments(g, dw), sphere2.default_frame(), sphere2)[0].values[-1, 2]
            dw[k, j] -= 2 * h
            dn = roll(DiscretePath.from_increments(g, dw), sphere2.default_frame(), sphere2)[0].values[-1, 2]
            assert np.allclose(grad[k, j], (up - dn) / (2 * h), atol=1e-7)


def test_dump_csv_has_header_and_rows(sphere2):
    w = sample_brownian(TimeGrid(4), 2, 0, 2)
    _, X = roll(w, sphere2.default_frame(), sphere2)
    buf = io.StringIO()
    dump_csv(X, buf, path_index=1)
    lines = buf.getvalue().splitlines()
    assert lines[0].startswith("s,x1,x2,x3,r11") and len(lines) == 6
