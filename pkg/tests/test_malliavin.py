import numpy as np
import pytest

import oracles
from oracles_quadrature import gaussian_paths
from pathflow.errors import ContractError
from pathflow.experiments import tangent_battery
from pathflow.functionals import coordinate, flat_battery, sphere_battery
from pathflow.lift import roll
from pathflow.malliavin import (
    CylindricalFunctional,
    TangentProcess,
    directional_derivative_fd,
    gradient_damped,
    gradient_DM,
    gradient_flat,
    ibp_check,
    ibp_samples,
    intertwining_check,
    perturbed_path,
    rotational_derivative,
    solve_Q,
)
from pathflow.wiener import TimeGrid, make_cm_shift, sample_brownian


def test_wrong_gradient_is_caught():
    with pytest.raises(ContractError):
        CylindricalFunctional("bad", (1.0,), lambda x: x[0, 0] ** 2, lambda x: np.ones_like(x), dim=2, space="flat")
    with pytest.raises(ContractError):
        CylindricalFunctional("bad", (1.0,), lambda x: x[0, 0], lambda x: x, dim=2, space="torus")


def test_battery_gradients_and_hessians_validate():
    for F in sphere_battery() + flat_battery():
        assert F.validate


def test_flat_collapse_of_gradients(flat2, small_batch):
    _, X = roll(small_batch, flat2.default_frame(), flat2)
    K = solve_Q(X)
    assert np.array_equal(K.column(0), np.broadcast_to(np.eye(2)[None, :, :, None], K.column(0).shape))
    for F in flat_battery():
        Df = gradient_flat(F, small_batch, X)
        assert np.array_equal(gradient_DM(F, X), Df)
        assert np.array_equal(gradient_damped(F, X, K), Df)


def test_damping_kernel_on_the_sphere(sphere2):
    g = TimeGrid(256)
    w = sample_brownian(g, 2, 1, 10)
    _, X = roll(w, sphere2.default_frame(), sphere2)
    K = solve_Q(X)
    col = K.column(0)
    for k in range(0, 257, 32):
        assert np.max(np.abs(col[k] - oracles.damping_factor(g.times[k], 2) * np.eye(2)[:, :, None])) < 1e-6
    assert np.allclose(K.Q(200, 50), np.einsum("abp,bcp->acp", K.Q(200, 120), K.Q(120, 50)), atol=1e-14)
    assert np.allclose(K.row(100)[30], K.Q(100, 30))
    with pytest.raises(ContractError):
        K.Q(3, 5)


@pytest.mark.parametrize("recipe", ["constant", "linear", "sinusoid"])
def test_flat_ibp_is_exact_by_quadrature(flat2, recipe):
    w, weights = gaussian_paths(2, 2)
    _, X = roll(w, flat2.default_frame(), flat2)
    h = make_cm_shift(recipe, w.grid, 1.0, d=2)
    lhs, rhs, _, _ = ibp_samples("bismut", flat_battery(), h, w, X)
    assert np.allclose(lhs @ weights, rhs @ weights, atol=1e-10)


def test_flat_ibp_closed_form_values(flat2):
    # F = exp(w_1^1 / 2), h linear along e1: both sides equal exp(1/8) / 2
    w, weights = gaussian_paths(2, 2)
    _, X = roll(w, flat2.default_frame(), flat2)
    h = make_cm_shift("linear", w.grid, 1.0, d=2)
    F = [f for f in flat_battery() if f.name == "exp"]
    lhs, rhs, _, _ = ibp_samples("damped", F, h, w, X)
    assert abs(lhs[0] @ weights - 0.5 * np.exp(0.125)) < 1e-10
    assert abs(rhs[0] @ weights - 0.5 * np.exp(0.125)) < 1e-10


@pytest.mark.parametrize("kind", ["bismut", "damped"])
def test_sphere_ibp_small_sample(sphere2, kind):
    h = make_cm_shift("linear", TimeGrid(64), 1.0, d=2)
    rows = ibp_check(kind, sphere_battery(), h, 4000, sphere2, seed=8, n_steps=64, batch=2000, slack=0.0)
    assert all(r.passed for r in rows)


def test_unknown_ibp_kind(sphere2, small_batch):
    _, X = roll(small_batch, sphere2.default_frame(), sphere2)
    with pytest.raises(ContractError):
        ibp_samples("nope", sphere_battery(), make_cm_shift("linear", small_batch.grid, 1.0, d=2), small_batch, X)


def test_rotational_derivative_matches_finite_differences(rng):
    g = TimeGrid(16)
    w = sample_brownian(g, 2, 3, 20)
    A = np.zeros((16, 2, 2, 1))
    A[:, 0, 1, 0], A[:, 1, 0, 0] = 0.4, -0.4
    for F in flat_battery():
        fd = directional_derivative_fd(F.evaluate, w, TangentProcess(A, np.zeros((16, 2, 1))), eps=1e-4)
        assert np.allclose(rotational_derivative(F, w, A), fd.value, atol=1e-6)


def test_tangent_process_contracts():
    with pytest.raises(ContractError):
        TangentProcess(np.ones((4, 2, 2, 1)), np.zeros((4, 2, 1)))
    g = TimeGrid(4)
    w = sample_brownian(g, 2, 0, 3)
    xi = TangentProcess(np.zeros((4, 2, 2, 1)), np.ones((4, 2, 1)))
    assert np.allclose(xi.values(w)[-1], 1.0)
    assert np.allclose(perturbed_path(w, xi, 0.1).values - w.values, 0.1 * xi.values(w))
    with pytest.raises(ContractError):
        directional_derivative_fd(lambda v: v.values[-1, 0], w, xi, eps=1.0)


def test_intertwining_small_grid(sphere2):
    g = TimeGrid(64)
    w = sample_brownian(g, 2, 5, 40)
    for name, xi in tangent_battery(g, 2).items():
        for F in sphere_battery()[:2]:
            res = intertwining_check(F, xi, w, sphere2)
            assert res.relative_error < 1e-3 + 4 * (1e-4 + g.ds), (name, F.name)
            assert not res.flagged.any()
