import numpy as np
import pytest

from pathflow.driverflow import (
    SolverConfig,
    e_norm,
    invert_flow,
    quasi_invariance_report,
    solve_flow_picard,
    solve_flow_pullback,
)
from pathflow.errors import ContractError, SolverError
from pathflow.functionals import flat_battery, sphere_battery
from pathflow.lift import roll
from pathflow.malliavin import gradient_DM
from pathflow.wiener import CMShift, TimeGrid, make_cm_shift, sample_brownian, shift_recipe

CFG = SolverConfig(t_steps=8)


def test_config_validation():
    with pytest.raises(ContractError):
        SolverConfig(t_steps=0)
    with pytest.raises(ContractError):
        SolverConfig(norm="l1")


@pytest.mark.parametrize("solver", [solve_flow_picard, solve_flow_pullback])
def test_flat_flow_is_a_translation(flat2, solver):
    g = TimeGrid(32)
    w = sample_brownian(g, 2, 1, 6)
    h = make_cm_shift("sinusoid", g, 1.0, d=2)
    state = solver(w, h, 0.7, CFG, flat2)
    assert np.max(np.abs(state.sigma.values - (w.values + 0.7 * h.h))) < 1e-8
    assert np.max(np.abs(state.phi.values - state.sigma.values)) < 1e-8


@pytest.mark.parametrize("solver", [solve_flow_picard, solve_flow_pullback])
def test_zero_time_returns_the_brownian_path(sphere2, solver):
    g = TimeGrid(32)
    w = sample_brownian(g, 2, 1, 4)
    state = solver(w, make_cm_shift("linear", g, 1.0, d=2), 0.0, CFG, sphere2)
    assert np.allclose(state.sigma.values, roll(w, sphere2.default_frame(), sphere2)[0].values)


def test_pullback_rotations_stay_orthogonal(sphere2):
    g = TimeGrid(64)
    w = sample_brownian(g, 2, 3, 32)
    h = shift_recipe("adapted_sinusoid", g, 1.0, d=2)(w)
    state = solve_flow_pullback(w, h, 0.5, CFG, sphere2)
    assert state.diagnostics["orthogonality"] < 1e-6
    assert state.diagnostics["skew_defect"] == 0.0
    assert np.all(np.sum(state.od.a**2, axis=(0, 1)) * g.ds < 10.0)


def test_flow_derivative_at_zero_is_the_manifold_gradient(sphere2):
    g = TimeGrid(128)
    w = sample_brownian(g, 2, 6, 8)
    h = make_cm_shift("sinusoid", g, 1.0, d=2)
    _, X = roll(w, sphere2.default_frame(), sphere2)
    eps = 1e-3
    for F in sphere_battery()[:3]:
        plus = F.evaluate(solve_flow_pullback(w, h, eps, SolverConfig(t_steps=2), sphere2).sigma)
        minus = F.evaluate(solve_flow_pullback(w, h, -eps, SolverConfig(t_steps=2), sphere2).sigma)
        fd = (plus - minus) / (2 * eps)
        analytic = np.einsum("kjp,kjp->p", gradient_DM(F, X), np.broadcast_to(h.hdot, w.increments.shape)) * g.ds
        assert np.max(np.abs(fd - analytic)) < 1e-3 + 4 * g.ds


def test_picard_and_pullback_agree_and_converge(sphere2):
    gaps = []
    for n in (32, 64, 128):
        g = TimeGrid(n)
        w = sample_brownian(g, 2, 12, 6)
        h = make_cm_shift("sinusoid", g, 1.0, d=2)
        a = solve_flow_picard(w, h, 0.5, CFG, sphere2)
        b = solve_flow_pullback(w, h, 0.5, CFG, sphere2)
        gaps.append(np.max(np.abs(a.sigma.values - b.sigma.values)))
        assert gaps[-1] <= np.sqrt(g.ds) + 0.5 / CFG.t_steps
        assert max(a.diagnostics["residual_ratios"]) < 1.0
    assert gaps[-1] < gaps[0]


def test_picard_stall_is_reported(sphere2):
    g = TimeGrid(16)
    w = sample_brownian(g, 2, 1, 3)
    h = make_cm_shift("sinusoid", g, 1.0, d=2)
    with pytest.raises(SolverError) as info:
        solve_flow_picard(w, h, 0.5, SolverConfig(t_steps=2, max_iters=1, picard_tol=1e-14), sphere2)
    assert info.value.residual > 0


def test_non_shift_input_is_rejected(sphere2):
    g = TimeGrid(8)
    w = sample_brownian(g, 2, 1, 2)
    with pytest.raises(ContractError):
        solve_flow_pullback(w, np.zeros((8, 2)), 0.5, CFG, sphere2)
    with pytest.raises(ContractError):
        solve_flow_pullback(w, CMShift(TimeGrid(4), np.zeros((4, 2))), 0.5, CFG, sphere2)


def test_inverse_flow_round_trip(sphere2):
    g = TimeGrid(32)
    target = sample_brownian(g, 2, 2, 5)
    shift_for = shift_recipe("adapted_sinusoid", g, 1.0, d=2)
    u, o, a, iters = invert_flow(target, shift_for, 0.5, CFG, sphere2)
    state = solve_flow_pullback(u, shift_for(u), 0.5, CFG, sphere2)
    assert np.max(np.abs(state.phi.values - target.values)) < 1e-9
    assert iters < CFG.max_iters


def test_e_norm_modes():
    delta = np.zeros((5, 1, 2))
    delta[2, 0, 1] = 1.0
    assert np.isclose(e_norm(delta, "sup"), np.sqrt(3.0))
    assert np.isclose(e_norm(delta, "batch"), np.sqrt(1.5))


def test_flat_quasi_invariance_is_cameron_martin(flat2):
    F = flat_battery(2)
    rows, diag = quasi_invariance_report(F, shift_recipe("linear", TimeGrid(32), 1.0, d=2), 0.5, 4000, CFG,
                                         flat2, seed=3, n_steps=32, batch=2000)
    assert all(r.passed for r in rows)
    assert diag["orthogonality"] == 0.0


def test_zero_time_quasi_invariance_uses_unit_weights(sphere2):
    rows, _ = quasi_invariance_report(sphere_battery()[:2], shift_recipe("sinusoid", TimeGrid(16), 1.0, d=2), 0.0,
                                      500, CFG, sphere2, seed=1, n_steps=16)
    for r in rows:
        assert r.literal_reweighted == r.estimate_reweighted
        assert r.passed
