import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from pathflow.errors import ConfigurationError, ContractError, DomainError
from pathflow.geometry import Frame, SkewMatrix, make_manifold, parse_manifold, polar

finite = st.floats(-1.0, 1.0, allow_nan=False)


@given(arrays(float, (4, 3), elements=st.floats(-0.04, 0.04)))
def test_polar_returns_orthonormal_columns_near_identity(noise):
    a = np.eye(4)[:, :3] + noise
    q = polar(a)
    assert np.allclose(q.T @ q, np.eye(3), atol=1e-12)


def test_polar_falls_back_to_svd_far_from_orthonormal(rng):
    a = rng.normal(size=(5, 2, 7))
    q = polar(a)
    gram = np.einsum("kip,kjp->ijp", q, q)
    assert np.allclose(gram, np.eye(2)[:, :, None], atol=1e-12)


@given(arrays(float, (3, 3), elements=finite))
def test_skew_matrix_round_trip(m):
    a = m - m.T
    assert np.array_equal(SkewMatrix.from_matrix(a).matrix, a)


def test_skew_matrix_rejects_symmetric_part():
    with pytest.raises(ContractError):
        SkewMatrix.from_matrix(np.eye(2))


@pytest.mark.parametrize("d", [2, 3])
def test_sphere_ricci_is_d_minus_one(d):
    spec = make_manifold("sphere", d)
    assert np.allclose(spec.ricci_matrix(), (d - 1) * np.eye(d), atol=1e-14)
    assert spec.constant_ricci == d - 1


@pytest.mark.parametrize("d", [2, 3])
def test_curvature_form_matches_holonomy_oracle(d):
    spec = make_manifold("sphere", d)
    for i in range(d):
        for j in range(d):
            if i != j:
                expected = oracles.holonomy_curvature(d, i, j)
                got = spec.curvature_form(None, np.eye(d)[i], np.eye(d)[j])
                assert np.max(np.abs(got - expected)) < 1e-6


@given(arrays(float, (3,), elements=finite), arrays(float, (3,), elements=finite), arrays(float, (3,), elements=finite))
def test_christoffel_is_skew_and_preserves_tangent_frames(xr, v, w):
    spec = make_manifold("sphere", 2)
    x = spec.origin() + 0.3 * xr
    x = x / np.linalg.norm(x)
    frame = spec.tangent_basis(x)
    dx = spec.tangent_project(x, v)
    g = spec.christoffel_apply(x, dx, np.eye(3))
    assert np.allclose(g, -g.T, atol=1e-14)
    # moving the frame by -Gamma(dx) X keeps it tangent to first order
    moved = frame - 1e-6 * spec.christoffel_apply(x, dx, frame)
    drift = (x + 1e-6 * dx) @ moved
    assert np.max(np.abs(drift)) < 1e-10


def test_connection_form_vanishes_on_horizontal_direction(sphere2, rng):
    x = sphere2.origin()
    r = sphere2.tangent_basis(x)
    dx = r @ rng.normal(size=2)
    dr = -sphere2.christoffel_apply(x, dx, r)
    assert np.allclose(sphere2.connection_form(x, r, dx, dr), 0.0, atol=1e-14)
    assert np.allclose(sphere2.canonical_form(r, dx), r.T @ dx)


def test_default_frame_is_valid(sphere2, sphere3, flat2):
    for spec in (sphere2, sphere3, flat2):
        frame = spec.validate_frame(spec.default_frame())
        assert isinstance(frame, Frame) and frame.d == spec.d


def test_validate_frame_rejects_non_orthonormal(sphere2):
    base = sphere2.origin()
    with pytest.raises(ContractError):
        sphere2.validate_frame(Frame(base, 2 * sphere2.tangent_basis(base)))


def test_projection_outside_tube_raises(sphere2):
    with pytest.raises(DomainError):
        sphere2.project(np.array([0.0, 0.0, 0.2]))
    assert np.allclose(sphere2.project(np.array([0.0, 0.0, 1.4])), [0, 0, 1])


def test_flat_space_has_no_curvature(flat2):
    assert np.all(flat2.curvature_form(None, np.ones(2), np.arange(2.0)) == 0)
    assert np.all(flat2.ricci_matrix() == 0)
    assert np.all(flat2.torsion_form(None, np.ones(2), np.ones(2)) == 0)


def test_manifold_parsing():
    assert parse_manifold("sphere3").d == 3
    assert parse_manifold("flat", 4).N == 4
    with pytest.raises(ConfigurationError):
        parse_manifold("sphere2", 3)
    with pytest.raises(ConfigurationError):
        make_manifold("torus", 2)
    with pytest.raises(ConfigurationError):
        make_manifold("sphere", 0)
