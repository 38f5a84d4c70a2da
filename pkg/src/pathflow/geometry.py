"""Embedded manifolds with their Levi-Civita connection data.

Arrays may carry trailing batch axes: a point is ``(N, ...)``, an ambient
direction ``(N, ...)``, a frame ``(N, d, ...)`` and a frame-coordinate
vector ``(d, ...)``.  Putting the path index last keeps the hot loops in
``lift`` vectorised over paths with contiguous component slices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, DomainError

FRAME_TOL = 1e-10
POINT_TOL = 1e-12


@dataclass(frozen=True)
class Frame:
    """An orthonormal tangent frame ``basis`` (N x d) at ``base``."""

    base: np.ndarray
    basis: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "base", np.asarray(self.base, dtype=float))
        object.__setattr__(self, "basis", np.asarray(self.basis, dtype=float))

    @property
    def d(self):
        return self.basis.shape[1]


@dataclass(frozen=True)
class SkewMatrix:
    """Element of so(d) stored by its strictly lower triangle."""

    d: int
    lower: np.ndarray

    @classmethod
    def from_matrix(cls, a, tol=0.0):
        a = np.asarray(a, dtype=float)
        if np.max(np.abs(a + a.T), initial=0.0) > tol:
            raise ContractError("matrix is not skew-symmetric")
        rows, cols = np.tril_indices(a.shape[0], -1)
        return cls(a.shape[0], a[rows, cols].copy())

    @property
    def matrix(self):
        out = np.zeros((self.d, self.d))
        rows, cols = np.tril_indices(self.d, -1)
        out[rows, cols] = self.lower
        out[cols, rows] = -self.lower
        return out


def polar(a, iterations=None):
    """Nearest matrix with orthonormal columns, batched over trailing axes.

    Newton-Schulz iterations converge quadratically from the near-orthonormal
    frames produced by one integrator step; by default the iteration count is
    chosen from the initial Gram defect so the result is orthonormal to
    round-off.  Badly conditioned inputs fall back to an SVD.
    """
    a = np.asarray(a, dtype=float)
    d = a.shape[1]
    eye = np.eye(d).reshape((d, d) + (1,) * (a.ndim - 2))
    gram = np.einsum("ki...,kj...->ij...", a, a)
    defect = float(np.max(np.abs(gram - eye), initial=0.0))
    if defect > 0.1:
        return _polar_svd(a)
    if iterations is None:
        iterations = 1 if defect < 1e-16 else int(np.clip(np.ceil(np.log2(np.log(1e-16) / np.log(defect))) + 1, 1, 8))
    y = a
    for _ in range(iterations):
        gram = np.einsum("ki...,kj...->ij...", y, y)
        y = np.einsum("ki...,ij...->kj...", y, 1.5 * eye - 0.5 * gram)
    return y


def _polar_svd(a):
    moved = np.moveaxis(a.reshape(a.shape[0], a.shape[1], -1), -1, 0)
    u, _, vt = np.linalg.svd(moved, full_matrices=False)
    return np.moveaxis(u @ vt, 0, -1).reshape(a.shape)


def frame_condition(a):
    """Condition number of each N x d frame in a batch."""
    moved = np.moveaxis(np.asarray(a).reshape(a.shape[0], a.shape[1], -1), -1, 0)
    sv = np.linalg.svd(moved, compute_uv=False)
    with np.errstate(divide="ignore"):
        cond = sv[:, 0] / sv[:, -1]
    return cond.reshape(a.shape[2:])


@dataclass(frozen=True)
class ManifoldSpec:
    """Base class; concrete specs are :class:`FlatSpace` and :class:`Sphere`."""

    name: str
    d: int
    N: int
    torsion_free: bool = field(default=True, init=False)

    def project(self, y):
        raise NotImplementedError

    def tangent_project(self, x, v):
        raise NotImplementedError

    def christoffel_apply(self, x, v, X):
        raise NotImplementedError

    def curvature_form(self, r, u, v):
        raise NotImplementedError

    @property
    def constant_ricci(self):
        """Ricci scalar factor when ric = kappa * I everywhere, else None."""
        return None

    def origin(self):
        raise NotImplementedError

    def tangent_basis(self, x):
        raise NotImplementedError

    def ricci_apply(self, r, v):
        # ric_r(v) = -sum_i Omega_r(e_i, v) e_i, taken literally from the form
        v = np.asarray(v, dtype=float)
        out = np.zeros_like(v)
        for i in range(self.d):
            e = np.zeros_like(v)
            e[i] = 1.0
            out -= self.curvature_form(r, e, v)[:, i]
        return out

    def ricci_matrix(self, r=None):
        cols = [self.ricci_apply(r, np.eye(self.d)[:, j]) for j in range(self.d)]
        return np.stack(cols, axis=1)

    def torsion_form(self, r, u, v):
        """Levi-Civita connections are torsion free; kept as an interface hook."""
        u = np.asarray(u, dtype=float)
        return np.zeros_like(u)

    def canonical_form(self, r, dx):
        """theta_r(dx) = r^T dx in frame coordinates."""
        return np.einsum("kj...,k...->j...", r, dx)

    def connection_form(self, x, r, dx, dr):
        """omega(dx, dr) = r^T (dr + Gamma_x(dx) r), a d x d matrix."""
        full = dr + self.christoffel_apply(x, dx, r)
        return np.einsum("ki...,kj...->ij...", r, full)

    def default_frame(self):
        x0 = self.origin()
        return Frame(x0, self.tangent_basis(x0))

    def validate_frame(self, frame, tol=FRAME_TOL):
        base, basis = frame.base, frame.basis
        if base.shape[0] != self.N or basis.shape[:2] != (self.N, self.d):
            raise ContractError(f"frame shape {basis.shape} does not match N={self.N}, d={self.d}")
        if np.max(np.abs(self.project(base) - base)) > tol:
            raise ContractError("frame base is not on the manifold")
        gram = np.einsum("ki...,kj...->ij...", basis, basis)
        eye = np.eye(self.d).reshape((self.d, self.d) + (1,) * (basis.ndim - 2))
        if np.max(np.abs(gram - eye)) > tol:
            raise ContractError("frame columns are not orthonormal")
        if np.max(np.abs(self.tangent_project(base[:, None], basis) - basis)) > tol:
            raise ContractError("frame columns are not tangent")
        return frame

    def project_path(self, values):
        """Project path values stored (n+1, N, P) point by point."""
        return np.moveaxis(self.project(np.moveaxis(values, 1, 0)), 0, 1)

    def orthonormalize(self, x, a):
        """Tangent-project an approximate frame at x and polar-correct it."""
        return polar(self.tangent_project(x[:, None], a))


@dataclass(frozen=True)
class FlatSpace(ManifoldSpec):
    def project(self, y):
        return np.array(y, dtype=float)

    def tangent_project(self, x, v):
        return np.array(v, dtype=float)

    def christoffel_apply(self, x, v, X):
        return np.zeros(np.broadcast_shapes(np.shape(X)))

    def curvature_form(self, r, u, v):
        u = np.asarray(u, dtype=float)
        return np.zeros((self.d,) + u.shape)

    @property
    def constant_ricci(self):
        return 0.0

    def origin(self):
        return np.zeros(self.N)

    def tangent_basis(self, x):
        return np.eye(self.N)


@dataclass(frozen=True)
class Sphere(ManifoldSpec):
    """Unit sphere S^d in R^(d+1) with a tube |y| in [inner, outer]."""

    inner: float = 0.5
    outer: float = 1.5

    def _radius(self, y):
        rad = np.sqrt(np.einsum("k...,k...->...", y, y))
        bad = (rad < self.inner) | (rad > self.outer)
        if np.any(bad):
            raise DomainError(
                f"point outside tubular neighbourhood (|y| range {np.min(rad):.3g}..{np.max(rad):.3g})"
            )
        return rad

    def project(self, y):
        y = np.asarray(y, dtype=float)
        return y / self._radius(y)

    def tangent_project(self, x, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        xh = x / np.sqrt(np.einsum("k...,k...->...", x, x))
        return v - xh * np.einsum("k...,k...->...", xh, v)[None]

    def christoffel_apply(self, x, v, X):
        # Gamma_y(v) = yh v^T - v yh^T: skew, so frames stay orthonormal under
        # dX = -Gamma(dx) X; on tangent frames it reduces to x (v^T X).
        x = np.asarray(x, dtype=float)
        xh = x / np.sqrt(np.einsum("k...,k...->...", x, x))
        vX = np.einsum("k...,kj...->j...", v, X)
        xX = np.einsum("k...,kj...->j...", xh, X)
        return xh[:, None] * vX[None] - v[:, None] * xX[None]

    def curvature_form(self, r, u, v):
        # Omega(u, v) w = <v, w> u - <u, w> v in any orthonormal frame
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return u[:, None] * v[None, :] - v[:, None] * u[None, :]

    @property
    def constant_ricci(self):
        return float(self.d - 1)

    def origin(self):
        x = np.zeros(self.N)
        x[-1] = 1.0
        return x

    def tangent_basis(self, x):
        """Gram-Schmidt frame from the coordinate axes least aligned with x."""
        x = self.project(np.asarray(x, dtype=float))
        order = np.argsort(np.abs(x), kind="stable")[: self.d]
        cols = []
        for idx in sorted(order):
            v = -x[idx] * x
            v[idx] += 1.0
            for c in cols:
                v -= c * (c @ v)
            cols.append(v / np.linalg.norm(v))
        return np.stack(cols, axis=1)


def make_manifold(name, d):
    """Build a manifold spec: ``"flat"`` for R^d or ``"sphere"`` for S^d."""
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise ConfigurationError(f"dimension must be a positive integer, got {d!r}")
    d = int(d)
    if name == "flat":
        return FlatSpace("flat", d, d)
    if name == "sphere":
        return Sphere("sphere", d, d + 1)
    raise ConfigurationError(f"unknown manifold {name!r}; expected 'flat' or 'sphere'")


def parse_manifold(label, dim=None):
    """Accept CLI forms like ``sphere2`` or ``flat`` plus an optional --dim."""
    label = str(label)
    stem = label.rstrip("0123456789")
    digits = label[len(stem):]
    if digits and dim is not None and int(digits) != int(dim):
        raise ConfigurationError(f"{label!r} conflicts with --dim {dim}")
    d = int(digits) if digits else (2 if dim is None else int(dim))
    return make_manifold(stem, d)


def project_to_manifold(spec, y):
    return spec.project(y)


def christoffel_apply(spec, x, v, X):
    return spec.christoffel_apply(x, v, X)


def curvature_form(spec, r, u, v):
    return spec.curvature_form(r, u, v)


def ricci_apply(spec, r, v):
    return spec.ricci_apply(r, v)


def torsion_form(spec, r, u, v):
    return spec.torsion_form(r, u, v)
