"""Frame-bundle integrators: rolling, horizontal lift, development, transport."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, IntegrationError
from .geometry import FlatSpace, Frame, frame_condition, polar
from .wiener import DiscretePath

MAX_CONDITION = 1e6


@dataclass
class FramePath:
    """Frames ``(n+1, N, d, P)`` over the base path ``(n+1, N, P)``."""

    grid: object
    frames: np.ndarray
    base: DiscretePath
    spec: object
    corrections: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.frames.shape[-1]

    def subset(self, idx):
        return FramePath(self.grid, self.frames[..., idx], self.base.subset(idx), self.spec, {})


def _batched_frame(r0, n_paths):
    basis = np.asarray(r0.basis, dtype=float)
    base = np.asarray(r0.base, dtype=float)
    if basis.ndim == 2:
        basis = np.repeat(basis[:, :, None], n_paths, axis=2)
    if base.ndim == 1:
        base = np.repeat(base[:, None], n_paths, axis=1)
    return base, basis


def heun_step(spec, x, r, dw, correct=True):
    """One Stratonovich Heun step of dx = r o dw, dr = -Gamma_x(r o dw) r.

    Returns the new state and the sizes of the base and frame corrections.
    """
    dx = np.einsum("kjp,jp->kp", r, dw)
    g = spec.christoffel_apply(x, dx, r)
    xp = x + dx
    rp = r - g
    dxp = np.einsum("kjp,jp->kp", rp, dw)
    gp = spec.christoffel_apply(xp, dxp, rp)
    x1 = x + 0.5 * (dx + dxp)
    r1 = r - 0.5 * (g + gp)
    if not correct:
        return x1, r1, 0.0, 0.0
    x2 = spec.project(x1)
    r2 = polar(spec.tangent_project(x2[:, None], r1))
    return x2, r2, float(np.max(np.abs(x2 - x1))), float(np.max(np.abs(r2 - r1)))


def roll(w, r0, spec, correct=True):
    """Roll the flat path batch ``w`` onto the manifold starting from frame r0.

    Returns ``(base_path, frame_path)``.  With ``correct=False`` neither the
    base projection nor the polar re-orthonormalisation is applied, which is
    only useful for measuring drift.
    """
    if w.k != spec.d:
        raise ContractError(f"driving path has dimension {w.k}, manifold has d={spec.d}")
    grid, n, P = w.grid, w.grid.n_steps, w.n_paths
    x, r = _batched_frame(r0, P)
    if isinstance(spec, FlatSpace):
        base = x[None] + np.einsum("kjp,tjp->tkp", r, w.values - w.values[:1])
        frames = np.broadcast_to(r, (n + 1,) + r.shape)
        path = DiscretePath(grid, base)
        zeros = np.zeros(n)
        return path, FramePath(grid, frames, path, spec, {"base": zeros, "frame": zeros})
    xs = np.empty((n + 1,) + x.shape)
    rs = np.empty((n + 1,) + r.shape)
    xs[0], rs[0] = x, r
    cx, cr = np.zeros(n), np.zeros(n)
    dw = w.increments
    for k in range(n):
        try:
            x, r, cx[k], cr[k] = heun_step(spec, x, r, dw[k], correct)
        except DomainError as exc:
            raise IntegrationError(f"rolled path left the tubular neighbourhood: {exc}", step=k) from exc
        xs[k + 1], rs[k + 1] = x, r
    path = DiscretePath(grid, xs)
    return path, FramePath(grid, rs, path, spec, {"base": cx, "frame": cr})


def horizontal_lift(x, r0, spec, correct=True):
    """Solve dX = -Gamma_x(o dx) X over a given manifold path batch."""
    grid, n, P = x.grid, x.grid.n_steps, x.n_paths
    xv = x.values
    base0, X = _batched_frame(r0, P)
    if np.max(np.abs(xv[0] - base0)) > 1e-10:
        raise ContractError("the path does not start at the base of r0")
    if isinstance(spec, FlatSpace):
        frames = np.broadcast_to(X, (n + 1,) + X.shape)
        return FramePath(grid, frames, x, spec, {"base": np.zeros(n), "frame": np.zeros(n)})
    out = np.empty((n + 1,) + X.shape)
    out[0] = X
    cr = np.zeros(n)
    for k in range(n):
        dx = xv[k + 1] - xv[k]
        g = spec.christoffel_apply(xv[k], dx, X)
        Xp = X - g
        gp = spec.christoffel_apply(xv[k + 1], dx, Xp)
        X1 = X - 0.5 * (g + gp)
        _check_condition(X1, k)
        if correct:
            X = polar(spec.tangent_project(xv[k + 1][:, None], X1))
            cr[k] = np.max(np.abs(X - X1))
        else:
            X = X1
        out[k + 1] = X
    return FramePath(grid, out, x, spec, {"base": np.zeros(n), "frame": cr})


def _check_condition(X, step):
    d = X.shape[1]
    gram = np.einsum("ki...,kj...->ij...", X, X)
    dev = np.max(np.abs(gram - np.eye(d).reshape((d, d) + (1,) * (X.ndim - 2))), axis=(0, 1))
    suspect = np.nonzero(np.atleast_1d(dev) > 0.5)[0]
    if suspect.size:
        cond = frame_condition(X.reshape(X.shape[:2] + (-1,))[..., suspect])
        if np.any(~np.isfinite(cond)) or np.max(cond) > MAX_CONDITION:
            raise IntegrationError("frame degenerated (condition number above 1e6)", step=step)


def develop(X):
    """Anti-development: increments are (r_k + r_k+1)^T dx_k / 2."""
    r = X.frames
    dx = X.base.increments
    dxi = 0.5 * np.einsum("tkjp,tkp->tjp", r[:-1] + r[1:], dx)
    return DiscretePath.from_increments(X.grid, dxi)


def parallel_transport(X, i1, i2, basis1=None, basis2=None):
    """t_{s1<-s2} = r_{s1} r_{s2}^T as a d x d matrix per path.

    Without reference bases the matrix is written in the frames r_{s1}, r_{s2}
    themselves.  ``basis1``/``basis2`` (N x d, or N x d x P) express it in
    other orthonormal tangent bases at the two end points.
    """
    r1, r2 = X.frames[i1], X.frames[i2]
    op = np.einsum("ajp,bjp->abp", r1, r2)
    b1 = r1 if basis1 is None else np.broadcast_to(np.asarray(basis1).reshape(r1.shape[:2] + (-1,)), r1.shape)
    b2 = r2 if basis2 is None else np.broadcast_to(np.asarray(basis2).reshape(r2.shape[:2] + (-1,)), r2.shape)
    return np.einsum("aip,abp,bjp->ijp", b1, op, b2)


def transport_operator(X, i1, i2):
    """Ambient N x N operator r_{s1} r_{s2}^T."""
    return np.einsum("ajp,bjp->abp", X.frames[i1], X.frames[i2])


def frame_at(X, k, p=0):
    return Frame(X.base.values[k, :, p], X.frames[k, :, :, p])


def dump_csv(X, handle, path_index=0):
    """Write one path as rows (s, x_1..x_N, r_11..r_Nd) for debugging."""
    N, d = X.frames.shape[1:3]
    writer = csv.writer(handle)
    writer.writerow(["s"] + [f"x{i+1}" for i in range(N)] + [f"r{i+1}{j+1}" for i in range(N) for j in range(d)])
    for k, s in enumerate(X.grid.times):
        row = [s] + list(X.base.values[k, :, path_index]) + list(X.frames[k, :, :, path_index].ravel())
        writer.writerow([repr(float(v)) for v in row])


def _bundle_basis(spec, x, r):
    """Tangent directions of the frame bundle at (x, r): d horizontal ones
    (r e_i, -Gamma_x(r e_i) r) followed by vertical ones (0, r E_ab)."""
    N, d, P = r.shape
    dirs = []
    for i in range(d):
        v = r[:, i, :]
        dirs.append((v, -spec.christoffel_apply(x, v, r)))
    for a_, b_ in zip(*np.triu_indices(d, 1)):
        dr = np.zeros_like(r)
        dr[:, b_, :] += r[:, a_, :]
        dr[:, a_, :] -= r[:, b_, :]
        dirs.append((np.zeros_like(x), dr))
    return dirs


def _bundle_coords(spec, x, r, dx, dr):
    """Coordinates (theta, omega upper triangle) of a perturbation (dx, dr)."""
    d = r.shape[1]
    theta = np.einsum("kj...,k...->j...", r, dx)
    om = spec.connection_form(x, r, dx, dr)
    iu = np.triu_indices(d, 1)
    return np.concatenate([theta, om[iu]], axis=0)


def itomap_vjp(w, X, cotangents, eps=1e-6):
    """Exact discrete flat derivative of functionals of the rolled path.

    ``cotangents`` maps grid index -> ambient gradient array (N, F, P) of F
    functionals with respect to the base point there.  Returns dF/d(dw_k) of
    shape (n, d, F, P), i.e. the flat Malliavin derivative on each interval of
    the scheme actually used by :func:`roll`.  Step Jacobians are central
    differences of :func:`heun_step` along the intrinsic directions of the
    frame bundle, so they track the scheme up to O(eps^2).
    """
    spec = X.spec
    n, P = w.grid.n_steps, w.n_paths
    N, d = spec.N, spec.d
    F = next(iter(cotangents.values())).shape[1]
    if isinstance(spec, FlatSpace):
        out = np.zeros((n, d, F, P))
        r0 = X.frames[0]
        for idx, cot in cotangents.items():
            out[:idx] += np.einsum("kjp,kfp->jfp", r0, cot)[None]
        return out
    xs, rs = X.base.values, X.frames
    dw = w.increments
    nb = d + d * (d - 1) // 2
    m = nb + d

    def inject(k):
        return np.concatenate([np.einsum("kjp,kfp->jfp", rs[k], cotangents[k]), np.zeros((nb - d, F, P))])

    lam = inject(n) if n in cotangents else np.zeros((nb, F, P))
    out = np.zeros((n, d, F, P))
    for k in range(n - 1, -1, -1):
        x, r = xs[k], rs[k]
        dirs = _bundle_basis(spec, x, r)
        xb = np.repeat(x[:, None, :], 2 * m, axis=1)
        rb = np.repeat(r[:, :, None, :], 2 * m, axis=2)
        wb = np.repeat(dw[k][:, None, :], 2 * m, axis=1)
        for c in range(m):
            for sgn, col in ((1.0, 2 * c), (-1.0, 2 * c + 1)):
                if c < nb:
                    vx, vr = dirs[c]
                    xb[:, col] += sgn * eps * vx
                    rb[:, :, col] += sgn * eps * vr
                else:
                    wb[c - nb, col] += sgn * eps
        xn, rn, _, _ = heun_step(spec, xb.reshape(N, -1), rb.reshape(N, d, -1), wb.reshape(d, -1))
        xn = xn.reshape(N, 2 * m, P)
        rn = rn.reshape(N, d, 2 * m, P)
        dxn = (xn[:, 0::2] - xn[:, 1::2]) / (2 * eps)
        drn = (rn[:, :, 0::2] - rn[:, :, 1::2]) / (2 * eps)
        x1, r1 = xs[k + 1][:, None, :], rs[k + 1][:, :, None, :]
        jac = _bundle_coords(spec, x1, r1, dxn, drn)  # (nb, m, P)
        grad_in = np.einsum("oip,ofp->ifp", jac, lam)
        out[k] = grad_in[nb:]
        lam = grad_in[:nb]
        if k in cotangents:
            lam = lam + inject(k)
    return out
