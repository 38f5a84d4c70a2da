"""Path-space derivatives and the integration-by-parts verifiers.

Derivatives are returned per grid interval: ``D[k]`` is the value on
[s_k, s_{k+1}), in frame coordinates, with the path index last, so a gradient
has shape (n, d, P).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError
from .geometry import FlatSpace
from .lift import FramePath, itomap_vjp, roll
from .wiener import CMShift, DiscretePath, TimeGrid, ito_integral, sample_brownian

FD_STEP = 1e-6
GRADIENT_RTOL = 1e-6


@dataclass
class CylindricalFunctional:
    """F(p) = f(p(s_1), ..., p(s_m)).

    ``f`` maps points (m, N, P) to (P,); ``grad`` returns (m, N, P) ambient
    partials; the optional ``hess`` returns (m, N, m, N, P).  ``space`` says
    whether the arguments are manifold points or the flat path itself.
    """

    name: str
    times: tuple
    f: Callable
    grad: Callable
    hess: Callable | None = None
    dim: int = 3
    space: str = "manifold"
    bounded: bool = True
    validate: bool = True

    def __post_init__(self):
        self.times = tuple(float(s) for s in self.times)
        if self.space not in ("manifold", "flat"):
            raise ContractError("space must be 'manifold' or 'flat'")
        if self.validate:
            check_gradients(self)

    def indices(self, grid):
        return [grid.index(s) for s in self.times]

    def points(self, path):
        return path.values[self.indices(path.grid)]

    def evaluate(self, path):
        return self.f(self.points(path))

    def ambient_gradient(self, path):
        """dict grid index -> (N, P) summed partial gradients."""
        g = self.grad(self.points(path))
        out = {}
        for i, k in enumerate(self.indices(path.grid)):
            out[k] = out.get(k, 0.0) + g[i]
        return out


def check_gradients(F, n_samples=4, seed=12345):
    """Compare analytic derivatives with central differences at random points."""
    rng = np.random.default_rng(seed)
    m, N = len(F.times), F.dim
    x = rng.standard_normal((m, N, n_samples))
    if F.space == "manifold":
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    g = F.grad(x)
    fd = np.empty_like(g)
    for i in range(m):
        for j in range(N):
            xp, xm = x.copy(), x.copy()
            xp[i, j] += FD_STEP
            xm[i, j] -= FD_STEP
            fd[i, j] = (F.f(xp) - F.f(xm)) / (2 * FD_STEP)
    scale = max(1.0, float(np.max(np.abs(g))))
    if np.max(np.abs(g - fd)) > GRADIENT_RTOL * scale:
        raise ContractError(f"gradient of {F.name!r} disagrees with finite differences")
    if F.hess is not None:
        H = F.hess(x)
        for i in range(m):
            for j in range(N):
                xp, xm = x.copy(), x.copy()
                xp[i, j] += FD_STEP
                xm[i, j] -= FD_STEP
                col = (F.grad(xp) - F.grad(xm)) / (2 * FD_STEP)
                if np.max(np.abs(H[:, :, i, j] - col)) > GRADIENT_RTOL * max(1.0, float(np.max(np.abs(H)))):
                    raise ContractError(f"hessian of {F.name!r} disagrees with finite differences")
    return True


@dataclass
class TangentProcess:
    """dxi = A dw + hdot ds with A (n, d, d, P) skew and hdot (n, d, P)."""

    A: np.ndarray
    hdot: np.ndarray
    adapted: bool = True

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.hdot = np.asarray(self.hdot, dtype=float)
        if np.max(np.abs(self.A + np.swapaxes(self.A, 1, 2)), initial=0.0) > 0:
            raise ContractError("A must be exactly skew")

    @classmethod
    def shift(cls, h, n_paths=1):
        n, d = h.hdot.shape[:2]
        return cls(np.zeros((n, d, d, 1)), h.hdot)

    def values(self, w):
        """xi on the grid points, (n+1, d, P)."""
        dw = w.increments
        n, d, P = dw.shape
        inc = np.einsum("kijp,kjp->kip", np.broadcast_to(self.A, (n, d, d, P)), dw)
        inc = inc + self.hdot * w.grid.ds
        out = np.zeros((dw.shape[0] + 1,) + inc.shape[1:])
        np.cumsum(inc, axis=0, out=out[1:])
        return out


def _rotate(A, dw):
    from .driverflow import _expm_skew

    rot = _expm_skew(np.moveaxis(A, 0, 2))
    return np.einsum("ijkp,kjp->kip", rot, dw)


def perturbed_path(w, xi, eps):
    """w^eps with increments exp(eps A_k) dw_k + eps hdot_k ds."""
    dw = w.increments
    n, d, P = dw.shape
    A = np.broadcast_to(xi.A, (n, d, d, P))
    new = _rotate(eps * A, dw) + eps * np.broadcast_to(xi.hdot, dw.shape) * w.grid.ds
    return DiscretePath.from_increments(w.grid, new)


@dataclass
class FDResult:
    value: np.ndarray
    coarse: np.ndarray
    flagged: np.ndarray

    @property
    def extrapolated(self):
        return (4 * self.value - self.coarse) / 3


def directional_derivative_fd(functional, w, xi, eps=1e-4):
    """Central difference of a functional of w along a tangent process.

    ``functional`` maps a DiscretePath batch to (P,).  The step is repeated at
    2 eps; paths whose two estimates differ by more than ten times the
    expected O(eps^2) gap are flagged.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ContractError("eps must lie in [1e-6, 1e-2]")

    def central(e):
        return (functional(perturbed_path(w, xi, e)) - functional(perturbed_path(w, xi, -e))) / (2 * e)

    d1, d2 = central(eps), central(2 * eps)
    expected = 3 * eps**2 * (1 + np.abs(d1)) + 1e-10 / eps
    return FDResult(d1, d2, np.abs(d2 - d1) > 10 * expected)


def gradient_DM(F, X):
    """D^M_s F = sum_i t_{s<-s_i} grad_i f 1_{s<s_i}, in frame coordinates."""
    n, d, P = X.grid.n_steps, X.spec.d, X.n_paths
    out = np.zeros((n, d, P))
    for k, g in F.ambient_gradient(X.base).items():
        out[:k] += np.einsum("ajp,ap->jp", X.frames[k], g)[None]
    return out


def ricci_along(X):
    """ric in frame coordinates at every grid point, (n+1, d, d, P)."""
    spec, d = X.spec, X.spec.d
    if spec.constant_ricci is not None:
        return np.broadcast_to((spec.constant_ricci * np.eye(d))[None, :, :, None], (X.grid.n_steps + 1, d, d, X.n_paths))
    return np.stack([np.moveaxis(spec.ricci_matrix(np.moveaxis(X.frames[k], -1, 0)), 0, -1)
                     for k in range(X.grid.n_steps + 1)])


@dataclass
class DampingKernel:
    """Step propagators of dQ/ds = -ric Q / 2 (explicit midpoint rule).

    ``Q(k, j)`` for k >= j is the product M_{k-1} ... M_j, so the cocycle
    property holds to rounding.
    """

    grid: TimeGrid
    steps: np.ndarray  # (n, d, d, P)
    start: int = 0

    def Q(self, k, j):
        d, P = self.steps.shape[1], self.steps.shape[3]
        if k < j:
            raise ContractError("Q(s, s') is stored for s >= s' only")
        out = np.broadcast_to(np.eye(d)[:, :, None], (d, d, P)).copy()
        for i in range(j, k):
            out = np.einsum("abp,bcp->acp", self.steps[i], out)
        return out

    def column(self, j=None):
        """Q(k, j) for k = j..n, shape (n+1-j, d, d, P)."""
        j = self.start if j is None else j
        d, P = self.steps.shape[1], self.steps.shape[3]
        out = np.empty((self.grid.n_steps + 1 - j, d, d, P))
        out[0] = np.eye(d)[:, :, None]
        for i in range(j, self.grid.n_steps):
            out[i + 1 - j] = np.einsum("abp,bcp->acp", self.steps[i], out[i - j])
        return out

    def row(self, k):
        """Q(k, j) for j = 0..k, shape (k+1, d, d, P)."""
        d, P = self.steps.shape[1], self.steps.shape[3]
        out = np.empty((k + 1, d, d, P))
        out[k] = np.eye(d)[:, :, None]
        for j in range(k - 1, -1, -1):
            out[j] = np.einsum("abp,bcp->acp", out[j + 1], self.steps[j])
        return out


def solve_Q(X, s_prime=0):
    """Damping kernel along X; ``s_prime`` is a grid index (kept for slicing)."""
    ds = X.grid.ds
    B = -0.5 * ricci_along(X)
    Bmid = 0.5 * (B[:-1] + B[1:])
    d = X.spec.d
    eye = np.eye(d)[None, :, :, None]
    half = eye + 0.5 * ds * B[:-1]
    steps = eye + ds * np.einsum("kabp,kbcp->kacp", Bmid, half)
    return DampingKernel(X.grid, steps, s_prime)


def gradient_damped(F, X, kernel=None):
    """D~_s F = sum_i Q(s_i, s)^T r_{s_i}^T grad_i f 1_{s<s_i}.

    Each interval uses the average of Q at its two end points.
    """
    kernel = solve_Q(X) if kernel is None else kernel
    n, d, P = X.grid.n_steps, X.spec.d, X.n_paths
    out = np.zeros((n, d, P))
    for k, g in F.ambient_gradient(X.base).items():
        if k == 0:
            continue
        gi = np.einsum("ajp,ap->jp", X.frames[k], g)
        row = kernel.row(k)
        avg = 0.5 * (row[:-1] + row[1:])
        out[:k] += np.einsum("kabp,ap->kbp", avg, gi)
    return out


def gradient_flat(F, w, X):
    """Flat Malliavin derivative of F(I(w)), exact for the rolling scheme."""
    return gradient_flat_many([F], w, X)[:, :, 0, :]


def gradient_flat_many(functionals, w, X):
    """(n, d, F, P) flat derivatives of several functionals in one sweep."""
    n, d, P = w.grid.n_steps, w.k, w.n_paths
    flat_ones = [F for F in functionals if F.space == "flat"]
    cot = {}
    out = np.zeros((n, d, len(functionals), P))
    for j, F in enumerate(functionals):
        if F.space == "flat":
            for k, g in F.ambient_gradient(w).items():
                out[:k, :, j] += g[None]
            continue
        for k, g in F.ambient_gradient(X.base).items():
            block = cot.setdefault(k, np.zeros((X.spec.N, len(functionals), P)))
            block[:, j] += g
    if len(flat_ones) < len(functionals):
        out += itomap_vjp(w, X, cot)
    return out


def flat_hessian_diag(F, w):
    """D^i_s D^j_s F on each interval for a flat functional, (n, d, d, P)."""
    if F.hess is None or F.space != "flat":
        raise ContractError("needs a flat functional with a hessian")
    n, d, P = w.grid.n_steps, w.k, w.n_paths
    H = F.hess(F.points(w))
    idx = F.indices(w.grid)
    out = np.zeros((n, d, d, P))
    for a, ka in enumerate(idx):
        for b, kb in enumerate(idx):
            out[: min(ka, kb)] += H[a, :, b, :][None]
    return out


def rotational_derivative(alpha, w, A):
    """D^R_A alpha via the Skorohod expansion.

    delta(A^T D alpha) plus the hessian trace sum_ij A_ij D^i D^j alpha ds;
    for a flat cylindrical alpha with analytic hessian.
    """
    ds = w.grid.ds
    Dalpha = gradient_flat(alpha, w, None) if alpha.space == "flat" else None
    if Dalpha is None:
        raise ContractError("rotational_derivative expects a flat functional")
    n, d, P = Dalpha.shape
    A = np.broadcast_to(A, (n, d, d, P))
    H = flat_hessian_diag(alpha, w)
    v = np.einsum("kijp,kip->kjp", A, Dalpha)
    trace_Dv = np.einsum("kijp,kjip->p", A, H) * ds
    skorohod = np.einsum("kjp,kjp->p", v, w.increments) - trace_Dv
    hess_term = np.einsum("kijp,kijp->p", A, H) * ds
    return skorohod + hess_term


@dataclass
class IBPReport:
    kind: str
    functional: str
    shift: str
    lhs: float
    rhs: float
    se_lhs: float
    se_rhs: float
    tolerance: float
    passed: bool
    rhs_cv: float = float("nan")
    se_rhs_cv: float = float("nan")
    n_paths: int = 0


def ibp_samples(kind, functionals, h, w, X, kernel=None):
    """Per-path left and right sides, each of shape (F, P)."""
    ds = w.grid.ds
    hdot = np.broadcast_to(h.hdot, w.increments.shape)
    if kind == "bismut":
        integrand = hdot + 0.5 * np.einsum("kijp,kjp->kip", ricci_along(X)[:-1], np.broadcast_to(h.h[:-1], hdot.shape))
        grads = [gradient_DM(F, X) for F in functionals]
    elif kind == "damped":
        integrand = hdot
        kernel = solve_Q(X) if kernel is None else kernel
        grads = [gradient_damped(F, X, kernel) for F in functionals]
    else:
        raise ContractError(f"unknown IBP kind {kind!r}")
    stoch = ito_integral(integrand, w)
    vals = np.stack([F.evaluate(X.base) for F in functionals])
    lhs = np.stack([np.einsum("kjp,kjp->p", g, hdot) * ds for g in grads])
    return lhs, vals * stoch[None], vals, stoch


def _mean_se(x):
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(x.size))


def ibp_check(kind, functionals, h, n_paths, spec, seed, n_steps=256, batch=8192, shift_name="", slack=None):
    """Monte Carlo check of E <grad F, hdot> = E F int(...) dw on common paths."""
    from .parallel import map_batches

    grid = TimeGrid(n_steps)
    r0 = spec.default_frame()
    for F in functionals:
        if not F.bounded:
            warnings.warn(f"functional {F.name!r} is unbounded", RuntimeWarning, stacklevel=2)

    def run(start, count):
        w = sample_brownian(grid, spec.d, seed, count, start=start)
        _, X = roll(w, r0, spec)
        return ibp_samples(kind, functionals, h, w, X)

    parts = map_batches(run, n_paths, batch)
    lhs = np.concatenate([p[0] for p in parts], axis=1)
    rhs = np.concatenate([p[1] for p in parts], axis=1)
    vals = np.concatenate([p[2] for p in parts], axis=1)
    stoch = np.concatenate([p[3] for p in parts])
    if not np.all(np.isfinite(lhs)) or not np.all(np.isfinite(rhs)):
        raise FloatingPointError("NaN in integration-by-parts samples")
    slack = np.sqrt(grid.ds) if slack is None else slack
    reports = []
    for i, F in enumerate(functionals):
        ml, sl = _mean_se(lhs[i])
        mr, sr = _mean_se(rhs[i])
        mcv, scv = _mean_se((vals[i] - vals[i].mean()) * stoch)
        tol = 3 * (sl + sr) + slack
        reports.append(IBPReport(kind, F.name, shift_name, ml, mr, sl, sr, tol, abs(ml - mr) <= tol, mcv, scv, n_paths))
    return reports


def gamma_process(w, xi_values, spec, X=None):
    """gamma_k = sum_{j<k} Omega(xibar_j, dw_j), (n+1, d, d, P).

    Omega's argument order matches the pullback generator: with
    ric = -sum_i Omega(e_i, .) e_i this is the order that reproduces the
    Bismut drift hdot + ric h / 2 after the Stratonovich correction.
    """
    dw = w.increments
    xibar = 0.5 * (xi_values[:-1] + xi_values[1:])
    om = spec.curvature_form(None, np.moveaxis(xibar, 0, 1), np.moveaxis(dw, 0, 1))
    om = np.moveaxis(om, 2, 0)
    out = np.zeros((dw.shape[0] + 1,) + om.shape[1:])
    np.cumsum(om, axis=0, out=out[1:])
    return out


@dataclass
class IntertwiningResult:
    lhs: np.ndarray
    rhs: np.ndarray
    flagged: np.ndarray

    @property
    def relative_error(self):
        """||lhs - rhs|| / ||lhs|| over the batch (root mean square)."""
        return float(np.linalg.norm(self.lhs - self.rhs) / max(np.linalg.norm(self.lhs), 1e-300))

    @property
    def pathwise_error(self):
        return np.abs(self.lhs - self.rhs) / np.maximum(np.abs(self.lhs), 1e-300)


def intertwining_check(F, xi, w, spec, r0=None, eps=1e-4):
    """D^M_xi F (analytic) against D_{xi*}(F o I) by finite differences.

    xi* has rotation part A_k + (gamma_k + gamma_{k+1}) / 2, the midpoint form
    of xi + int gamma o dw, and the same drift as xi.
    """
    r0 = spec.default_frame() if r0 is None else r0
    _, X = roll(w, r0, spec)
    xv = xi.values(w)
    lhs = np.zeros(w.n_paths)
    for k, g in F.ambient_gradient(X.base).items():
        lhs += np.einsum("ap,ajp,jp->p", g, X.frames[k], xv[k])
    gam = gamma_process(w, xv, spec, X)
    star = TangentProcess(xi.A + 0.5 * (gam[:-1] + gam[1:]), xi.hdot, adapted=False)
    fd = directional_derivative_fd(lambda v: F.evaluate(roll(v, r0, spec)[0]), w, star, eps)
    return IntertwiningResult(lhs, fd.value, fd.flagged)
