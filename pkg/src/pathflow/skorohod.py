"""Anticipative integrals of finite-rank processes.

A process is a finite sum u_k = sum_b alpha_b * V_b[k] of random scalar
coefficients alpha_b (cylindrical functionals, or 1) times deterministic
profiles V_b of shape (n, d).  Step processes are the special case where each
profile is an indicator of a block of intervals times a basis vector.  On this
class every trace below is a finite sum, evaluated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UnsupportedShapeError
from .geometry import FlatSpace
from .lift import roll
from .malliavin import (
    CylindricalFunctional,
    TangentProcess,
    directional_derivative_fd,
    gamma_process,
    gradient_damped,
    gradient_DM,
    gradient_flat_many,
    solve_Q,
)
from .wiener import DiscretePath


@dataclass
class Term:
    coeff: CylindricalFunctional | None
    profile: np.ndarray  # (n, d)


@dataclass
class StepProcess:
    grid: object
    d: int
    terms: list = field(default_factory=list)
    name: str = "u"

    @classmethod
    def blocks(cls, grid, d, blocks, name="u"):
        """blocks: iterable of (start, end, j, coeff) with grid-point times."""
        terms = []
        for start, end, j, coeff in blocks:
            a, b = grid.index(start), grid.index(end)
            if not a < b:
                raise ContractError("block breakpoints must be increasing")
            prof = np.zeros((grid.n_steps, d))
            prof[a:b, j] = 1.0
            terms.append(Term(coeff, prof))
        return cls(grid, d, terms, name)

    @classmethod
    def rank_one(cls, grid, coeff, hdot, name="u"):
        hdot = np.asarray(hdot, dtype=float)
        if hdot.ndim == 3:
            if hdot.shape[2] != 1:
                raise ContractError("rank-one profiles must be deterministic")
            hdot = hdot[:, :, 0]
        return cls(grid, hdot.shape[1], [Term(coeff, hdot)], name)

    def scaled(self, c):
        return StepProcess(self.grid, self.d, [Term(t.coeff, c * t.profile) for t in self.terms], f"{c}*{self.name}")

    def map_profiles(self, fn, name=None):
        return StepProcess(self.grid, self.d, [Term(t.coeff, fn(t.profile)) for t in self.terms], name or self.name)

    def truncated(self, k):
        """1_{[0, s_k)} u."""
        def cut(p):
            q = p.copy()
            q[k:] = 0.0
            return q
        return self.map_profiles(cut)

    @property
    def is_rank_one(self):
        return len(self.terms) == 1

    @property
    def coefficients(self):
        return [t.coeff for t in self.terms if t.coeff is not None]


class PathContext:
    """A batch of driving paths with its rolled frames and derivative caches."""

    def __init__(self, w, spec, r0=None):
        self.w = w
        self.spec = spec
        self.r0 = spec.default_frame() if r0 is None else r0
        self.path, self.X = roll(w, self.r0, spec)
        self._flat = {}
        self._kernel = None

    @property
    def flat_spec(self):
        return isinstance(self.spec, FlatSpace)

    def kernel(self):
        if self._kernel is None:
            self._kernel = solve_Q(self.X)
        return self._kernel

    def value(self, F):
        if F is None:
            return np.ones(self.w.n_paths)
        return F.evaluate(self.w if F.space == "flat" else self.path)

    def prefetch(self, functionals):
        """Compute flat derivatives of many functionals in one adjoint sweep."""
        todo = [F for F in functionals if F is not None and id(F) not in self._flat]
        if todo:
            G = gradient_flat_many(todo, self.w, self.X)
            for j, F in enumerate(todo):
                self._flat[id(F)] = G[:, :, j, :]

    def grad(self, F, kind="flat"):
        """(n, d, P) derivative of F of the given kind ('flat', 'damped', 'DM')."""
        n, d, P = self.w.grid.n_steps, self.spec.d, self.w.n_paths
        if F is None:
            return np.zeros((n, d, P))
        if kind == "flat" or self.flat_spec:
            self.prefetch([F])
            return self._flat[id(F)]
        if F.space == "flat":
            raise ContractError("damped and manifold gradients need a functional of the manifold path")
        if kind == "damped":
            return gradient_damped(F, self.X, self.kernel())
        if kind == "DM":
            return gradient_DM(F, self.X)
        raise ContractError(f"unknown derivative kind {kind!r}")

    def process(self, u):
        n, d, P = self.w.grid.n_steps, u.d, self.w.n_paths
        out = np.zeros((n, d, P))
        for t in u.terms:
            out += t.profile[:, :, None] * self.value(t.coeff)[None, None, :]
        return out


@dataclass
class AnticipativeResult:
    ledger: dict

    @property
    def value(self):
        total = 0.0
        for v in self.ledger.values():
            total = total + v
        return total


def _pathwise_sum(u, ctx):
    return sum(ctx.value(t.coeff) * np.einsum("kj,kjp->p", t.profile, ctx.w.increments) for t in u.terms)


def _trace(u, ctx, kind):
    ds = ctx.w.grid.ds
    total = np.zeros(ctx.w.n_paths)
    for t in u.terms:
        if t.coeff is not None:
            total = total + np.einsum("kjp,kj->p", ctx.grad(t.coeff, kind), t.profile) * ds
    return total


def _offset_trace(u, ctx, kind):
    """(1/2) sum_k D_k alpha . (V[k+1] + V[k-1]) ds.

    At the two ends of [0, 1] the missing neighbour is replaced by V[k]
    itself (the one-sided limit exists there); interior block edges are
    left as they are, which is where the O(ds) gap to the trace comes from.
    """
    ds = ctx.w.grid.ds
    total = np.zeros(ctx.w.n_paths)
    for t in u.terms:
        if t.coeff is None:
            continue
        prof = t.profile
        shifted = np.zeros_like(prof)
        shifted[:-1] += prof[1:]
        shifted[1:] += prof[:-1]
        shifted[-1] += prof[-1]
        shifted[0] += prof[0]
        total = total + 0.5 * np.einsum("kjp,kj->p", ctx.grad(t.coeff, kind), shifted) * ds
    return total


def skorohod_flat(u, ctx):
    """delta(u) = sum alpha V.dw - sum D alpha . V ds (flat adjoint)."""
    ctx.prefetch(u.coefficients)
    return AnticipativeResult({"ito_part": _pathwise_sum(u, ctx), "trace_D": -_trace(u, ctx, "flat")})


def tilde_delta_trace(u, ctx):
    """delta~(u) = delta(u) + Tr(D u) - Tr(D~ u)."""
    base = skorohod_flat(u, ctx).value
    return AnticipativeResult({
        "delta": base,
        "trace_D": _trace(u, ctx, "flat"),
        "trace_Dtilde": -_trace(u, ctx, "damped"),
    })


def tilde_delta_limits(u, ctx):
    """delta~(u) = delta(u) + (D+ + D-).u / 2 - (D~+ + D~-).u / 2."""
    base = skorohod_flat(u, ctx).value
    return AnticipativeResult({
        "delta": base,
        "dpm": _offset_trace(u, ctx, "flat"),
        "dpm_tilde": -_offset_trace(u, ctx, "damped"),
    })


def _ricci_factor(ctx):
    kappa = ctx.spec.constant_ricci
    if kappa is None:
        raise NotImplementedError("profile transforms assume constant Ricci curvature")
    return kappa


def ricci_forward(u, ctx):
    """u + ric int_0^s u / 2 (left-rectangle quadrature)."""
    half = 0.5 * _ricci_factor(ctx) * ctx.w.grid.ds

    def fwd(p):
        acc = np.zeros_like(p)
        np.cumsum(p[:-1], axis=0, out=acc[1:])
        return p + half * acc

    return u.map_profiles(fwd, f"forward({u.name})")


def ricci_volterra(u, ctx):
    """Solve v_s + ric int_0^s v / 2 = u_s on the grid (lower-triangular)."""
    half = 0.5 * _ricci_factor(ctx) * ctx.w.grid.ds

    def solve(p):
        v = np.zeros_like(p)
        acc = np.zeros(p.shape[1:])
        for k in range(p.shape[0]):
            v[k] = p[k] - half * acc
            acc = acc + v[k]
        return v

    return u.map_profiles(solve, f"volterra({u.name})")


READINGS = ("forward", "inverse", "literal")


def delta_M(u, ctx, via="volterra", reading="forward", eps=1e-4):
    """Manifold anticipative integral, adjoint of D^M.

    ``volterra`` applies delta~ to a Ricci-transformed process.  The reading
    selects the transform: ``forward`` uses u + ric int u / 2 (which the
    adjoint test supports), ``inverse`` the Volterra solution v + ric int v / 2 = u,
    and ``literal`` no transform at all.
    ``explicit`` evaluates delta(alpha (hdot + ric h / 2)) - D^R_gamma alpha
    for a rank-one u = alpha hdot.
    """
    if via == "volterra":
        if reading == "forward":
            v = ricci_forward(u, ctx)
        elif reading == "inverse":
            v = ricci_volterra(u, ctx)
        elif reading == "literal":
            v = u
        else:
            raise ContractError(f"unknown reading {reading!r}")
        return AnticipativeResult(dict(tilde_delta_trace(v, ctx).ledger))
    if via != "explicit":
        raise ContractError(f"unknown route {via!r}")
    if not u.is_rank_one:
        raise UnsupportedShapeError("explicit route needs a rank-one process alpha * hdot")
    term = u.terms[0]
    shifted = skorohod_flat(ricci_forward(u, ctx), ctx).value
    if term.coeff is None or ctx.flat_spec:
        return AnticipativeResult({"delta_shifted": shifted, "rotation": np.zeros_like(shifted)})
    n, d = term.profile.shape
    h = np.zeros((n + 1, d, 1))
    np.cumsum(term.profile * ctx.w.grid.ds, axis=0, out=h[1:, :, 0])
    gam = gamma_process(ctx.w, np.broadcast_to(h, (n + 1, d, ctx.w.n_paths)), ctx.spec)
    rot = TangentProcess(gam[:-1], np.zeros((n, d, 1)))
    alpha = term.coeff
    fd = directional_derivative_fd(lambda v: alpha.evaluate(roll(v, ctx.r0, ctx.spec)[0]), ctx.w, rot, eps)
    return AnticipativeResult({"delta_shifted": shifted, "rotation": -fd.value})


def adjoint_samples(u, ctx, tests, kind, result):
    """Per-path (E-side) samples of <D phi, u> and phi * integral."""
    ds = ctx.w.grid.ds
    uv = ctx.process(u)
    lhs = np.stack([np.einsum("kjp,kjp->p", ctx.grad(phi, kind), uv) * ds for phi in tests])
    rhs = np.stack([ctx.value(phi) * result for phi in tests])
    return lhs, rhs


# ---------------------------------------------------------------------------
# anticipative Ito formula (flat Wiener space)

def _flat_process_values(u, w):
    """u_k and D_k u_{k+1}, D_k u_{k-1} for flat coefficients: (n,d,P) each."""
    n, d, P = w.grid.n_steps, u.d, w.n_paths
    uv = np.zeros((n, d, P))
    plus = np.zeros((n, P))
    minus = np.zeros((n, P))
    for t in u.terms:
        a = np.ones(P) if t.coeff is None else t.coeff.evaluate(w)
        uv += t.profile[:, :, None] * a
        if t.coeff is None:
            continue
        Da = np.zeros((n, d, P))
        for k, g in t.coeff.ambient_gradient(w).items():
            Da[:k] += g[None]
        nxt = np.empty_like(t.profile)
        nxt[:-1], nxt[-1] = t.profile[1:], t.profile[-1]
        prv = np.empty_like(t.profile)
        prv[1:], prv[0] = t.profile[:-1], t.profile[0]
        plus += np.einsum("kjp,kj->kp", Da, nxt)
        minus += np.einsum("kjp,kj->kp", Da, prv)
    return uv, plus, minus


def integral_path(u, w):
    """X_j = int_0^{s_j} u o dw - (1/2) int_0^{s_j} (D+ + D-) . u ds on flat space.

    The Stratonovich sum of a step process is its pathwise sum.  Shape (n+1, P).
    """
    uv, plus, minus = _flat_process_values(u, w)
    inc = np.einsum("kjp,kjp->kp", uv, w.increments) - 0.5 * (plus + minus) * w.grid.ds
    X = np.zeros((w.grid.n_steps + 1, w.n_paths))
    np.cumsum(inc, axis=0, out=X[1:])
    return X


@dataclass
class ItoCheck:
    n_steps: int
    lhs: np.ndarray
    rhs: np.ndarray
    X: np.ndarray

    @property
    def discrepancy(self):
        return self.lhs - self.rhs

    @property
    def mean_abs(self):
        return float(np.mean(np.abs(self.discrepancy)))

    @property
    def l2(self):
        return float(np.sqrt(np.mean(self.discrepancy**2)))


def ito_formula_check(u, phi, dphi, d2phi, w, t_index=None, eps=1e-5):
    """Both sides of the anticipative Ito formula for X_t = delta~(1_[0,t) u).

    phi(X_t) - phi(0) against
    delta(phi'(X) u) + (1/2) int phi''(X_s) (D+ X_s + D- X_s) . u_s ds,
    on flat Wiener space.  Diagonal derivatives of the path functionals come
    from central differences in each increment.
    """
    if u.d != w.k:
        raise ContractError("process and path dimensions differ")
    n, d, P = w.grid.n_steps, w.k, w.n_paths
    t_index = n if t_index is None else t_index
    ds = w.grid.ds
    dw = w.increments
    X = integral_path(u, w)
    uv = _flat_process_values(u, w)[0]
    dX_same = np.zeros((n, d, P))
    dX_next = np.zeros((n, d, P))
    dX_prev = np.zeros((n, d, P))
    du_diag = np.zeros((n, d, P))
    for k in range(t_index):
        for j in range(d):
            pert = []
            for sgn in (1.0, -1.0):
                inc = dw.copy()
                inc[k, j] += sgn * eps
                wp = DiscretePath.from_increments(w.grid, inc)
                pert.append((integral_path(u, wp), _flat_process_values(u, wp)[0]))
            (Xp, up), (Xm, um) = pert
            dX_same[k, j] = (Xp[k] - Xm[k]) / (2 * eps)
            dX_next[k, j] = (Xp[k + 1] - Xm[k + 1]) / (2 * eps)
            if k > 0:
                dX_prev[k, j] = (Xp[k - 1] - Xm[k - 1]) / (2 * eps)
            du_diag[k, j] = (up[k, j] - um[k, j]) / (2 * eps)
    Xk = X[:t_index]
    uk = uv[:t_index]
    v = dphi(Xk)[:, None, :] * uk
    trace_v = np.sum(d2phi(Xk)[:, None, :] * dX_same[:t_index] * uk + dphi(Xk)[:, None, :] * du_diag[:t_index], axis=1)
    skorohod = np.einsum("kjp,kjp->p", v, dw[:t_index]) - trace_v.sum(axis=0) * ds
    corr = 0.5 * np.einsum("kp,kjp->p", d2phi(Xk), (dX_next + dX_prev)[:t_index] * uk) * ds
    lhs = phi(X[t_index]) - phi(X[0])
    return ItoCheck(n, lhs, skorohod + corr, X)


# ---------------------------------------------------------------------------
# L1 estimate

def _norm_samples(u, ctx):
    """Per-path integrands of the two halves of the L^{1,2} norm."""
    ds = ctx.w.grid.ds
    energy = np.sum(ctx.process(u) ** 2, axis=(0, 1)) * ds
    terms = [t for t in u.terms if t.coeff is not None]
    ctx.prefetch([t.coeff for t in terms])
    grads = [ctx.grad(t.coeff, "flat") for t in terms]
    deriv = np.zeros(ctx.w.n_paths)
    for a, ta in enumerate(terms):
        for b, tb in enumerate(terms):
            gram_D = np.einsum("kjp,kjp->p", grads[a], grads[b]) * ds
            deriv = deriv + gram_D * np.sum(ta.profile * tb.profile) * ds
    return energy, deriv


def l12_norm(u, ctx):
    """(E int |u|^2)^(1/2) + (E int int |D_s u_t|^2)^(1/2), flat derivative."""
    energy, deriv = _norm_samples(u, ctx)
    return float(np.sqrt(energy.mean()) + np.sqrt(deriv.mean()))


def l1_samples(u, ctx, route="volterra"):
    """Per-path |delta^M u|, |delta^M u - delta u| and the norm integrands."""
    ctx.prefetch(u.coefficients)
    dm = delta_M(u, ctx, via=route).value
    flat = skorohod_flat(u, ctx).value
    energy, deriv = _norm_samples(u, ctx)
    return {"l1": np.abs(dm), "excess": np.abs(dm - flat), "energy": energy, "deriv": deriv}


@dataclass
class L1Row:
    name: str
    l1: float
    se_l1: float
    excess: float
    se_excess: float
    norm: float

    @classmethod
    def from_samples(cls, name, samples):
        def mean_se(x):
            return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))

        norm = float(np.sqrt(samples["energy"].mean()) + np.sqrt(samples["deriv"].mean()))
        return cls(name, *mean_se(samples["l1"]), *mean_se(samples["excess"]), norm)

    def ratio(self, curvature_size):
        """Constant implied by E|delta^M u - delta u| <= C |Omega| (||u|| + ||u||^2)."""
        return self.excess / (curvature_size * (self.norm + self.norm**2))

    def literal_ratio(self, curvature_size):
        return (self.l1 - self.norm) / (curvature_size * (self.norm + self.norm**2))


def l1_rows(processes, ctx, route="volterra"):
    ctx.prefetch([c for u in processes for c in u.coefficients])
    return [L1Row.from_samples(u.name, l1_samples(u, ctx, route)) for u in processes]


def fitted_constant(rows, curvature_size):
    """Smallest C making the curvature-excess bound hold on every row."""
    return max(r.ratio(curvature_size) for r in rows)


def bound_holds(rows, C, curvature_size):
    """The stated L1 estimate, checked on each row with the given constant."""
    return [r.l1 <= r.norm + C * curvature_size * (r.norm + r.norm**2) for r in rows]


def l1_battery(grid, d=2):
    """Ten processes; coefficients range from deterministic to fully anticipative."""
    from .functionals import coordinate, exp_sum, product

    dim = d + 1
    z1 = coordinate("z1", 1.0, d, dim)
    x1 = coordinate("x1", 1.0, 0, dim)
    xh = coordinate("xh", 0.5, 0, dim)
    zz = product("zz", 0.5, d, 1.0, d, dim)
    ex = exp_sum("exp", 1.0, [0, 1], dim, scale=0.5)
    k = grid.n_steps
    ramp = np.zeros((k, d))
    ramp[:, 0] = np.sqrt(3.0) * (grid.times[:-1] + 0.5 * grid.ds)
    wave = np.zeros((k, d))
    wave[:, 0] = np.cos(2 * np.pi * (grid.times[:-1] + 0.5 * grid.ds))
    wave[:, 1] = np.sin(2 * np.pi * (grid.times[:-1] + 0.5 * grid.ds))
    blocks = StepProcess.blocks
    return [
        blocks(grid, d, [(0, 1, 0, None)], "const"),
        blocks(grid, d, [(0, 0.5, 0, None), (0.5, 1, 1, None)], "switch"),
        blocks(grid, d, [(0, 1, 0, z1)], "z1_e1"),
        blocks(grid, d, [(0, 1, 1, x1)], "x1_e2"),
        blocks(grid, d, [(0.5, 1, 0, xh)], "adapted"),
        blocks(grid, d, [(0, 0.5, 0, xh)], "anticip_half"),
        blocks(grid, d, [(0, 1, 0, zz), (0, 0.5, 1, x1)], "two_term"),
        StepProcess.rank_one(grid, ex, ramp, "exp_ramp"),
        StepProcess.rank_one(grid, z1, wave, "z1_wave"),
        blocks(grid, d, [(0, 1, 0, z1)], "z1_e1").scaled(2.0),
    ]


def l1_holdout(grid, d=2):
    from .functionals import coordinate, sin_cos

    dim = d + 1
    y1 = coordinate("y1", 1.0, 1, dim)
    zq = coordinate("zq", 0.25, d, dim)
    sc = sin_cos("sincos", 0.5, 0, 1.0, 1, dim)
    blocks = StepProcess.blocks
    return [
        blocks(grid, d, [(0, 1, 1, y1)], "y1_e2"),
        blocks(grid, d, [(0, 0.75, 0, zq), (0.25, 1, 1, None)], "zq_mix"),
        blocks(grid, d, [(0, 1, 0, sc)], "sincos_e1"),
        blocks(grid, d, [(0, 1, 0, y1)], "y1_e1").scaled(3.0),
    ]
