"""Reference values computed independently of the package.

Everything here uses numpy/scipy only, so a bug in the library cannot leak
into its own oracle.  Closed-form constants are frozen as literals.
"""

import math

import numpy as np
from scipy.integrate import solve_ivp

# E z(p_t) and E z(p_t)^2 for Brownian motion (generator Laplacian / 2) on the
# unit sphere S^2 started at the north pole: z is a Laplace eigenfunction with
# eigenvalue -2 and z^2 = 1/3 + (2/3) P_2(z) with P_2 eigenvalue -6.
HEAT_Z_T1 = 0.36787944117144233  # exp(-1)
HEAT_Z2_T1 = 0.36652471224524263  # 1/3 + 2/3 exp(-3)

# The geodesic triangle with three right angles bounds one octant of S^2,
# area pi/2, so by Gauss-Bonnet a loop around it rotates frames by pi/2.
OCTANT_HOLONOMY = 1.5707963267948966
OCTANT_SPLIT = (341, 341, 342)

# Ricci curvature of the unit sphere S^d is (d - 1) times the identity.
SPHERE2_RICCI = 1.0
SPHERE3_RICCI = 2.0


def damping_factor(s, d):
    """Q_{s,0} = exp(-(d - 1) s / 2) I on the unit sphere S^d."""
    return math.exp(-0.5 * (d - 1) * s)


def _geodesic(x, v, length):
    """Point and unit tangent after following the great circle (x, v)."""
    return x * math.cos(length) + v * math.sin(length), -x * math.sin(length) + v * math.cos(length)


def _transport_along_geodesic(x, v, length, V):
    """Parallel transport of the columns of V along a great circle by
    integrating the projector equation dV/ds = -x (x'^T V) with solve_ivp."""
    N, k = V.shape

    def rhs(s, y):
        pos, vel = _geodesic(x, v, s)
        Vs = y.reshape(N, k)
        return (-np.outer(pos, vel @ Vs)).ravel()

    sol = solve_ivp(rhs, (0.0, length), V.ravel(), rtol=1e-13, atol=1e-15, method="DOP853")
    return sol.y[:, -1].reshape(N, k)


def _square_holonomy(base, u, v, eps):
    """Transport a basis around the loop eps u, eps v, -eps u, -eps v made of
    geodesic segments, each leg heading along the transported copy of the
    planned direction.  Returns the holonomy matrix in the starting basis."""
    basis = np.stack([u, v], axis=1)
    x = base.copy()
    for col, sign in ((0, 1.0), (1, 1.0), (0, -1.0), (1, -1.0)):
        head = sign * basis[:, col]
        head = head / np.linalg.norm(head)
        basis = _transport_along_geodesic(x, head, eps, basis)
        x, _ = _geodesic(x, head, eps)
    start = np.stack([u, v], axis=1)
    return start.T @ basis


def holonomy_curvature(d, i, j, eps=0.02):
    """Omega(e_i, e_j) at the north pole of S^d as a d x d matrix in the
    frame [I; 0], estimated from holonomy of small squares and Richardson
    extrapolated in eps.

    A counter-clockwise loop enclosing area A rotates vectors
    counter-clockwise by A, so hol ~ I - A Omega(u, v) on the (u, v) block.
    """
    N = d + 1
    base = np.zeros(N)
    base[-1] = 1.0
    e = np.eye(N)
    u, v = e[i], e[j]

    def estimate(h):
        hol = _square_holonomy(base, u, v, h)
        return -(hol - np.eye(2)) / h**2

    block = (4 * estimate(eps / 2) - estimate(eps)) / 3
    out = np.zeros((d, d))
    out[np.ix_([i, j], [i, j])] = block
    return out


def ricci_from_holonomy(d, eps=0.02):
    """ric v = -sum_i Omega(e_i, v) e_i with Omega from the holonomy oracle."""
    ric = np.zeros((d, d))
    omegas = {}
    for i in range(d):
        for j in range(d):
            if i != j:
                omegas[i, j] = holonomy_curvature(d, i, j, eps)
    for col in range(d):
        v = np.eye(d)[col]
        acc = np.zeros(d)
        for i in range(d):
            if i != col:
                acc -= omegas[i, col] @ np.eye(d)[i] * v[col]
        ric[:, col] = acc
    return ric, omegas


def octant_driver(n_steps=1024):
    """Increments of a flat path whose development is the octant loop:
    e1 for pi/2, then e2 for pi/2, then -e1 for pi/2."""
    legs = ((0, 1.0), (1, 1.0), (0, -1.0))
    inc = np.zeros((n_steps, 2))
    k = 0
    for (axis, sign), m in zip(legs, OCTANT_SPLIT):
        inc[k : k + m, axis] = sign * (math.pi / 2) / m
        k += m
    assert k == n_steps
    return inc
