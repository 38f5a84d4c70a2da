"""Ready-made cylindrical functionals used by the experiments and tests."""

import numpy as np

from .malliavin import CylindricalFunctional


def coordinate(name, time, axis, dim, space="manifold"):
    """F = p(time)[axis]."""

    def f(x):
        return x[0, axis].copy()

    def grad(x):
        g = np.zeros_like(x)
        g[0, axis] = 1.0
        return g

    def hess(x):
        return np.zeros((1, dim, 1, dim) + x.shape[2:])

    return CylindricalFunctional(name, (time,), f, grad, hess, dim=dim, space=space, bounded=space == "manifold")


def product(name, t1, a1, t2, a2, dim, space="manifold"):
    """F = p(t1)[a1] * p(t2)[a2]."""

    def f(x):
        return x[0, a1] * x[1, a2]

    def grad(x):
        g = np.zeros_like(x)
        g[0, a1] = x[1, a2]
        g[1, a2] = x[0, a1]
        return g

    def hess(x):
        H = np.zeros((2, dim, 2, dim) + x.shape[2:])
        H[0, a1, 1, a2] = 1.0
        H[1, a2, 0, a1] = 1.0
        return H

    return CylindricalFunctional(name, (t1, t2), f, grad, hess, dim=dim, space=space, bounded=space == "manifold")


def exp_sum(name, time, axes, dim, scale=1.0, space="manifold"):
    """F = exp(scale * sum of the chosen coordinates at time)."""
    axes = list(axes)

    def f(x):
        return np.exp(scale * x[0, axes].sum(axis=0))

    def grad(x):
        g = np.zeros_like(x)
        g[0, axes] = scale * f(x)
        return g

    def hess(x):
        H = np.zeros((1, dim, 1, dim) + x.shape[2:])
        val = scale**2 * f(x)
        for i in axes:
            for j in axes:
                H[0, i, 0, j] = val
        return H

    return CylindricalFunctional(name, (time,), f, grad, hess, dim=dim, space=space)


def sin_cos(name, t1, a1, t2, a2, dim, space="manifold"):
    """F = sin(2 p(t1)[a1]) cos(p(t2)[a2])."""

    def f(x):
        return np.sin(2 * x[0, a1]) * np.cos(x[1, a2])

    def grad(x):
        g = np.zeros_like(x)
        g[0, a1] = 2 * np.cos(2 * x[0, a1]) * np.cos(x[1, a2])
        g[1, a2] = -np.sin(2 * x[0, a1]) * np.sin(x[1, a2])
        return g

    def hess(x):
        H = np.zeros((2, dim, 2, dim) + x.shape[2:])
        s1, c1 = np.sin(2 * x[0, a1]), np.cos(2 * x[0, a1])
        s2, c2 = np.sin(x[1, a2]), np.cos(x[1, a2])
        H[0, a1, 0, a1] = -4 * s1 * c2
        H[0, a1, 1, a2] = H[1, a2, 0, a1] = -2 * c1 * s2
        H[1, a2, 1, a2] = -s1 * c2
        return H

    return CylindricalFunctional(name, (t1, t2), f, grad, hess, dim=dim, space=space)


def squared_norm(name, time, dim, space="flat"):
    """F = |p(time)|^2."""

    def f(x):
        return np.sum(x[0] ** 2, axis=0)

    def grad(x):
        return 2 * x

    def hess(x):
        H = np.zeros((1, dim, 1, dim) + x.shape[2:])
        for i in range(dim):
            H[0, i, 0, i] = 2.0
        return H

    return CylindricalFunctional(name, (time,), f, grad, hess, dim=dim, space=space, bounded=False)


def sphere_battery(dim=3):
    """Five bounded functionals of a path on S^2 (ambient dimension 3)."""
    return [
        coordinate("z1", 1.0, dim - 1, dim),
        coordinate("x1", 1.0, 0, dim),
        product("zz", 0.5, dim - 1, 1.0, dim - 1, dim),
        exp_sum("exp", 1.0, [0, 1], dim, 0.5),
        sin_cos("sincos", 0.5, 0, 1.0, dim - 1, dim),
    ]


def flat_battery(dim=2):
    """Five smooth functionals of a flat path; bounded ones are trigonometric."""
    return [
        sin_cos("sincos", 0.5, 0, 1.0, dim - 1, dim, space="flat"),
        coordinate("w1", 1.0, 0, dim, space="flat"),
        product("ww", 0.5, 0, 1.0, dim - 1, dim, space="flat"),
        squared_norm("norm2", 1.0, dim),
        exp_sum("exp", 1.0, [0], dim, 0.5, space="flat"),
    ]


def by_name(battery, name):
    """Pick a functional out of a battery by its name."""
    for F in battery:
        if F.name == name:
            return F
    raise KeyError(f"no functional named {name!r}; available: {[F.name for F in battery]}")
