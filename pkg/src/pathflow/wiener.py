"""Flat Wiener space on a uniform grid.

Path batches are stored paths-last: ``values[k, j, p]`` is component ``j``
of path ``p`` at grid point ``k``.  Each path draws its increments from its
own Philox stream keyed by ``(seed, stream)`` with the path index in the
counter, so any subset of paths can be regenerated independently.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AnticipativeShiftError, ConfigurationError, ContractError

LOG_CLIP = 50.0


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be >= 1")

    @property
    def ds(self):
        return 1.0 / self.n_steps

    @property
    def times(self):
        return np.linspace(0.0, 1.0, self.n_steps + 1)

    def index(self, s):
        """Grid index of time s; s must lie on the grid."""
        k = round(s * self.n_steps)
        if abs(k - s * self.n_steps) > 1e-9 or not 0 <= k <= self.n_steps:
            raise ContractError(f"time {s} is not a grid point of n={self.n_steps}")
        return int(k)


@dataclass
class DiscretePath:
    """Batch of paths on a grid; ``values`` has shape (n+1, k, P)."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.shape[0] != self.grid.n_steps + 1:
            raise ContractError("values do not match the grid length")

    @property
    def k(self):
        return self.values.shape[1]

    @property
    def n_paths(self):
        return self.values.shape[2]

    @property
    def increments(self):
        return np.diff(self.values, axis=0)

    def subset(self, idx):
        return DiscretePath(self.grid, self.values[:, :, idx])

    @classmethod
    def from_increments(cls, grid, dw, start=None):
        dw = np.asarray(dw, dtype=float)
        values = np.zeros((dw.shape[0] + 1,) + dw.shape[1:])
        np.cumsum(dw, axis=0, out=values[1:])
        if start is not None:
            values += np.asarray(start).reshape((1, -1) + (1,) * (dw.ndim - 2))
        return cls(grid, values)


def brownian_increments(n_steps, d, seed, n_paths, stream=0, start=0):
    """Standard normal increments scaled by sqrt(ds), shape (n, d, P)."""
    out = np.empty((n_steps, d, n_paths))
    scale = math.sqrt(1.0 / n_steps)
    for j in range(n_paths):
        bitgen = np.random.Philox(counter=[0, 0, start + j, 0], key=[seed, stream])
        out[:, :, j] = np.random.Generator(bitgen).standard_normal((n_steps, d))
    out *= scale
    return out


def sample_brownian(grid, d, seed, n_paths=1, stream=0, start=0):
    """Brownian paths from 0; path ``start + j`` is independent of batch layout."""
    return DiscretePath.from_increments(grid, brownian_increments(grid.n_steps, d, seed, n_paths, stream, start))


@dataclass
class CMShift:
    """Cameron-Martin direction given by its density, shape (n, d, P) or (n, d, 1)."""

    grid: TimeGrid
    hdot: np.ndarray
    kind: str = "deterministic"
    bound: float = 1.0

    def __post_init__(self):
        self.hdot = np.asarray(self.hdot, dtype=float)
        if self.hdot.ndim == 2:
            self.hdot = self.hdot[:, :, None]
        if self.kind not in ("deterministic", "adapted"):
            raise ContractError(f"unknown shift kind {self.kind!r}")
        if np.any(self.energy() > self.bound * (1 + 1e-12)):
            raise ContractError("shift exceeds its Cameron-Martin bound")

    def energy(self):
        return np.sum(self.hdot**2, axis=(0, 1)) * self.grid.ds

    @property
    def h(self):
        """h on the grid points, shape (n+1, d, P)."""
        out = np.zeros((self.hdot.shape[0] + 1,) + self.hdot.shape[1:])
        np.cumsum(self.hdot * self.grid.ds, axis=0, out=out[1:])
        return out

    def subset(self, idx):
        if self.hdot.shape[2] == 1:
            return self
        return CMShift(self.grid, self.hdot[:, :, idx], self.kind, self.bound)


@dataclass
class AdaptedRotationDrift:
    """Pair (o, a): rotations (n, d, d, P) or None for the identity, drift (n, d, P)."""

    a: np.ndarray
    o: np.ndarray | None = None
    orthogonal: bool = True
    tol: float = 1e-8

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        if self.o is not None and self.orthogonal:
            dev = orthogonality_defect(self.o)
            if dev > self.tol:
                raise ContractError(f"o is flagged orthogonal but o^T o - I reaches {dev:.3g}")


def orthogonality_defect(o):
    """max |o^T o - I| over matrices stored as (..., d, d, P)."""
    o = np.asarray(o, dtype=float)
    d = o.shape[-2]
    gram = np.einsum("...lip,...ljp->...ijp", o, o)
    return float(np.max(np.abs(gram - np.eye(d)[:, :, None]), initial=0.0))


ShiftRecipe = Callable[[DiscretePath], CMShift]

_RECIPES = ("constant", "linear", "sinusoid", "adapted", "adapted_sinusoid", "terminal")


def _clip_uniform(hdot, ds, bound):
    energy = np.sum(hdot**2, axis=(0, 1)) * ds
    scale = np.where(energy > bound, np.sqrt(bound / np.maximum(energy, 1e-300)), 1.0)
    return hdot * scale


def _clip_running(hdot, ds, bound):
    """Adapted clipping: each step only sees the energy spent so far."""
    out = hdot.copy()
    spent = np.zeros(hdot.shape[2:])
    for k in range(hdot.shape[0]):
        step = np.sum(out[k] ** 2, axis=0) * ds
        room = np.maximum(bound - spent, 0.0)
        scale = np.where(step > room, np.sqrt(room / np.maximum(step, 1e-300)), 1.0)
        out[k] *= scale
        spent = spent + step * scale**2
    return out


def make_cm_shift(recipe, grid, bound=1.0, w=None, *, d=None, amplitude=1.0, direction=0):
    """Build a Cameron-Martin shift, clipped so that sum |hdot|^2 ds <= bound.

    ``constant``/``linear``: hdot = amplitude e_direction, so h_s = s amplitude e.
    ``sinusoid``: hdot_s = amplitude (cos 2 pi s, sin 2 pi s, 0, ...), unit energy in d >= 2.
    ``adapted``: hdot_s = amplitude tanh(w_s^1) e_1, read at the left end point.
    ``adapted_sinusoid``: the sinusoid with its phase advanced by w_s^1.
    ``terminal`` looks at w_1 and is rejected.
    """
    if bound <= 0:
        raise ConfigurationError("shift bound must be positive")
    if recipe not in _RECIPES:
        raise ConfigurationError(f"unknown shift recipe {recipe!r}; expected one of {_RECIPES}")
    if d is None:
        if w is None:
            raise ConfigurationError("dimension needed for a deterministic shift")
        d = w.k
    n = grid.n_steps
    if recipe == "terminal":
        raise AnticipativeShiftError("anticipative shifts out of scope (hdot depends on w_1)")
    if recipe in ("constant", "linear"):
        hdot = np.zeros((n, d, 1))
        hdot[:, direction, 0] = amplitude
        return CMShift(grid, _clip_uniform(hdot, grid.ds, bound), "deterministic", bound)
    if recipe == "sinusoid":
        mid = (np.arange(n) + 0.5) * grid.ds
        hdot = np.zeros((n, d, 1))
        if d == 1:
            hdot[:, 0, 0] = math.sqrt(2.0) * np.cos(2 * np.pi * mid)
        else:
            hdot[:, 0, 0] = np.cos(2 * np.pi * mid)
            hdot[:, 1, 0] = np.sin(2 * np.pi * mid)
        return CMShift(grid, _clip_uniform(amplitude * hdot, grid.ds, bound), "deterministic", bound)
    if w is None:
        raise ConfigurationError("adapted shifts need the driving path")
    hdot = np.zeros((n, d, w.n_paths))
    if recipe == "adapted_sinusoid":
        phase = 2 * np.pi * ((np.arange(n) + 0.5) * grid.ds)[:, None] + w.values[:-1, 0, :]
        if d == 1:
            hdot[:, 0, :] = amplitude * math.sqrt(2.0) * np.cos(phase)
        else:
            hdot[:, 0, :] = amplitude * np.cos(phase)
            hdot[:, 1, :] = amplitude * np.sin(phase)
    else:
        hdot[:, 0, :] = amplitude * np.tanh(w.values[:-1, 0, :])
    return CMShift(grid, _clip_running(hdot, grid.ds, bound), "adapted", bound)


def shift_recipe(recipe, grid, bound=1.0, d=None, **kw):
    """Return a callable w -> CMShift (constant in w for deterministic recipes)."""
    if recipe == "terminal":
        raise AnticipativeShiftError("anticipative shifts out of scope (hdot depends on w_1)")
    if recipe in ("adapted", "adapted_sinusoid"):
        fn = lambda w: make_cm_shift(recipe, grid, bound, w, d=d, **kw)
        fn.kind = "adapted"
        return fn
    fixed = make_cm_shift(recipe, grid, bound, d=d, **kw)
    fn = lambda w: fixed
    fn.kind = "deterministic"
    fn.fixed = fixed
    return fn


def _check_dims(f, dw):
    if f.shape[1] != dw.shape[1]:
        raise ContractError(f"integrand dimension {f.shape[1]} does not match path dimension {dw.shape[1]}")


def ito_integral(f, w):
    """Left-point sum of f_k . dw_k; f has shape (n or n+1, d, P)."""
    f = np.asarray(f, dtype=float)
    if f.ndim == 2:
        f = f[:, :, None]
    dw = w.increments
    _check_dims(f, dw)
    return np.einsum("kjp,kjp->p", np.broadcast_to(f[: dw.shape[0]], dw.shape), dw)


def stratonovich_integral(f, w):
    """Midpoint sum of (f_k + f_k+1)/2 . dw_k; f on grid points (n+1, d, P)."""
    f = np.asarray(f, dtype=float)
    if f.ndim == 2:
        f = f[:, :, None]
    dw = w.increments
    _check_dims(f, dw)
    if f.shape[0] != dw.shape[0] + 1:
        raise ContractError("Stratonovich integrand must be given on all grid points")
    mid = 0.5 * (f[:-1] + f[1:])
    return np.einsum("kjp,kjp->p", np.broadcast_to(mid, dw.shape), dw)


@dataclass
class ClipCounter:
    clipped: int = 0
    total: int = 0


def girsanov_log_density(w, od):
    """sum a_k . (o_k dw_k) - 1/2 sum |a_k|^2 ds, shape (P,)."""
    dw = w.increments
    a = np.broadcast_to(od.a, dw.shape)
    rotated = dw if od.o is None else np.einsum("kijp,kjp->kip", od.o, dw)
    return np.einsum("kjp,kjp->p", a, rotated) - 0.5 * np.sum(a**2, axis=(0, 1)) * w.grid.ds


def girsanov_density(w, od, counter=None):
    """Girsanov density of (o, a) along w, with the log clipped at +-50."""
    if od.o is not None and not od.orthogonal:
        raise ContractError("girsanov_density needs orthogonal o")
    logd = girsanov_log_density(w, od)
    hits = int(np.count_nonzero(np.abs(logd) > LOG_CLIP))
    if counter is not None:
        counter.clipped += hits
        counter.total += logd.size
    if hits:
        warnings.warn(f"girsanov log-density clipped on {hits} paths", RuntimeWarning, stacklevel=2)
    return np.exp(np.clip(logd, -LOG_CLIP, LOG_CLIP))
