"""Discrete parabolic Anderson model: semigroup, forced equation and moment hierarchy.

``T_t = exp(t H)`` with ``H = Δ^n + diag(xi_eff)`` on the box of the
environment (periodic or Dirichlet).  Two backends: a dense matrix
exponential for small boxes and Crank-Nicolson on the sparse operator.
"""
from __future__ import annotations

import csv
import math
import warnings
import weakref
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import comb

from .environment import Environment
from .lattice import Field, carre_du_champ, laplacian_matrix
from .particle import initial_mass

__all__ = [
    "DENSE_LIMIT",
    "SemigroupBackend",
    "TimeGrid",
    "FieldPath",
    "PositivityWarning",
    "anderson_matrix",
    "semigroup_apply",
    "pam_solve",
    "variance_functional",
    "moment_hierarchy",
]

DENSE_LIMIT = 4096
_CACHE_SIZE = 64


class PositivityWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SemigroupBackend:
    kind: str = "dense_expm"
    dt_factor: float = 0.25
    tolerance: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("dense_expm", "crank_nicolson"):
            raise ValueError(f"unknown backend {self.kind!r}")
        if self.dt_factor <= 0:
            raise ValueError("dt_factor must be positive")


DEFAULT_BACKEND = SemigroupBackend()


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_steps = t_end``."""

    t_end: float
    steps: int

    def __post_init__(self):
        if self.t_end <= 0 or self.steps < 1:
            raise ValueError("need t_end > 0 and steps >= 1")

    @property
    def dt(self) -> float:
        return self.t_end / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.steps + 1)

    def refined(self) -> "TimeGrid":
        return TimeGrid(self.t_end, 2 * self.steps)


@dataclass
class FieldPath:
    """Field values on a time grid; ``values[i]`` is the field at ``times[i]``."""

    box: object
    times: np.ndarray
    values: np.ndarray
    refinement_gap: float | None = None
    flagged: bool = False

    def at(self, i: int = -1) -> Field:
        return Field(self.box, self.values[i])

    def to_csv(self, path) -> None:
        """Rows ``site, time, value`` with ``site`` the flat index."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site", "time", "value"])
            for i, t in enumerate(self.times):
                for s, v in enumerate(self.values[i].ravel()):
                    w.writerow([s, repr(float(t)), repr(float(v))])

    def save(self, path) -> None:
        np.savez(path, times=self.times, values=self.values)


class _Operator:
    """Cached matrices for one environment."""

    def __init__(self, env: Environment):
        self.box = env.box
        self.H = (laplacian_matrix(env.box) + sp.diags(env.xi_eff.flat)).tocsr()
        self.stiffness = 4 * env.box.d * env.box.n**2 + float(np.max(np.abs(env.xi_eff.flat)))
        self._dense = None
        self._expm = OrderedDict()
        self._lu = OrderedDict()

    @property
    def dense(self) -> np.ndarray:
        if self._dense is None:
            if self.H.shape[0] > DENSE_LIMIT:
                raise ValueError(f"dense_expm needs at most {DENSE_LIMIT} sites, box has {self.H.shape[0]}")
            self._dense = self.H.toarray()
        return self._dense

    @staticmethod
    def _cached(cache, key, build):
        if key in cache:
            cache.move_to_end(key)
            return cache[key]
        value = cache[key] = build()
        if len(cache) > _CACHE_SIZE:
            cache.popitem(last=False)
        return value

    def expm(self, t: float) -> np.ndarray:
        t = float(t)
        return self._cached(self._expm, t, lambda: sla.expm(t * self.dense))

    def cn(self, dt: float):
        dt = float(dt)

        def build():
            eye = sp.identity(self.H.shape[0], format="csc")
            lu = spla.splu((eye - 0.5 * dt * self.H).tocsc())
            return lu, (eye + 0.5 * dt * self.H).tocsr()

        return self._cached(self._lu, dt, build)


_OPERATORS: "weakref.WeakKeyDictionary[Environment, _Operator]" = weakref.WeakKeyDictionary()


def _operator(env: Environment) -> _Operator:
    op = _OPERATORS.get(env)
    if op is None:
        op = _OPERATORS[env] = _Operator(env)
    return op


def anderson_matrix(env: Environment) -> sp.csr_matrix:
    """Sparse ``Δ^n + diag(xi_eff)``."""
    return _operator(env).H


def _apply(env: Environment, v: np.ndarray, t: float, backend: SemigroupBackend) -> np.ndarray:
    """``T_t`` on flat vectors (or columns of a matrix)."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    if t == 0:
        return v.copy()
    op = _operator(env)
    if backend.kind == "dense_expm":
        return op.expm(t) @ v
    steps = max(1, math.ceil(t * op.stiffness / backend.dt_factor))
    lu, rhs = op.cn(t / steps)
    out = v.copy()
    for _ in range(steps):
        out = lu.solve(rhs @ out)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("Crank-Nicolson produced non-finite values")
    return out


def _path(env: Environment, v0: np.ndarray, times: np.ndarray, backend: SemigroupBackend) -> np.ndarray:
    """``T_t v0`` for every grid time: direct exponentials, or chained Crank-Nicolson."""
    if backend.kind == "dense_expm":
        return np.stack([_apply(env, v0, t, backend) for t in times])
    out = np.empty((times.size, v0.size))
    out[0] = _apply(env, v0, times[0], backend)
    for i in range(1, times.size):
        out[i] = _apply(env, out[i - 1], times[i] - times[i - 1], backend)
    return out


def semigroup_apply(env: Environment, f0: Field, t: float,
                    backend: SemigroupBackend = DEFAULT_BACKEND) -> Field:
    """``T_t f0``."""
    if f0.box.shape != env.box.shape:
        raise ValueError("field and environment live on different boxes")
    if t == 0:
        return f0
    out = _apply(env, f0.flat, t, backend)
    if backend.kind == "crank_nicolson" and np.all(f0.flat >= 0) and out.min() < -backend.tolerance:
        warnings.warn(f"Crank-Nicolson lost positivity: min {out.min():.3g}", PositivityWarning, stacklevel=2)
    return Field(env.box, out.reshape(env.box.shape))


def _duhamel(env, w0: np.ndarray, forcing, grid: TimeGrid, backend) -> np.ndarray:
    times = grid.times
    dt = grid.dt
    out = _path(env, w0, times, backend)
    integral = np.zeros_like(w0)
    for i in range(1, times.size):
        f_mid = forcing(times[i - 1] + dt / 2)
        integral = _apply(env, integral, dt, backend) + dt * _apply(env, f_mid, dt / 2, backend)
        out[i] += integral
    return out


def pam_solve(env: Environment, w0: Field, forcing: Field | Callable[[float], Field] | None,
              grid: TimeGrid, backend: SemigroupBackend = DEFAULT_BACKEND,
              check_refinement: bool = False) -> FieldPath:
    """``w(t) = T_t w0 + int_0^t T_{t-s} f(s) ds`` on ``grid``, midpoint rule in time.

    With ``check_refinement`` the final value is recomputed on the doubled
    grid; the path is flagged when the two differ by more than the backend
    tolerance.
    """
    box = env.box
    if forcing is None:
        out = _path(env, w0.flat, grid.times, backend)
        return FieldPath(box, grid.times, out.reshape((-1,) + box.shape))
    if isinstance(forcing, Field):
        const = forcing.flat
        fn = lambda s: const  # noqa: E731
    else:
        fn = lambda s: forcing(s).flat  # noqa: E731
    out = _duhamel(env, w0.flat, fn, grid, backend)
    path = FieldPath(box, grid.times, out.reshape((-1,) + box.shape))
    if check_refinement:
        fine = _duhamel(env, w0.flat, fn, grid.refined(), backend)[-1]
        gap = float(np.max(np.abs(fine - out[-1])))
        path.refinement_gap = gap
        path.flagged = gap > backend.tolerance * max(1.0, float(np.max(np.abs(out[-1]))))
    return path


def _simpson(y: np.ndarray, h: float) -> float:
    return float(h / 3 * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum()))


def variance_functional(env: Environment, phi: Field, t: float, rho: float,
                        backend: SemigroupBackend = DEFAULT_BACKEND, sigma2: float = 0.0,
                        intervals: int = 64, mass_unit: int | None = None) -> float:
    """Exact variance of ``<mu_t, phi>`` from the predictable quadratic variation.

    ``N^-1 int_0^t T_r[ Γ(T_{t-r} phi) + (|xi_eff| + n^rho sigma2) (T_{t-r} phi)^2 ](0) dr``
    with ``Γ`` the jump energy :func:`rsbm.lattice.carre_du_champ` and
    ``N = floor(n^rho)`` the initial particle count.  Composite Simpson rule.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    intervals = max(64, intervals + intervals % 2)
    box = env.box
    N = mass_unit if mass_unit is not None else initial_mass(box.n, rho)
    pot = np.abs(env.xi_eff.flat) + float(box.n) ** rho * sigma2
    h = t / intervals
    # psi_j = T_{j h} phi and row_i = T_{i h} delta_0 (T is symmetric)
    psi = [phi.flat.copy()]
    row = [np.zeros(box.num_sites)]
    row[0][box.origin_flat] = 1.0
    for _ in range(intervals):
        psi.append(_apply(env, psi[-1], h, backend))
        row.append(_apply(env, row[-1], h, backend))
    vals = np.empty(intervals + 1)
    for i in range(intervals + 1):
        p = psi[intervals - i]
        g = carre_du_champ(Field(box, p.reshape(box.shape))).flat + pot * p**2
        vals[i] = row[i] @ g
    return _simpson(vals, h) / N


def moment_hierarchy(env: Environment, phi: Field, p_max: int, rho: float, grid: TimeGrid,
                     backend: SemigroupBackend = DEFAULT_BACKEND) -> list[FieldPath]:
    """Scaled moments ``m^p(t, x) = n^{rho(1-p)} E_x[(u_1(t), phi)^p]``, ``(u, phi) = sum_x u phi``, for ``p = 1..p_max``.

    Level ``p`` solves ``dm^p = H m^p + n^-rho (xi_eff)_+ sum_{i=1}^{p-1} C(p,i) m^i m^{p-i}``
    with ``m^p(0) = n^{rho(1-p)} phi^p``; the Duhamel integral uses the
    trapezoid rule on ``grid``.  Level 1 is ``T_t phi``.
    """
    if not 1 <= p_max <= 4:
        raise ValueError("p_max must be between 1 and 4")
    box = env.box
    nr = float(box.n) ** rho
    births = env.birth
    times = grid.times
    dt = grid.dt
    levels: list[np.ndarray] = []
    for p in range(1, p_max + 1):
        init = nr ** (1 - p) * phi.flat**p
        base = _path(env, init, times, backend)
        if p == 1:
            levels.append(base)
            continue
        src = np.zeros_like(base)
        for i in range(1, p):
            src += comb(p, i, exact=True) * levels[i - 1] * levels[p - i - 1]
        src *= births / nr
        integral = np.zeros_like(init)
        out = base.copy()
        for k in range(1, times.size):
            integral = _apply(env, integral + 0.5 * dt * src[k - 1], dt, backend) + 0.5 * dt * src[k]
            out[k] = base[k] + integral
        levels.append(out)
    return [FieldPath(box, times, m.reshape((-1,) + box.shape)) for m in levels]
