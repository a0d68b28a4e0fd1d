"""Euler-Maruyama scheme for the one-dimensional density equation

    d mu = (Δ mu + xi_eff mu) dt + sqrt(kappa mu) dW,

on a periodic lattice of spacing ``dx = 1/n``, with negative values clipped
after each step.  The environment is the quenched lattice potential, so runs
are comparable with the particle system on the same ``xi``.

Clipping adds mass whenever the noise overshoots zero, which biases the
mean upwards.  The ``split`` scheme avoids this: the linear flow
``exp(dt H)`` is applied exactly and the noise step samples the exact
transition of ``d mu = sqrt(kappa mu / dx) dW`` at every site (a Poisson
mixture of Gamma laws), so positivity and the mean are preserved exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .environment import Environment, philox
from .lattice import Field, LatticeBox, discrete_laplacian
from .pam import _operator
from .particle import MeasurePath

__all__ = ["SpdeConfig", "SpdeAbort", "spde_step", "spde_ensemble", "SpdeEnsemble"]


class SpdeAbort(FloatingPointError):
    """Non-finite value produced; carries the failing step."""

    def __init__(self, msg: str, step: int, path: int | None = None):
        super().__init__(msg)
        self.step = step
        self.path = path


@dataclass(frozen=True)
class SpdeConfig:
    kappa: float
    n: int
    dt: float | None = None
    clip_floor: float = 0.0
    noise_seed: int = 0
    scheme: str = "euler"

    def __post_init__(self):
        if self.scheme not in ("euler", "split"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.dt is None:
            object.__setattr__(self, "dt", 0.25 * self.dx**2)
        if not 0 < self.dt <= 0.25 * self.dx**2 * (1 + 1e-12):
            raise ValueError(f"dt must lie in (0, dx^2/4] = (0, {0.25 * self.dx**2:.6g}]")

    @property
    def dx(self) -> float:
        return 1.0 / self.n


def _check_env(env: Environment, config: SpdeConfig):
    box = env.box
    if box.d != 1:
        raise ValueError("the density equation is one-dimensional")
    if box.n != config.n:
        raise ValueError("config.n does not match the environment")


def spde_step(mu: Field, env: Environment, config: SpdeConfig, rng: np.random.Generator) -> Field:
    """One Euler-Maruyama step followed by clipping at ``clip_floor``."""
    _check_env(env, config)
    if np.any(mu.flat < 0):
        raise ValueError("mu must be nonnegative")
    dt = config.dt
    drift = discrete_laplacian(mu).values + env.xi_eff.values * mu.values
    noise = np.sqrt(config.kappa * np.maximum(mu.values, 0.0) * dt / config.dx) * rng.standard_normal(mu.values.shape)
    new = mu.values + dt * drift + noise
    if not np.all(np.isfinite(new)):
        raise SpdeAbort("non-finite value in SPDE step", 0)
    return Field(mu.box, np.maximum(new, config.clip_floor))


@dataclass
class SpdeEnsemble:
    path: MeasurePath
    clip_fraction: np.ndarray  # per step: clipped mass / total mass, averaged over paths


def _laplacian_rows(v: np.ndarray, n: int, boundary: str) -> np.ndarray:
    if boundary == "periodic":
        left, right = np.roll(v, 1, axis=1), np.roll(v, -1, axis=1)
    else:
        left = np.zeros_like(v)
        right = np.zeros_like(v)
        left[:, 1:] = v[:, :-1]
        right[:, :-1] = v[:, 1:]
    return n * n * (left + right - 2 * v)


def spde_ensemble(env: Environment, config: SpdeConfig, obs_times, test_fields, paths: int,
                  mu0: Field | None = None, batch: int = 1000) -> SpdeEnsemble:
    """Independent paths; path ``r`` draws its noise from the stream ``(noise_seed, r)``.

    Records ``<mu_t, phi> = n^-1 sum_x mu(x) phi(x)`` at each observation
    time (rounded to the step grid).  The default start is the lattice Dirac
    ``n 1_{0}``.
    """
    _check_env(env, config)
    box: LatticeBox = env.box
    times = np.asarray(obs_times, dtype=float)
    if np.any(np.diff(times) < 0) or (times.size and times[0] < 0):
        raise ValueError("observation times must be sorted and nonnegative")
    dt = config.dt
    obs_steps = np.rint(times / dt).astype(int)
    n_steps = int(obs_steps.max()) if times.size else 0
    start = (mu0 if mu0 is not None else Field.dirac(box)).flat
    phis = np.stack([f.flat for f in test_fields], axis=1) / box.n
    xi = env.xi_eff.flat
    scale = math.sqrt(config.kappa * dt / config.dx)
    split = config.scheme == "split"
    if split:
        if box.num_sites > 4096:
            raise ValueError("split scheme needs a dense propagator (at most 4096 sites)")
        prop = _operator(env).expm(dt).T
        # transition of d mu = sqrt(beta mu) dW over dt: Gamma(Poisson(2 mu / (beta dt)), beta dt / 2)
        half = 0.5 * config.kappa / config.dx * dt
    S = box.num_sites
    vals = np.zeros((paths, times.size, phis.shape[1]))
    clip = np.zeros(max(n_steps, 1))
    for b0 in range(0, paths, batch):
        rows = range(b0, min(paths, b0 + batch))
        B = len(rows)
        if split:
            gens = [philox(config.noise_seed, r) for r in rows]
        else:
            noise = np.stack([philox(config.noise_seed, r).standard_normal((n_steps, S)) for r in rows], axis=1)
        mu = np.tile(start, (B, 1))
        k = 0
        for step in range(n_steps + 1):
            while k < times.size and obs_steps[k] == step:
                vals[b0:b0 + B, k] = mu @ phis
                k += 1
            if step == n_steps:
                break
            if split:
                lin = np.maximum(mu @ prop, 0.0)
                if half > 0:
                    for i, g in enumerate(gens):
                        lin[i] = g.gamma(g.poisson(lin[i] / half), half)
                mu = lin
                continue
            new = mu + dt * (_laplacian_rows(mu, box.n, box.boundary) + xi * mu) + scale * np.sqrt(mu) * noise[step]
            if not np.all(np.isfinite(new)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(new), axis=1))[0])
                raise SpdeAbort(f"non-finite value at step {step}", step, b0 + bad)
            neg = np.minimum(new - config.clip_floor, 0.0)
            total = np.maximum(new, config.clip_floor).sum(axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                frac = np.where(total > 0, -neg.sum(axis=1) / total, 0.0)
            clip[step] += frac.sum()
            mu = np.maximum(new, config.clip_floor)
    path = MeasurePath(times, list(range(phis.shape[1])), vals, np.zeros((paths, times.size), dtype=np.int64))
    return SpdeEnsemble(path, clip[:n_steps] / max(paths, 1))
