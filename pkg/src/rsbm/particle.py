"""Exact event-driven simulation of the branching random walk in random environment.

Each particle at ``x`` jumps to each of its ``2d`` neighbours at rate ``n^2``,
splits in two at rate ``(xi_eff)_+(x)`` and dies at rate ``(xi_eff)_-(x)``.
In offspring mode it is additionally replaced by ``k`` particles at rate
``n^rho p_k``.  The observable is the measure ``mu_t = u_t / floor(n^rho)``.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _engine
from .environment import Environment, philox
from .lattice import Field, LatticeBox

__all__ = [
    "DEFAULT_POPULATION_CAP",
    "PopulationCapExceeded",
    "BranchingSpec",
    "ParticleState",
    "EventRecord",
    "MeasurePath",
    "init_state",
    "initial_mass",
    "step",
    "simulate_path",
    "killed_simulate",
    "simulate_ensemble",
    "coupled_killed_ensemble",
    "killed_region",
]

DEFAULT_POPULATION_CAP = 10**7
_BUFFER = 4096


class PopulationCapExceeded(RuntimeError):
    """The population outgrew the configured cap; the path was abandoned."""


@dataclass(frozen=True)
class BranchingSpec:
    """Branching mechanism.

    ``offspring_probs[k]`` is ``p_k``; the offspring law must be critical.
    """

    mode: str = "binary"
    rho: float = 0.5
    offspring_probs: tuple[float, ...] = ()

    def __post_init__(self):
        if self.mode not in ("binary", "offspring"):
            raise ValueError(f"unknown branching mode {self.mode!r}")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.mode == "offspring":
            p = np.asarray(self.offspring_probs, dtype=float)
            if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError("offspring probabilities must be a probability vector")
            if abs(np.dot(np.arange(p.size), p) - 1.0) > 1e-12:
                raise ValueError("offspring law must be critical: sum k p_k = 1")
            object.__setattr__(self, "offspring_probs", tuple(float(v) for v in p))

    @property
    def sigma2(self) -> float:
        """``Psi''(1) = sum k (k-1) p_k``; zero in binary mode."""
        if self.mode == "binary":
            return 0.0
        k = np.arange(len(self.offspring_probs))
        return float(np.dot(k * (k - 1), self.offspring_probs))

    def offspring_rate(self, n: int) -> float:
        """Per-particle rate of offspring events that change the count."""
        if self.mode == "binary":
            return 0.0
        p1 = self.offspring_probs[1] if len(self.offspring_probs) > 1 else 0.0
        return float(n) ** self.rho * (1.0 - p1)


def initial_mass(n: int, rho: float) -> int:
    """``floor(n^rho)``, the initial particle count and the mass unit of ``mu``."""
    # guard against 4**0.5 = 1.9999999...
    return int(math.floor(float(n) ** rho + 1e-9))


@dataclass(frozen=True, eq=False)
class ParticleState:
    """Occupation numbers; keys are integer lattice coordinates ``j`` with ``x = j/n``."""

    box: LatticeBox
    occupation: dict = field(default_factory=dict)
    time: float = 0.0
    mass_unit: int = 1

    def __post_init__(self):
        occ = {tuple(int(c) for c in k): int(v) for k, v in self.occupation.items() if v}
        if any(v < 0 for v in occ.values()):
            raise ValueError("occupation numbers must be nonnegative")
        half = self.box.sites_per_side // 2
        for key in occ:
            if len(key) != self.box.d or any(not -half <= c < half for c in key):
                raise ValueError(f"site {key} is outside the box")
        object.__setattr__(self, "occupation", occ)

    @property
    def population(self) -> int:
        return sum(self.occupation.values())

    def counts(self) -> np.ndarray:
        """Dense flat occupation array."""
        out = np.zeros(self.box.num_sites, dtype=np.int64)
        half = self.box.sites_per_side // 2
        for key, v in self.occupation.items():
            out[np.ravel_multi_index(tuple(c + half for c in key), self.box.shape)] = v
        return out

    @classmethod
    def from_counts(cls, box: LatticeBox, counts: np.ndarray, time: float = 0.0, mass_unit: int = 1):
        half = box.sites_per_side // 2
        occ = {}
        for flat in np.flatnonzero(counts):
            idx = np.unravel_index(flat, box.shape)
            occ[tuple(int(i) - half for i in idx)] = int(counts[flat])
        return cls(box, occ, time, mass_unit)

    def pair(self, phi: Field) -> float:
        """``<mu, phi> = sum_x u(x) phi(x) / mass_unit``."""
        return float(self.counts() @ phi.flat) / self.mass_unit


def init_state(box: LatticeBox, rho: float) -> ParticleState:
    """``floor(n^rho)`` particles at the origin."""
    N = initial_mass(box.n, rho)
    return ParticleState(box, {(0,) * box.d: N}, 0.0, N)


@dataclass(frozen=True)
class EventRecord:
    kind: str
    site: tuple
    target: tuple | None
    offspring: int
    waiting_time: float


@dataclass
class MeasurePath:
    """``<mu_t, phi_f>`` per replica, observation time and test field."""

    times: np.ndarray
    field_ids: list
    values: np.ndarray  # (replicas, times, fields)
    population: np.ndarray  # (replicas, times)
    aborted: np.ndarray = None  # (replicas,) bool

    def __post_init__(self):
        if self.aborted is None:
            self.aborted = np.zeros(self.values.shape[0], dtype=bool)

    @property
    def replicas(self) -> int:
        return self.values.shape[0]

    def column(self, field_id=0) -> np.ndarray:
        """Values of one test field over surviving replicas, shape ``(replicas, times)``."""
        f = self.field_ids.index(field_id) if field_id in self.field_ids else int(field_id)
        return self.values[~self.aborted, :, f]

    def mean(self, field_id=0) -> np.ndarray:
        return self.column(field_id).mean(axis=0)

    def stderr(self, field_id=0) -> np.ndarray:
        col = self.column(field_id)
        return col.std(axis=0, ddof=1) / np.sqrt(col.shape[0])

    def to_csv(self, path, replica_offset: int = 0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replica", "time", "field_id", "value", "population"])
            for r in range(self.replicas):
                for ti, t in enumerate(self.times):
                    for fi, fid in enumerate(self.field_ids):
                        w.writerow([r + replica_offset, repr(float(t)), fid,
                                    repr(float(self.values[r, ti, fi])), int(self.population[r, ti])])


def killed_region(box: LatticeBox, L: int) -> np.ndarray:
    """Flat mask of sites outside the open box ``(-L/2, L/2)^d``."""
    if L % 2 or L <= 0 or L > box.M:
        raise ValueError(f"L must be a positive even integer <= M={box.M}, got {L}")
    outside = np.zeros(box.shape, dtype=bool)
    for c in box.coords():
        outside |= np.abs(c) >= L / 2
    return outside.ravel()


class _Engine:
    """Static rate tables for one (environment, branching, killing) configuration."""

    def __init__(self, env: Environment, spec: BranchingSpec, kill_mask=None, ghost=False,
                 pop_cap=DEFAULT_POPULATION_CAP):
        box = env.box
        self.box = box
        S = box.num_sites
        self.S = S
        nbr = box.neighbor_table()
        kill = np.zeros(S + 1, dtype=np.bool_)
        kill[S] = True  # exterior of a Dirichlet box
        if kill_mask is not None:
            kill[:S] = kill_mask
        if ghost and box.boundary != "periodic":
            raise ValueError("coupled killing needs a periodic box")
        self.nbr = np.where(nbr < 0, S, nbr).astype(np.int64)
        self.kill = kill
        self.ghost = bool(ghost)
        self.jump_rate = float(box.n) ** 2
        self.birth = np.ascontiguousarray(env.birth)
        self.death = np.ascontiguousarray(env.death)
        self.off_rate = spec.offspring_rate(box.n)
        if spec.mode == "offspring":
            ks = [k for k, p in enumerate(spec.offspring_probs) if k != 1 and p > 0]
            ps = np.array([spec.offspring_probs[k] for k in ks])
            self.off_k = np.array(ks, dtype=np.int64)
            self.off_cum = np.cumsum(ps / ps.sum())
        else:
            self.off_k = np.zeros(1, dtype=np.int64)
            self.off_cum = np.ones(1)
        self.rate = 2 * box.d * self.jump_rate + self.birth + self.death + self.off_rate
        self.pop_cap = int(pop_cap)

    def new_run(self, counts0: np.ndarray, t0: float = 0.0):
        counts = np.zeros(2 * self.S, dtype=np.int64)
        counts[: self.S] = counts0
        tree = np.zeros(2 * self.S + 1)
        _engine.fenwick_build(tree, counts, self.rate, self.S)
        state_f = np.array([t0])
        pop = int(counts.sum())
        state_i = np.array([0, pop, pop, 0], dtype=np.int64)
        return counts, tree, state_f, state_i

    def advance(self, run, rng, t_stop, uni, max_events=np.iinfo(np.int64).max):
        """Advance to ``t_stop``; returns (status, uniform buffer)."""
        counts, tree, state_f, state_i = run
        rec = np.zeros(5, dtype=np.int64)
        while True:
            status = _engine.advance(
                counts, tree, self.rate, self.jump_rate, self.birth, self.death, self.off_rate,
                self.off_k, self.off_cum, self.nbr, self.kill, self.ghost, state_f, state_i,
                float(t_stop), max_events, self.pop_cap, uni, rec,
            )
            if status == _engine.NEED_RANDOM:
                uni = np.concatenate([uni[state_i[0]:], rng.random(_BUFFER)])
                state_i[0] = 0
                continue
            if status == _engine.CAP_EXCEEDED:
                raise PopulationCapExceeded(
                    f"population {state_i[1]} exceeded cap {self.pop_cap} at t={state_f[0]:.6g}")
            return status, uni, rec


def _field_matrix(box: LatticeBox, test_fields: Sequence[Field]) -> np.ndarray:
    for f in test_fields:
        if f.box.shape != box.shape or f.box.n != box.n:
            raise ValueError("test field lives on a different box")
    return np.stack([f.flat for f in test_fields], axis=1) if test_fields else np.zeros((box.num_sites, 0))


def _check_times(obs_times) -> np.ndarray:
    t = np.asarray(obs_times, dtype=float)
    if t.ndim != 1 or np.any(~np.isfinite(t)) or np.any(np.diff(t) < 0) or (t.size and t[0] < 0):
        raise ValueError("observation times must be finite, nonnegative and sorted")
    return t


def _run_one(engine: _Engine, counts0, t0, mass_unit, times, phis, rng, coupled=False):
    run = engine.new_run(counts0, t0)
    counts = run[0]
    S = engine.S
    T = times.size
    vals = np.zeros((T, phis.shape[1]))
    pop = np.zeros(T, dtype=np.int64)
    full_vals = np.zeros((T, phis.shape[1])) if coupled else None
    full_pop = np.zeros(T, dtype=np.int64) if coupled else None
    uni = np.empty(0)
    for i, t in enumerate(times):
        if run[2][0] < t and run[3][1] > 0:
            _, uni, _ = engine.advance(run, rng, t, uni)
        live = counts[:S]
        vals[i] = live @ phis / mass_unit
        pop[i] = run[3][2]
        if coupled:
            both = live + counts[S:]
            full_vals[i] = both @ phis / mass_unit
            full_pop[i] = run[3][1]
    return vals, pop, full_vals, full_pop


def step(state: ParticleState, env: Environment, spec: BranchingSpec, rng: np.random.Generator,
         pop_cap: int = DEFAULT_POPULATION_CAP) -> tuple[ParticleState, EventRecord | None]:
    """Perform exactly one event.  An empty state is absorbing and returns ``None``."""
    if state.population == 0:
        return state, None
    engine = _Engine(env, spec, pop_cap=pop_cap)
    run = engine.new_run(state.counts(), state.time)
    _, _, rec = engine.advance(run, rng, np.inf, np.empty(0), max_events=1)
    box = state.box
    half = box.sites_per_side // 2

    def coord(flat):
        if flat < 0 or flat >= engine.S:
            return None
        return tuple(int(i) - half for i in np.unravel_index(flat, box.shape))

    record = EventRecord(
        kind=_engine.EVENT_NAMES[rec[0]], site=coord(rec[1]), target=coord(rec[2]) if rec[2] >= 0 else None,
        offspring=int(rec[3]), waiting_time=float(run[2][0] - state.time),
    )
    new = ParticleState.from_counts(box, run[0][: engine.S], float(run[2][0]), state.mass_unit)
    return new, record


def simulate_path(state0: ParticleState, env: Environment, spec: BranchingSpec, obs_times,
                  test_fields: Sequence[Field], rng: np.random.Generator,
                  pop_cap: int = DEFAULT_POPULATION_CAP) -> MeasurePath:
    """One exact path; records ``<mu_t, phi>`` for each field at each time."""
    times = _check_times(obs_times)
    engine = _Engine(env, spec, pop_cap=pop_cap)
    phis = _field_matrix(state0.box, test_fields)
    vals, pop, _, _ = _run_one(engine, state0.counts(), state0.time, state0.mass_unit, times, phis, rng)
    return MeasurePath(times, list(range(len(test_fields))), vals[None], pop[None])


def killed_simulate(state0: ParticleState, env: Environment, spec: BranchingSpec, L: int, obs_times,
                    test_fields: Sequence[Field], rng: np.random.Generator,
                    pop_cap: int = DEFAULT_POPULATION_CAP) -> MeasurePath:
    """As :func:`simulate_path`, but a particle jumping out of ``(-L/2, L/2)^d`` is removed."""
    times = _check_times(obs_times)
    mask = killed_region(state0.box, L)
    if np.any(state0.counts()[mask]):
        raise ValueError("initial particles must lie inside the killing box")
    engine = _Engine(env, spec, kill_mask=mask, pop_cap=pop_cap)
    phis = _field_matrix(state0.box, test_fields)
    vals, pop, _, _ = _run_one(engine, state0.counts(), state0.time, state0.mass_unit, times, phis, rng)
    return MeasurePath(times, list(range(len(test_fields))), vals[None], pop[None])


def _threads(max_threads):
    if max_threads is None:
        max_threads = int(os.environ.get("RSBM_THREADS", "1"))
    return max(1, int(max_threads))


def _ensemble(engine, state0, times, phis, replicas, base_seed, max_threads, coupled):
    counts0 = state0.counts()
    R, T, F = replicas, times.size, phis.shape[1]
    vals = np.full((R, T, F), np.nan)
    pop = np.zeros((R, T), dtype=np.int64)
    aborted = np.zeros(R, dtype=bool)
    full_vals = np.full((R, T, F), np.nan) if coupled else None
    full_pop = np.zeros((R, T), dtype=np.int64) if coupled else None

    def work(r):
        rng = philox(base_seed, r)
        try:
            v, p, fv, fp = _run_one(engine, counts0, state0.time, state0.mass_unit, times, phis, rng, coupled)
        except PopulationCapExceeded:
            aborted[r] = True
            return
        vals[r], pop[r] = v, p
        if coupled:
            full_vals[r], full_pop[r] = fv, fp

    threads = _threads(max_threads)
    if threads == 1:
        for r in range(R):
            work(r)
    else:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, range(R)))
    ids = list(range(F))
    path = MeasurePath(times, ids, vals, pop, aborted)
    if coupled:
        return path, MeasurePath(times, ids, full_vals, full_pop, aborted.copy())
    return path


def simulate_ensemble(state0: ParticleState, env: Environment, spec: BranchingSpec, obs_times,
                      test_fields: Sequence[Field], replicas: int, base_seed: int = 0,
                      L: int | None = None, max_threads: int | None = None,
                      pop_cap: int = DEFAULT_POPULATION_CAP) -> MeasurePath:
    """Independent replicas; replica ``r`` draws from the stream ``(base_seed, r)``.

    Replicas whose population exceeds ``pop_cap`` are marked in
    ``MeasurePath.aborted`` instead of stopping the ensemble.
    """
    times = _check_times(obs_times)
    mask = killed_region(state0.box, L) if L is not None else None
    engine = _Engine(env, spec, kill_mask=mask, pop_cap=pop_cap)
    phis = _field_matrix(state0.box, test_fields)
    return _ensemble(engine, state0, times, phis, replicas, base_seed, max_threads, coupled=False)


def coupled_killed_ensemble(state0: ParticleState, env: Environment, spec: BranchingSpec, L: int, obs_times,
                            test_fields: Sequence[Field], replicas: int, base_seed: int = 0,
                            max_threads: int | None = None,
                            pop_cap: int = DEFAULT_POPULATION_CAP) -> tuple[MeasurePath, MeasurePath]:
    """Killed and free processes driven by one event stream.

    Particles leaving the box become ghosts that keep moving and branching,
    so the free process is the ordinary one and the live particles form the
    killed process; ``killed <= free`` holds pathwise.
    """
    times = _check_times(obs_times)
    engine = _Engine(env, spec, kill_mask=killed_region(state0.box, L), ghost=True, pop_cap=pop_cap)
    phis = _field_matrix(state0.box, test_fields)
    return _ensemble(engine, state0, times, phis, replicas, base_seed, max_threads, coupled=True)
