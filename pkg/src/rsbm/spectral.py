"""Dirichlet Anderson Hamiltonian: top eigenpair, eigenvalue growth and the persistence martingale.

The killed process lives on the sites strictly inside ``(-L/2, L/2)^d``;
its mean semigroup is generated by ``Δ^n + xi_eff`` with zero exterior.  If
``(lambda1, e1)`` is the top eigenpair then ``E(t) = exp(-lambda1 t) <mu^L_t, e1>``
is a martingale.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .environment import Environment, EnvironmentSpec, sample_environment
from .lattice import Field, LatticeBox
from .particle import BranchingSpec, MeasurePath, init_state, initial_mass, killed_region, simulate_ensemble

__all__ = [
    "DENSE_EIGEN_LIMIT",
    "ConvergenceError",
    "DirichletHamiltonian",
    "EigenPair",
    "assemble",
    "top_eigenpair",
    "rayleigh_quotient",
    "GrowthReport",
    "growth_study",
    "PersistenceReport",
    "persistence_experiment",
    "find_seed_with_positive_lambda",
]

DENSE_EIGEN_LIMIT = 4096


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DirichletHamiltonian:
    """``Δ^n + diag(xi_eff)`` restricted to the interior of ``(-L/2, L/2)^d``."""

    env: Environment
    L: int
    matrix: sp.csr_matrix
    sites: np.ndarray  # flat indices of the interior sites in env.box

    @property
    def dim(self) -> int:
        return self.sites.size

    def to_field(self, vec: np.ndarray) -> Field:
        """Embed interior values into the environment box, zero elsewhere."""
        out = np.zeros(self.env.box.num_sites)
        out[self.sites] = vec
        return Field(self.env.box, out.reshape(self.env.box.shape))

    def restrict(self, f: Field) -> np.ndarray:
        return f.flat[self.sites]


@dataclass
class EigenPair:
    lambda1: float
    e1: Field
    residual: float
    method: str


def assemble(env: Environment, L: int) -> DirichletHamiltonian:
    box = env.box
    inside = ~killed_region(box, L)
    sites = np.flatnonzero(inside)
    local = np.full(box.num_sites, -1, dtype=np.int64)
    local[sites] = np.arange(sites.size)
    # wrap-around neighbours are never interior, so the periodic table is safe
    nbr = box.with_boundary("periodic").neighbor_table()[sites]
    rows = np.repeat(np.arange(sites.size), nbr.shape[1])
    cols = local[nbr.ravel()]
    keep = cols >= 0
    n2 = float(box.n) ** 2
    off = sp.csr_matrix((np.full(keep.sum(), n2), (rows[keep], cols[keep])), shape=(sites.size,) * 2)
    diag = sp.diags(-2.0 * box.d * n2 + env.xi_eff.flat[sites])
    return DirichletHamiltonian(env, L, (off + diag).tocsr(), sites)


def _finish(H: DirichletHamiltonian, lam: float, vec: np.ndarray, method: str) -> EigenPair:
    box = H.env.box
    if vec.sum() < 0:
        vec = -vec
    # unit norm in the lattice L^2 pairing n^-d sum
    vec = vec / np.linalg.norm(vec) * float(box.n) ** (box.d / 2)
    scale = float(np.max(np.abs(vec)))
    if vec.min() < -1e-12 * scale:
        raise ConvergenceError(f"top eigenvector is not positive (min {vec.min():.3g})")
    # entries below roundoff carry no sign information
    vec = np.maximum(vec, 0.0)
    res = float(np.linalg.norm(H.matrix @ vec - lam * vec)) / float(box.n) ** (box.d / 2)
    return EigenPair(float(lam), H.to_field(vec), res, method)


def top_eigenpair(H: DirichletHamiltonian, method: str = "auto", max_iter: int = 10_000,
                  tol: float = 1e-8) -> EigenPair:
    """Largest eigenvalue and its positive, L^2-normalised eigenfunction.

    ``auto`` uses a dense symmetric solver up to ``DENSE_EIGEN_LIMIT`` unknowns
    and shifted power iteration beyond.
    """
    if method == "auto":
        method = "dense" if H.dim <= DENSE_EIGEN_LIMIT else "power"
    if method == "dense":
        if H.dim > DENSE_EIGEN_LIMIT:
            raise ValueError(f"dense eigensolver limited to {DENSE_EIGEN_LIMIT} unknowns")
        w, v = sla.eigh(H.matrix.toarray(), subset_by_index=[H.dim - 1, H.dim - 1])
        return _finish(H, w[0], v[:, 0], "dense")
    if method != "power":
        raise ValueError(f"unknown method {method!r}")
    box = H.env.box
    shift = 4 * box.d * box.n**2 + float(np.max(np.abs(H.env.xi_eff.flat)))
    A = H.matrix + shift * sp.identity(H.dim, format="csr")
    x = np.ones(H.dim) / math.sqrt(H.dim)
    lam = 0.0
    for _ in range(max_iter):
        y = A @ x
        x = y / np.linalg.norm(y)
        Hx = H.matrix @ x
        lam = float(x @ Hx)
        res = float(np.linalg.norm(Hx - lam * x))
        if res <= tol * abs(lam) + 1e-10:
            return _finish(H, lam, x, "power")
    raise ConvergenceError(f"power iteration: relative residual {res / max(abs(lam), 1e-300):.3g} after {max_iter} iterations")


def rayleigh_quotient(H: DirichletHamiltonian, f: Field) -> float:
    v = H.restrict(f)
    return float(v @ (H.matrix @ v) / (v @ v))


def _normalise(lam: float, L: int, d: int) -> float:
    return lam / math.log(L) ** (2.0 / 3.0) if d == 1 else lam / math.log(L)


@dataclass
class GrowthReport:
    d: int
    rows: list = field(default_factory=list)

    def medians(self) -> dict:
        out = {}
        for L in sorted({r["L"] for r in self.rows}):
            out[L] = float(np.median([r["normalized"] for r in self.rows if r["L"] == L]))
        return out

    def spread(self) -> float:
        """``(max - min) / min`` of the per-L medians."""
        m = np.array(list(self.medians().values()))
        return float((m.max() - m.min()) / abs(m.min()))

    def monotone(self, tol: float = 1e-10) -> bool:
        """``lambda1`` nondecreasing in ``L`` for every seed."""
        for seed in {r["seed"] for r in self.rows}:
            lams = [r["lambda1"] for r in sorted(self.rows, key=lambda r: r["L"]) if r["seed"] == seed]
            if any(b < a - tol for a, b in zip(lams, lams[1:])):
                return False
        return True

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "L", "lambda1", "normalized"])
            for r in self.rows:
                w.writerow([r["seed"], r["L"], repr(r["lambda1"]), repr(r["normalized"])])


def growth_study(d: int, L_grid, seeds, n: int = 1, dist: str = "rademacher") -> GrowthReport:
    """``lambda1`` on nested boxes cut from one environment per seed.

    Normalised by ``(log L)^{2/3}`` in d = 1 and ``log L`` in d = 2.
    """
    L_grid = sorted(int(L) for L in L_grid)
    box = LatticeBox(d, n, L_grid[-1])
    report = GrowthReport(d)
    for seed in seeds:
        env = sample_environment(EnvironmentSpec(dist, box, int(seed)))
        for L in L_grid:
            lam = top_eigenpair(assemble(env, L)).lambda1
            report.rows.append({"seed": int(seed), "L": L, "lambda1": lam, "normalized": _normalise(lam, L, d)})
    return report


def find_seed_with_positive_lambda(box: LatticeBox, L: int, dist: str = "rademacher", start: int = 0,
                                   tries: int = 1000) -> int:
    for seed in range(start, start + tries):
        env = sample_environment(EnvironmentSpec(dist, box, seed))
        if top_eigenpair(assemble(env, L)).lambda1 > 0:
            return seed
    raise ValueError(f"no seed in [{start}, {start + tries}) gives lambda1 > 0")


@dataclass
class PersistenceReport:
    lambda1: float
    e1_origin: float
    times: np.ndarray
    E: np.ndarray  # (replicas, times)
    population: np.ndarray
    eps_factor: float
    growth_lambda: float
    growth_proxy: np.ndarray  # mean of exp(-growth_lambda t) <mu^L_t, e1> per time
    aborted: int = 0

    def means(self) -> np.ndarray:
        return self.E.mean(axis=0)

    def pairwise_z(self) -> np.ndarray:
        """``|mean(E_i - E_j)| / SE`` over replica-paired differences."""
        T = self.times.size
        z = np.zeros((T, T))
        R = self.E.shape[0]
        for i in range(T):
            for j in range(i + 1, T):
                diff = self.E[:, i] - self.E[:, j]
                se = diff.std(ddof=1) / math.sqrt(R)
                z[i, j] = z[j, i] = abs(diff.mean()) / se if se > 0 else (0.0 if diff.mean() == 0 else np.inf)
        return z

    def constant_mean(self, k: float = 3.0) -> bool:
        return bool(np.all(self.pairwise_z() <= k))

    def persistence_probability(self) -> tuple[float, float]:
        """Fraction with ``E(t_end) > eps_factor e1(0)`` and its standard error."""
        hits = self.E[:, -1] > self.eps_factor * self.e1_origin
        p = float(hits.mean())
        return p, math.sqrt(p * (1 - p) / hits.size)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["replica", "t", "E_value", "population"])
            for r in range(self.E.shape[0]):
                for ti, t in enumerate(self.times):
                    w.writerow([r, repr(float(t)), repr(float(self.E[r, ti])), int(self.population[r, ti])])


def persistence_experiment(env: Environment, L: int, branching: BranchingSpec, t_grid, replicas: int,
                           base_seed: int = 0, growth_lambda: float | None = None, eps_factor: float = 0.1,
                           max_threads: int | None = None) -> PersistenceReport:
    """Killed ensemble from ``floor(n^rho)`` particles at the origin, observed through ``e1``."""
    pair = top_eigenpair(assemble(env, L))
    times = np.asarray(t_grid, dtype=float)
    state0 = init_state(env.box, branching.rho)
    path: MeasurePath = simulate_ensemble(state0, env, branching, times, [pair.e1], replicas,
                                          base_seed=base_seed, L=L, max_threads=max_threads)
    ok = ~path.aborted
    raw = path.values[ok, :, 0]
    E = raw * np.exp(-pair.lambda1 * times)[None, :]
    lam_g = 0.5 * pair.lambda1 if growth_lambda is None else float(growth_lambda)
    proxy = (raw * np.exp(-lam_g * times)[None, :]).mean(axis=0)
    return PersistenceReport(pair.lambda1, pair.e1.at_origin(), times, E, path.population[ok],
                             eps_factor, lam_g, proxy, int(path.aborted.sum()))
