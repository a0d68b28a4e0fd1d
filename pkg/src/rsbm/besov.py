"""Lattice Fourier analysis, Littlewood-Paley blocks, weighted Besov norms and paraproducts.

Frequencies live on the dual grid ``k = j / M``, ``j = -s/2, ..., s/2 - 1``,
a subset of the dilated torus ``[-n/2, n/2)^d``.  Spectra are stored in FFT
order (``np.fft.fftfreq``), fields in the box order of :mod:`rsbm.lattice`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .environment import Environment, chi_cutoff, laplacian_symbol, smoothstep
from .lattice import Field, LatticeBox, WeightSpec, weight_field

__all__ = [
    "dual_grid",
    "fourier_forward",
    "fourier_inverse",
    "lp_profile",
    "annulus_profile",
    "DyadicPartition",
    "BesovParams",
    "lp_block",
    "lp_blocks",
    "besov_norm",
    "paraproduct",
    "resonant",
    "commutator_c1",
    "pam_enhancement",
    "interpolate_to",
    "write_probe_csv",
]


def _require_periodic(box: LatticeBox):
    if box.boundary != "periodic":
        raise ValueError("Fourier operations need a periodic box")


def dual_grid(box: LatticeBox) -> np.ndarray:
    """Frequencies ``k`` in FFT order, shape ``box.shape + (d,)``."""
    freqs = np.fft.fftfreq(box.sites_per_side, d=1.0 / box.n)
    mesh = np.meshgrid(*([freqs] * box.d), indexing="ij")
    return np.stack(mesh, axis=-1)


def fourier_forward(f: Field) -> np.ndarray:
    """``F_n f(k) = n^-d sum_x f(x) exp(-2 pi i <x, k>)``."""
    box = f.box
    _require_periodic(box)
    return np.fft.fftn(np.fft.ifftshift(f.values)) / float(box.n) ** box.d


def fourier_inverse(spectrum: np.ndarray, box: LatticeBox) -> Field:
    """``M^-d sum_k F(k) exp(2 pi i <x, k>)``; the imaginary part is dropped."""
    _require_periodic(box)
    vals = np.fft.fftshift(np.fft.ifftn(spectrum)).real * float(box.n) ** box.d
    return Field(box, vals)


def lp_profile(r) -> np.ndarray:
    """Radial low-frequency profile: 1 for ``r <= 3/8``, 0 for ``r >= 1/2``."""
    return 1.0 - smoothstep((np.asarray(r, dtype=float) - 0.375) * 8.0)


def annulus_profile(r) -> np.ndarray:
    """``lp_profile(r/2) - lp_profile(r)``: rises on [3/8, 1/2], falls on [3/4, 1]."""
    r = np.asarray(r, dtype=float)
    return lp_profile(r / 2.0) - lp_profile(r)


@dataclass(frozen=True, eq=False)
class DyadicPartition:
    """Multipliers ``rho_{-1}, ..., rho_{j_n}`` on the dual grid of ``box``.

    The profiles telescope, so ``sum_{j=-1}^{J} rho_j(k) = lp_profile(2^{-J-1}|k|)``
    and the partition identity is exact.  The top block absorbs everything
    above ``j_n``.
    """

    box: LatticeBox

    @property
    def j_n(self) -> int:
        """Smallest ``j >= 0`` whose annulus (radius ``2^j``) leaves ``n[-1/2, 1/2]^d``."""
        j = 0
        while 2.0**j <= self.box.n / 2:
            j += 1
        return j

    @property
    def indices(self) -> range:
        return range(-1, self.j_n + 1)

    @cached_property
    def multipliers(self) -> np.ndarray:
        """Array of shape ``(j_n + 2,) + box.shape``; row ``j + 1`` holds ``rho_j``."""
        r = np.linalg.norm(dual_grid(self.box), axis=-1)
        rows = [lp_profile(r)]
        for j in range(0, self.j_n):
            rows.append(annulus_profile(r / 2.0**j))
        rows.append(1.0 - np.sum(rows, axis=0))
        return np.stack(rows)

    def multiplier(self, j: int) -> np.ndarray:
        if j not in self.indices:
            raise ValueError(f"block index {j} outside [-1, {self.j_n}]")
        return self.multipliers[j + 1]


@dataclass(frozen=True)
class BesovParams:
    alpha: float
    p: float = np.inf
    q: float = np.inf
    weight: WeightSpec = WeightSpec("polynomial", 0.0)

    def __post_init__(self):
        for name in ("p", "q"):
            if getattr(self, name) not in (1, 2, np.inf):
                raise ValueError(f"{name} must be 1, 2 or inf")


def _partition(f: Field, partition: DyadicPartition | None) -> DyadicPartition:
    if partition is None:
        return DyadicPartition(f.box)
    if partition.box != f.box:
        raise ValueError("partition built for a different box")
    return partition


def lp_blocks(f: Field, partition: DyadicPartition | None = None) -> np.ndarray:
    """All blocks ``Δ_j f``, stacked as in :attr:`DyadicPartition.multipliers`."""
    part = _partition(f, partition)
    spec = fourier_forward(f)
    box = f.box
    axes = tuple(range(1, box.d + 1))
    blocks = np.fft.ifftn(part.multipliers * spec[None], axes=axes).real
    return np.fft.fftshift(blocks, axes=axes) * float(box.n) ** box.d


def lp_block(f: Field, j: int, partition: DyadicPartition | None = None) -> Field:
    """``Δ_j f = F^-1(rho_j F f)``."""
    part = _partition(f, partition)
    return fourier_inverse(part.multiplier(j) * fourier_forward(f), f.box)


def _lp_norm(values: np.ndarray, weight: np.ndarray, p: float, n: int, d: int) -> float:
    z = np.abs(weight * values)
    if p == np.inf:
        return float(z.max())
    return float((np.sum(z**p) / n**d) ** (1.0 / p))


def besov_norm(f: Field, params: BesovParams, partition: DyadicPartition | None = None) -> float:
    """``|| (2^{j alpha} ||Δ_j f||_{L^p(z)})_{j <= j_n} ||_{l^q}``."""
    part = _partition(f, partition)
    box = f.box
    w = weight_field(box, params.weight).values
    blocks = lp_blocks(f, part)
    seq = np.array([
        2.0 ** (j * params.alpha) * _lp_norm(blocks[j + 1], w, params.p, box.n, box.d)
        for j in part.indices
    ])
    if params.q == np.inf:
        return float(seq.max())
    return float(np.sum(seq**params.q) ** (1.0 / params.q))


def _check_pair(f: Field, g: Field):
    if f.box != g.box:
        raise ValueError("fields live on different boxes")
    _require_periodic(f.box)


def paraproduct(f: Field, g: Field, partition: DyadicPartition | None = None) -> Field:
    """``f < g = sum_{1 <= i <= j_n} (sum_{j < i-1} Δ_j f) Δ_i g``."""
    _check_pair(f, g)
    part = _partition(f, partition)
    bf, bg = lp_blocks(f, part), lp_blocks(g, part)
    low = np.cumsum(bf, axis=0)  # low[m] = sum of rows 0..m, i.e. blocks j <= m - 1
    out = np.zeros(f.box.shape)
    for i in range(1, part.j_n + 1):
        # blocks j < i - 1 are rows 0 .. i - 1
        out += low[i - 1] * bg[i + 1]
    return Field(f.box, out)


def resonant(f: Field, g: Field, partition: DyadicPartition | None = None) -> Field:
    """``f o g = sum_{|i - j| <= 1} Δ_i f Δ_j g``."""
    _check_pair(f, g)
    part = _partition(f, partition)
    bf, bg = lp_blocks(f, part), lp_blocks(g, part)
    m = bf.shape[0]
    out = np.zeros(f.box.shape)
    for a in range(m):
        for b in range(max(0, a - 1), min(m, a + 2)):
            out += bf[a] * bg[b]
    return Field(f.box, out)


def commutator_c1(f: Field, g: Field, h: Field, partition: DyadicPartition | None = None) -> Field:
    """``C_1(f, g, h) = (f < g) o h - f (g o h)``."""
    part = _partition(f, partition)
    return resonant(paraproduct(f, g, part), h, part) - f * resonant(g, h, part)


def pam_enhancement(env: Environment, partition: DyadicPartition | None = None) -> tuple[Field, Field]:
    """``X`` solving ``-Δ X = chi(D) xi`` and the renormalised product ``X o xi - c_n``."""
    box = env.box
    if box.d != 2:
        raise ValueError("the enhancement is only needed in d = 2")
    _require_periodic(box)
    part = _partition(env.xi, partition)
    k = dual_grid(box)
    chi = chi_cutoff(k)
    lsym = laplacian_symbol(k, box.n)
    mult = np.zeros(box.shape)
    nz = chi > 0
    mult[nz] = chi[nz] / lsym[nz]
    X = fourier_inverse(mult * fourier_forward(env.xi), box)
    return X, resonant(X, env.xi, part) - env.c_n


def interpolate_to(f: Field, box: LatticeBox) -> Field:
    """Periodic piecewise-multilinear interpolation of ``f`` onto another box of the same side.

    Used to compare fields across lattice scales on a common reference grid.
    """
    src = f.box
    if src.M != box.M or src.d != box.d:
        raise ValueError("interpolation needs boxes of equal side and dimension")
    s = src.sites_per_side
    out = np.zeros(box.shape)
    coords = box.coords()
    pos = [(c * src.n) + s // 2 for c in coords]  # fractional array index in the source
    base = [np.floor(p).astype(int) for p in pos]
    frac = [p - b for p, b in zip(pos, base)]
    for corner in np.ndindex(*([2] * src.d)):
        w = np.ones(box.shape)
        idx = []
        for ax, c in enumerate(corner):
            w = w * (frac[ax] if c else 1.0 - frac[ax])
            idx.append((base[ax] + c) % s)
        out += w * f.values[tuple(idx)]
    return Field(box, out)


def write_probe_csv(rows, path) -> None:
    """Norm-probe report with columns ``quantity, d, n, M, seed, value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "d", "n", "M", "seed", "value"])
        for r in rows:
            w.writerow([r["quantity"], r["d"], r["n"], r["M"], r["seed"], repr(float(r["value"]))])
