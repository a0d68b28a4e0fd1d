"""Finite computational lattice: geometry, fields and discrete operators.

The lattice ``(1/n) Z^d`` is truncated to the box ``[-M/2, M/2)^d``.  In
periodic mode the box wraps; in Dirichlet mode every site outside the box
carries the value zero.  Arrays are stored with axis index ``i`` holding the
site ``x = (i - s/2) / n`` where ``s = M * n`` is the number of sites per side.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

__all__ = [
    "MAX_SITES",
    "BOUNDARIES",
    "LatticeBox",
    "Field",
    "WeightSpec",
    "discrete_laplacian",
    "discrete_gradient",
    "carre_du_champ",
    "lattice_pair",
    "weight_field",
    "laplacian_matrix",
]

MAX_SITES = 2**22
BOUNDARIES = ("periodic", "dirichlet")


@dataclass(frozen=True)
class LatticeBox:
    """Box ``[-M/2, M/2)^d`` of the lattice with spacing ``1/n``."""

    d: int
    n: int
    M: int
    boundary: str = "periodic"

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.d}")
        if self.n < 1:
            raise ValueError(f"lattice scale n must be >= 1, got {self.n}")
        if self.M < 2 or self.M % 2:
            raise ValueError(f"box side M must be a positive even integer, got {self.M}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")
        s = self.M * self.n
        if s < 4:
            raise ValueError(f"need at least 4 sites per side, got {s}")
        if s**self.d > MAX_SITES:
            raise ValueError(f"{s}^{self.d} sites exceed the dense limit {MAX_SITES}")

    @property
    def sites_per_side(self) -> int:
        return self.M * self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.sites_per_side,) * self.d

    @property
    def num_sites(self) -> int:
        return self.sites_per_side**self.d

    @property
    def origin_index(self) -> tuple[int, ...]:
        return (self.sites_per_side // 2,) * self.d

    @property
    def origin_flat(self) -> int:
        return int(np.ravel_multi_index(self.origin_index, self.shape))

    def with_boundary(self, boundary: str) -> "LatticeBox":
        return LatticeBox(self.d, self.n, self.M, boundary)

    def axis_coords(self) -> np.ndarray:
        """Site coordinates ``j/n`` along one axis."""
        s = self.sites_per_side
        return (np.arange(s) - s // 2) / self.n

    def coords(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays, one per dimension, each of shape ``self.shape``."""
        ax = self.axis_coords()
        return tuple(np.meshgrid(*([ax] * self.d), indexing="ij"))

    def norm(self) -> np.ndarray:
        """Euclidean ``|x|`` at every site."""
        return np.sqrt(sum(c**2 for c in self.coords()))

    def index_of(self, x) -> tuple[int, ...]:
        """Array index of the lattice point ``x`` (a scalar or a d-tuple)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.d,):
            raise ValueError(f"point must have {self.d} coordinates")
        j = np.rint(x * self.n).astype(int)
        if not np.allclose(j / self.n, x):
            raise ValueError(f"{tuple(x)} is not a lattice site at scale n={self.n}")
        idx = j + self.sites_per_side // 2
        if np.any(idx < 0) or np.any(idx >= self.sites_per_side):
            raise ValueError(f"{tuple(x)} lies outside the box")
        return tuple(int(i) for i in idx)

    def neighbor_table(self) -> np.ndarray:
        """Flat neighbour indices, shape ``(num_sites, 2d)``.

        Columns are ordered ``+e_1, -e_1, +e_2, -e_2``.  Periodic boxes wrap;
        Dirichlet boxes mark exterior neighbours with ``-1``.
        """
        s = self.sites_per_side
        idx = np.indices(self.shape)
        cols = []
        for axis in range(self.d):
            for step in (1, -1):
                shifted = idx.copy()
                shifted[axis] = idx[axis] + step
                outside = (shifted[axis] < 0) | (shifted[axis] >= s)
                shifted[axis] %= s
                flat = np.ravel_multi_index(tuple(shifted), self.shape)
                if self.boundary == "dirichlet":
                    flat = np.where(outside, -1, flat)
                cols.append(flat.ravel())
        return np.stack(cols, axis=1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class Field:
    """Real-valued function on the sites of a box.  Immutable."""

    box: LatticeBox
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.box.shape:
            if v.size == self.box.num_sites:
                v = v.reshape(self.box.shape)
            else:
                raise ValueError(f"values of shape {v.shape} do not fit box shape {self.box.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, box: LatticeBox, c: float) -> "Field":
        return cls(box, np.full(box.shape, float(c)))

    @classmethod
    def zeros(cls, box: LatticeBox) -> "Field":
        return cls.constant(box, 0.0)

    @classmethod
    def indicator(cls, box: LatticeBox, x=0.0) -> "Field":
        v = np.zeros(box.shape)
        v[box.index_of(x if np.ndim(x) else (x,) * box.d)] = 1.0
        return cls(box, v)

    @classmethod
    def dirac(cls, box: LatticeBox) -> "Field":
        """Lattice Dirac at the origin, ``n^d 1_{0}``: unit mass under ``lattice_pair``."""
        return cls(box, cls.indicator(box).values * float(box.n) ** box.d)

    @classmethod
    def from_function(cls, box: LatticeBox, fn: Callable[..., np.ndarray]) -> "Field":
        """Evaluate ``fn(x1, ..., xd)`` on the site coordinates."""
        return cls(box, np.broadcast_to(fn(*box.coords()), box.shape))

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def at(self, x=0.0) -> float:
        return float(self.values[self.box.index_of(x if np.ndim(x) else (x,) * self.box.d)])

    def at_origin(self) -> float:
        return float(self.values[self.box.origin_index])

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def _other(self, other):
        if isinstance(other, Field):
            if other.box != self.box:
                raise ValueError("fields live on different boxes")
            return other.values
        return other

    def __add__(self, other):
        return Field(self.box, self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return Field(self.box, self.values - self._other(other))

    def __rsub__(self, other):
        return Field(self.box, self._other(other) - self.values)

    def __mul__(self, other):
        return Field(self.box, self.values * self._other(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Field(self.box, self.values / self._other(other))

    def __neg__(self):
        return Field(self.box, -self.values)

    def __pow__(self, p):
        return Field(self.box, self.values**p)

    def __abs__(self):
        return Field(self.box, np.abs(self.values))


@dataclass(frozen=True)
class WeightSpec:
    """Polynomial weight ``p(a) = (1+|x|)^-a`` or exponential ``e(l) = exp(-l |x|^sigma)``."""

    kind: str = "polynomial"
    param: float = 0.0
    sigma: float = 0.5

    def __post_init__(self):
        if self.kind not in ("polynomial", "exponential"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if self.kind == "polynomial" and self.param < 0:
            raise ValueError("polynomial weight needs a >= 0")
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")


def _shift(v: np.ndarray, axis: int, step: int, boundary: str) -> np.ndarray:
    """Values at ``x + step e_axis``."""
    if boundary == "periodic":
        return np.roll(v, -step, axis=axis)
    out = np.zeros_like(v)
    src = [slice(None)] * v.ndim
    dst = [slice(None)] * v.ndim
    if step > 0:
        src[axis], dst[axis] = slice(step, None), slice(None, -step)
    else:
        src[axis], dst[axis] = slice(None, step), slice(-step, None)
    out[tuple(dst)] = v[tuple(src)]
    return out


def discrete_laplacian(f: Field) -> Field:
    """``n^2 sum_{y ~ x} (f(y) - f(x))`` over the 2d nearest neighbours."""
    box = f.box
    v = f.values
    acc = np.zeros_like(v)
    # summing differences keeps constants exactly in the kernel
    for axis in range(box.d):
        acc += (_shift(v, axis, 1, box.boundary) - v) + (_shift(v, axis, -1, box.boundary) - v)
    return Field(box, box.n**2 * acc)


def discrete_gradient(f: Field) -> tuple[Field, ...]:
    """Forward differences ``n (f(x + e_i/n) - f(x))``, one field per axis."""
    box = f.box
    return tuple(
        Field(box, box.n * (_shift(f.values, axis, 1, box.boundary) - f.values))
        for axis in range(box.d)
    )


def carre_du_champ(f: Field) -> Field:
    """``n^2 sum_{y ~ x} (f(y) - f(x))^2``, the jump energy of the walk generator.

    Equals ``Δ(f^2) - 2 f Δf`` and sums squared forward and backward
    differences, so for smooth ``f`` it is about ``2 |∇f|^2``.
    """
    box = f.box
    v = f.values
    acc = np.zeros_like(v)
    for axis in range(box.d):
        for step in (1, -1):
            acc += (_shift(v, axis, step, box.boundary) - v) ** 2
    return Field(box, box.n**2 * acc)


def lattice_pair(f: Field, g: Field) -> float:
    """``n^-d sum_x f(x) g(x)``."""
    if f.box != g.box:
        raise ValueError("fields live on different boxes")
    return float(np.sum(f.values * g.values)) / f.box.n**f.box.d


def weight_field(box: LatticeBox, spec: WeightSpec) -> Field:
    r = box.norm()
    if spec.kind == "polynomial":
        return Field(box, (1.0 + r) ** (-spec.param))
    return Field(box, np.exp(-spec.param * r**spec.sigma))


def laplacian_matrix(box: LatticeBox) -> sp.csr_matrix:
    """Sparse matrix of ``Δ^n`` acting on flattened fields."""
    S = box.num_sites
    nbr = box.neighbor_table()
    rows = np.repeat(np.arange(S), nbr.shape[1])
    cols = nbr.ravel()
    keep = cols >= 0
    off = sp.csr_matrix((np.ones(keep.sum()), (rows[keep], cols[keep])), shape=(S, S))
    diag = sp.identity(S, format="csr") * (-2.0 * box.d)
    return ((off + diag) * float(box.n) ** 2).tocsr()
