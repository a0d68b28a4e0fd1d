import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rsbm.lattice import (
    Field,
    LatticeBox,
    WeightSpec,
    carre_du_champ,
    discrete_gradient,
    discrete_laplacian,
    lattice_pair,
    laplacian_matrix,
    weight_field,
)

finite = st.floats(-10, 10, allow_nan=False)


def random_field(box, seed):
    return Field(box, np.random.default_rng(seed).standard_normal(box.shape))


def test_box_validation():
    with pytest.raises(ValueError):
        LatticeBox(3, 4, 4)
    with pytest.raises(ValueError):
        LatticeBox(1, 4, 3)
    with pytest.raises(ValueError):
        LatticeBox(1, 1, 2)  # 2 sites per side
    with pytest.raises(ValueError):
        LatticeBox(1, 4, 4, "reflecting")
    box = LatticeBox(2, 3, 4)
    assert box.sites_per_side == 12 and box.num_sites == 144


def test_coordinates_and_origin():
    box = LatticeBox(1, 2, 4)
    assert box.axis_coords()[0] == -2.0
    assert box.axis_coords()[-1] == 2.0 - 0.5
    assert box.axis_coords()[box.origin_index[0]] == 0.0
    assert box.index_of(0.5) == (5,)
    with pytest.raises(ValueError):
        box.index_of(0.3)


def test_field_rejects_nan():
    box = LatticeBox(1, 2, 4)
    with pytest.raises(ValueError):
        Field(box, np.full(box.shape, np.nan))


def test_laplacian_of_constant_is_zero():
    box = LatticeBox(2, 3, 4)
    assert np.all(discrete_laplacian(Field.constant(box, 3.7)).values == 0)


def test_laplacian_stencil_on_indicator():
    box = LatticeBox(1, 2, 4)
    out = discrete_laplacian(Field.indicator(box, 0.0))
    assert out.at(0.0) == -8.0
    assert out.at(0.5) == 4.0 and out.at(-0.5) == 4.0
    assert np.count_nonzero(out.values) == 3


def test_laplacian_plane_wave_multiplier():
    n, M = 8, 4
    box = LatticeBox(1, n, M)
    for j in (1, 3, 7):
        k = j / M
        f = Field.from_function(box, lambda x: np.cos(2 * np.pi * k * x))
        expected = -4 * n**2 * np.sin(np.pi * k / n) ** 2 * f.values
        assert np.max(np.abs(discrete_laplacian(f).values - expected)) < 1e-9


def test_gradient_examples():
    box = LatticeBox(1, 4, 4, "dirichlet")
    assert np.all(discrete_gradient(Field.constant(LatticeBox(1, 4, 4), 2.0))[0].values == 0)
    (g,) = discrete_gradient(Field.from_function(box, lambda x: x))
    assert np.allclose(g.values[:-1], 1.0)
    (g2,) = discrete_gradient(Field.from_function(box, lambda x: x**2))
    x = box.axis_coords()
    assert np.allclose(g2.values[:-1], 2 * x[:-1] + 1 / box.n)


def test_lattice_pair_examples():
    for n in (1, 2, 5):
        box = LatticeBox(1, n, 4)
        one = Field.constant(box, 1.0)
        assert lattice_pair(one, one) == pytest.approx(4.0)
        assert lattice_pair(random_field(box, 0), Field.zeros(box)) == 0.0
    box2 = LatticeBox(2, 2, 4)
    ind = Field.indicator(box2, (0.5, 0.0))
    assert lattice_pair(ind, ind) == 0.25
    with pytest.raises(ValueError):
        lattice_pair(ind, Field.zeros(LatticeBox(2, 2, 6)))


def test_weight_examples():
    box = LatticeBox(1, 1, 8)
    p1 = weight_field(box, WeightSpec("polynomial", 1.0))
    assert p1.at(0.0) == 1.0
    assert p1.at(3.0) == 0.25
    e = weight_field(box, WeightSpec("exponential", 0.7))
    em = weight_field(box, WeightSpec("exponential", -0.7))
    assert np.allclose((e * em).values, 1.0)
    assert weight_field(box, WeightSpec("exponential", 0.7)).at(0.0) == 1.0
    r = box.norm().ravel()
    order = np.argsort(r)
    assert np.all(np.diff(p1.flat[order]) <= 0)


@given(st.integers(0, 2**31), st.sampled_from([1, 2]), st.sampled_from(["periodic", "dirichlet"]))
def test_laplacian_symmetric(seed, d, boundary):
    box = LatticeBox(d, 3, 4, boundary)
    f, g = random_field(box, seed), random_field(box, seed + 1)
    a = lattice_pair(discrete_laplacian(f), g)
    b = lattice_pair(f, discrete_laplacian(g))
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


@given(st.integers(0, 2**31), st.sampled_from([1, 2]))
def test_periodic_mass_conservation(seed, d):
    box = LatticeBox(d, 4, 4)
    f = random_field(box, seed)
    one = Field.constant(box, 1.0)
    assert abs(lattice_pair(discrete_laplacian(f), one)) < 1e-10 * box.n**2 * box.num_sites


@given(st.integers(0, 2**31), st.sampled_from([1, 2]))
def test_summation_by_parts(seed, d):
    box = LatticeBox(d, 4, 4)
    f = random_field(box, seed)
    grad = discrete_gradient(f)
    energy = lattice_pair(sum(g * g for g in grad), Field.constant(box, 1.0))
    lhs = lattice_pair(discrete_laplacian(f), f)
    assert abs(lhs + energy) <= 1e-10 * max(1.0, energy)


@given(arrays(np.float64, 16, elements=finite))
def test_carre_du_champ_identity(v):
    box = LatticeBox(1, 4, 4)
    f = Field(box, v)
    lhs = carre_du_champ(f).values
    rhs = discrete_laplacian(f * f).values - 2 * f.values * discrete_laplacian(f).values
    assert np.allclose(lhs, rhs, atol=1e-8 * (1 + np.max(np.abs(lhs))))


def test_laplacian_matrix_matches_stencil():
    for boundary in ("periodic", "dirichlet"):
        box = LatticeBox(2, 2, 4, boundary)
        f = random_field(box, 3)
        A = laplacian_matrix(box)
        assert np.allclose(A @ f.flat, discrete_laplacian(f).flat)
        assert abs(A - A.T).max() == 0


def test_gradient_norm_inequality():
    # one constant C across n: sup|grad f| <= C n osc(f) for random smooth fields
    rng = np.random.default_rng(0)
    ratios = []
    for n in (4, 8, 16):
        box = LatticeBox(1, n, 4)
        for _ in range(100):
            a, w, ph = rng.normal(size=3)
            f = Field.from_function(box, lambda x: a * np.sin(2 * np.pi * w * x / 4 + ph))
            osc = f.values.max() - f.values.min()
            if osc > 1e-12:
                ratios.append(np.max(np.abs(discrete_gradient(f)[0].values)) / (n * osc))
    assert max(ratios) <= 1.0
