import math

import numpy as np
import pytest
import scipy.linalg as sla

from conftest import gaussian
from rsbm.environment import Environment, EnvironmentSpec, sample_environment
from rsbm.lattice import Field, LatticeBox, laplacian_matrix
from rsbm.pam import semigroup_apply
from rsbm.spde1d import SpdeAbort, SpdeConfig, spde_ensemble, spde_step


def test_config_validation():
    cfg = SpdeConfig(1.0, 8)
    assert cfg.dt == pytest.approx(0.25 / 64)
    with pytest.raises(ValueError):
        SpdeConfig(1.0, 8, dt=0.01)
    with pytest.raises(ValueError):
        SpdeConfig(-1.0, 8)
    with pytest.raises(ValueError):
        SpdeConfig(1.0, 8, scheme="milstein")


def test_environment_checks():
    cfg = SpdeConfig(1.0, 4)
    with pytest.raises(ValueError):
        spde_step(Field.zeros(LatticeBox(2, 4, 4)), Environment.zero(LatticeBox(2, 4, 4)), cfg,
                  np.random.default_rng(0))
    box = LatticeBox(1, 8, 4)
    with pytest.raises(ValueError):
        spde_step(Field.zeros(box), Environment.zero(box), cfg, np.random.default_rng(0))
    with pytest.raises(ValueError):
        spde_step(Field.constant(LatticeBox(1, 4, 4), -1.0), Environment.zero(LatticeBox(1, 4, 4)), cfg,
                  np.random.default_rng(0))


def test_zero_is_absorbing(env1, box1):
    mu = Field.zeros(box1)
    for _ in range(10):
        mu = spde_step(mu, env1, SpdeConfig(2.0, 4), np.random.default_rng(0))
    assert np.all(mu.values == 0)
    ens = spde_ensemble(env1, SpdeConfig(2.0, 4, scheme="split"), [0.1], [Field.constant(box1, 1.0)], 5,
                        mu0=Field.zeros(box1))
    assert np.all(ens.path.values == 0)


def test_noiseless_step_is_heat_step():
    box = LatticeBox(1, 4, 4)
    env = Environment.zero(box)
    mu = gaussian(box)
    errs = []
    for k in (4, 8, 16):
        cfg = SpdeConfig(0.0, 4, dt=0.25 / 16 / k)
        got = spde_step(mu, env, cfg, np.random.default_rng(0)).flat
        exact = sla.expm(cfg.dt * laplacian_matrix(box).toarray()) @ mu.flat
        errs.append(np.max(np.abs(got - exact)))
    # local error O(dt^2)
    assert 3.5 < errs[0] / errs[1] < 4.5 and 3.5 < errs[1] / errs[2] < 4.5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_aborts():
    box = LatticeBox(1, 4, 4)
    env = Environment.from_values(box, 1e300)
    with pytest.raises(SpdeAbort):
        spde_step(Field.constant(box, 1e300), env, SpdeConfig(0.0, 4), np.random.default_rng(0))
    with pytest.raises(SpdeAbort) as err:
        spde_ensemble(env, SpdeConfig(0.0, 4), [0.01], [Field.constant(box, 1.0)], 2,
                      mu0=Field.constant(box, 1e300))
    assert err.value.step == 0


def test_observation_time_validation(env1, box1):
    with pytest.raises(ValueError):
        spde_ensemble(env1, SpdeConfig(1.0, 4), [0.2, 0.1], [Field.constant(box1, 1.0)], 1)


def test_split_scheme_preserves_mean():
    box = LatticeBox(1, 4, 4)
    env = sample_environment(EnvironmentSpec("rademacher", box, 3))
    phi = gaussian(box)
    t = 0.25
    ens = spde_ensemble(env, SpdeConfig(1.0, 4, noise_seed=5, scheme="split"), [0.0, t], [phi], 4000)
    x = ens.path.values[:, 1, 0]
    exact = semigroup_apply(env, phi, t).at_origin()
    assert ens.path.values[0, 0, 0] == pytest.approx(phi.at_origin())
    assert abs(x.mean() - exact) < 3 * x.std(ddof=1) / math.sqrt(x.size)
    assert x.min() >= 0


def test_reproducible_per_path(env1, box1):
    phi = gaussian(box1)
    cfg = SpdeConfig(1.0, 4, noise_seed=9)
    a = spde_ensemble(env1, cfg, [0.1], [phi], 6, batch=6).path.values
    b = spde_ensemble(env1, cfg, [0.1], [phi], 6, batch=4).path.values
    assert a.tobytes() == b.tobytes()


def test_clip_fraction_small_for_heavy_mass():
    box = LatticeBox(1, 8, 4)
    env = sample_environment(EnvironmentSpec("rademacher", box, 0))
    ens = spde_ensemble(env, SpdeConfig(1.0, 8), [0.25], [Field.constant(box, 1.0)], 200,
                        mu0=Field.constant(box, 20.0))
    assert ens.clip_fraction.shape == (int(round(0.25 / SpdeConfig(1.0, 8).dt)),)
    assert ens.clip_fraction.max() < 0.01


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="clipping at zero biases the Euler mean upwards by about 15 standard errors")
def test_euler_mean_identity():
    box = LatticeBox(1, 8, 4)
    env = sample_environment(EnvironmentSpec("rademacher", box, 0))
    phi = gaussian(box)
    ens = spde_ensemble(env, SpdeConfig(1.0, 8, noise_seed=2), [0.25], [phi], 10_000)
    x = ens.path.values[:, 0, 0]
    exact = semigroup_apply(env, phi, 0.25).at_origin()
    assert abs(x.mean() - exact) < 3 * x.std(ddof=1) / math.sqrt(x.size)
