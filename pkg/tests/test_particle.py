import math

import numpy as np
import pytest
import scipy.linalg as sla
from scipy import stats

from conftest import gaussian
from rsbm.environment import Environment, philox
from rsbm.lattice import Field, LatticeBox
from rsbm.particle import (
    BranchingSpec,
    ParticleState,
    PopulationCapExceeded,
    coupled_killed_ensemble,
    init_state,
    initial_mass,
    killed_region,
    killed_simulate,
    simulate_ensemble,
    simulate_path,
    step,
)
from rsbm.pam import semigroup_apply


def test_initial_mass_examples():
    assert init_state(LatticeBox(1, 4, 4), 0.5).population == 2
    assert init_state(LatticeBox(1, 4, 4), 0.0).population == 1
    s = init_state(LatticeBox(2, 3, 4), 1.0)
    assert s.population == 3 and s.occupation == {(0, 0): 3} and s.mass_unit == 3
    assert initial_mass(4, 0.5) == 2 and initial_mass(8, 1.5) == 22


def test_state_invariants():
    box = LatticeBox(1, 2, 4)
    s = ParticleState(box, {(0,): 2, (1,): 0})
    assert s.occupation == {(0,): 2}
    with pytest.raises(ValueError):
        ParticleState(box, {(4,): 1})
    with pytest.raises(ValueError):
        ParticleState(box, {(0,): -1})
    assert ParticleState.from_counts(box, s.counts()).occupation == s.occupation


def test_branching_spec_validation():
    with pytest.raises(ValueError):
        BranchingSpec("offspring", 0.5, (0.3, 0.3, 0.4))  # mean 1.1
    with pytest.raises(ValueError):
        BranchingSpec("ternary")
    spec = BranchingSpec("offspring", 1.0, (0.25, 0.5, 0.25))
    assert spec.sigma2 == pytest.approx(0.5)
    assert spec.offspring_rate(4) == pytest.approx(2.0)
    assert BranchingSpec().sigma2 == 0.0


def test_waiting_time_and_isotropy():
    box = LatticeBox(2, 2, 4)
    env = Environment.zero(box)
    spec = BranchingSpec()
    state = init_state(box, 0.0)
    rng = np.random.default_rng(1)
    waits, dirs = [], []
    s = box.sites_per_side
    for _ in range(100_000):
        new, rec = step(state, env, spec, rng)
        waits.append(rec.waiting_time)
        delta = tuple(((b - a + s // 2) % s) - s // 2 for a, b in zip(rec.site, rec.target))
        dirs.append(delta)
        state = new
    waits = np.array(waits)
    rate = 2 * box.d * box.n**2
    assert abs(waits.mean() - 1 / rate) < 3 * waits.std(ddof=1) / math.sqrt(waits.size)
    labels = {(1, 0): 0, (-1, 0): 1, (0, 1): 2, (0, -1): 3}
    counts = np.bincount([labels[d] for d in dirs], minlength=4)
    assert stats.chisquare(counts).pvalue > 0.01


def test_empty_state_is_absorbing():
    box = LatticeBox(1, 2, 4)
    empty = ParticleState(box, {})
    out, rec = step(empty, Environment.zero(box), BranchingSpec(), np.random.default_rng(0))
    assert rec is None and out.population == 0


def test_binary_population_unit_jumps():
    box = LatticeBox(1, 2, 4)
    env = Environment.from_values(box, np.linspace(-3, 3, 8))
    state = init_state(box, 1.0)
    rng = np.random.default_rng(2)
    pops = [state.population]
    for _ in range(2000):
        state, rec = step(state, env, BranchingSpec(), rng)
        if rec is None:
            break
        pops.append(state.population)
    diffs = np.diff(pops)
    assert np.all(np.isin(diffs, (-1, 0, 1)))
    assert min(pops) >= 0


def test_constant_growth_mean():
    box = LatticeBox(1, 2, 4)
    c, t = 2.0, 1.0
    env = Environment.from_values(box, c)
    state = init_state(box, 1.0)
    path = simulate_ensemble(state, env, BranchingSpec("binary", 1.0), [t], [Field.constant(box, 1.0)], 4000, 5)
    pop = path.population[:, 0]
    expected = state.population * math.exp(c * t)
    assert abs(pop.mean() - expected) < 3 * pop.std(ddof=1) / math.sqrt(pop.size)


def test_path_starts_at_phi0():
    box = LatticeBox(1, 4, 4)
    phi = gaussian(box)
    path = simulate_path(init_state(box, 0.5), Environment.zero(box), BranchingSpec(), [0.0, 0.1], [phi],
                         philox(0, 0))
    assert path.values[0, 0, 0] == pytest.approx(phi.at_origin())


def test_free_walk_mean_matches_heat_semigroup():
    box = LatticeBox(1, 4, 4)
    env = Environment.zero(box)
    phi = gaussian(box)
    t = 0.3
    path = simulate_ensemble(init_state(box, 0.5), env, BranchingSpec(), [t], [phi], 10_000, 3)
    exact = semigroup_apply(env, phi, t).at_origin()
    assert abs(path.mean()[0] - exact) < 3 * path.stderr()[0]


def test_killed_survival_matches_dirichlet_kernel():
    n, L, t = 2, 2, 0.2
    box = LatticeBox(1, n, 4)
    env = Environment.zero(box)
    path = simulate_ensemble(init_state(box, 0.0), env, BranchingSpec(), [t], [Field.constant(box, 1.0)],
                             20_000, 9, L=L)
    survived = path.population[:, 0]
    # interior of (-1, 1) at spacing 1/2: three sites, Dirichlet path-graph Laplacian
    A = n**2 * (np.diag([-2.0] * 3) + np.diag([1.0] * 2, 1) + np.diag([1.0] * 2, -1))
    exact = sla.expm(t * A)[1].sum()
    assert abs(survived.mean() - exact) < 3 * survived.std(ddof=1) / math.sqrt(survived.size)


def test_killed_observable_outside_box_is_zero():
    box = LatticeBox(1, 2, 8)
    phi = Field(box, killed_region(box, 4).reshape(box.shape).astype(float))
    env = Environment.from_values(box, 1.0)
    path = killed_simulate(init_state(box, 1.0), env, BranchingSpec("binary", 1.0), 4, [0.5, 1.0], [phi],
                           np.random.default_rng(3))
    assert np.all(path.values == 0)
    with pytest.raises(ValueError):
        killed_region(box, 3)


def test_coupled_killed_below_free():
    box = LatticeBox(1, 2, 8)
    env = Environment.from_values(box, np.where(np.arange(16) % 3 == 0, 2.0, -1.0))
    phi = gaussian(box, 2.0)
    killed, free = coupled_killed_ensemble(init_state(box, 1.0), env, BranchingSpec("binary", 1.0), 4,
                                           [0.25, 0.5, 1.0], [phi], 300, 4)
    assert np.all(killed.values <= free.values + 1e-12)
    assert np.all(killed.population <= free.population)
    # the free half is the ordinary process
    plain = simulate_ensemble(init_state(box, 1.0), env, BranchingSpec("binary", 1.0), [0.25, 0.5, 1.0], [phi],
                              300, 4)
    assert abs(plain.mean()[-1] - free.mean()[-1]) < 4 * math.hypot(plain.stderr()[-1], free.stderr()[-1])


def test_reproducible_and_thread_invariant():
    box = LatticeBox(1, 4, 4)
    env = Environment.from_values(box, np.tile([2.0, -2.0], 8))
    phi = gaussian(box)
    args = (init_state(box, 0.5), env, BranchingSpec(), [0.25, 0.5], [phi], 200, 17)
    a = simulate_ensemble(*args, max_threads=1)
    b = simulate_ensemble(*args, max_threads=1)
    c = simulate_ensemble(*args, max_threads=3)
    assert a.values.tobytes() == b.values.tobytes() == c.values.tobytes()
    assert np.array_equal(a.population, c.population)


def test_offspring_extinction_matches_galton_watson():
    box = LatticeBox(1, 4, 4)
    spec = BranchingSpec("offspring", 1.0, (0.5, 0.0, 0.5))
    t = 5.0
    N = initial_mass(4, 1.0)
    path = simulate_ensemble(init_state(box, 1.0), Environment.zero(box), spec, [t], [Field.constant(box, 1.0)],
                             10_000, 6)
    extinct = path.population[:, 0] == 0
    r = spec.offspring_rate(4)
    # generating function solves dF/dt = (r/2)(1 - F)^2, so one line dies by t w.p. 1 - 1/(1 + r t/2)
    exact = (1 - 1 / (1 + r * t / 2)) ** N
    assert abs(extinct.mean() - exact) < 3 * math.sqrt(exact * (1 - exact) / extinct.size)


def test_population_cap_aborts_replica():
    box = LatticeBox(1, 2, 4)
    env = Environment.from_values(box, 30.0)  # P(pop(1) < 50) ~ 50 e^-30
    path = simulate_ensemble(init_state(box, 0.0), env, BranchingSpec(), [1.0], [Field.constant(box, 1.0)], 20, 0,
                             pop_cap=50)
    assert path.aborted.all()
    assert path.column(0).shape == (0, 1)
    with pytest.raises(PopulationCapExceeded):
        simulate_path(init_state(box, 0.0), env, BranchingSpec(), [1.0], [Field.constant(box, 1.0)],
                      np.random.default_rng(0), pop_cap=50)


def test_measure_path_csv(tmp_path):
    box = LatticeBox(1, 2, 4)
    path = simulate_ensemble(init_state(box, 0.0), Environment.zero(box), BranchingSpec(), [0.0, 0.5],
                             [Field.constant(box, 1.0)], 3, 0)
    path.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "replica,time,field_id,value,population"
    assert len(lines) == 1 + 3 * 2
