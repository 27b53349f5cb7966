import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rwrp.environment import (
    Constant,
    Gaussian,
    IIDEnvironment,
    PeriodicEnvironment,
    RWREPotential,
    SitePotential,
    TiltedPotential,
)
from rwrp.geometry import build_geometry, plan_for
from rwrp.transfer import (
    BudgetError,
    Unreachable,
    brute_force_log_partition,
    endpoint_distribution,
    estimate_free_energy,
    extrapolate,
    final_layer,
    log_partition_line,
    log_partition_point,
    perron_free_energy,
    run_dp,
)


def test_zero_potential_free_walk(line12):
    env = IIDEnvironment(Gaussian(0, 1), seed=1)
    for n in (0, 1, 7, 50):
        assert abs(log_partition_line(env, SitePotential(beta=0.0), line12, n)) < 1e-12


def test_constant_potential(line12):
    env = IIDEnvironment(Constant(0.7))
    assert log_partition_line(env, SitePotential(), line12, 30) == pytest.approx(21.0, abs=1e-10)


def test_periodic_matches_enumeration(line12, period2, site):
    assert log_partition_line(period2, site, line12, 6) == pytest.approx(
        brute_force_log_partition(period2, site, line12, 6), abs=1e-12
    )


def test_point_free_walk_binomial(line12):
    env = IIDEnvironment(Constant(0.0))
    plan = plan_for(line12, (Fraction(3, 2),), 4)
    assert plan.endpoint == (6,)
    assert log_partition_point(env, SitePotential(), line12, 4, plan) == pytest.approx(math.log(6 / 16), abs=1e-14)


def test_extreme_point_ray_average(line12, period2, site):
    # only the path repeating step 2 reaches 2n; it sits on even sites (value 0)
    for n in (5, 12):
        plan = plan_for(line12, (Fraction(2),), n)
        assert log_partition_point(period2, site, line12, n, plan) == pytest.approx(n * math.log(0.5), abs=1e-12)
    # step 1 alternates 0,1: sum of g over k < n is floor(n/2)
    plan = plan_for(line12, (Fraction(1),), 9)
    assert log_partition_point(period2, site, line12, 9, plan) == pytest.approx(9 * math.log(0.5) + 4, abs=1e-12)


def test_unreachable_point(line12):
    layer = final_layer(IIDEnvironment(Constant(0.0)), SitePotential(), line12, 3)
    v = layer.log_mass_at((7,))
    assert isinstance(v, Unreachable) and v == -math.inf


def test_endpoint_distribution_examples(line12):
    env = IIDEnvironment(Constant(0.0))
    assert endpoint_distribution(env, SitePotential(), line12, 0) == {(0,): pytest.approx(1.0)}
    d = endpoint_distribution(env, SitePotential(), line12, 2)
    assert d == {(2,): pytest.approx(0.25), (3,): pytest.approx(0.5), (4,): pytest.approx(0.25)}
    rwre = RWREPotential.deterministic([(1,), (2,)], [0.3, 0.7])
    d = endpoint_distribution(env, rwre, line12, 2)
    assert d[(2,)] == pytest.approx(0.09) and d[(3,)] == pytest.approx(0.42) and d[(4,)] == pytest.approx(0.49)


def test_endpoint_distribution_sums_to_one(spacetime1):
    env = IIDEnvironment(Gaussian(0, 1), seed=9)
    d = endpoint_distribution(env, SitePotential(beta=2.0), spacetime1, 40)
    assert abs(sum(d.values()) - 1) < 1e-12
    assert set(d) == {(k, 40) for k in range(41)}


def test_decomposition_and_shift(spacetime1):
    env = IIDEnvironment(Gaussian(0, 1), seed=4)
    pot = SitePotential(beta=1.3)
    layer = final_layer(env, pot, spacetime1, 60)
    from scipy.special import logsumexp

    assert logsumexp(layer.endpoint_logmass()) == pytest.approx(layer.log_total(), abs=1e-10)
    shifted = log_partition_line(env, SitePotential(beta=1.3, transform=lambda w: w + 0.25 / 1.3), spacetime1, 60)
    assert shifted == pytest.approx(layer.log_total() + 60 * 0.25, abs=1e-10)


def test_monotone_in_potential(spacetime1):
    env = IIDEnvironment(Gaussian(0, 1), seed=2)
    a = log_partition_line(env, SitePotential(beta=1.0), spacetime1, 40)
    b = log_partition_line(env, SitePotential(beta=1.0, transform=lambda w: np.maximum(w, 0.0)), spacetime1, 40)
    assert a <= b


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.integers(1, 40), st.integers(0, 10_000))
def test_tilt_identity(t, n, seed):
    geom = build_geometry(1, [(1,), (2,), (3,)])
    env = IIDEnvironment(Gaussian(0, 1), seed=seed)
    base = SitePotential(beta=0.8)
    a = final_layer(env, base, geom, n, ell=1)
    b = final_layer(env, TiltedPotential(base=base, t=(t,)), geom, n)
    for x in range(n, 3 * n + 1):
        assert b.log_mass_at((x,)) == pytest.approx(a.log_mass_at((x,)) + t * x, abs=1e-9)


def test_budget_error():
    geom = build_geometry(2, [(0, 1), (1, 1), (2, 1)])
    with pytest.raises(BudgetError):
        log_partition_line(IIDEnvironment(Constant(0.0)), SitePotential(), geom, 100, max_states=50)


def test_checkpoints(line12, period2, site):
    layers = run_dp(period2, site, line12, 10, checkpoints=[3, 10])
    assert [l.stage for l in layers] == [3, 10]


def test_perron_examples(line12, period2, site):
    assert perron_free_energy(PeriodicEnvironment(np.array([0.4])), site, line12) == pytest.approx(0.4, abs=1e-12)
    t = 0.7
    z = PeriodicEnvironment(np.array([0.0]))
    assert perron_free_energy(z, SitePotential(), line12, tilt=(t,)) == pytest.approx(
        math.log(0.5 * math.exp(t) + 0.5 * math.exp(2 * t)), abs=1e-12
    )
    # 2x2 closed form: from either residue the next residue is 0 or 1 w.p. 1/2,
    # weight e^{g(current)}; rho = (1 + e)/2
    assert perron_free_energy(period2, site, line12) == pytest.approx(math.log((1 + math.e) / 2), abs=1e-12)


def test_perron_restricted_to_reachable_class():
    # even steps never leave the even residue, whose site value is 0
    geom = build_geometry(1, [(2,), (4,)])
    env = PeriodicEnvironment(np.array([0.0, 1.0]))
    assert perron_free_energy(env, SitePotential(), geom) == pytest.approx(0.0, abs=1e-12)


def test_extrapolate_inverse_model():
    ns = [100, 200, 400, 800]
    vals = [1.5 + 2.0 / n for n in ns]
    a, err, rms = extrapolate(ns, vals, "inverse")
    assert a == pytest.approx(1.5, abs=1e-12) and rms < 1e-12


def test_estimate_free_energy_periodic(line12, period2, site):
    s = estimate_free_energy(period2, site, line12, [250, 500, 1000])
    assert abs(s.estimate - perron_free_energy(period2, site, line12)) < 1e-3


def test_estimate_free_energy_mean_velocity():
    geom = build_geometry(2, [(0, 1), (1, 1)])
    s = estimate_free_energy(IIDEnvironment(Constant(0.0)), SitePotential(), geom, [100, 200, 400], (Fraction(1, 2), Fraction(1)))
    assert abs(s.estimate) < 1e-2
