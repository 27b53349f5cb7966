"""Acceptance criteria 1-10, one test each, each recording a PASS/FAIL line."""
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from rwrp.config import ExperimentConfig
from rwrp.duality import build_tilt_table, legendre_exact, legendre_usc, rate_function, rwre_point_prob_rate
from rwrp.entropy import FiniteMarkovModel, maximize_variational
from rwrp.environment import (
    Bernoulli,
    Gaussian,
    GeneralPotential,
    IIDEnvironment,
    PeriodicEnvironment,
    RWREPotential,
    SitePotential,
    StepPotential,
    StretchedPotential,
    TiltedPotential,
)
from rwrp.experiments import run_concentration, run_continuity_scan, seed_stream, velocity_grid
from rwrp.geometry import build_geometry, coefficient_transport
from rwrp.l2 import AveragedMGF, build_gibbs_pair, simulate_W, solve_tilt, verify_weak_disorder
from rwrp.transfer import (
    brute_force_endpoint_logmass,
    estimate_free_energy,
    final_layer,
    iter_layers,
    perron_free_energy,
)

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


# ---------------------------------------------------------------------------
# 1. DP equals enumeration


def _random_problem(rng):
    d = int(rng.integers(1, 3))
    R = int(rng.integers(2, 4))
    while True:
        steps = {tuple(int(c) for c in rng.integers(-2, 3, size=d)) for _ in range(R)}
        if len(steps) == R:
            break
    steps = sorted(steps)
    w = rng.random(R) + 0.2
    geom = build_geometry(d, steps, list(w / w.sum()))
    kind = rng.integers(3)
    if kind == 0:
        env = IIDEnvironment(Gaussian(0.0, 1.0), seed=int(rng.integers(1 << 31)))
    elif kind == 1:
        env = IIDEnvironment(Bernoulli(0.4, -1.0, 1.0), seed=int(rng.integers(1 << 31)))
    else:
        env = PeriodicEnvironment(rng.choice([-1.0, 1.0], size=tuple(int(L) for L in rng.integers(1, 4, size=d))))
    beta = float(rng.uniform(0.1, 3.0))
    variant = ["site", "site1", "step", "stretched", "rwre", "general0", "general1"][int(rng.integers(7))]
    coef = rng.normal(size=(R, 2))
    if variant == "site":
        pot = SitePotential(beta=beta)
    elif variant == "site1":
        pot = SitePotential(beta=beta, transform=np.tanh, ell_=1)
    elif variant == "step":
        idx = {s: i for i, s in enumerate(steps)}
        pot = StepPotential(beta=beta, func=lambda w, z, c=coef, idx=idx: c[idx[z], 0] * w + c[idx[z], 1])
    elif variant == "stretched":
        pot = StretchedPotential(beta=beta, h=tuple(rng.normal(size=d)), psi=np.abs)
    elif variant == "rwre":
        k = rng.random((2, R)) + 0.1
        pot = RWREPotential.from_table(steps, [-1.0, 1.0], (k / k.sum(axis=1, keepdims=True)).tolist(), beta=beta)
        if kind == 0:
            env = IIDEnvironment(Bernoulli(0.5, -1.0, 1.0), seed=int(rng.integers(1 << 31)))
    elif variant == "general0":
        pot = GeneralPotential(beta=beta, func=lambda e, p, m: e.values(p) * e.values(p + 1), radius_=1)
    else:
        pot = GeneralPotential(beta=beta, func=lambda e, p, m: np.sin(e.values(p + m[0][None, :]) + m[0].sum()), ell_=1, radius_=2)
    return geom, env, pot, int(rng.integers(1, 11)), variant


def test_criterion_1_brute_force(criterion):
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    worst = 0.0
    variants = set()
    for _ in range(200):
        geom, env, pot, n, variant = _random_problem(rng)
        variants.add(variant)
        layer = final_layer(env, pot, geom, n)
        oracle = brute_force_endpoint_logmass(env, pot, geom, n)
        from scipy.special import logsumexp

        worst = max(worst, abs(layer.log_total() - logsumexp(list(oracle.values()))))
        assert {tuple(int(c) for c in x) for x in layer.positions} == set(oracle)
        for x, v in oracle.items():
            worst = max(worst, abs(layer.log_mass_at(x) - v))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and dt <= 120 and len(variants) == 7
    criterion(1, ok, f"max |DP - enumeration| = {worst:.2e} over 200 configs ({len(variants)} potential variants), {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. tilt identity


def test_criterion_2_tilt_identity(criterion):
    rng = np.random.default_rng(2)
    geom = build_geometry(2, [(-1, 1), (0, 1), (2, 1)])
    base = SitePotential(beta=1.0)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(50):
        env = IIDEnvironment(Gaussian(0, 1), seed=k)
        n = int(rng.integers(1, 201))
        t = rng.uniform(-1.5, 1.5, size=2)
        plain = final_layer(env, base, geom, n, ell=1)
        tilted = final_layer(env, TiltedPotential(base=base, t=tuple(t)), geom, n)
        pos = plain.positions
        x = pos[int(rng.integers(len(pos)))]
        worst = max(worst, abs(tilted.log_mass_at(x) - (plain.log_mass_at(x) + t @ x)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9
    criterion(2, ok, f"max |F(g+t.z1,x) - F(g,x) - t.x| = {worst:.2e} over 50 (t,x,n<=200), {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. Perron oracle


def test_criterion_3_perron(criterion):
    models = {
        "L=2": (build_geometry(1, [(1,), (2,)]), PeriodicEnvironment(np.array([0.0, 1.0]))),
        "L=3": (build_geometry(2, [(-1, 1), (0, 1), (1, 1)]), PeriodicEnvironment(np.array([[0.5], [-1.0], [2.0]]))),
    }
    pot = SitePotential(beta=1.0)
    t0 = time.perf_counter()
    details, ok = [], True
    for name, (geom, env) in models.items():
        lr = perron_free_energy(env, pot, geom)
        ratio = 0.0
        for layer in iter_layers(env, pot, geom, 2000):
            if layer.stage >= 100:
                ratio = max(ratio, abs(layer.log_total() / layer.stage - lr) * layer.stage)
        s = estimate_free_energy(env, pot, geom, [500, 1000, 2000])
        ok &= ratio <= 5 and abs(s.estimate - lr) <= 1e-3
        details.append(f"{name}: max n|F_n/n - log rho| = {ratio:.3f}, |extrap - log rho| = {abs(s.estimate - lr):.1e}")
    dt = time.perf_counter() - t0
    ok &= dt <= 60
    criterion(3, ok, "; ".join(details) + f", {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 4. sup formula, and 5. duality cross-check

PERIODIC_MODELS = [
    {"geometry": {"dim": 1, "steps": [[1], [2]]}, "environment": {"kind": "periodic", "table": [0.0, 1.0]}},
    {"geometry": {"dim": 2, "steps": [[-1, 1], [0, 1], [1, 1]]},
     "environment": {"kind": "periodic", "table": [[0.5], [-1.0], [2.0]]}},
]


def test_criterion_4_sup_formula(criterion):
    t0 = time.perf_counter()
    details, ok = [], True
    for m in PERIODIC_MODELS:
        cfg = ExperimentConfig.from_dict({**m, "experiment": {"zeta_grid": 21, "n_schedule": [400, 800, 1600]}})
        scan = run_continuity_scan(cfg)
        geom, env, pot = cfg.validate_model()
        line = estimate_free_energy(env, pot, geom, [400, 800, 1600]).estimate
        best = max(scan.values)
        ok &= abs(best - line) <= 2e-2
        details.append(f"|max_zeta - line| = {abs(best - line):.1e}")
    dt = time.perf_counter() - t0
    ok &= dt <= 120
    criterion(4, ok, ", ".join(details) + f" (21-point grids), {dt:.1f}s")
    assert ok


def test_criterion_5_duality(criterion):
    t0 = time.perf_counter()
    worst, ok = 0.0, True
    for m in PERIODIC_MODELS:
        cfg = ExperimentConfig.from_dict({**m, "experiment": {"zeta_grid": 11, "n_schedule": [400, 800, 1600]}})
        geom, env, pot = cfg.validate_model()
        table = build_tilt_table(env, pot, geom, radius=4.0, points_per_axis=41)
        assert table.tilts.shape[0] == 41 and set(table.provenance) == {"perron"}
        scan = run_continuity_scan(cfg)
        interior = [(z, v) for z, v, i in zip(scan.zetas, scan.values, scan.interior) if i]
        assert len(interior) == 9
        for z, v in interior:
            worst = max(worst, abs(legendre_usc(table, z).value - v))
    dt = time.perf_counter() - t0
    ok = worst <= 2e-2 and dt <= 180
    criterion(5, ok, f"max |legendre_usc - point DP| = {worst:.1e} at 9 interior velocities x 2 models, {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 6. entropy variational formula


def test_criterion_6_entropy(criterion):
    t0 = time.perf_counter()
    geom = build_geometry(2, [(-1, 1), (0, 1), (1, 1)])
    env = PeriodicEnvironment(np.random.default_rng(6).uniform(-1, 1, size=(4, 3)))
    pot = SitePotential(beta=1.0)
    model = FiniteMarkovModel.from_periodic(env, geom, pot, ell=1)
    dv = dg = dtv = 0.0
    for z in [(Fraction(-1, 3), Fraction(1)), (Fraction(0), Fraction(1)), (Fraction(1, 4), Fraction(1))]:
        res = maximize_variational(model, z)
        lv = legendre_exact(env, pot, geom, z)
        gp = build_gibbs_pair(env, pot, geom, lv.tilt, ell=1)
        assert gp.states == model.states
        dv = max(dv, abs(res.value - lv.value))
        dg = max(dg, res.gap)
        dtv = max(dtv, 0.5 * np.abs(res.nu - gp.occupation()).sum())
    dt = time.perf_counter() - t0
    ok = model.n_states <= 48 and dv <= 1e-3 and dg <= 1e-6 and dtv <= 1e-3 and dt <= 60
    criterion(6, ok, f"{model.n_states} states: |value - Perron-Legendre| = {dv:.1e}, gap = {dg:.1e}, TV = {dtv:.1e}, {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 7. L2 regime

SIMPLE3 = [s + (1,) for s in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]]


def test_criterion_7_l2(criterion):
    t0 = time.perf_counter()
    geom = build_geometry(4, SIMPLE3)
    pot = SitePotential(beta=0.2)
    mgf = AveragedMGF.from_potential(pot, Gaussian(0, 1), geom)
    zeta = (Fraction(0),) * 3 + (Fraction(1),)
    sol = solve_tilt(mgf, zeta)
    W = np.array([simulate_W(IIDEnvironment(Gaussian(0, 1), seed=s), pot, geom, sol.theta, 100, mgf=mgf).W
                  for s in seed_stream(7, 200)])
    se = W.std(ddof=1) / math.sqrt(W.size)
    ok_i = abs(W.mean() - 1) <= 4 * se
    rep = verify_weak_disorder(mgf, lambda s: IIDEnvironment(Gaussian(0, 1), seed=s), pot, geom, zeta,
                               [12, 18, 24, 30, 36, 42, 48], seed_stream(70, 20))
    ok_ii = abs(-sol.lambda_star - 0.02) <= 1e-12 and abs(rep.gap) <= 5e-2
    dt = time.perf_counter() - t0
    ok = ok_i and ok_ii and dt <= 600
    criterion(7, ok, f"(i) mean W_100 = {W.mean():.4f}, SE = {se:.4f}; (ii) DP = {rep.dp_estimate:.4f} vs "
                     f"-lambda* = {-sol.lambda_star:.4f}, gap = {rep.gap:+.4f}; {dt:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 8. coefficient transport


def _random_instance(rng):
    d = int(rng.integers(1, 4))
    while True:
        k = int(rng.integers(2, 7))
        pts = {tuple(int(c) for c in rng.integers(-3, 4, size=d)) for _ in range(k)}
        if len(pts) >= 2:
            break
    pts = sorted(pts)
    w = [Fraction(int(rng.integers(1, 20))) for _ in pts]
    beta = [wi / sum(w) for wi in w]
    zeta = tuple(sum(b * p[j] for b, p in zip(beta, pts)) for j in range(d))
    mix = [Fraction(int(rng.integers(0, 5))) for _ in pts]
    if sum(mix) == 0:
        mix[0] = Fraction(1)
    v = tuple(sum(m / sum(mix) * p[j] for m, p in zip(mix, pts)) for j in range(d))
    eps = [Fraction(1, 2)] + [Fraction(1, 10**e) for e in range(1, 12)]
    xis = [tuple(zj + e * (vj - zj) for zj, vj in zip(zeta, v)) for e in eps]
    return pts, beta, xis, zeta


def test_criterion_8_transport(criterion):
    rng = np.random.default_rng(8)
    t0 = time.perf_counter()
    bad = 0
    worst_final = 0.0
    for _ in range(1000):
        pts, beta, xis, zeta = _random_instance(rng)
        reps = coefficient_transport(pts, beta, xis)
        for r, xi in zip(reps, xis):
            if not (r.exact and sum(r.coefficients) == 1 and min(r.coefficients) >= 0 and r.barycenter() == xi
                    and all(isinstance(c, Fraction) for c in r.coefficients)):
                bad += 1
        gaps = [max(abs(float(a - b)) for a, b in zip(r.coefficients, beta)) for r in reps]
        dist = [max((abs(float(a - b)) for a, b in zip(xi, zeta)), default=0.0) for xi in xis]
        for g, dd in zip(gaps, dist):
            if dd <= 1e-8:
                worst_final = max(worst_final, g)
        if gaps[-1] > gaps[0] + 1e-15 and gaps[0] > 0:
            bad += 1
    dt = time.perf_counter() - t0
    ok = bad == 0 and worst_final <= 1e-6
    criterion(8, ok, f"1000 instances: {bad} invalid, max ||alpha - beta|| at ||xi - zeta|| <= 1e-8 is {worst_final:.1e}, {dt:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 9. concentration

CONCENTRATION = {
    "seed": 2024,
    "geometry": {"dim": 2, "steps": [[0, 1], [1, 1]]},
    "environment": {"kind": "iid", "marginal": {"kind": "bernoulli", "p": 0.5, "low": -1.0, "high": 1.0}},
    "potential": {"kind": "site", "beta": 4.0},
    "experiment": {"zeta": "1/2,1", "epsilon": 0.1, "samples": 500, "n_schedule": [50, 100, 200, 400]},
}


def test_criterion_9_concentration(criterion):
    t0 = time.perf_counter()
    rep = run_concentration(ExperimentConfig.from_dict(CONCENTRATION))
    dt = time.perf_counter() - t0
    ok = rep.strictly_decreasing and rep.B_hat > 0 and rep.envelope_consistent and rep.samples >= 100 and dt <= 600
    freqs = ", ".join(f"{f:.3f}" for f in rep.tail_freq)
    criterion(9, ok, f"tail frequencies [{freqs}] at n={rep.ns}, B_hat = {rep.B_hat:.3f}, "
                     f"below envelope = {rep.envelope_consistent}, {dt:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 10. rate function sanity


def test_criterion_10_rate(criterion):
    t0 = time.perf_counter()
    geom = build_geometry(2, [(1, 1), (-1, 1)])
    env = PeriodicEnvironment(np.array([[0.0], [1.0], [1.0]]))
    rwre = RWREPotential.from_table(geom.steps, [0.0, 1.0], [[0.7, 0.3], [0.35, 0.65]])
    table = build_tilt_table(env, rwre, geom, radius=4.0, points_per_axis=41)
    line = table.at_zero()
    grid = velocity_grid(geom, 21)
    rt = rate_function(table, line, grid, line_error=table.error)
    I = rt.rate
    convex = max(0.0, float(np.max(2 * I[1:-1] - I[:-2] - I[2:]))) if I.size > 2 else 0.0
    zs = [(Fraction(k, 5), Fraction(1)) for k in (-2, -1, 0, 1, 2)]
    worst = 0.0
    for z in zs:
        a, _ = rwre_point_prob_rate(env, rwre, geom, z, [300, 600, 1200, 2400])
        duality = line - legendre_usc(table, z).value
        worst = max(worst, abs(a - duality))
    dt = time.perf_counter() - t0
    ok = I.min() >= -2e-2 and abs(I.min()) <= 2e-2 and convex <= 1e-12 and worst <= 2e-2 and dt <= 300
    criterion(10, ok, f"min I = {I.min():.1e}, midpoint-convexity residual = {convex:.1e}, "
                      f"max |RWRE rate - duality| = {worst:.1e} at 5 velocities, {dt:.1f}s")
    assert ok
