"""Batch experiments and their machine-readable outputs.

Every runner returns a :class:`RunResult`; :func:`emit_outputs` writes the
CSV (declared header, fixed float formatting) and a JSON summary that embeds
the resolved config.  Identical configs give byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np

from .config import SCHEMA_VERSION, ExperimentConfig, load_schema, parse_vector
from .duality import (
    build_tilt_table,
    in_relative_interior,
    legendre_exact,
    rate_function,
    rwre_point_prob_rate,
)
from .environment import PeriodicEnvironment
from .geometry import face_of, path_endpoint
from .transfer import (
    Unreachable,
    estimate_free_energy,
    extrapolate,
    iter_layers,
    perron_free_energy,
)

CONCENTRATION_CAVEAT = (
    "The constants B and c of the concentration bound are existential; this experiment can only "
    "confirm the exponential-decay shape, not the constants."
)

EXIT_OK, EXIT_ASSERT, EXIT_BUDGET = 0, 2, 3


@dataclass
class RunResult:
    kind: str
    metrics: dict
    header: list[str] | None = None
    rows: list[list] = field(default_factory=list)
    status: str = "ok"
    notes: list[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return {"ok": EXIT_OK, "assertion_failed": EXIT_ASSERT, "budget_or_infeasible": EXIT_BUDGET}[self.status]


# ---------------------------------------------------------------------------
# parallel map over seeds


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("RWRP_THREADS", "1")))
    except ValueError:
        return 1


def map_seeds(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """Ordered map; a process pool when ``RWRP_THREADS > 1``.

    Results come back in input order, so outputs do not depend on the
    worker count.
    """
    workers = n_workers() if workers is None else workers
    if workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def seed_stream(seed: int, k: int) -> list[int]:
    """``k`` independent environment seeds derived from one global seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(k, dtype=np.uint64)]


# ---------------------------------------------------------------------------
# helpers shared by runners


def _zeta_of(value, geom):
    if value is None:
        return None
    z = parse_vector(value)
    if len(z) != geom.dim:
        raise ValueError(f"velocity {z} has dimension {len(z)}, expected {geom.dim}")
    return z


def _point_series(env, pot, geom, zetas, ns, **kw) -> np.ndarray:
    """``F_n(xhat_n(zeta))/n`` for several velocities from one recursion."""
    reps = [face_of(geom, z)[1] for z in zetas]
    ns = sorted(set(int(n) for n in ns))
    want = set(ns)
    out = np.empty((len(zetas), len(ns)))
    j = 0
    for layer in iter_layers(env, pot, geom, ns[-1], **kw):
        if layer.stage in want:
            for i, rep in enumerate(reps):
                v = layer.log_mass_at(path_endpoint(rep, layer.stage).endpoint)
                if isinstance(v, Unreachable):
                    raise ValueError(f"xhat_n({zetas[i]}) unreachable at n={layer.stage}")
                out[i, j] = v / layer.stage
            j += 1
    return out


def _fmt(x) -> str:
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def velocity_grid(geom, k: int, endpoints=None) -> list[tuple]:
    """``k`` rational velocities on a segment of ``U``, endpoints included.

    Defaults to the segment between the first two extreme points.
    """
    if endpoints is None:
        ext = geom.extreme_points
        if len(ext) < 2:
            return [tuple(Fraction(c) for c in ext[0])]
        a, b = ext[0], ext[1]
    else:
        a, b = endpoints
    a = [Fraction(c) for c in a]
    b = [Fraction(c) for c in b]
    return [tuple(ai + Fraction(i, k - 1) * (bi - ai) for ai, bi in zip(a, b)) for i in range(k)]


def common_multiple_schedule(zetas, ns) -> list[int]:
    """Round each ``n`` up to a multiple of every velocity denominator, so ``xhat_n = n zeta``."""
    q = 1
    for z in zetas:
        for c in z:
            q = math.lcm(q, Fraction(c).denominator)
    return sorted(set(int(math.ceil(n / q) * q) for n in ns))


# ---------------------------------------------------------------------------
# concentration


@dataclass
class ConcentrationReport:
    ns: list[int]
    epsilon: float
    samples: int
    centering: str
    lambda_hat: float
    lambda_hat_error: float
    tail_freq: list[float]
    slope: float
    intercept: float
    B_hat: float
    envelope: list[float]
    strictly_decreasing: bool
    envelope_consistent: bool
    caveat: str = CONCENTRATION_CAVEAT


def _concentration_worker(args):
    raw, seed, zeta, ns = args
    cfg = ExperimentConfig(raw)
    geom = cfg.geometry()
    return _point_series(cfg.environment(seed), cfg.potential(geom), geom, [zeta], ns)[0].tolist()


def run_concentration(cfg: ExperimentConfig) -> ConcentrationReport:
    """Empirical tails of ``|F_n - n Lambda| >= n eps`` over independent environments.

    ``log(tail)`` is fitted linearly in ``n``; ``B = -slope/eps^2`` and the
    envelope is ``2 exp(-B eps^2 n)``.  Centering is ``Lambda`` (Perron on
    periodic models, otherwise a high-``n`` extrapolation) or the per-``n``
    empirical mean.
    """
    ex = cfg.experiment
    geom = cfg.geometry()
    pot = cfg.potential(geom)
    env0 = cfg.environment()
    lo, hi = pot.value_range(env0)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError("concentration needs a bounded potential (hypothesis of the concentration lemma)")
    if not geom.strictly_directed:
        raise ValueError("concentration needs a strictly directed step set")
    zeta = _zeta_of(ex.get("zeta"), geom) or tuple(Fraction(c).limit_denominator(10**6) for c in geom.mean_step)
    eps = float(ex.get("epsilon", 0.1))
    K = int(ex.get("samples", 500))
    ns = common_multiple_schedule([zeta], ex.get("n_schedule", [50, 100, 200, 400]))
    centering = ex.get("centering", "lambda")
    seeds = seed_stream(cfg.seed, K)
    F = np.asarray(map_seeds(_concentration_worker, [(cfg.raw, s, zeta, ns) for s in seeds]))

    lam_err = 0.0
    if centering == "mean":
        center = F.mean(axis=0)
        lam = float(center[-1])
    else:
        if "lambda_hat" in ex:
            lam = float(ex["lambda_hat"])
        elif isinstance(env0, PeriodicEnvironment):
            lam = legendre_exact(env0, pot, geom, zeta).value if in_relative_interior(geom, zeta) else math.nan
        else:
            big = common_multiple_schedule([zeta], ex.get("lambda_schedule", [400, 800, 1600]))
            ks = seed_stream(cfg.seed + 1, int(ex.get("lambda_samples", 40)))
            G = np.asarray(map_seeds(_concentration_worker, [(cfg.raw, s, zeta, big) for s in ks]))
            lam, lam_err, _ = extrapolate(big, G.mean(axis=0), ex.get("lambda_model", "inverse"))
        center = np.full(len(ns), lam)
    freq = (np.abs(F - center[None, :]) >= eps).mean(axis=0)
    nsa = np.asarray(ns, dtype=float)
    pos = freq > 0
    if pos.sum() >= 2:
        slope, intercept = np.polyfit(nsa[pos], np.log(freq[pos]), 1)
    else:
        slope, intercept = math.nan, math.nan
    B = -slope / eps**2 if math.isfinite(slope) else math.nan
    env_vals = 2 * np.exp(-B * eps**2 * nsa) if math.isfinite(B) else np.full(len(ns), math.nan)
    dec = bool(np.all(pos) and np.all(np.diff(freq) < 0))
    consistent = bool(math.isfinite(B) and B > 0 and np.all(freq <= env_vals))
    return ConcentrationReport(
        ns=ns,
        epsilon=eps,
        samples=K,
        centering=centering,
        lambda_hat=float(lam),
        lambda_hat_error=float(lam_err),
        tail_freq=freq.tolist(),
        slope=float(slope),
        intercept=float(intercept),
        B_hat=float(B),
        envelope=env_vals.tolist(),
        strictly_decreasing=dec,
        envelope_consistent=consistent,
    )


# ---------------------------------------------------------------------------
# continuity scan


@dataclass
class ContinuityScan:
    zetas: list[tuple]
    interior: list[bool]
    values: list[float]
    errors: list[float]
    reference: list[float | None]  # Legendre of Perron tilts (periodic only)
    max_jump: float
    concavity_residual: float  # max violation of midpoint concavity along the grid


def run_continuity_scan(cfg: ExperimentConfig) -> ContinuityScan:
    """``Lambda(g, zeta)`` along a velocity segment including its end points."""
    ex = cfg.experiment
    geom = cfg.geometry()
    pot = cfg.potential(geom)
    env = cfg.environment()
    k = int(ex.get("zeta_grid", 11))
    ends = ex.get("segment")
    zetas = velocity_grid(geom, k, None if ends is None else [parse_vector(e) for e in ends])
    ns = common_multiple_schedule(zetas, ex.get("n_schedule", [200, 400, 800]))
    F = _point_series(env, pot, geom, zetas, ns)
    vals, errs, ref, inter = [], [], [], []
    for i, z in enumerate(zetas):
        ri = in_relative_interior(geom, z)
        a, e, _ = extrapolate(ns, F[i], "log" if ri else "inverse")
        vals.append(a)
        errs.append(e)
        inter.append(ri)
        if isinstance(env, PeriodicEnvironment) and ri:
            ref.append(legendre_exact(env, pot, geom, z).value)
        else:
            ref.append(None)
    v = np.asarray(vals)
    jump = float(np.max(np.abs(np.diff(v)))) if v.size > 1 else 0.0
    conc = float(np.max(np.maximum(0.0, (v[:-2] + v[2:]) / 2 - v[1:-1]))) if v.size > 2 else 0.0
    return ContinuityScan(zetas, inter, vals, errs, ref, jump, conc)


# ---------------------------------------------------------------------------
# runners for the command-line kinds


def run_dp(cfg: ExperimentConfig, target: str = "line", zeta=None, n_schedule=None, prune=False) -> RunResult:
    geom = cfg.geometry()
    env = cfg.environment()
    pot = cfg.potential(geom)
    z = _zeta_of(zeta, geom) if target == "point" else None
    ns = sorted(set(int(n) for n in (n_schedule or [100, 200, 400])))
    series = estimate_free_energy(env, pot, geom, ns, z, prune=prune)
    rows = [[n, v * n, v] for n, v in zip(series.ns, series.values)]
    metrics = {
        "target": target,
        "zeta": None if z is None else [str(c) for c in z],
        "extrapolate": series.estimate,
        "error": series.error,
        "residual": series.residual,
        "model": series.model,
        "states_max": _states_max(geom, ns[-1], pot.ell),
    }
    if isinstance(env, PeriodicEnvironment):
        if z is None:
            metrics["perron"] = perron_free_energy(env, pot, geom)
        elif in_relative_interior(geom, z):
            metrics["perron_legendre"] = legendre_exact(env, pot, geom, z).value
    return RunResult("dp", metrics, ["n", "logZ", "F_over_n"], rows, notes=series.notes)


def _states_max(geom, n, ell):
    from .transfer import state_budget

    return state_budget(geom, n, ell)


def run_duality(cfg: ExperimentConfig, radius=None, step=None, k=None) -> RunResult:
    ex = cfg.experiment
    geom = cfg.geometry()
    env = cfg.environment()
    pot = cfg.potential(geom)
    radius = float(radius if radius is not None else ex.get("tilt_radius", 4.0))
    step = float(step if step is not None else ex.get("tilt_step", radius / 20))
    ppa = int(round(2 * radius / step)) + 1
    zetas = velocity_grid(geom, int(k if k is not None else ex.get("zeta_grid", 9)))
    ns = ex.get("n_schedule", [100, 200, 400])
    table = build_tilt_table(env, pot, geom, radius=radius, points_per_axis=ppa, n_schedule=ns)
    lam_line = table.at_zero()
    rt = rate_function(table, lam_line, zetas, line_error=table.error)
    rows = []
    for z, u, i, e in zip(rt.zetas, rt.lambda_usc, rt.rate, rt.errors):
        rows.append([*z, u, i, e])
    header = [f"zeta_{j + 1}" for j in range(geom.dim)] + ["lambda_usc", "I", "err"]
    metrics = {
        "lambda_line": lam_line,
        "tilts": int(table.tilts.shape[0]),
        "tilt_radius": radius,
        "min_I": rt.min_rate,
        "flags": rt.flags,
        "provenance": sorted(set(table.provenance)),
    }
    return RunResult("duality", metrics, header, rows)


def run_rate(cfg: ExperimentConfig, zetas=None, n_schedule=None) -> RunResult:
    ex = cfg.experiment
    geom = cfg.geometry()
    env = cfg.environment()
    pot = cfg.potential(geom)
    zs = [_zeta_of(z, geom) for z in (zetas or ex.get("zetas") or [])] or [
        z for z in velocity_grid(geom, 7) if in_relative_interior(geom, z)
    ]
    ns = common_multiple_schedule(zs, n_schedule or ex.get("n_schedule", [100, 200, 400, 800]))
    rows = []
    vals = []
    for z in zs:
        a, e = rwre_point_prob_rate(env, pot, geom, z, ns)
        rows.append([*z, a, e])
        vals.append(a)
    header = [f"zeta_{j + 1}" for j in range(geom.dim)] + ["rate", "err"]
    return RunResult("rate", {"zetas": [[str(c) for c in z] for z in zs], "rates": vals, "n_schedule": ns}, header, rows)


def run_l2(cfg: ExperimentConfig, beta=None, zeta=None, n=None, samples=None) -> RunResult:
    from .l2 import AveragedMGF, verify_weak_disorder

    ex = cfg.experiment
    geom = cfg.geometry()
    pot = cfg.potential(geom)
    if beta is not None:
        pot = pot.with_beta(float(beta))
    marg = cfg.marginal()
    mgf = AveragedMGF.from_potential(pot, marg, geom)
    z = _zeta_of(zeta if zeta is not None else ex.get("zeta"), geom)
    n = int(n if n is not None else ex.get("n", 48))
    K = int(samples if samples is not None else ex.get("samples", 20))
    ns = common_multiple_schedule([z], [max(1, n // 4), n // 2, 3 * n // 4, n])
    rep = verify_weak_disorder(mgf, lambda s: cfg.environment(s), pot, geom, z, ns, seed_stream(cfg.seed, K))
    metrics = {
        "lambda": rep.lambda_value,
        "lambda_star": rep.lambda_star,
        "theta": rep.theta,
        "dp_estimate": rep.dp_estimate,
        "extrapolation_error": rep.extrapolation_error,
        "gap": rep.gap,
        "se": rep.se,
        "var_trace": rep.var_trace,
        "n_schedule": rep.ns,
        "diagnostic": rep.diagnostic,
        "weak_disorder_test": "none: the weak-disorder threshold is not constructive, only diagnostics are reported",
    }
    rows = [[n_, m, s, v] for n_, m, s, v in zip(rep.ns, rep.mean_values, rep.se_values, rep.var_trace)]
    return RunResult("l2", metrics, ["n", "mean_F_over_n", "se", "var_W"], rows, notes=rep.notes)


def run_entropy(cfg: ExperimentConfig, zeta=None, gap=1e-6) -> RunResult:
    from .entropy import FiniteMarkovModel, maximize_variational

    ex = cfg.experiment
    geom = cfg.geometry()
    env = cfg.environment()
    if not isinstance(env, PeriodicEnvironment):
        raise ValueError("the entropy solver runs on periodic (finite) models")
    pot = cfg.potential(geom)
    z = _zeta_of(zeta if zeta is not None else ex.get("zeta"), geom)
    model = FiniteMarkovModel.from_periodic(env, geom, pot, ell=int(ex.get("ell", max(pot.ell, 1))))
    res = maximize_variational(model, z, float(ex.get("c", math.inf)))
    status = "ok" if res.gap <= float(gap) else "assertion_failed"
    rows = [[i, j, res.nu[i, j]] for i in range(res.nu.shape[0]) for j in range(res.nu.shape[1])]
    metrics = {
        "value": res.value,
        "gap": res.gap,
        "dual_bound": res.dual_bound,
        "constraint_residual": res.constraint_residual,
        "states": model.n_states,
        "solver_status": res.status,
        "iterations": res.iterations,
        "tilt": res.tilt.tolist(),
        "nu": None,  # filled with the CSV name on output
    }
    return RunResult("entropy", metrics, ["state", "step", "nu"], rows, status=status)


def run_concentration_cli(cfg: ExperimentConfig) -> RunResult:
    rep = run_concentration(cfg)
    rows = [[n, f, e] for n, f, e in zip(rep.ns, rep.tail_freq, rep.envelope)]
    metrics = {
        "n": rep.ns,
        "epsilon": rep.epsilon,
        "samples": rep.samples,
        "centering": rep.centering,
        "lambda_hat": rep.lambda_hat,
        "lambda_hat_error": rep.lambda_hat_error,
        "tail_freq": rep.tail_freq,
        "B_hat": rep.B_hat,
        "slope": rep.slope,
        "intercept": rep.intercept,
        "strictly_decreasing": rep.strictly_decreasing,
        "envelope_consistent": rep.envelope_consistent,
        "caveat": rep.caveat,
    }
    return RunResult("concentration", metrics, ["n", "tail_freq", "fit_envelope"], rows, notes=[rep.caveat])


def run_continuity_cli(cfg: ExperimentConfig) -> RunResult:
    scan = run_continuity_scan(cfg)
    geom = cfg.geometry()
    rows = [[*z, v, e, "" if r is None else r, int(ri)] for z, v, e, r, ri in zip(scan.zetas, scan.values, scan.errors, scan.reference, scan.interior)]
    header = [f"zeta_{j + 1}" for j in range(geom.dim)] + ["lambda", "err", "legendre_reference", "interior"]
    metrics = {"max_jump": scan.max_jump, "concavity_residual": scan.concavity_residual, "points": len(scan.zetas)}
    return RunResult("continuity", metrics, header, rows)


# ---------------------------------------------------------------------------
# output


def render_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(result.header)
    for r in result.rows:
        w.writerow(["" if c == "" else _fmt(c) for c in r])
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, (np.floating, float)):
        f = float(x)
        return f if math.isfinite(f) else str(f)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def summary(result: RunResult, cfg: ExperimentConfig | None, csv_name: str | None, wall_ms: float | None = None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": result.kind,
        "config": cfg.resolved() if cfg is not None else None,
        "metrics": _jsonable(result.metrics),
        "status": result.status,
        "csv": csv_name,
        "notes": list(result.notes),
    }
    if wall_ms is not None:
        doc["wall_ms"] = float(wall_ms)
    jsonschema.validate(doc, load_schema("summary.schema.json"))
    return doc


def emit_outputs(result: RunResult, cfg: ExperimentConfig | None, out_dir=None, prefix=None, wall_ms=None) -> dict:
    """Write ``<prefix>_<kind>.csv`` and ``<prefix>_<kind>.json``; returns the summary."""
    out_cfg = (cfg.raw.get("output", {}) if cfg is not None else {})
    d = Path(out_dir or out_cfg.get("dir", "."))
    prefix = prefix or out_cfg.get("prefix", "rwrp")
    d.mkdir(parents=True, exist_ok=True)
    csv_name = None
    if result.header is not None:
        csv_name = f"{prefix}_{result.kind}.csv"
        (d / csv_name).write_text(render_csv(result))
        if "nu" in result.metrics:
            result.metrics["nu"] = csv_name
    doc = summary(result, cfg, csv_name, wall_ms)
    (d / f"{prefix}_{result.kind}.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return doc
