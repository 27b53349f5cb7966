"""Tilted free energies, Legendre duality and quenched rate functions.

The tilted point-to-line free energy ``Lambda(g + t.z_1)`` is the limiting
log-mgf of the endpoint, so

    Lambda_usc(g, zeta) = inf_t { Lambda(g + t.z_1) - t.zeta }
    I(zeta)             = Lambda(g) - Lambda_usc(g, zeta).

Tilts are taken in ``span(R - R)``: a tilt orthogonal to that span adds the
same constant to ``t.z`` for every step and to ``t.zeta`` for every
``zeta`` in ``U``, so it cancels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .environment import PeriodicEnvironment, Potential
from .geometry import StepGeometry, face_of, path_endpoint
from .transfer import (
    Unreachable,
    extrapolate,
    iter_layers,
    perron,
    perron_gradient,
    transfer_operator,
)


class DomainError(ValueError):
    """Velocity outside ``U``."""


def span_frame(geom: StepGeometry) -> np.ndarray:
    """Orthonormal rows spanning ``span(R - R)``."""
    S = geom.steps_array.astype(float)
    D = S - S[0]
    if not np.any(D):
        return np.zeros((0, geom.dim))
    u, s, vt = np.linalg.svd(D, full_matrices=False)
    r = int(np.sum(s > 1e-10 * s.max()))
    return vt[:r]


def in_relative_interior(geom: StepGeometry, zeta) -> bool:
    if not geom.contains(zeta):
        return False
    face, _ = face_of(geom, zeta)
    return face.dim == geom.affine_dim


def tilt_grid(geom: StepGeometry, radius: float, points_per_axis: int) -> np.ndarray:
    """Axis-aligned lattice of tilts in the orthonormal frame of ``span(R-R)``.

    ``points_per_axis`` is forced odd so that ``t = 0`` is on the grid.
    """
    k = int(points_per_axis) | 1
    frame = span_frame(geom)
    axis = np.linspace(-radius, radius, k)
    if frame.shape[0] == 0:
        return np.zeros((1, geom.dim))
    coords = np.stack(np.meshgrid(*([axis] * frame.shape[0]), indexing="ij"), axis=-1).reshape(-1, frame.shape[0])
    return coords @ frame


@dataclass
class TiltedFreeEnergyTable:
    tilts: np.ndarray  # (k, d)
    values: np.ndarray
    errors: np.ndarray
    provenance: list[str]
    frame: np.ndarray  # orthonormal rows of span(R - R)
    radius: float
    points_per_axis: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("tilted free energies must be finite")
        if not np.any(np.all(np.abs(self.tilts) < 1e-15, axis=1)):
            raise ValueError("tilt grid must contain t = 0")

    @property
    def error(self) -> float:
        return float(np.max(self.errors)) if self.errors.size else 0.0

    def at_zero(self) -> float:
        i = int(np.argmin(np.abs(self.tilts).sum(axis=1)))
        return float(self.values[i])


def free_walk_table(geom: StepGeometry, tilts: np.ndarray, shift: float = 0.0) -> TiltedFreeEnergyTable:
    """``c + log sum_z p_z e^{t.z}``: the exact table of a constant potential ``c``."""
    vals = shift + logsumexp(geom.log_weights[None, :] + tilts @ geom.steps_array.T.astype(float), axis=1)
    k = tilts.shape[0]
    return TiltedFreeEnergyTable(tilts, vals, np.zeros(k), ["closed-form"] * k, span_frame(geom), math.nan, 0)


def build_tilt_table(
    env,
    potential: Potential,
    geom: StepGeometry,
    tilts: np.ndarray | None = None,
    *,
    radius: float = 3.0,
    points_per_axis: int = 41,
    n_schedule: Sequence[int] = (100, 200, 400),
    model: str = "inverse",
) -> TiltedFreeEnergyTable:
    """Free energies of ``g + t.z_1`` over a tilt grid.

    Periodic environments use the Perron root of the tilted operator (exact
    up to the eigenvalue residual).  Otherwise one recursion up to
    ``max(n_schedule)`` serves every tilt through the identity
    ``log Z_n(g + t.z_1) = log sum_x exp(F_n(x) + t.x)``, and each entry is
    extrapolated in ``n``.
    """
    if tilts is None:
        tilts = tilt_grid(geom, radius, points_per_axis)
    tilts = np.asarray(tilts, dtype=float).reshape(-1, geom.dim)
    k = tilts.shape[0]
    if isinstance(env, PeriodicEnvironment):
        vals, errs = np.empty(k), np.empty(k)
        for i, t in enumerate(tilts):
            res = perron(transfer_operator(env, potential, geom, t))
            vals[i] = res.log_rho
            errs[i] = max(res.residual, 1e-12)
        prov = ["perron"] * k
    else:
        ns = sorted(set(int(n) for n in n_schedule))
        series = np.empty((len(ns), k))
        j = 0
        for layer in iter_layers(env, potential, geom, ns[-1]):
            if layer.stage == ns[j]:
                lm = layer.endpoint_logmass()
                expo = lm[None, :] + tilts @ layer.positions.T.astype(float)
                series[j] = logsumexp(expo, axis=1) / layer.stage
                j += 1
                if j == len(ns):
                    break
        vals, errs = np.empty(k), np.empty(k)
        for i in range(k):
            a, e, _ = extrapolate(ns, series[:, i], model)
            vals[i], errs[i] = a, e
        prov = ["dp-extrapolated"] * k
    return TiltedFreeEnergyTable(tilts, vals, errs, prov, span_frame(geom), float(radius), int(points_per_axis))


@dataclass
class LegendreValue:
    zeta: tuple
    value: float
    error: float
    tilt: np.ndarray
    interior: bool  # optimal grid tilt is not on the grid boundary
    certified: bool  # interior, or outward slopes at the boundary are nonnegative


def _check_zeta(geom, zeta):
    if not geom.contains(zeta):
        raise DomainError(f"velocity {tuple(zeta)} is outside U")


def legendre_usc(table: TiltedFreeEnergyTable, zeta, geom: StepGeometry | None = None) -> LegendreValue:
    """``min_i {Lambda(t_i) - t_i.zeta}`` over the table.

    A finite minimum of affine functions of ``zeta``, hence concave, and an
    upper bound for the true value that can only decrease as tilts are
    added.
    """
    if geom is not None:
        _check_zeta(geom, zeta)
    z = np.asarray([float(c) for c in zeta])
    obj = table.values - table.tilts @ z
    i = int(np.argmin(obj))
    coords = table.tilts @ table.frame.T
    r = np.max(np.abs(coords)) if coords.size else 0.0
    on_edge = bool(coords.size and np.any(np.abs(np.abs(coords[i]) - r) < 1e-9 * max(r, 1.0)))
    # the objective is convex in t, so an interior grid minimiser means the
    # true minimiser is within one grid cell; on the edge it may escape
    return LegendreValue(tuple(zeta), float(obj[i]), float(table.errors[i]), table.tilts[i].copy(), not on_edge, not on_edge)


def adaptive_tilt_table(env, potential, geom, zetas, *, radius=2.0, points_per_axis=41, max_radius=64.0, **kw):
    """Grow the grid radius until every requested ``zeta`` has an interior optimal tilt."""
    while True:
        table = build_tilt_table(env, potential, geom, radius=radius, points_per_axis=points_per_axis, **kw)
        if all(legendre_usc(table, z).interior for z in zetas) or radius >= max_radius:
            return table
        radius *= 2


def legendre_exact(env: PeriodicEnvironment, potential, geom, zeta, t0=None, tol: float = 1e-12) -> LegendreValue:
    """Continuous minimisation of ``log rho(t) - t.zeta`` on a periodic model.

    Smooth and convex in ``t``; the gradient is the mean displacement of the
    Doob-transformed chain.  Only meaningful for ``zeta`` in ``ri U``.
    """
    _check_zeta(geom, zeta)
    z = np.asarray([float(c) for c in zeta])
    frame = span_frame(geom)
    cache = {}

    def f(c):
        t = c @ frame
        key = tuple(c)
        if key not in cache:
            res = perron(transfer_operator(env, potential, geom, t))
            cache[key] = (res.log_rho - t @ z, frame @ (perron_gradient(res) - z))
        return cache[key]

    c0 = np.zeros(frame.shape[0]) if t0 is None else frame @ np.asarray(t0, float)
    out = minimize(lambda c: f(c)[0], c0, jac=lambda c: f(c)[1], method="BFGS", options={"gtol": 1e-10, "maxiter": 500})
    grad = float(np.max(np.abs(f(out.x)[1]))) if frame.shape[0] else 0.0
    return LegendreValue(tuple(zeta), float(out.fun), grad, out.x @ frame, True, grad < 1e-6)


@dataclass
class RateFunctionTable:
    zetas: list[tuple]
    lambda_usc: np.ndarray
    rate: np.ndarray
    errors: np.ndarray
    lambda_line: float
    flags: list[str] = field(default_factory=list)

    @property
    def min_rate(self) -> float:
        return float(np.min(self.rate))


def rate_function(table: TiltedFreeEnergyTable, lambda_line: float, zetas, *, line_error: float = 0.0) -> RateFunctionTable:
    """``I(zeta) = Lambda(g) - Lambda_usc(g, zeta)`` on a velocity grid."""
    lv = [legendre_usc(table, z) for z in zetas]
    usc = np.asarray([v.value for v in lv])
    err = np.asarray([v.error for v in lv]) + line_error
    rate = lambda_line - usc
    flags = []
    eps = float(np.max(err)) if err.size else 0.0
    if rate.size and rate.min() > eps + 1e-9:
        flags.append("min_I_exceeds_error: Lambda_line inconsistent with the tilt table")
    if rate.size and rate.min() < -eps - 1e-9:
        flags.append("negative_I_beyond_error")
    return RateFunctionTable([tuple(z) for z in zetas], usc, rate, err, float(lambda_line), flags)


def cramer_rate(geom: StepGeometry, zeta, tilts: np.ndarray | None = None) -> float:
    """Free-walk rate ``sup_t {t.zeta - log sum_z p_z e^{t.z}}``.

    With a tilt table the same grid Legendre code is used; without one the
    supremum is computed by a continuous convex minimisation.
    """
    if tilts is not None:
        return -legendre_usc(free_walk_table(geom, tilts), zeta).value
    z = np.asarray([float(c) for c in zeta])
    frame = span_frame(geom)
    S = geom.steps_array.astype(float)
    lw = geom.log_weights

    def f(c):
        t = c @ frame
        e = lw + S @ t
        m = logsumexp(e)
        p = np.exp(e - m)
        return m - t @ z, frame @ (p @ S - z)

    out = minimize(f, np.zeros(frame.shape[0]), jac=True, method="BFGS", options={"gtol": 1e-12})
    return float(-out.fun)


def point_rate_series(env, potential, geom, zeta, n_schedule, *, representation="vertex_average", **kw):
    """``-n^{-1} log Q_n(X_n = xhat_n(zeta))`` for the polymer measure along a schedule."""
    _check_zeta(geom, zeta)
    rep = face_of(geom, zeta, representation)[1]
    ns = sorted(set(int(n) for n in n_schedule))
    want = set(ns)
    out = []
    for layer in iter_layers(env, potential, geom, ns[-1], **kw):
        if layer.stage in want:
            v = layer.log_mass_at(path_endpoint(rep, layer.stage).endpoint)
            if isinstance(v, Unreachable):
                raise DomainError(f"xhat_n unreachable at n={layer.stage}")
            out.append(-(v - layer.log_total()) / layer.stage)
    return ns, out


def rwre_point_prob_rate(env, rwre_potential, geom, zeta, n_schedule, *, model="log", **kw) -> tuple[float, float]:
    """Extrapolated quenched point-probability rate of an RWRE.

    With ``g = log p_z(omega)`` the polymer measure is the RWRE path law
    whatever the reference kernel, so ``Q{X_n = x} = Z_n(x) / Z_n``.
    """
    ns, vals = point_rate_series(env, rwre_potential, geom, zeta, n_schedule, **kw)
    a, err, _ = extrapolate(ns, vals, model)
    return a, err
