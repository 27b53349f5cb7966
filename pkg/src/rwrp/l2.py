"""The small-disorder solution: annealed log-mgf, tilt solve, martingales, Doob pair.

For a single-site potential ``beta g(omega_0, z)`` and a reference kernel
``p`` the averaged log-mgf is ``lambda(theta) = log sum_z a_z e^{theta.z}``
with ``a_z = p_z E[e^{beta g(omega_0, z)}]``.  In weak disorder the
point-to-point free energy equals ``-lambda*(zeta)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp

from .duality import in_relative_interior, span_frame
from .environment import (
    Gaussian,
    GeneralPotential,
    PeriodicEnvironment,
    Potential,
    SitePotential,
)
from .geometry import StepGeometry, build_geometry, face_of, path_endpoint
from .transfer import extrapolate, iter_layers, perron, transfer_operator

HERMITE_NODES = 120


class MomentError(ValueError):
    """``E[e^{beta g}]`` is not finite at the requested ``beta``."""


def _marginal_atoms(marginal) -> list[tuple[float, float]]:
    if isinstance(marginal, Gaussian):
        if marginal.std == 0:
            return [(marginal.mean, 1.0)]
        x, w = hermegauss(HERMITE_NODES)
        w = w / math.sqrt(2 * math.pi)
        return list(zip(marginal.mean + marginal.std * x, w))
    return list(marginal.atoms)


@dataclass
class AveragedMGF:
    """``lambda(theta) = log sum_z a_z e^{theta.z}`` for fixed ``beta``."""

    geom: StepGeometry
    log_a: np.ndarray  # log a_z, ordered as geom.steps
    beta: float
    method: str

    @classmethod
    def from_potential(cls, potential: Potential, marginal, geom: StepGeometry) -> "AveragedMGF":
        """Annealed factors of a potential that reads only ``omega_0`` and ``z_1``.

        Identity site potentials with Gaussian, Bernoulli, table or constant
        marginals are evaluated in closed form; anything else by exact atoms
        or Gauss-Hermite quadrature.
        """
        if potential.radius != 0 or potential.ell > 1:
            raise ValueError("averaged mgf needs a potential of omega_0 and z_1 only")
        beta = potential.beta
        logp = geom.log_weights
        if isinstance(potential, SitePotential) and potential.transform is None and isinstance(marginal, Gaussian):
            m = beta * marginal.mean + 0.5 * (beta * marginal.std) ** 2
            return cls(geom, logp + m, beta, "closed-form")
        atoms = _marginal_atoms(marginal)
        vals = np.asarray([a for a, _ in atoms], dtype=float)
        logw = np.log(np.asarray([w for _, w in atoms], dtype=float))
        shape = (len(atoms),) + (1,) * (geom.dim - 1)
        env = PeriodicEnvironment(vals.reshape(shape))
        pos = np.zeros((len(atoms), geom.dim), dtype=np.int64)
        pos[:, 0] = np.arange(len(atoms))
        log_a = np.empty(geom.n_steps)
        for i, z in enumerate(geom.steps_array):
            g = potential.values(env, pos, z[None, :])
            if not np.all(np.isfinite(g)):
                raise MomentError("potential not finite on the marginal atoms")
            log_a[i] = logp[i] + logsumexp(logw + g)
        method = "quadrature" if isinstance(marginal, Gaussian) else "closed-form"
        if not np.all(np.isfinite(log_a)):
            raise MomentError(f"annealed factor overflow at beta={beta}")
        return cls(geom, log_a, beta, method)

    def _e(self, theta):
        return self.log_a + self.geom.steps_array @ np.asarray(theta, dtype=float)

    def value(self, theta) -> float:
        return float(logsumexp(self._e(theta)))

    def probs(self, theta) -> np.ndarray:
        e = self._e(theta)
        return np.exp(e - logsumexp(e))

    def grad(self, theta) -> np.ndarray:
        return self.probs(theta) @ self.geom.steps_array

    def hess(self, theta) -> np.ndarray:
        p = self.probs(theta)
        S = self.geom.steps_array.astype(float)
        m = p @ S
        D = S - m
        return (D * p[:, None]).T @ D


def lambda_eval(mgf: AveragedMGF, theta) -> float:
    return mgf.value(theta)


def lambda_grad(mgf: AveragedMGF, theta) -> np.ndarray:
    return mgf.grad(theta)


def lambda_hess(mgf: AveragedMGF, theta) -> np.ndarray:
    return mgf.hess(theta)


@dataclass
class TiltSolution:
    zeta: tuple
    theta: np.ndarray
    lambda_value: float
    lambda_star: float
    residual: float
    condition: float
    iterations: int


def solve_tilt(mgf: AveragedMGF, zeta, tol: float = 1e-12, maxiter: int = 100) -> TiltSolution:
    """Newton's method for ``grad lambda(theta) = zeta`` with ``theta`` in ``span(R-R)``.

    Directions orthogonal to ``span(R-R)`` change ``theta.z`` by the same
    constant for every step, so fixing them to zero removes exactly the
    non-uniqueness of the maximiser.
    """
    geom = mgf.geom
    if not in_relative_interior(geom, zeta):
        raise ValueError(f"velocity {tuple(zeta)} is not in the relative interior of U")
    z = np.asarray([float(c) for c in zeta])
    B = span_frame(geom)
    c = np.zeros(B.shape[0])

    def obj(c):
        th = c @ B
        return mgf.value(th) - th @ z

    it = 0
    res = math.inf
    for it in range(1, maxiter + 1):
        th = c @ B
        g = B @ (mgf.grad(th) - z)
        res = float(np.max(np.abs(mgf.grad(th) - z)))
        if res <= tol:
            break
        H = B @ mgf.hess(th) @ B.T
        step = np.linalg.solve(H, g)
        f0 = obj(c)
        s = 1.0
        while obj(c - s * step) > f0 + 1e-4 * s * (g @ -step) + 1e-15 * abs(f0) and s > 1e-12:
            s *= 0.5
        c = c - s * step
    else:
        th = c @ B
        res = float(np.max(np.abs(mgf.grad(th) - z)))
        if res > max(tol, 1e-10):
            raise RuntimeError(f"tilt solve did not converge (residual {res:.2e})")
    th = c @ B
    lam = mgf.value(th)
    H = B @ mgf.hess(th) @ B.T
    cond = float(np.linalg.cond(H)) if H.size else 1.0
    return TiltSolution(tuple(zeta), th, lam, float(th @ z - lam), res, cond, it)


# ---------------------------------------------------------------------------
# martingales


def reflected_problem(potential: Potential, geom: StepGeometry):
    """Geometry and potential of the time-reversed walk.

    ``X_{-j}`` is a walk with steps ``w = -z``; the term of step ``j`` reads
    ``g(omega_{X_{-j}}, z) = g(omega_{y + w}, -w)`` from the position ``y``
    before the step.
    """
    if potential.ell > 1 or potential.radius != 0:
        raise ValueError("backward partition functions need a potential of omega_0 and z_1")
    rgeom = build_geometry(geom.dim, [tuple(-c for c in s) for s in geom.steps], geom.exact_weights or geom.weights)

    def func(env, positions, memory, _p=potential):
        w = memory[0]
        return _p.values(env, positions + w[None, :], -memory[:1])

    return rgeom, GeneralPotential(beta=1.0, func=func, ell_=1, radius_=max(int(np.abs(geom.steps_array).max()), 0))


@dataclass
class MartingaleSample:
    direction: str
    n: int
    seed: int | None
    log_W: float

    @property
    def W(self) -> float:
        return math.exp(self.log_W)


def simulate_W(env, potential, geom, theta, n: int, direction: str = "+", mgf: AveragedMGF | None = None,
               marginal=None) -> MartingaleSample:
    """``W_n = e^{-n lambda} Z_n^{+/-}`` by the tilted recursion."""
    _dimension_check(geom)
    if mgf is None:
        mgf = AveragedMGF.from_potential(potential, marginal if marginal is not None else env.marginal, geom)
    theta = np.asarray(theta, dtype=float)
    lam = mgf.value(theta)
    if direction == "+":
        g, p, t = geom, potential, theta
    elif direction == "-":
        g, p = reflected_problem(potential, geom)
        t = -theta
    else:
        raise ValueError("direction must be '+' or '-'")
    layer = None
    # the tilt rides on the chosen step, so no memory beyond the potential's own is needed
    for layer in iter_layers(env, p, g, n, tilt=t, ell=p.ell):
        pass
    return MartingaleSample(direction, n, getattr(env, "seed", None), layer.log_total() - n * lam)


def _dimension_check(geom: StepGeometry):
    B = span_frame(geom)
    if B.shape[0] < 3:
        warnings.warn(
            f"the lattice generated by R - R has dimension {B.shape[0]} < 3; weak disorder is not expected",
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# Doob pair on periodic models


@dataclass
class GibbsPair:
    states: list
    mu: np.ndarray
    q: np.ndarray  # (n_states, |R|) step probabilities
    next_state: np.ndarray  # (n_states, |R|) index of the successor state
    log_rho: float
    phi: np.ndarray
    psi: np.ndarray
    stationarity_residual: float
    row_sum_error: float  # of the normalised kernel
    consistency_residual: float  # row sums before normalising: the finite-model one-step identity for phi

    def occupation(self) -> np.ndarray:
        """Joint law ``nu(s, z) = mu(s) q(s, z)``."""
        return self.mu[:, None] * self.q


def build_gibbs_pair(env: PeriodicEnvironment, potential, geom, theta=None, ell: int = 1) -> GibbsPair:
    """Doob transform of the tilted transfer operator.

    ``q(s, z') = p_{z'} e^{g(s) + theta.disp - log rho} phi(s')/phi(s)`` and
    ``mu = psi phi`` realise the martingale limits by Perron eigenvectors.
    """
    ell = max(int(ell), potential.ell)
    op = transfer_operator(env, potential, geom, theta, ell=ell)
    res = perron(op)
    rows, cols, trs, weight = op.edges
    S = len(op.states)
    R = geom.n_steps
    step = trs % R  # transitions are enumerated memory-major, then new step
    q = np.zeros((S, R))
    nxt = np.full((S, R), -1, dtype=np.int64)
    logq = weight - res.log_rho + np.log(res.right[cols]) - np.log(res.right[rows])
    q[rows, step] = np.exp(logq)
    nxt[rows, step] = cols
    rs = q.sum(axis=1)
    q = q / rs[:, None]
    mu = res.left * res.right
    mu = mu / mu.sum()
    flow = np.zeros(S)
    np.add.at(flow, nxt.ravel(), (mu[:, None] * q).ravel())
    return GibbsPair(
        states=op.states,
        mu=mu,
        q=q,
        next_state=nxt,
        log_rho=res.log_rho,
        phi=res.right,
        psi=res.left,
        stationarity_residual=float(np.abs(flow - mu).sum()),
        row_sum_error=float(np.max(np.abs(q.sum(axis=1) - 1))),
        consistency_residual=float(np.max(np.abs(rs - 1))),
    )


# ---------------------------------------------------------------------------
# weak-disorder check


@dataclass
class WeakDisorderReport:
    zeta: tuple
    beta: float
    lambda_value: float
    lambda_star: float
    theta: list
    ns: list[int]
    mean_values: list[float]  # mean over environments of F_n / n at xhat_n
    se_values: list[float]
    dp_estimate: float
    extrapolation_error: float
    gap: float
    se: float
    var_trace: list[float]  # sample variance of W_n^+ along ns
    diagnostic: str
    notes: list[str] = field(default_factory=list)


def verify_weak_disorder(
    mgf: AveragedMGF,
    env_factory,
    potential,
    geom,
    zeta,
    n_schedule: Sequence[int],
    seeds: Sequence[int],
    *,
    model: str = "log",
) -> WeakDisorderReport:
    """Compare the mean point-to-point free energy with ``-lambda*(zeta)``.

    One recursion per environment gives ``F_n(xhat_n)`` at every ``n`` of
    the schedule and the forward martingale ``W_n^+`` via the tilt identity.
    The per-``n`` means are extrapolated in ``n``; the variance trace is a
    diagnostic only, since the paper's small-``beta`` threshold is not
    computable.
    """
    _dimension_check(geom)
    sol = solve_tilt(mgf, zeta)
    rep = face_of(geom, zeta)[1]
    ns = sorted(set(int(n) for n in n_schedule))
    want = set(ns)
    F = np.empty((len(seeds), len(ns)))
    logW = np.empty((len(seeds), len(ns)))
    for a, seed in enumerate(seeds):
        env = env_factory(seed)
        j = 0
        for layer in iter_layers(env, potential, geom, ns[-1]):
            if layer.stage in want:
                x = path_endpoint(rep, layer.stage).endpoint
                F[a, j] = layer.log_mass_at(x) / layer.stage
                logW[a, j] = layer.log_tilted_total(sol.theta) - layer.stage * sol.lambda_value
                j += 1
    means = F.mean(axis=0)
    ses = F.std(axis=0, ddof=1) / math.sqrt(len(seeds)) if len(seeds) > 1 else np.zeros(len(ns))
    est, err, _ = extrapolate(ns, means, model)
    var_trace = np.exp(logW).var(axis=0, ddof=1) if len(seeds) > 1 else np.zeros(len(ns))
    growing = len(ns) > 2 and np.all(np.diff(var_trace) > 0) and var_trace[-1] > 4 * max(var_trace[0], 1e-300)
    diagnostic = "variance trace growing; not L2-consistent" if growing else "L2-consistent"
    target = -sol.lambda_star
    return WeakDisorderReport(
        zeta=tuple(str(c) for c in zeta),
        beta=mgf.beta,
        lambda_value=sol.lambda_value,
        lambda_star=sol.lambda_star,
        theta=sol.theta.tolist(),
        ns=ns,
        mean_values=means.tolist(),
        se_values=np.asarray(ses).tolist(),
        dp_estimate=est,
        extrapolation_error=err,
        gap=est - target,
        se=float(ses[-1]),
        var_trace=np.asarray(var_trace).tolist(),
        diagnostic=diagnostic,
        notes=[
            "diagnostic only: the weak-disorder threshold beta_0 is not constructive, so no certified test exists",
        ],
    )
