"""Entropy of stationary pairs and the variational formulas on finite models.

States are the reachable ``(x mod L, z_{1..ell})`` of a periodic model, the
same state space as the transfer operator.  The variational problems are
concave programs in the joint occupation measure ``nu(s, z) = mu(s) q(s, z)``:

    maximise  sum nu(s,z) g(s) - sum nu log(nu / (mu p))
    over      nu >= 0, sum nu = 1, inflow(nu) = mu, [mean step = zeta].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
from scipy import sparse
from scipy.optimize import linprog, minimize
from scipy.special import logsumexp, rel_entr

from .duality import span_frame
from .environment import GeneralPotential, PeriodicEnvironment, Potential
from .geometry import StepGeometry
from .transfer import _potential_matrix, transfer_operator


class InfeasibleError(ValueError):
    """No stationary pair satisfies the constraints."""


class InfiniteEntropy(float):
    """``+inf``: the kernel charges a step the reference kernel forbids."""

    def __new__(cls):
        return super().__new__(cls, math.inf)

    def __repr__(self):
        return "InfiniteEntropy()"


def _zero(env, positions, memory):
    return np.zeros(np.asarray(positions).shape[0])


@dataclass
class FiniteMarkovModel:
    states: list  # (x mod L, memory index)
    next_state: np.ndarray  # (S, R)
    p_ref: np.ndarray  # (S, R)
    disp: np.ndarray  # (S, R, d) displacement charged to each transition
    g: np.ndarray  # (S,) potential at each state
    geom: StepGeometry
    ell: int

    @property
    def n_states(self) -> int:
        return len(self.states)

    @classmethod
    def from_periodic(
        cls,
        env: PeriodicEnvironment,
        geom: StepGeometry,
        potential: Potential | None = None,
        ell: int | None = None,
        p_ref=None,
    ) -> "FiniteMarkovModel":
        """State space, shifts and potential of a periodic model.

        The reference kernel defaults to the geometry weights; pass
        ``p_ref`` (one row of step probabilities) to override.
        """
        if ell is None:
            ell = potential.ell if potential is not None else 0
        if potential is not None:
            ell = max(ell, potential.ell)
        op = transfer_operator(env, GeneralPotential(func=_zero, ell_=ell), geom, ell=ell)
        rows, cols, trs, _ = op.edges
        S, R = len(op.states), geom.n_steps
        nxt = np.full((S, R), -1, dtype=np.int64)
        disp = np.zeros((S, R, geom.dim))
        nxt[rows, trs % R] = cols
        disp[rows, trs % R] = op.disp
        if np.any(nxt < 0):
            raise RuntimeError("shift map is not total")
        w = np.asarray(geom.weights if p_ref is None else p_ref, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError("reference kernel must be a probability vector")
        coords = np.asarray([s[0] for s in op.states], dtype=np.int64)
        if potential is None:
            g = np.zeros(S)
        else:
            pm = _potential_matrix(env, potential, coords, op.memory)
            g = pm[np.arange(S), [s[1] for s in op.states]]
        return cls(op.states, nxt, np.tile(w, (S, 1)), disp, g, geom, ell)

    def stationary(self, q: np.ndarray) -> np.ndarray:
        """Stationary law of the chain ``q`` (unique on an irreducible model)."""
        S = self.n_states
        P = np.zeros((S, S))
        np.add.at(P, (np.repeat(np.arange(S), q.shape[1]), self.next_state.ravel()), q.ravel())
        A = np.vstack([P.T - np.eye(S), np.ones(S)])
        b = np.zeros(S + 1)
        b[-1] = 1
        mu, *_ = np.linalg.lstsq(A, b, rcond=None)
        mu = np.clip(mu, 0, None)
        return mu / mu.sum()

    def inflow(self, nu: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_states)
        np.add.at(out, self.next_state.ravel(), nu.ravel())
        return out

    def mean_step(self, nu: np.ndarray) -> np.ndarray:
        return np.einsum("sz,szd->d", nu, self.disp)


def entropy_of_pair(model: FiniteMarkovModel, mu, q) -> float:
    """``sum_s mu(s) sum_z q log(q / p)`` with ``0 log 0 = 0``."""
    mu = np.asarray(mu, dtype=float)
    q = np.asarray(q, dtype=float)
    p = model.p_ref
    if np.any((q > 0) & (p == 0) & (mu[:, None] > 0)):
        return InfiniteEntropy()
    return float(np.sum(mu[:, None] * rel_entr(q, p)))


@dataclass
class EntropyValue:
    value: float
    kkt_residual: float
    dual_value: float
    iterations: int


def _edge_support(model: FiniteMarkovModel, mu: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Transitions that carry flow in some stationary pair with marginal ``mu``.

    Raises if no pair exists.  One feasibility LP plus one LP per edge not
    already seen to carry flow.
    """
    S, R = model.p_ref.shape
    cand = (mu[:, None] > tol) & (model.p_ref > 0) & (mu[model.next_state] > tol)
    idx = np.flatnonzero(cand.ravel())
    if idx.size == 0:
        raise InfeasibleError("no admissible transition inside the support of mu")
    src = idx // R
    dst = model.next_state.ravel()[idx]
    A_out = sparse.csr_matrix((np.ones(idx.size), (src, np.arange(idx.size))), shape=(S, idx.size))
    A_in = sparse.csr_matrix((np.ones(idx.size), (dst, np.arange(idx.size))), shape=(S, idx.size))
    A_eq = sparse.vstack([A_out, A_in]).tocsr()
    b_eq = np.concatenate([mu, mu])
    res = linprog(np.zeros(idx.size), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise InfeasibleError("mu is not stationary for any kernel supported on the shifts")
    alive = res.x > tol
    for e in range(idx.size):
        if alive[e]:
            continue
        c = np.zeros(idx.size)
        c[e] = -1.0
        r = linprog(c, A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
        if r.status == 0:
            alive |= r.x > tol
    keep = np.zeros(S * R, dtype=bool)
    keep[idx[alive]] = True
    return keep.reshape(S, R)


def min_entropy(model: FiniteMarkovModel, mu, tol: float = 1e-8, maxiter: int = 500):
    """``H(mu) = inf {H(mu x q | mu x p) : mu q = mu}`` by dual Newton ascent.

    The dual ``Phi(h) = sum mu(s) [h(s) - log sum_z p e^{h(S_z s)}]`` is
    smooth and concave on the pruned support; its maximiser gives
    ``q(s, z) ~ p e^{h(S_z s)}``.
    """
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0) or abs(mu.sum() - 1) > 1e-12:
        raise ValueError("mu must be a probability vector")
    keep = _edge_support(model, mu)
    S, R = model.p_ref.shape
    sup = np.flatnonzero(mu > 1e-12)
    pos = {s: i for i, s in enumerate(sup)}
    logp = np.where(keep, np.log(np.where(model.p_ref > 0, model.p_ref, 1.0)), -np.inf)
    nxt = np.where(keep, model.next_state, 0)
    nxt_loc = np.vectorize(lambda s: pos.get(int(s), 0))(nxt)
    m = mu[sup]

    def parts(h):
        e = logp[sup] + h[nxt_loc[sup]]
        lse = logsumexp(e, axis=1)
        q = np.exp(e - lse[:, None])
        return e, lse, q

    def phi(h):
        _, lse, q = parts(h)
        val = m @ (h - lse)
        flow = np.zeros(sup.size)
        np.add.at(flow, nxt_loc[sup].ravel(), (m[:, None] * q).ravel())
        return -val, -(m - flow)

    h = np.zeros(sup.size)
    it = 0
    for it in range(1, maxiter + 1):
        _, lse, q = parts(h)
        flow = np.zeros(sup.size)
        np.add.at(flow, nxt_loc[sup].ravel(), (m[:, None] * q).ravel())
        grad = m - flow
        if np.abs(grad).sum() <= tol * 1e-2:
            break
        # Hessian of Phi: -sum_s m_s Cov_{q_s}(e_{next})
        H = np.zeros((sup.size, sup.size))
        for i in range(sup.size):
            J = np.zeros((R, sup.size))
            J[np.arange(R), nxt_loc[sup[i]]] = 1.0
            v = q[i] @ J
            H += m[i] * (J.T @ (q[i][:, None] * J) - np.outer(v, v))
        H += 1e-14 * np.eye(sup.size)
        step = np.linalg.lstsq(H, grad, rcond=None)[0]
        f0 = phi(h)[0]
        s = 1.0
        while phi(h + s * step)[0] > f0 - 1e-4 * s * grad @ step and s > 1e-10:
            s *= 0.5
        h = h + s * step
    _, lse, q_sup = parts(h)
    q = np.zeros((S, R))
    q[sup] = q_sup
    # rows outside the support are irrelevant; fill with the reference kernel
    out = np.setdiff1d(np.arange(S), sup)
    q[out] = model.p_ref[out]
    nu = mu[:, None] * q
    kkt = float(np.abs(model.inflow(nu) - mu).sum())
    value = entropy_of_pair(model, mu, q)
    dual = float(-phi(h)[0])
    if kkt > tol:
        raise RuntimeError(f"min_entropy did not reach the KKT tolerance (residual {kkt:.2e})")
    return EntropyValue(value, kkt, dual, it), q


@dataclass
class VariationalResult:
    value: float
    nu: np.ndarray
    mu: np.ndarray
    q: np.ndarray
    gap: float
    dual_bound: float
    tilt: np.ndarray
    constraint_residual: float
    status: str
    zeta: tuple | None = None
    iterations: int = 0
    notes: list[str] = field(default_factory=list)


def variational_objective(model: FiniteMarkovModel, nu: np.ndarray, c: float = math.inf) -> float:
    mu = nu.sum(axis=1)
    ref = mu[:, None] * model.p_ref
    return float(np.sum(nu * np.minimum(model.g, c)[:, None]) - np.sum(rel_entr(nu, ref)))


def maximize_variational(model: FiniteMarkovModel, zeta=None, c: float = math.inf, *, solver: str = "CLARABEL") -> VariationalResult:
    """Maximise ``E^nu[min(g, c)] - H(nu | mu x p)`` over stationary occupation measures.

    The concave program is handed to an exponential-cone solver.  The
    reported gap does not trust the solver: a potential ``(h, t)`` is fitted
    to the optimiser and the Donsker-Varadhan bound
    ``max_s log sum_z p e^{g + t.d + h(S_z s) - h(s)} - t.zeta``, valid for
    every ``(h, t)``, is compared with the objective at the optimiser.
    """
    S, R = model.p_ref.shape
    gc = np.minimum(model.g, c)
    frame = span_frame(model.geom)
    N = S * R
    src = np.repeat(np.arange(S), R)
    dst = model.next_state.ravel()
    Cout = sparse.csr_matrix((np.ones(N), (src, np.arange(N))), shape=(S, N))
    Cin = sparse.csr_matrix((np.ones(N), (dst, np.arange(N))), shape=(S, N))
    # (A nu)(s, z) = p(s, z) mu(s), the reference measure as an affine map of nu
    A = sparse.csr_matrix(
        (np.repeat(model.p_ref.ravel(), R), (np.repeat(np.arange(N), R), np.repeat(src, R) * R + np.tile(np.arange(R), N))),
        shape=(N, N),
    )
    nu = cp.Variable(N, nonneg=True)
    cons = [cp.sum(nu) == 1, Cin @ nu == Cout @ nu]
    D = model.disp.reshape(N, -1).T  # (d, N)
    if zeta is not None:
        z = np.asarray([float(v) for v in zeta])
        if not model.geom.contains(zeta):
            raise InfeasibleError(f"velocity {tuple(zeta)} is outside U")
        cons.append((frame @ D) @ nu == frame @ z)
    obj = cp.Maximize(np.repeat(gc, R) @ nu - cp.sum(cp.rel_entr(nu, A @ nu)))
    prob = cp.Problem(obj, cons)
    try:
        prob.solve(solver=solver)
    except cp.error.SolverError as exc:
        raise RuntimeError(f"solver failed: {exc}") from exc
    if prob.status in ("infeasible", "infeasible_inaccurate"):
        raise InfeasibleError("no stationary occupation measure satisfies the constraints")
    if nu.value is None:
        raise RuntimeError(f"solver returned status {prob.status}")
    x = np.clip(np.asarray(nu.value), 0, None).reshape(S, R)
    x /= x.sum()
    mu = x.sum(axis=1)
    q = np.where(mu[:, None] > 0, x / np.where(mu[:, None] > 0, mu[:, None], 1), model.p_ref)
    primal = variational_objective(model, x, c)
    resid = float(np.abs(model.inflow(x) - mu).sum())
    if zeta is not None:
        resid += float(np.abs(frame @ (model.mean_step(x) - z)).sum())
    bound, t = _dual_certificate(model, x, gc, frame, None if zeta is None else z)
    return VariationalResult(
        value=primal,
        nu=x,
        mu=mu,
        q=q,
        gap=float(bound - primal),
        dual_bound=float(bound),
        tilt=t,
        constraint_residual=resid,
        status=prob.status,
        zeta=None if zeta is None else tuple(zeta),
        iterations=int(getattr(prob.solver_stats, "num_iters", 0) or 0),
    )


def _dual_value(model, gc, frame, zvec, h, tc):
    t = tc @ frame if frame.shape[0] else np.zeros(model.geom.dim)
    e = np.log(model.p_ref) + gc[:, None] + model.disp @ t + h[model.next_state] - h[:, None]
    val = float(np.max(logsumexp(e, axis=1)))
    return val - (t @ zvec if zvec is not None else 0.0), t


def _fit_tilt(model, x, gc, frame):
    """Least-squares fit of ``log(q/p) - g = t.d + h(S_z s) - h(s) - Lambda``; returns ``t`` coords."""
    S, R = model.p_ref.shape
    mu = x.sum(axis=1)
    r, zc = np.nonzero((x > 1e-14) & (mu[:, None] > 0))
    k = frame.shape[0]
    lhs = np.log(x[r, zc] / mu[r]) - np.log(model.p_ref[r, zc]) - gc[r]
    M = np.zeros((r.size, S + k + 1))
    M[np.arange(r.size), model.next_state[r, zc]] += 1.0
    M[np.arange(r.size), r] -= 1.0
    M[:, S : S + k] = model.disp[r, zc] @ frame.T
    M[:, -1] = -1.0
    sol, *_ = np.linalg.lstsq(M, lhs, rcond=None)
    return sol[S : S + k]


def _perron_h(model, gc, t):
    """``log`` of the right Perron vector of the tilted kernel on the model."""
    S, R = model.p_ref.shape
    K = np.zeros((S, S))
    w = model.p_ref * np.exp(gc[:, None] + model.disp @ t - np.max(gc))
    np.add.at(K, (np.repeat(np.arange(S), R), model.next_state.ravel()), w.ravel())
    vals, vecs = np.linalg.eig(K)
    i = int(np.argmax(vals.real))
    phi = np.abs(vecs[:, i].real)
    for _ in range(20):  # polish with shifted power steps
        phi = K @ phi + phi
        phi /= phi.max()
    return np.log(np.maximum(phi, 1e-300))


def _dual_certificate(model, x, gc, frame, zvec):
    """Donsker-Varadhan upper bound on the optimum and the tilt attaining it.

    For fixed ``t`` the best ``h`` is the log Perron vector, so the bound is
    minimised over ``t`` only, started from a fit to the optimiser.
    """
    if zvec is None:
        h = _perron_h(model, gc, np.zeros(model.geom.dim))
        return _dual_value(model, gc, np.zeros((0, model.geom.dim)), None, h, np.zeros(0))
    c0 = _fit_tilt(model, x, gc, frame)

    def f(c):
        t = c @ frame
        return _dual_value(model, gc, frame, zvec, _perron_h(model, gc, t), c)[0]

    out = minimize(f, c0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000})
    c = out.x if out.fun <= f(c0) else c0
    return _dual_value(model, gc, frame, zvec, _perron_h(model, gc, c @ frame), c)
