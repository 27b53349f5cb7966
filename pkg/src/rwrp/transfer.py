"""Log-space transfer recursion for quenched partition functions.

A layer at stage ``k`` maps states ``(x, z_{k+1,k+ell})`` (endpoint plus the
``ell`` upcoming steps) to log-weights.  Stage ``k -> k+1`` adds
``g(T_{x}omega, z_{k+1,k+ell}) + log p(z')``, moves ``x`` by the first memory
step and appends the new step ``z'``.  With ``ell = 0`` the step is chosen in
the same transition.  Contributions to a state are combined with
max-subtracted log-sum-exp in a fixed order.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.special import logsumexp

from . import _kernels
from .environment import PeriodicEnvironment, Potential
from .geometry import PathPlan, StepGeometry

DEFAULT_MAX_STATES = 60_000_000
PRUNE_DELTA = 60 * math.log(10)
# log dynamic range below which layers are summed in linear space
LINEAR_RANGE = 600.0


class BudgetError(RuntimeError):
    """State count of a run exceeds the configured budget."""


class ReducibleError(RuntimeError):
    """Transfer operator restricted to the reachable states is reducible."""


class Unreachable(float):
    """``log Z = -inf`` because the endpoint is not in ``D_n``.

    Distinct from numerical underflow, which log-space arithmetic never
    produces.
    """

    def __new__(cls):
        return super().__new__(cls, -math.inf)

    def __repr__(self):
        return "Unreachable()"


UNREACHABLE = Unreachable()


@dataclass
class DPLayer:
    """Sparse layer: sorted flat box indices and ``(n_states, M)`` log-weights."""

    stage: int
    index: np.ndarray
    logw: np.ndarray
    shape: tuple[int, ...]
    origin: np.ndarray
    memory: np.ndarray  # (M, ell, d) memory step vectors
    discarded: float = -math.inf  # log of pruned mass, if pruning is on

    @property
    def positions(self) -> np.ndarray:
        if self.index.size == 0:
            return np.zeros((0, len(self.shape)), dtype=np.int64)
        return np.stack(np.unravel_index(self.index, self.shape), axis=1) + self.origin

    @property
    def n_states(self) -> int:
        return int(np.isfinite(self.logw).sum())

    def log_total(self) -> float:
        if self.logw.size == 0:
            return UNREACHABLE
        return float(logsumexp(self.logw))

    def endpoint_logmass(self) -> np.ndarray:
        """Log-weight of each stored endpoint, summed over memory."""
        return logsumexp(self.logw, axis=1)

    def log_mass_at(self, x) -> float:
        x = np.asarray(x, dtype=np.int64) - self.origin
        shape = np.asarray(self.shape)
        if np.any(x < 0) or np.any(x >= shape):
            return UNREACHABLE
        flat = int(np.ravel_multi_index(tuple(int(c) for c in x), self.shape))
        pos = int(np.searchsorted(self.index, flat))
        if pos >= self.index.size or self.index[pos] != flat:
            return UNREACHABLE
        return float(logsumexp(self.logw[pos]))

    def log_tilted_total(self, t) -> float:
        """``log sum_x exp(F(x) + t.x)`` over the stored endpoints."""
        return float(logsumexp(self.endpoint_logmass() + self.positions @ np.asarray(t, float)))


@dataclass
class _Plan:
    ell: int
    M: int
    memory: np.ndarray
    tr_m: np.ndarray
    tr_m2: np.ndarray
    tr_disp: np.ndarray
    tr_logp: np.ndarray
    init: np.ndarray


def _transitions(geom: StepGeometry, ell: int) -> _Plan:
    R = geom.n_steps
    steps = geom.steps_array
    logp = geom.log_weights
    mems = list(itertools.product(range(R), repeat=ell))
    M = len(mems)
    memory = np.asarray([[steps[i] for i in m] for m in mems], dtype=np.int64).reshape(M, ell, geom.dim)
    tr_m, tr_m2, tr_disp, tr_logp = [], [], [], []
    for mi, m in enumerate(mems):
        for zp in range(R):
            if ell:
                m2 = (mi * R) % (R**ell) + zp
                disp = steps[m[0]]
            else:
                m2 = 0
                disp = steps[zp]
            tr_m.append(mi)
            tr_m2.append(m2)
            tr_disp.append(disp)
            tr_logp.append(logp[zp])
    init = np.asarray([sum(logp[i] for i in m) for m in mems], dtype=float)
    return _Plan(
        ell=ell,
        M=M,
        memory=memory,
        tr_m=np.asarray(tr_m, dtype=np.int64),
        tr_m2=np.asarray(tr_m2, dtype=np.int64),
        tr_disp=np.asarray(tr_disp, dtype=np.int64).reshape(-1, geom.dim),
        tr_logp=np.asarray(tr_logp, dtype=float),
        init=init,
    )


def _potential_matrix(env, potential: Potential, coords: np.ndarray, memory: np.ndarray) -> np.ndarray:
    M = memory.shape[0]
    if not potential.depends_on_memory:
        v = potential.values(env, coords, memory[0] if M else None)
        return np.repeat(v[:, None], M, axis=1)
    return np.stack([potential.values(env, coords, memory[m]) for m in range(M)], axis=1)


def state_budget(geom: StepGeometry, n: int, ell: int) -> int:
    """Upper bound ``|box(D_n)| * |R|^ell`` on the stored states."""
    steps = geom.steps_array
    w = steps.max(axis=0) - steps.min(axis=0)
    return int(np.prod(n * w + 1)) * geom.n_steps**ell


def iter_layers(
    env,
    potential: Potential,
    geom: StepGeometry,
    n: int,
    *,
    ell: int | None = None,
    tilt=None,
    prune: bool = False,
    max_states: int = DEFAULT_MAX_STATES,
) -> Iterator[DPLayer]:
    """Yield the layers ``0..n`` of the recursion one at a time."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    ell = potential.ell if ell is None else max(int(ell), potential.ell)
    plan = _transitions(geom, ell)
    steps = geom.steps_array
    lo = steps.min(axis=0)
    w = steps.max(axis=0) - lo
    shape = tuple(int(c) for c in n * w + 1)
    size = int(np.prod(shape))
    if size * plan.M > max_states:
        raise BudgetError(
            f"state estimate |D_n|*|R|^ell = {size}*{plan.M} = {size * plan.M} exceeds budget {max_states}"
        )
    strides = np.asarray([int(np.prod(shape[j + 1 :])) for j in range(len(shape))], dtype=np.int64)
    tr_off = (plan.tr_disp - lo) @ strides
    tr_c = plan.tr_logp.copy()
    if tilt is not None:
        tr_c = tr_c + plan.tr_disp @ np.asarray(tilt, dtype=float)

    smax = np.full(size * plan.M, -np.inf)
    ssum = np.zeros(size * plan.M)
    uniq_off = np.unique(tr_off)
    shape_arr = np.asarray(shape, dtype=np.int64)

    idx = np.zeros(1, dtype=np.int64)
    val = plan.init[None, :].copy()
    discarded = -math.inf
    layer = DPLayer(0, idx, val, shape, np.zeros(geom.dim, dtype=np.int64), plan.memory)
    yield layer
    for k in range(n):
        origin = k * lo
        coords = _kernels.unravel(idx, shape_arr, origin)
        pot = _potential_matrix(env, potential, coords, plan.memory)
        if not np.all(np.isfinite(pot)):
            raise FloatingPointError("potential returned a non-finite value")
        targets = _kernels.merge_targets(idx, uniq_off, np.empty(idx.size * uniq_off.size, dtype=np.int64))
        vmax, vmin = val.max(), val.min()
        if vmin == -np.inf:
            finite = val[np.isfinite(val)]
            vmax, vmin = (finite.max(), finite.min()) if finite.size else (0.0, 0.0)
        pmax = pot.max() if pot.size else 0.0
        cmax = tr_c.max()
        spread = (vmax - vmin) + (pmax - pot.min() if pot.size else 0.0) + (cmax - tr_c.min())
        if spread < LINEAR_RANGE:
            # same sums without an exp per contribution; no term can underflow
            out_w = _kernels.push_layer_linear(
                idx, np.exp(val - vmax), np.exp(pot - pmax), plan.tr_m, plan.tr_m2, tr_off, np.exp(tr_c - cmax),
                plan.M, targets, ssum,
            )
            with np.errstate(divide="ignore"):
                val = np.log(out_w) + (vmax + pmax + cmax)
        else:
            val = _kernels.push_layer(
                idx, val, np.ascontiguousarray(pot), plan.tr_m, plan.tr_m2, tr_off, tr_c, plan.M, targets, smax, ssum
            )
        idx = targets
        if prune and val.size:
            cut = np.max(val) - PRUNE_DELTA
            drop = val < cut
            if np.any(drop & np.isfinite(val)):
                discarded = np.logaddexp(discarded, logsumexp(val[drop]))
                val = np.where(drop, -np.inf, val)
            keep = np.any(np.isfinite(val), axis=1)
            idx, val = idx[keep], val[keep]
        layer = DPLayer(k + 1, idx, val, shape, (k + 1) * lo, plan.memory, discarded)
        yield layer


def run_dp(env, potential, geom, n, checkpoints: Sequence[int] | None = None, **kw) -> list[DPLayer]:
    """Layers at the requested stages (all stages ``0..n`` by default)."""
    want = set(range(n + 1)) if checkpoints is None else set(checkpoints)
    return [layer for layer in iter_layers(env, potential, geom, n, **kw) if layer.stage in want]


def final_layer(env, potential, geom, n, **kw) -> DPLayer:
    layer = None
    for layer in iter_layers(env, potential, geom, n, **kw):
        pass
    return layer


def log_partition_line(env, potential, geom, n, **kw) -> float:
    """``log Z_n``, the point-to-line partition function."""
    return final_layer(env, potential, geom, n, **kw).log_total()


def log_partition_point(env, potential, geom, n, plan: PathPlan, **kw) -> float:
    """``log`` of the partition function restricted to ``X_n = plan.endpoint``."""
    if plan.n != n:
        raise ValueError("path plan built for a different n")
    return final_layer(env, potential, geom, n, **kw).log_mass_at(plan.endpoint)


def endpoint_distribution(env, potential, geom, n, **kw) -> dict[tuple[int, ...], float]:
    """Endpoint law of the quenched polymer measure at time ``n``."""
    layer = final_layer(env, potential, geom, n, **kw)
    lm = layer.endpoint_logmass()
    logz = logsumexp(lm)
    probs = np.exp(lm - logz)
    return {tuple(int(c) for c in x): float(p) for x, p in zip(layer.positions, probs) if p > 0}


def _enumerate_paths(env, potential, geom, n, ell, guard):
    """Endpoint and log-weight of every step sequence of the enumeration oracle."""
    R = geom.n_steps
    L = n + max(ell - 1, 0)
    if R**L > guard:
        raise BudgetError(f"{R}^{L} paths exceed the enumeration guard {guard}")
    steps = geom.steps_array
    logp = geom.log_weights
    seqs = np.asarray(list(itertools.product(range(R), repeat=L)), dtype=np.int64).reshape(-1, L)
    N = seqs.shape[0]
    total = np.zeros(N)
    for j in range(L):
        total += logp[seqs[:, j]]
    pos = np.zeros((N, geom.dim), dtype=np.int64)
    for k in range(n):
        mem = seqs[:, k : k + ell] if ell else np.zeros((N, 0), np.int64)
        # group sequences by memory word to call the vectorised potential
        if ell:
            words, inv = np.unique(mem, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
            vals = np.empty(N)
            for wi, word in enumerate(words):
                sel = inv == wi
                vals[sel] = potential.values(env, pos[sel], steps[word])
        else:
            vals = potential.values(env, pos, None)
        total += vals
        pos = pos + steps[seqs[:, k]]
    return pos, total


def brute_force_log_partition(env, potential, geom, n, endpoint=None, *, ell=None, guard: int = 10**7) -> float:
    """Enumerate every step sequence; the independent oracle for the recursion.

    The potential at time ``k`` reads steps ``k+1..k+ell``, so sequences of
    length ``n + ell - 1`` are enumerated and weighted by their kernel
    probability.
    """
    ell = potential.ell if ell is None else max(int(ell), potential.ell)
    pos, total = _enumerate_paths(env, potential, geom, n, ell, guard)
    if endpoint is not None:
        sel = np.all(pos == np.asarray(endpoint, dtype=np.int64), axis=1)
        if not np.any(sel):
            return UNREACHABLE
        total = total[sel]
    return float(logsumexp(total))


def brute_force_endpoint_logmass(env, potential, geom, n, *, ell=None, guard: int = 10**7) -> dict[tuple[int, ...], float]:
    """``{x: F_n(x)}`` over all reachable endpoints from a single enumeration."""
    ell = potential.ell if ell is None else max(int(ell), potential.ell)
    pos, total = _enumerate_paths(env, potential, geom, n, ell, guard)
    keys, inv = np.unique(pos, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    order = np.argsort(inv, kind="stable")
    bounds = np.searchsorted(inv[order], np.arange(len(keys) + 1))
    return {
        tuple(int(c) for c in k): float(logsumexp(total[order[bounds[i] : bounds[i + 1]]]))
        for i, k in enumerate(keys)
    }


# ---------------------------------------------------------------------------
# periodic environments: exact free energies from the transfer operator


@dataclass
class TransferOperator:
    """Transfer matrix on the reachable torus states ``(x mod L, memory)``."""

    matrix: sparse.csr_matrix  # entries exp(weight - shift)
    shift: float
    states: list[tuple[tuple[int, ...], int]]
    start: np.ndarray  # initial weights on states
    disp: np.ndarray  # (n_edges, d) displacement of each stored edge (row, col order)
    edges: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]  # row, col, step index, weight
    memory: np.ndarray
    period: tuple[int, ...]


def transfer_operator(env: PeriodicEnvironment, potential: Potential, geom: StepGeometry, tilt=None, *, ell=None) -> TransferOperator:
    """Build the tilted transfer operator of a periodic model.

    Entry ``(x, m) -> (x + m_1 mod L, shift(m, z'))`` equals
    ``p(z') exp(g(x, m) + t . m_1)`` (``t . z'`` when ``ell = 0``).  Only the
    states reachable from the initial layer are kept.
    """
    if not isinstance(env, PeriodicEnvironment):
        raise TypeError("transfer operators need a periodic environment")
    ell = potential.ell if ell is None else max(int(ell), potential.ell)
    plan = _transitions(geom, ell)
    L = np.asarray(env.period, dtype=np.int64)
    if L.size != geom.dim:
        raise ValueError("period dimension does not match the geometry")
    t = np.zeros(geom.dim) if tilt is None else np.asarray(tilt, dtype=float)

    # breadth-first search from (0, m) for every memory word m
    start_states = [((0,) * geom.dim, m) for m in range(plan.M)]
    index = {s: i for i, s in enumerate(start_states)}
    order = list(start_states)
    by_m: dict[int, list[int]] = {}
    for tr in range(len(plan.tr_m)):
        by_m.setdefault(int(plan.tr_m[tr]), []).append(tr)
    rows, cols, trs = [], [], []
    head = 0
    while head < len(order):
        x, m = order[head]
        for tr in by_m[m]:
            nx = tuple(int(c) for c in np.mod(np.asarray(x) + plan.tr_disp[tr], L))
            nxt = (nx, int(plan.tr_m2[tr]))
            if nxt not in index:
                index[nxt] = len(order)
                order.append(nxt)
            rows.append(head)
            cols.append(index[nxt])
            trs.append(tr)
        head += 1
    S = len(order)
    coords = np.asarray([s[0] for s in order], dtype=np.int64)
    pot = _potential_matrix(env, potential, coords, plan.memory)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    trs = np.asarray(trs)
    ms = np.asarray([order[r][1] for r in rows])
    weight = pot[rows, ms] + plan.tr_logp[trs] + plan.tr_disp[trs] @ t
    shift = float(weight.max())
    A = sparse.csr_matrix((np.exp(weight - shift), (rows, cols)), shape=(S, S))
    A.sum_duplicates()
    start = np.full(S, -np.inf)
    start[: plan.M] = plan.init
    return TransferOperator(
        matrix=A,
        shift=shift,
        states=order,
        start=start,
        disp=plan.tr_disp[trs],
        edges=(rows, cols, trs, weight),
        memory=plan.memory,
        period=tuple(int(c) for c in L),
    )


@dataclass
class PerronResult:
    log_rho: float
    right: np.ndarray  # phi, normalised to max 1
    left: np.ndarray  # psi, normalised so psi . phi = 1
    residual: float
    iterations: int
    operator: TransferOperator


def perron(op: TransferOperator, tol: float = 1e-13, maxiter: int = 200_000) -> PerronResult:
    """Perron root and eigenvectors by shifted power iteration.

    The shift ``A + I`` makes an irreducible (possibly periodic) matrix
    primitive without moving its Perron vectors.  Small operators fall back
    to a dense eigensolver when the iteration stalls.
    """
    A = op.matrix
    S = A.shape[0]
    ncomp, labels = connected_components(A, directed=True, connection="strong")
    if ncomp != 1:
        comps = [np.flatnonzero(labels == c).tolist() for c in range(ncomp)]
        raise ReducibleError(f"transfer operator is reducible; strongly connected components: {comps}")
    B = A + sparse.identity(S, format="csr")
    BT = B.T.tocsr()
    phi = np.ones(S)
    psi = np.ones(S)
    rho = 0.0
    it = 0
    res = math.inf
    for it in range(1, maxiter + 1):
        nphi = B @ phi
        npsi = BT @ psi
        nphi /= nphi.max()
        npsi /= npsi.max()
        if it % 10 == 0 or it < 10:
            Aphi = A @ nphi
            rho = float(nphi @ Aphi / (nphi @ nphi))
            res = float(np.linalg.norm(Aphi - rho * nphi) / np.linalg.norm(rho * nphi))
            lres = float(np.linalg.norm(A.T @ npsi - rho * npsi) / np.linalg.norm(rho * npsi))
            if res <= tol and lres <= tol:
                phi, psi = nphi, npsi
                break
        phi, psi = nphi, npsi
    if res > tol:
        if S > 4000:
            raise RuntimeError(f"power iteration did not converge (residual {res:.2e})")
        rho, phi, psi = _dense_perron(A.toarray())
        res = float(np.linalg.norm(A @ phi - rho * phi) / np.linalg.norm(rho * phi))
    psi = psi / (psi @ phi)
    return PerronResult(log_rho=math.log(rho) + op.shift, right=phi, left=psi, residual=res, iterations=it, operator=op)


def _dense_perron(A: np.ndarray):
    vals, vr = np.linalg.eig(A)
    i = int(np.argmax(vals.real))
    rho = float(vals[i].real)
    phi = np.abs(vr[:, i].real)
    vals_l, vl = np.linalg.eig(A.T)
    j = int(np.argmax(vals_l.real))
    psi = np.abs(vl[:, j].real)
    # polish with a few shifted power steps
    for _ in range(50):
        phi = (A @ phi + phi) / (rho + 1)
        psi = (A.T @ psi + psi) / (rho + 1)
    return rho, phi / phi.max(), psi / psi.max()


def perron_free_energy(env, potential, geom, tilt=None, *, ell=None) -> float:
    """``log rho`` of the (tilted) transfer operator: the exact limit of ``log Z_n / n``."""
    return perron(transfer_operator(env, potential, geom, tilt, ell=ell)).log_rho


def perron_gradient(res: PerronResult) -> np.ndarray:
    """Gradient of ``log rho(t)`` in the tilt: the Doob-chain mean displacement."""
    op = res.operator
    rows, cols, trs, weight = op.edges
    flow = res.left[rows] * np.exp(weight - res.log_rho) * res.right[cols]
    return flow @ op.disp / (res.left @ res.right)


# ---------------------------------------------------------------------------
# free energy series and extrapolation


@dataclass
class FreeEnergySeries:
    target: str
    zeta: tuple | None
    ns: list[int]
    values: list[float]
    estimate: float = math.nan
    error: float = math.nan
    residual: float = math.nan
    model: str = ""
    notes: list[str] = field(default_factory=list)


def extrapolate(ns, values, model: str = "inverse") -> tuple[float, float, float]:
    """Fit ``F_n/n`` against corrections in ``1/n`` and return ``(a, err, rms)``.

    ``inverse``: ``a + b/n``; ``log``: ``a + b log(n)/n + c/n``; ``none``:
    the last value.  ``err`` is the spread between the fit on all points and
    on the second half, plus the fit residual; a heuristic only.
    """
    ns = np.asarray(ns, dtype=float)
    v = np.asarray(values, dtype=float)
    if model == "none" or ns.size < 2:
        return float(v[-1]), math.nan, math.nan

    def design(n):
        cols = [np.ones_like(n), 1.0 / n]
        if model == "log":
            cols.insert(1, np.log(n) / n)
        return np.stack(cols, axis=1)

    p = design(ns).shape[1]
    if ns.size < p:
        model = "inverse"
        p = 2

    def fit(nn, vv):
        coef, *_ = np.linalg.lstsq(design(nn), vv, rcond=None)
        return coef

    coef = fit(ns, v)
    rms = float(np.sqrt(np.mean((design(ns) @ coef - v) ** 2)))
    half = ns.size // 2
    if ns.size - half >= p + 1:
        a2 = fit(ns[half:], v[half:])[0]
        err = abs(coef[0] - a2) + rms
    else:
        err = abs(coef[0] - v[-1]) + rms
    return float(coef[0]), float(err), rms


def estimate_free_energy(
    env,
    potential,
    geom,
    n_schedule: Sequence[int],
    zeta=None,
    *,
    model: str | None = None,
    representation: str = "vertex_average",
    **kw,
) -> FreeEnergySeries:
    """``F_n/n`` along a schedule from one recursion up to ``max(n_schedule)``."""
    from .geometry import face_of, path_endpoint

    ns = sorted(set(int(n) for n in n_schedule))
    want = set(ns)
    rep = None
    if zeta is not None:
        rep = face_of(geom, zeta, representation)[1]
    values = []
    for layer in iter_layers(env, potential, geom, ns[-1], **kw):
        if layer.stage not in want:
            continue
        if rep is None:
            v = layer.log_total()
        else:
            v = layer.log_mass_at(path_endpoint(rep, layer.stage).endpoint)
        if isinstance(v, Unreachable):
            raise ValueError(f"endpoint unreachable at n={layer.stage}")
        values.append(v / layer.stage if layer.stage else v)
    if model is None:
        model = "inverse" if zeta is None else "log"
    a, err, rms = extrapolate(ns, values, model)
    return FreeEnergySeries(
        target="line" if zeta is None else "point",
        zeta=None if zeta is None else tuple(rep.zeta),
        ns=ns,
        values=values,
        estimate=a,
        error=err,
        residual=rms,
        model=model,
        notes=["extrapolation model is a heuristic; convergence rate is not certified"],
    )
