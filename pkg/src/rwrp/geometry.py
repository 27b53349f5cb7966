"""Exact geometry of the admissible step set.

The step set ``R`` is a finite list of integer vectors.  Everything that
depends on the convex hull ``U = conv R`` (facets, extreme points, faces,
convex representations of a velocity) is computed in rational arithmetic,
so face membership never depends on floating point round-off.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import _exact as ex

FLOAT_TOL = 1e-12


class GeometryError(ValueError):
    """Invalid step set, weights or velocity."""


@dataclass(frozen=True)
class Facet:
    normal: tuple[int, ...]
    offset: Fraction
    steps: frozenset[int]

    def slack(self, x) -> Fraction | float:
        return self.offset - sum(a * c for a, c in zip(self.normal, x))


@dataclass(frozen=True)
class Face:
    """A face ``U0`` of ``U`` given by the steps lying on it."""

    steps: tuple[int, ...]
    vectors: tuple[tuple[int, ...], ...]
    affine_basis: tuple[tuple[int, ...], ...]
    contains_origin: bool

    @property
    def dim(self) -> int:
        return len(self.affine_basis)


@dataclass(frozen=True)
class ConvexRep:
    """Convex weights on ``points`` whose barycenter is ``zeta``."""

    zeta: tuple
    points: tuple[tuple, ...]
    coefficients: tuple
    exact: bool
    face: Face | None = None

    def barycenter(self) -> tuple:
        d = len(self.zeta)
        zero = Fraction(0) if self.exact else 0.0
        return tuple(
            sum((b * p[i] for b, p in zip(self.coefficients, self.points)), zero) for i in range(d)
        )


@dataclass(frozen=True)
class PathPlan:
    """Step counts of an ``n``-step admissible path approximating ``n * zeta``."""

    n: int
    counts: tuple[int, ...]
    endpoint: tuple[int, ...]
    rep: ConvexRep


@dataclass(frozen=True)
class StepGeometry:
    dim: int
    steps: tuple[tuple[int, ...], ...]
    weights: tuple[float, ...]
    exact_weights: tuple[Fraction, ...] | None
    M: float
    affine_dim: int
    equalities: tuple[tuple[tuple[int, ...], Fraction], ...]
    facets: tuple[Facet, ...]
    vertices: tuple[int, ...]
    faces: tuple[Face, ...]
    span_basis: tuple[tuple[int, ...], ...]
    origin_in_U: bool
    origin_in_ri_U: bool
    strictly_directed: bool
    u_hat: tuple[int, ...] | None
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def steps_array(self) -> np.ndarray:
        return np.asarray(self.steps, dtype=np.int64).reshape(len(self.steps), self.dim)

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(np.asarray(self.weights, dtype=float))

    @property
    def mean_step(self) -> np.ndarray:
        return np.asarray(self.weights) @ self.steps_array

    @property
    def extreme_points(self) -> tuple[tuple[int, ...], ...]:
        return tuple(self.steps[i] for i in self.vertices)

    def step_index(self, z) -> int:
        return self._index[tuple(int(c) for c in z)]

    def contains(self, zeta, tol: float = FLOAT_TOL) -> bool:
        exact = all(ex.is_exact(c) for c in zeta)
        z = ex.frac_vector(zeta) if exact else [float(c) for c in zeta]
        for a, b in self.equalities:
            v = sum(ai * zi for ai, zi in zip(a, z)) - b
            if (v != 0) if exact else abs(v) > tol * max(1.0, _norm1(a)):
                return False
        for f in self.facets:
            s = f.slack(z)
            if (s < 0) if exact else s < -tol * max(1.0, _norm1(f.normal)):
                return False
        return True

    def describe(self) -> dict:
        return {
            "dimension": self.dim,
            "steps": [list(s) for s in self.steps],
            "weights": list(self.weights),
            "M": self.M,
            "affine_dim": self.affine_dim,
            "extreme_points": [list(self.steps[i]) for i in self.vertices],
            "facets": [
                {"normal": list(f.normal), "offset": str(f.offset), "steps": sorted(f.steps)}
                for f in self.facets
            ],
            "faces": [
                {"steps": list(f.steps), "dim": f.dim, "contains_origin": f.contains_origin}
                for f in self.faces
            ],
            "origin_in_U": self.origin_in_U,
            "origin_in_ri_U": self.origin_in_ri_U,
            "strictly_directed": self.strictly_directed,
            "u_hat": list(self.u_hat) if self.u_hat is not None else None,
        }


def _norm1(v) -> float:
    return float(sum(abs(c) for c in v))


def _affine_basis(points: Sequence[Sequence[Fraction]]) -> list[list[Fraction]]:
    """Row basis of span(points - points[0])."""
    if len(points) <= 1:
        return []
    diffs = [ex.sub(p, points[0]) for p in points[1:]]
    red, _ = ex.rref(diffs)
    return red


def build_geometry(d: int, steps, weights=None) -> StepGeometry:
    """Build the hull description of ``conv(steps)``.

    ``weights`` defaults to the uniform kernel.  Exact (``Fraction``/int/str)
    weights must sum to one exactly; float weights within ``1e-12``.
    """
    steps = [tuple(int(c) for c in s) for s in steps]
    if not steps:
        raise GeometryError("step set is empty")
    if any(len(s) != d for s in steps):
        raise GeometryError(f"every step must have dimension {d}")
    if len(set(steps)) != len(steps):
        raise GeometryError("steps must be distinct")
    if d > 4:
        warnings.warn("hull computations in dimension > 4 may be slow", stacklevel=2)

    nR = len(steps)
    if weights is None:
        exact_w = tuple(Fraction(1, nR) for _ in steps)
    else:
        if len(weights) != nR:
            raise GeometryError("one weight per step is required")
        if all(ex.is_exact(w) for w in weights):
            exact_w = tuple(ex.to_fraction(w) for w in weights)
            if sum(exact_w) != 1:
                raise GeometryError("kernel weights must sum to 1")
        else:
            exact_w = None
            if abs(sum(float(w) for w in weights) - 1.0) > 1e-12:
                raise GeometryError("kernel weights must sum to 1")
    fw = tuple(float(w) for w in (exact_w if exact_w is not None else weights))
    if any(w <= 0 for w in fw):
        raise GeometryError("kernel weights must be positive")

    pts = [ex.frac_vector(s) for s in steps]
    basis = _affine_basis(pts)
    k = len(basis)
    # equalities a.x = b cutting out the affine hull
    equalities = []
    for a in ex.nullspace(basis, d) if k < d else []:
        a_int = ex.primitive_integer(a)
        equalities.append((tuple(a_int), ex.dot([Fraction(c) for c in a_int], pts[0])))

    facets = _facets(pts, basis)
    vertices = _vertices(pts, basis, facets)
    span_basis = tuple(tuple(ex.primitive_integer(b)) for b in basis)

    origin = [Fraction(0)] * d
    origin_in_U = all(ex.dot([Fraction(c) for c in a], origin) == b for a, b in equalities) and all(
        f.slack(origin) >= 0 for f in facets
    )
    u_hat = None
    if not origin_in_U:
        u_hat = _separating_direction(pts, equalities, facets)
    M = max(math.sqrt(sum(c * c for c in s)) for s in steps)

    geom = StepGeometry(
        dim=d,
        steps=tuple(steps),
        weights=fw,
        exact_weights=exact_w,
        M=M,
        affine_dim=k,
        equalities=tuple(equalities),
        facets=tuple(facets),
        vertices=tuple(vertices),
        faces=(),
        span_basis=span_basis,
        origin_in_U=origin_in_U,
        origin_in_ri_U=False,
        strictly_directed=not origin_in_U,
        u_hat=u_hat,
    )
    geom._index.update({s: i for i, s in enumerate(steps)})
    faces = _enumerate_faces(geom)
    object.__setattr__(geom, "faces", faces)
    if origin_in_U:
        f0 = _minimal_face_indices(geom, origin, exact=True)
        object.__setattr__(geom, "origin_in_ri_U", len(f0) == nR)
    return geom


def _facets(pts, basis) -> list[Facet]:
    k = len(basis)
    if k == 0:
        return []
    n = len(pts)
    found: dict[frozenset, Facet] = {}
    for S in itertools.combinations(range(n), k):
        sub = [pts[i] for i in S]
        diffs = [ex.sub(p, sub[0]) for p in sub[1:]]
        if diffs and ex.rank(diffs) < k - 1:
            continue
        # normal in span(basis) orthogonal to the diffs: normal = c^T basis
        cons = [[ex.dot(b, dv) for b in basis] for dv in diffs]
        ns = ex.nullspace(cons, k) if cons else [[Fraction(int(i == j)) for j in range(k)] for i in range(k)]
        if len(ns) != 1:
            continue
        c = ns[0]
        normal = [sum((ci * b[j] for ci, b in zip(c, basis)), Fraction(0)) for j in range(len(pts[0]))]
        vals = [ex.dot(normal, p) for p in pts]
        ref = vals[S[0]]
        if all(v <= ref for v in vals):
            pass
        elif all(v >= ref for v in vals):
            normal = [-x for x in normal]
            vals = [-v for v in vals]
            ref = -ref
        else:
            continue
        on = frozenset(i for i, v in enumerate(vals) if v == ref)
        if on in found:
            continue
        a = ex.primitive_integer(normal)
        scale = Fraction(a[next(i for i, x in enumerate(a) if x != 0)]) / normal[next(i for i, x in enumerate(a) if x != 0)]
        found[on] = Facet(tuple(a), ref * scale, on)
    return sorted(found.values(), key=lambda f: (sorted(f.steps), f.normal))


def _vertices(pts, basis, facets) -> list[int]:
    k = len(basis)
    if k == 0:
        return list(range(len(pts)))
    out = []
    for i in range(len(pts)):
        normals = [[Fraction(c) for c in f.normal] for f in facets if i in f.steps]
        if normals and ex.rank(normals) == k:
            out.append(i)
    return out


def _separating_direction(pts, equalities, facets) -> tuple[int, ...]:
    zero = [Fraction(0)] * len(pts[0])
    for a, b in equalities:
        if b != 0:
            sgn = 1 if b > 0 else -1
            return tuple(sgn * c for c in a)
    for f in facets:
        if f.slack(zero) < 0:
            return tuple(-c for c in f.normal)
    raise AssertionError("origin outside U but no separating facet found")


def _enumerate_faces(geom: StepGeometry) -> tuple[Face, ...]:
    full = frozenset(range(geom.n_steps))
    seen = {full}
    queue = [full]
    while queue:
        cur = queue.pop()
        for f in geom.facets:
            nxt = cur & f.steps
            if nxt and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    origin_face = None
    if geom.origin_in_U:
        origin_face = _minimal_face_indices(geom, [Fraction(0)] * geom.dim, exact=True)
    faces = []
    for s in sorted(seen, key=lambda x: (len(x), sorted(x))):
        idx = tuple(sorted(s))
        faces.append(_make_face(geom, idx, origin_face))
    return tuple(faces)


def _make_face(geom: StepGeometry, idx: tuple[int, ...], origin_face=None) -> Face:
    vecs = tuple(geom.steps[i] for i in idx)
    basis = _affine_basis([ex.frac_vector(v) for v in vecs])
    contains0 = origin_face is not None and set(origin_face) <= set(idx)
    return Face(
        steps=idx,
        vectors=vecs,
        affine_basis=tuple(tuple(ex.primitive_integer(b)) for b in basis),
        contains_origin=contains0,
    )


def _minimal_face_indices(geom: StepGeometry, z, exact: bool, tol: float = FLOAT_TOL) -> tuple[int, ...]:
    idx = frozenset(range(geom.n_steps))
    for f in geom.facets:
        s = f.slack(z)
        tight = (s == 0) if exact else abs(s) <= tol * max(1.0, _norm1(f.normal))
        if tight:
            idx &= f.steps
    return tuple(sorted(idx))


def _parse_velocity(zeta, d: int):
    if len(zeta) != d:
        raise GeometryError(f"velocity must have dimension {d}")
    exact = all(ex.is_exact(c) for c in zeta)
    if exact:
        return tuple(ex.to_fraction(c) for c in zeta), True
    return tuple(float(c) for c in zeta), False


def face_of(geom: StepGeometry, zeta, representation: str = "vertex_average") -> tuple[Face, ConvexRep]:
    """Unique face ``U0`` with ``zeta`` in its relative interior, plus weights.

    The weights are strictly positive on every step of ``U0``.  For exact
    (rational) ``zeta`` they are rational; ``representation`` selects between
    the average of the vertices of the representation polytope and (float
    only) its analytic center.
    """
    z, exact = _parse_velocity(zeta, geom.dim)
    if not geom.contains(z):
        raise GeometryError(f"velocity {zeta} lies outside U")
    idx = _minimal_face_indices(geom, z, exact)
    face = next(f for f in geom.faces if f.steps == idx)
    if representation == "vertex_average":
        coef = _vertex_average(geom, idx, z, exact)
    elif representation == "analytic_center":
        coef = _analytic_center(geom, idx, z)
        exact = False
    else:
        raise GeometryError(f"unknown representation {representation!r}")
    full = [Fraction(0) if exact else 0.0] * geom.n_steps
    for i, c in zip(idx, coef):
        full[i] = c
    rep = ConvexRep(zeta=z, points=geom.steps, coefficients=tuple(full), exact=exact, face=face)
    return face, rep


def explicit_rep(geom: StepGeometry, coefficients) -> ConvexRep:
    """Representation from user-given weights on all of ``R``."""
    if len(coefficients) != geom.n_steps:
        raise GeometryError("one coefficient per step is required")
    exact = all(ex.is_exact(c) for c in coefficients)
    coef = tuple(ex.to_fraction(c) for c in coefficients) if exact else tuple(float(c) for c in coefficients)
    if any(c < 0 for c in coef) or (sum(coef) != 1 if exact else abs(sum(coef) - 1) > FLOAT_TOL):
        raise GeometryError("coefficients must be a probability vector")
    rep = ConvexRep(zeta=(), points=geom.steps, coefficients=coef, exact=exact)
    return ConvexRep(zeta=rep.barycenter(), points=geom.steps, coefficients=coef, exact=exact)


def _barycentric(points, z, exact: bool):
    """Affine coordinates of ``z`` relative to affinely independent ``points``."""
    if exact:
        A = [[p[i] for p in points] for i in range(len(z))] + [[Fraction(1)] * len(points)]
        sol = ex.solve(A, list(z) + [Fraction(1)])
        if sol is None:
            return None
        check = [sum((s * p[i] for s, p in zip(sol, points)), Fraction(0)) for i in range(len(z))]
        return sol if check == list(z) else None
    A = np.vstack([np.asarray(points, dtype=float).T, np.ones(len(points))])
    b = np.append(np.asarray(z, dtype=float), 1.0)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    if np.max(np.abs(A @ sol - b)) > 1e-10:
        return None
    return list(sol)


def _vertex_average(geom: StepGeometry, idx, z, exact: bool):
    vecs = [ex.frac_vector(geom.steps[i]) for i in idx]
    if len(idx) == 1:
        return [Fraction(1) if exact else 1.0]
    k = len(_affine_basis(vecs))
    tol = 0 if exact else -1e-13
    reps = []
    for S in itertools.combinations(range(len(idx)), k + 1):
        sub = [vecs[i] for i in S]
        if len(_affine_basis(sub)) != k:
            continue
        pts = sub if exact else [[float(c) for c in v] for v in sub]
        lam = _barycentric(pts, z, exact)
        if lam is None or any(l < tol for l in lam):
            continue
        full = [Fraction(0) if exact else 0.0] * len(idx)
        for i, l in zip(S, lam):
            full[i] = l if exact else max(l, 0.0)
        if full not in reps:
            reps.append(full)
    if not reps:
        raise GeometryError(f"no convex representation of {z} on face {idx}")
    m = len(reps)
    if exact:
        return [sum((r[j] for r in reps), Fraction(0)) / m for j in range(len(idx))]
    avg = np.mean(np.asarray(reps), axis=0)
    return list(avg / avg.sum())


def _analytic_center(geom: StepGeometry, idx, z):
    from scipy.optimize import minimize

    start = np.asarray(_vertex_average(geom, idx, tuple(float(c) for c in z), False), dtype=float)
    if len(idx) == 1:
        return [1.0]
    V = np.asarray([geom.steps[i] for i in idx], dtype=float)
    A = np.vstack([V.T, np.ones(len(idx))])
    # null space of A parametrizes the representation polytope
    _, s, vt = np.linalg.svd(A)
    r = int(np.sum(s > 1e-10))
    N = vt[r:].T
    if N.shape[1] == 0:
        return list(start)

    def f(c):
        b = start + N @ c
        if np.any(b <= 0):
            return np.inf
        return -np.sum(np.log(b))

    res = minimize(f, np.zeros(N.shape[1]), method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
    b = start + N @ res.x
    return list(b / b.sum())


def path_endpoint(rep: ConvexRep, n: int) -> PathPlan:
    """Counts ``floor(n beta_z) + b_z`` by largest-remainder apportionment.

    Ties in the remainders go to the lexicographically smaller step.
    """
    if n < 0:
        raise GeometryError("path length must be nonnegative")
    beta = rep.coefficients
    if rep.exact:
        scaled = [n * b for b in beta]
        floors = [math.floor(s) for s in scaled]
        rema = [s - f for s, f in zip(scaled, floors)]
    else:
        scaled = [n * float(b) for b in beta]
        floors = [int(math.floor(s + 1e-12)) for s in scaled]
        rema = [max(s - f, 0.0) for s, f in zip(scaled, floors)]
    deficit = n - sum(floors)
    order = sorted(
        (i for i in range(len(beta)) if beta[i] > 0),
        key=lambda i: (-rema[i], rep.points[i]),
    )
    counts = list(floors)
    for i in order[:deficit]:
        counts[i] += 1
    if sum(counts) != n:
        raise AssertionError("apportionment failed")
    d = len(rep.points[0])
    endpoint = tuple(sum(c * p[j] for c, p in zip(counts, rep.points)) for j in range(d))
    return PathPlan(n=n, counts=tuple(counts), endpoint=endpoint, rep=rep)


def plan_for(geom: StepGeometry, zeta, n: int, representation: str = "vertex_average") -> PathPlan:
    return path_endpoint(face_of(geom, zeta, representation)[1], n)


def denominator(zeta) -> int:
    """Least common denominator of a rational velocity (1 for floats)."""
    q = 1
    for c in zeta:
        if ex.is_exact(c):
            den = ex.to_fraction(c).denominator
            q = q * den // math.gcd(q, den)
    return q


# ---------------------------------------------------------------------------
# coefficient transport


def _simplices(points, exact: bool):
    basis = _affine_basis(points if exact else [ex.frac_vector([Fraction(c) for c in p]) for p in points])
    k = len(basis)
    out = []
    for S in itertools.combinations(range(len(points)), k + 1):
        sub = [points[i] for i in S]
        fsub = sub if exact else [[Fraction(c) for c in p] for p in sub]
        if len(_affine_basis(fsub)) == k:
            out.append(S)
    return out, k


def _bary_matrix_norm(points, S) -> float:
    P = np.asarray([points[i] for i in S], dtype=float)
    pinv = np.linalg.pinv(np.vstack([P.T, np.ones(len(S))]))
    return float(np.max(np.sum(np.abs(pinv), axis=1)))


def coefficient_transport(points, beta, xis) -> list[ConvexRep]:
    """Convex weights ``alpha^n`` for ``xi_n`` on ``points`` converging to ``beta``.

    ``beta`` must be a strictly positive convex representation of some
    ``zeta`` over ``points``.  Each ``xi_n`` is first covered by an affinely
    independent spanning subset ``I0`` of ``points``; the weights are the
    barycentric coordinates of ``xi_n`` in ``I0`` padded with zeros, plus the
    fixed kernel vector ``beta - [beta_bar 0]``.  Early terms where this
    produces a negative weight fall back to the plain barycentric weights.
    With rational points and velocities every output is rational.
    """
    pts_exact = all(ex.is_exact(c) for p in points for c in p)
    xi_exact = all(ex.is_exact(c) for x in xis for c in x)
    beta_exact = all(ex.is_exact(b) for b in beta)
    exact = pts_exact and xi_exact
    if exact:
        P = [ex.frac_vector(p) for p in points]
        X = [ex.frac_vector(x) for x in xis]
    else:
        P = [[float(c) for c in p] for p in points]
        X = [[float(c) for c in x] for x in xis]
    B = [ex.to_fraction(b) for b in beta] if beta_exact else [float(b) for b in beta]
    if len(B) != len(P):
        raise GeometryError("one coefficient per point is required")
    if any(b <= 0 for b in B) or (sum(B) != 1 if beta_exact else abs(sum(B) - 1) > FLOAT_TOL):
        raise GeometryError("beta must be strictly positive and sum to 1")

    Pf = [ex.frac_vector([c if isinstance(c, Fraction) else Fraction(c) for c in p]) for p in P]
    simplices, k = _simplices(Pf, True)
    norms = {S: _bary_matrix_norm(P, S) for S in simplices}
    ranked = sorted(simplices, key=lambda S: (norms[S], S))
    cache: dict = {}
    out = []
    for xi in X:
        chosen = None
        for S in ranked:
            sub = [P[i] for i in S]
            lam = _barycentric(sub, xi, exact)
            if lam is not None and all(l >= (0 if exact else -1e-13) for l in lam):
                chosen = (S, lam)
                break
        if chosen is None:
            raise GeometryError(f"xi={xi} is not in conv I")
        S, lam = chosen
        if S not in cache:
            cache[S] = _transport_offset(P, S, B, exact, beta_exact)
        y = cache[S]
        alpha = list(y)
        for i, l in zip(S, lam):
            alpha[i] = alpha[i] + l
        if any(a < 0 for a in alpha):
            alpha = [Fraction(0) if exact else 0.0] * len(P)
            for i, l in zip(S, lam):
                alpha[i] = l if exact else max(l, 0.0)
        out.append(ConvexRep(zeta=tuple(xi), points=tuple(tuple(p) for p in P), coefficients=tuple(alpha), exact=exact))
    return out


def _transport_offset(P, S, B, exact: bool, beta_exact: bool):
    """Kernel vector ``y = beta - [beta_bar 0]`` for the simplex ``S``."""
    others = [i for i in range(len(P)) if i not in S]
    sub = [P[i] for i in S]
    if exact:
        gamma = {j: _barycentric(sub, P[j], True) for j in others}
    else:
        gamma = {j: _barycentric(sub, P[j], False) for j in others}
    # beta_bar_z = beta_z + sum_j gamma_{z,j} beta_j  over z in S
    if exact and beta_exact:
        y = [Fraction(0)] * len(P)
        for j in others:
            y[j] = B[j]
            for pos, i in enumerate(S):
                y[i] -= gamma[j][pos] * B[j]
        return y
    y = [0.0] * len(P)
    for j in others:
        y[j] = float(B[j])
        for pos, i in enumerate(S):
            y[i] -= float(gamma[j][pos]) * float(B[j])
    if not exact:
        return y
    # rational points with float beta: the float kernel vector is rounded onto
    # an exact rational basis of ker A so that alpha stays exactly rational.
    A = [[Fraction(int(r == c)) for c in range(len(S))] + [gamma[j][r] for j in others] for r in range(len(S))]
    order = list(S) + others
    K = ex.nullspace(A, len(order))
    if not K:
        return [Fraction(0)] * len(P)
    Kf = np.asarray([[float(v) for v in kv] for kv in K]).T
    yo = np.asarray([y[i] for i in order])
    c, *_ = np.linalg.lstsq(Kf, yo, rcond=None)
    cq = [Fraction(float(ci)) for ci in c]
    yq = [sum((ci * kv[r] for ci, kv in zip(cq, K)), Fraction(0)) for r in range(len(order))]
    out = [Fraction(0)] * len(P)
    for pos, i in enumerate(order):
        out[i] = yq[pos]
    return out
