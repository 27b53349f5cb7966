"""Random environments on Z^d and potentials built on top of them.

Site values of i.i.d. environments are a pure function of ``(seed, x)``:
a splitmix64-style hash of the seed and the coordinates is turned into a
uniform variate and pushed through the marginal's quantile function.  No
storage is needed and the values do not depend on evaluation order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import ndtri

from ._kernels import hash_rows

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_COORD_KEYS = (
    np.uint64(0xD6E8FEB86659FD93),
    np.uint64(0xA0761D6478BD642F),
    np.uint64(0xE7037ED1A0B428DB),
    np.uint64(0x8EBC6AF09C88C6E3),
    np.uint64(0x589965CC75374CC3),
    np.uint64(0x1D8E4E27C47D124F),
)

_KEY_ARRAY = np.asarray(_COORD_KEYS, dtype=np.uint64)


class KernelError(ValueError):
    """An RWRE kernel that is not a strictly positive probability vector."""


class ClassLError(ValueError):
    """Configuration outside the documented sufficient conditions."""


def _mix(h: np.ndarray) -> np.ndarray:
    h = h + _GOLDEN
    h = (h ^ (h >> np.uint64(30))) * _M1
    h = (h ^ (h >> np.uint64(27))) * _M2
    return h ^ (h >> np.uint64(31))


def site_hash(seed: int, x: np.ndarray, stream: int = 0) -> np.ndarray:
    """64-bit hash of ``(seed, stream, x)`` for each row of ``x``."""
    x = np.asarray(x, dtype=np.int64)
    if x.ndim == 1:
        x = x[None, :]
    with np.errstate(over="ignore"):
        start = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(stream * 0x632BE59BD9B4E019 & 0xFFFFFFFFFFFFFFFF))
    h = hash_rows(np.uint64(start), np.ascontiguousarray(x), _KEY_ARRAY)
    return h


def site_uniform(seed: int, x: np.ndarray, stream: int = 0) -> np.ndarray:
    """Uniform variates in the open interval (0, 1)."""
    h = site_hash(seed, x, stream)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


# ---------------------------------------------------------------------------
# marginals


@dataclass(frozen=True)
class Gaussian:
    mean: float = 0.0
    std: float = 1.0

    def from_uniform(self, u):
        return self.mean + self.std * ndtri(u)

    def moments(self):
        return self.mean, self.std**2

    @property
    def support(self):
        return (-math.inf, math.inf) if self.std > 0 else (self.mean, self.mean)


@dataclass(frozen=True)
class Bernoulli:
    """``high`` with probability ``p``, else ``low``."""

    p: float
    low: float = 0.0
    high: float = 1.0

    def from_uniform(self, u):
        return np.where(u < self.p, self.high, self.low)

    def moments(self):
        m = self.p * self.high + (1 - self.p) * self.low
        return m, self.p * (1 - self.p) * (self.high - self.low) ** 2

    @property
    def support(self):
        return (min(self.low, self.high), max(self.low, self.high))

    @property
    def atoms(self):
        return [(self.low, 1 - self.p), (self.high, self.p)]


@dataclass(frozen=True)
class DiscreteTable:
    values: tuple
    probs: tuple

    def __post_init__(self):
        if len(self.values) != len(self.probs) or not self.values:
            raise ValueError("values and probs must be nonempty and of equal length")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1) > 1e-12:
            raise ValueError("probs must be a probability vector")

    def from_uniform(self, u):
        cdf = np.cumsum(self.probs)
        cdf[-1] = 1.0
        idx = np.searchsorted(cdf, u, side="right")
        return np.asarray(self.values, dtype=float)[np.minimum(idx, len(self.values) - 1)]

    def moments(self):
        v = np.asarray(self.values, float)
        p = np.asarray(self.probs, float)
        m = float(p @ v)
        return m, float(p @ (v - m) ** 2)

    @property
    def support(self):
        return (min(self.values), max(self.values))

    @property
    def atoms(self):
        return list(zip(self.values, self.probs))


@dataclass(frozen=True)
class Constant:
    c: float

    def from_uniform(self, u):
        return np.full(np.shape(u), float(self.c))

    def moments(self):
        return float(self.c), 0.0

    @property
    def support(self):
        return (self.c, self.c)

    @property
    def atoms(self):
        return [(self.c, 1.0)]


Marginal = Gaussian | Bernoulli | DiscreteTable | Constant


# ---------------------------------------------------------------------------
# environments


@dataclass(frozen=True)
class IIDEnvironment:
    marginal: Marginal
    seed: int = 0
    offset: tuple[int, ...] | None = None

    kind = "iid"

    def values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        if x.ndim == 1:
            x = x[None, :]
        if self.offset is not None:
            x = x + np.asarray(self.offset, dtype=np.int64)
        if isinstance(self.marginal, Constant):
            return np.full(x.shape[0], float(self.marginal.c))
        return self.marginal.from_uniform(site_uniform(self.seed, x))

    def value(self, x) -> float:
        return float(self.values(np.asarray(x)[None, :])[0])

    def shift(self, y) -> "IIDEnvironment":
        y = tuple(int(c) for c in y)
        base = self.offset or (0,) * len(y)
        return replace(self, offset=tuple(a + b for a, b in zip(base, y)))

    def with_seed(self, seed: int) -> "IIDEnvironment":
        return replace(self, seed=int(seed))

    @property
    def support(self):
        return self.marginal.support


@dataclass(frozen=True)
class PeriodicEnvironment:
    """Site values ``table[x mod L]`` for a period vector ``L``."""

    table: np.ndarray
    offset: tuple[int, ...] | None = None

    kind = "periodic"

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        if t.size == 0 or not np.all(np.isfinite(t)):
            raise ValueError("periodic table must be nonempty and finite")
        object.__setattr__(self, "table", t)

    @property
    def period(self) -> tuple[int, ...]:
        return self.table.shape

    def values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        if x.ndim == 1:
            x = x[None, :]
        if self.offset is not None:
            x = x + np.asarray(self.offset, dtype=np.int64)
        L = np.asarray(self.table.shape, dtype=np.int64)
        idx = np.mod(x, L)
        return self.table[tuple(idx.T)]

    def value(self, x) -> float:
        return float(self.values(np.asarray(x)[None, :])[0])

    def shift(self, y) -> "PeriodicEnvironment":
        y = tuple(int(c) for c in y)
        base = self.offset or (0,) * len(y)
        return replace(self, offset=tuple(a + b for a, b in zip(base, y)))

    @property
    def support(self):
        return (float(self.table.min()), float(self.table.max()))


Environment = IIDEnvironment | PeriodicEnvironment


def env_value(env: Environment, x) -> float:
    return env.value(x)


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class Potential:
    """Base class; subclasses implement ``_raw``.

    ``values`` returns ``beta * g(T_x omega, z_{1,ell})`` for every row of
    ``positions``; ``memory`` is an ``(m, d)`` array of upcoming steps with
    ``m >= ell`` (extra entries are ignored, which is how a potential is
    lifted to a longer memory).
    """

    beta: float = 1.0

    ell = 0
    radius = 0

    def values(self, env, positions, memory=None) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.int64)
        if positions.ndim == 1:
            positions = positions[None, :]
        mem = _as_memory(memory, positions.shape[1])
        if mem.shape[0] < self.ell:
            raise ValueError(f"potential needs {self.ell} memory steps, got {mem.shape[0]}")
        return self.beta * self._raw(env, positions, mem[: self.ell])

    def _raw(self, env, positions, memory):
        raise NotImplementedError

    def with_beta(self, beta: float):
        return replace(self, beta=float(beta))

    def value_range(self, env) -> tuple[float, float]:
        return (-math.inf, math.inf)

    @property
    def depends_on_memory(self) -> bool:
        return self.ell > 0


def _as_memory(memory, d):
    if memory is None:
        return np.zeros((0, d), dtype=np.int64)
    m = np.asarray(memory, dtype=np.int64)
    if m.size == 0:
        return np.zeros((0, d), dtype=np.int64)
    return m.reshape(-1, d)


def _scaled_range(lo, hi, beta):
    a, b = beta * lo, beta * hi
    return (min(a, b), max(a, b))


@dataclass(frozen=True)
class SitePotential(Potential):
    """``g = f(omega_x)``, identity ``f`` by default."""

    transform: Callable | None = None
    ell_: int = 0

    @property
    def ell(self):
        return self.ell_

    def _raw(self, env, positions, memory):
        w = env.values(positions)
        return w if self.transform is None else np.asarray(self.transform(w), dtype=float)

    def value_range(self, env):
        lo, hi = env.support
        if self.transform is not None:
            if isinstance(env, PeriodicEnvironment):
                v = np.asarray(self.transform(env.table.ravel()), float)
                return _scaled_range(v.min(), v.max(), self.beta)
            return (-math.inf, math.inf)
        return _scaled_range(lo, hi, self.beta)

    @property
    def depends_on_memory(self):
        return False


@dataclass(frozen=True)
class StepPotential(Potential):
    """``g = f(omega_x, z_1)`` with ``f(omega_array, z) -> array``."""

    func: Callable | None = None

    ell = 1

    def _raw(self, env, positions, memory):
        return np.asarray(self.func(env.values(positions), tuple(memory[0])), dtype=float)


@dataclass(frozen=True)
class StretchedPotential(Potential):
    """``g = psi(omega_x) + h . z_1``."""

    h: tuple = ()
    psi: Callable | None = None

    ell = 1

    def _raw(self, env, positions, memory):
        w = env.values(positions)
        base = np.zeros_like(w) if self.psi is None else np.asarray(self.psi(w), dtype=float)
        return base + float(np.dot(self.h, memory[0]))


@dataclass(frozen=True)
class RWREPotential(Potential):
    """``g = log p_{z_1}(omega_x)`` for a site-dependent kernel.

    ``kernel_map`` maps an array of site values to an ``(N, |R|)`` array of
    transition probabilities, columns ordered as ``steps``.
    """

    steps: tuple = ()
    kernel_map: Callable | None = None
    check: bool = True

    ell = 1

    def kernels(self, env, positions) -> np.ndarray:
        k = np.asarray(self.kernel_map(env.values(positions)), dtype=float)
        k = k.reshape(-1, len(self.steps))
        if self.check:
            if np.any(k <= 0) or np.any(np.abs(k.sum(axis=1) - 1) > 1e-12):
                bad = int(np.argmax((k <= 0).any(axis=1) | (np.abs(k.sum(axis=1) - 1) > 1e-12)))
                raise KernelError(f"invalid RWRE kernel {k[bad]} at site {np.asarray(positions)[bad]}")
        return k

    def _raw(self, env, positions, memory):
        col = self.steps.index(tuple(int(c) for c in memory[0]))
        return np.log(self.kernels(env, positions)[:, col])

    @classmethod
    def deterministic(cls, steps, q, beta: float = 1.0):
        q = np.asarray(q, dtype=float)
        steps = tuple(tuple(int(c) for c in s) for s in steps)
        return cls(beta=beta, steps=steps, kernel_map=_ConstKernel(tuple(q)))

    @classmethod
    def from_table(cls, steps, values, kernels, beta: float = 1.0):
        """Kernel ``kernels[i]`` at sites whose value equals ``values[i]``."""
        steps = tuple(tuple(int(c) for c in s) for s in steps)
        return cls(beta=beta, steps=steps, kernel_map=_TableKernel(tuple(values), tuple(map(tuple, kernels))))

    def value_range(self, env):
        if isinstance(self.kernel_map, _ConstKernel):
            v = np.log(self.kernel_map.q)
        elif isinstance(self.kernel_map, _TableKernel):
            v = np.log(np.asarray(self.kernel_map.kernels))
        else:
            return (-math.inf, math.inf)
        return _scaled_range(v.min(), v.max(), self.beta)


@dataclass(frozen=True)
class _ConstKernel:
    q: tuple

    def __call__(self, w):
        return np.broadcast_to(np.asarray(self.q, float), (np.shape(w)[0], len(self.q)))


@dataclass(frozen=True)
class _TableKernel:
    values: tuple
    kernels: tuple

    def __call__(self, w):
        w = np.asarray(w)
        vals = np.asarray(self.values, dtype=float)
        idx = np.argmin(np.abs(w[:, None] - vals[None, :]), axis=1)
        if np.any(np.abs(vals[idx] - w) > 1e-12):
            raise KernelError("site value without an assigned kernel")
        return np.asarray(self.kernels, dtype=float)[idx]


@dataclass(frozen=True)
class GeneralPotential(Potential):
    """``func(env, positions, memory) -> values`` with declared locality."""

    func: Callable | None = None
    ell_: int = 0
    radius_: int = 0

    @property
    def ell(self):
        return self.ell_

    @property
    def radius(self):
        return self.radius_

    def _raw(self, env, positions, memory):
        return np.asarray(self.func(env, positions, memory), dtype=float)


@dataclass(frozen=True)
class TiltedPotential(Potential):
    """``base + t . z_1``; lifts ``base`` to memory length at least one."""

    base: Potential | None = None
    t: tuple = ()

    @property
    def ell(self):
        return max(self.base.ell, 1)

    @property
    def radius(self):
        return self.base.radius

    def values(self, env, positions, memory=None):
        positions = np.asarray(positions, dtype=np.int64)
        if positions.ndim == 1:
            positions = positions[None, :]
        mem = _as_memory(memory, positions.shape[1])
        return self.base.values(env, positions, mem) + self.beta * float(np.dot(self.t, mem[0]))

    def value_range(self, env):
        return (-math.inf, math.inf)


def potential_eval(env, potential: Potential, x, zs=None) -> float:
    """Scalar ``beta * g(T_x omega, z_{1,ell})``."""
    x = np.asarray(x, dtype=np.int64)
    return float(potential.values(env, x[None, :], zs)[0])


def check_class_L(env, potential: Potential, geom) -> list[str]:
    """Syntactic check of the sufficient conditions used throughout.

    Returns informational notes; raises ``ClassLError`` for configurations
    whose free energy is infinite (potential unbounded above with 0 in U).
    """
    notes = []
    lo, hi = potential.value_range(env)
    if isinstance(env, PeriodicEnvironment):
        notes.append("periodic environment: bounded local potential")
        return notes
    if hi == math.inf and geom.origin_in_U:
        raise ClassLError("potential unbounded above with 0 in U: the free energy may be +infinity")
    if not math.isfinite(lo) or not math.isfinite(hi):
        if not geom.strictly_directed:
            raise ClassLError("unbounded potentials require a strictly directed step set")
        if isinstance(getattr(env, "marginal", None), Gaussian):
            notes.append("Gaussian marginal: all moments finite (p > d holds)")
        else:
            notes.append("unbounded potential: moment condition E|g|^p < inf for some p > d is assumed")
    else:
        notes.append("bounded local potential in an i.i.d. environment")
    return notes
