"""Discrete Lebesgue, gradient and Gagliardo norms on lattice domains.

All sums are evaluated in lattice-index units and then scaled by the appropriate
power of ``h``; this keeps every dilation law exact in floating point.

Gagliardo double sums come in two flavours:

* box-only (the default): pairs of box nodes, with the function extended by zero
  to the constrained nodes of the box;
* ``exterior=True``: pairs over the whole infinite lattice ``h Z^N``.  The pairs
  with one node outside the tracked set are summed in closed form with Hurwitz
  (``N = 1``) or Epstein (``N = 2``) zeta values.
"""
from __future__ import annotations

import csv
import io
import json
import math
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy import integrate, special

from .domain import ConfigurationError, GridDomain

BLOCK_ROWS = 256
_THREADS = 1


def set_threads(n: int) -> None:
    """Worker threads used by the blocked pair sums (results do not depend on it)."""
    global _THREADS
    _THREADS = max(1, int(n))


def get_threads() -> int:
    return _THREADS


@dataclass(frozen=True)
class FracParams:
    s: float
    p: float

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ValueError(f"s must lie in (0, 1), got {self.s}")
        if not self.p > 1.0 or not math.isfinite(self.p):
            raise ValueError(f"p must lie in (1, inf), got {self.p}")

    @property
    def sp(self) -> float:
        return self.s * self.p


@dataclass(frozen=True)
class MathConstants:
    dim: int
    p: float

    @property
    def omega(self) -> float:
        return {1: 2.0, 2: math.pi}[self.dim]

    @property
    def alpha(self) -> float:
        if self.dim == 1:
            return 2.0 / self.p
        val, _ = integrate.quad(lambda th: abs(math.cos(th)) ** self.p, 0.0, 2 * math.pi,
                                limit=200, epsabs=1e-14, epsrel=1e-13)
        return val / self.p

    @property
    def beta(self) -> float:
        return 2.0 * self.dim * self.omega / self.p


def omega(dim: int) -> float:
    return MathConstants(dim, 2.0).omega


# ---------------------------------------------------------------------------
# grid functions


class GridFunction:
    """Values on the active nodes of a domain; zero everywhere else."""

    __slots__ = ("domain", "values")

    def __init__(self, domain: GridDomain, values):
        v = np.asarray(values, dtype=float).ravel().copy()
        if v.shape != (domain.n_active,):
            raise ValueError(f"expected {domain.n_active} active values, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function values must be finite")
        self.domain = domain
        self.values = v

    @classmethod
    def zeros(cls, domain: GridDomain) -> "GridFunction":
        return cls(domain, np.zeros(domain.n_active))

    @classmethod
    def from_full(cls, domain: GridDomain, arr, strict: bool = True, tol: float = 0.0) -> "GridFunction":
        """From a box-shaped array; nonzero entries on constrained nodes raise unless ``strict=False``."""
        arr = np.asarray(arr, dtype=float)
        if arr.shape != domain.shape:
            raise ValueError("array shape does not match the domain box")
        if strict and np.any(np.abs(arr[domain.constrained]) > tol):
            raise ValueError("function is nonzero on constrained nodes")
        return cls(domain, arr[domain.active])

    @classmethod
    def from_callable(cls, domain: GridDomain, f) -> "GridFunction":
        x = domain.active_coordinates()
        return cls(domain, f(*x.T))

    def full(self) -> np.ndarray:
        out = np.zeros(self.domain.shape)
        out[self.domain.active] = self.values
        return out

    def __call__(self, index) -> float:
        return float(self.full()[tuple(index)])

    def with_values(self, values) -> "GridFunction":
        return GridFunction(self.domain, values)

    def __add__(self, other):
        return self.with_values(self.values + _vals(other))

    def __sub__(self, other):
        return self.with_values(self.values - _vals(other))

    def __mul__(self, c):
        return self.with_values(self.values * c)

    __rmul__ = __mul__

    def maximum(self, other) -> "GridFunction":
        return self.with_values(np.maximum(self.values, _vals(other)))

    def minimum(self, other) -> "GridFunction":
        return self.with_values(np.minimum(self.values, _vals(other)))

    def support_mask(self) -> np.ndarray:
        return self.full() != 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(self.domain.dim)] + ["value"])
        for x, v in zip(self.domain.active_coordinates(), self.values):
            w.writerow([repr(float(c)) for c in x] + [repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, domain: GridDomain, text: str) -> "GridFunction":
        arr = np.zeros(domain.shape)
        rows = list(csv.reader(io.StringIO(text)))
        for row in rows[1:]:
            *xs, v = map(float, row)
            arr[domain.node_index(xs)] = v
        return cls.from_full(domain, arr)

    def to_json(self) -> str:
        return json.dumps({"coordinates": self.domain.active_coordinates().tolist(),
                           "values": self.values.tolist()})


def signed_power(x: np.ndarray, q: float) -> np.ndarray:
    """``sign(x) |x|^q``, finite at zero for ``q > 0``."""
    return np.sign(x) * np.abs(x) ** q


def _vals(x):
    return x.values if isinstance(x, GridFunction) else x


# ---------------------------------------------------------------------------
# forward differences


_DIFF_CACHE: "weakref.WeakKeyDictionary[GridDomain, dict]" = weakref.WeakKeyDictionary()


def _cache(domain: GridDomain) -> dict:
    try:
        return _DIFF_CACHE[domain]
    except KeyError:
        d = _DIFF_CACHE[domain] = {}
        return d


def build_difference_operators(shape, free: np.ndarray, neumann: bool = False) -> list[sp.csr_matrix]:
    """Unscaled forward differences ``u(x + e_k) - u(x)``, one sparse matrix per axis.

    Columns are the ``free`` nodes in C order.  Rows are base nodes: the box
    nodes shifted by one layer on the low side when values outside the box are
    zero, or only the box nodes with in-box neighbours when ``neumann``.
    """
    shape = tuple(shape)
    dim = len(shape)
    col = -np.ones(shape, dtype=np.int64)
    col[free] = np.arange(int(free.sum()))
    if neumann:
        base_shape = shape
        offset = 0
    else:
        base_shape = tuple(n + 1 for n in shape)
        offset = 1
    base = np.indices(base_shape).reshape(dim, -1).T - offset
    n_rows = base.shape[0]
    ops = []
    for k in range(dim):
        rows, cols, vals = [], [], []
        for sign, shift in ((1.0, 1), (-1.0, 0)):
            q = base.copy()
            q[:, k] += shift
            inside = np.all((q >= 0) & (q < np.asarray(shape)), axis=1)
            if neumann:
                nb = base.copy()
                nb[:, k] += 1
                inside &= np.all(nb < np.asarray(shape), axis=1)
            r = np.flatnonzero(inside)
            c = col[tuple(q[inside].T)]
            keep = c >= 0
            rows.append(r[keep])
            cols.append(c[keep])
            vals.append(np.full(keep.sum(), sign))
        ops.append(sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                 shape=(n_rows, int(free.sum()))))
    return ops


def difference_operators(domain: GridDomain) -> list[sp.csr_matrix]:
    c = _cache(domain)
    if "diff" not in c:
        c["diff"] = build_difference_operators(domain.shape, domain.active)
    return c["diff"]


def discrete_laplacian(domain: GridDomain) -> sp.csr_matrix:
    """``sum_k D_k^T D_k`` in index units (the p = 2 Dirichlet form)."""
    c = _cache(domain)
    if "lap" not in c:
        c["lap"] = sum((d.T @ d for d in difference_operators(domain)), sp.csr_matrix(
            (domain.n_active, domain.n_active))).tocsr()
    return c["lap"]


def gradient_field(ops, values: np.ndarray) -> np.ndarray:
    """Stacked differences, shape ``(n_base, dim)``."""
    return np.column_stack([d @ values for d in ops])


def index_lp_power(values: np.ndarray, p: float) -> float:
    return math.fsum(np.abs(values) ** p)


def index_grad_power(ops, values: np.ndarray, p: float) -> float:
    g = gradient_field(ops, values)
    mag = np.sqrt(np.einsum("ij,ij->i", g, g))
    return math.fsum(mag**p)


def lp_norm(u: GridFunction, p: float) -> float:
    """``(h^N sum |u_i|^p)^(1/p)``."""
    d = u.domain
    return (d.h**d.dim * index_lp_power(u.values, p)) ** (1.0 / p)


def grad_seminorm(u: GridFunction, p: float) -> float:
    """``(h^N sum_x |grad_h u(x)|^p)^(1/p)`` with forward differences of the zero extension."""
    d = u.domain
    e = index_grad_power(difference_operators(d), u.values, p)
    return (d.h ** (d.dim - p) * e) ** (1.0 / p)


# ---------------------------------------------------------------------------
# lattice kernel sums


@lru_cache(maxsize=None)
def lattice_zeta(dim: int, exponent: float) -> float:
    """``sum_{k in Z^dim, k != 0} |k|^(-exponent)``."""
    if dim == 1:
        return 2.0 * float(special.zeta(exponent, 1.0))
    sigma = exponent / 2.0
    beta = 4.0**-sigma * (special.zeta(sigma, 0.25) - special.zeta(sigma, 0.75))
    return 4.0 * float(special.zeta(sigma, 1.0)) * float(beta)


def _pair_weights(a: np.ndarray, b: np.ndarray, exponent: float) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff)
    with np.errstate(divide="ignore"):
        w = r2 ** (-exponent / 2.0)
    w[r2 == 0] = 0.0
    return w


def _row_blocks(m: int) -> list[slice]:
    return [slice(i, min(i + BLOCK_ROWS, m)) for i in range(0, m, BLOCK_ROWS)]


def _map_blocks(fn, blocks):
    if _THREADS > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(_THREADS) as ex:
            return list(ex.map(fn, blocks))
    return [fn(b) for b in blocks]


def _block_sum(parts) -> float:
    return math.fsum(parts)


def killing_weights(nodes: np.ndarray, others: np.ndarray | None, exponent: float,
                    dim: int) -> np.ndarray:
    """Per-node sum of kernel weights to every lattice node outside ``nodes``.

    With ``others`` given, only those nodes are summed (box-only model);
    with ``others=None`` the whole infinite lattice outside ``nodes`` is summed.
    """
    m = len(nodes)
    if others is not None:
        if len(others) == 0:
            return np.zeros(m)
        out = np.empty(m)
        for b in _row_blocks(m):
            out[b] = _pair_weights(nodes[b], others, exponent).sum(axis=1)
        return out
    z = lattice_zeta(dim, exponent)
    out = np.empty(m)
    for b in _row_blocks(m):
        out[b] = z - _pair_weights(nodes[b], nodes, exponent).sum(axis=1)
    return out


def pair_energy(nodes: np.ndarray, values: np.ndarray, kill: np.ndarray, p: float,
                exponent: float) -> float:
    """``sum_{i != j} |u_i - u_j|^p w_ij + 2 sum_i kill_i |u_i|^p`` with fixed block order."""
    vals = np.asarray(values, dtype=float)

    def block(b):
        w = _pair_weights(nodes[b], nodes, exponent)
        return float(np.sum(np.abs(vals[b, None] - vals[None, :]) ** p * w))

    parts = _map_blocks(block, _row_blocks(len(nodes)))
    parts.append(2.0 * math.fsum(kill * np.abs(vals) ** p))
    return _block_sum(parts)


def gagliardo_energy(u: GridFunction, s: float, p: float, exterior: bool = False) -> float:
    """p-th power of :func:`gagliardo_global`."""
    FracParams(s, p)
    d = u.domain
    exponent = d.dim + s * p
    full = u.full()
    if exterior:
        support = full != 0
        nodes = np.argwhere(support).astype(float)
        if len(nodes) == 0:
            return 0.0
        vals = full[support]
        kill = killing_weights(nodes, None, exponent, d.dim)
    else:
        nodes = d.active_indices().astype(float)
        vals = u.values
        kill = killing_weights(nodes, np.argwhere(d.constrained).astype(float), exponent, d.dim)
    e = pair_energy(nodes, vals, kill, p, exponent)
    return d.h ** (d.dim - s * p) * e


def gagliardo_global(u: GridFunction, s: float, p: float, exterior: bool = False) -> float:
    """Discrete ``[u]_{W^{s,p}(R^N)}``.

    Box-only rule: ``(h^{2N} sum_{i != j in box} |u_i - u_j|^p / |x_i - x_j|^{N+sp})^(1/p)``.
    ``exterior=True`` extends the sum to all of ``h Z^N``.
    """
    return gagliardo_energy(u, s, p, exterior) ** (1.0 / p)


def gagliardo_local(u: GridFunction, s: float, p: float) -> float:
    """Same double sum restricted to pairs of active nodes."""
    FracParams(s, p)
    d = u.domain
    exponent = d.dim + s * p
    nodes = d.active_indices().astype(float)
    e = pair_energy(nodes, u.values, np.zeros(len(nodes)), p, exponent)
    return (d.h ** (d.dim - s * p) * e) ** (1.0 / p)


def gagliardo_tail(u: GridFunction, s: float, p: float) -> float:
    """Part of the R^N energy coming from lattice nodes outside the box."""
    return gagliardo_energy(u, s, p, exterior=True) - gagliardo_energy(u, s, p, exterior=False)


class PairKernel:
    """Fractional energy on a fixed set of free nodes, for repeated evaluation.

    Works in index units: ``energy(v) = sum_{i != j} |v_i - v_j|^p w_ij + 2 sum kill_i |v_i|^p``.
    The physical energy is ``h^{N - sp} * energy``.
    """

    def __init__(self, domain: GridDomain, s: float, p: float, exterior: bool = True,
                 free: np.ndarray | None = None):
        FracParams(s, p)
        self.domain, self.s, self.p, self.exterior = domain, s, p, exterior
        free = domain.active if free is None else free
        self.nodes = np.argwhere(free).astype(float)
        self.exponent = domain.dim + s * p
        others = None if exterior else np.argwhere(~free).astype(float)
        self.kill = killing_weights(self.nodes, others, self.exponent, domain.dim)
        self._w = None

    @property
    def scale(self) -> float:
        return self.domain.h ** (self.domain.dim - self.s * self.p)

    @property
    def weights(self) -> np.ndarray:
        if self._w is None:
            self._w = _pair_weights(self.nodes, self.nodes, self.exponent)
        return self._w

    def energy(self, v: np.ndarray) -> float:
        return pair_energy(self.nodes, v, self.kill, self.p, self.exponent)

    def gradient(self, v: np.ndarray) -> np.ndarray:
        return self.energy_and_gradient(v)[1]

    def energy_and_gradient(self, v: np.ndarray) -> tuple[float, np.ndarray]:
        p = self.p
        w = self.weights
        d = v[:, None] - v[None, :]
        ad = np.abs(d)
        signed = np.sign(d) * ad ** (p - 1) * w
        e = float(np.sum(signed * d)) + 2.0 * float(np.sum(self.kill * np.abs(v) ** p))
        g = 2 * p * (signed.sum(axis=1) + self.kill * signed_power(v, p - 1))
        return e, g

    def matrix(self) -> np.ndarray:
        """Symmetric ``A`` with ``energy(v) = v^T A v`` when ``p == 2``."""
        w = self.weights
        return 2.0 * (np.diag(w.sum(axis=1) + self.kill) - w)


# ---------------------------------------------------------------------------
# difference profiles and spherical averages


def _shift_index(domain: GridDomain, shift) -> np.ndarray:
    shift = np.atleast_1d(np.asarray(shift, dtype=float))
    if shift.shape != (domain.dim,):
        raise ValueError("shift has the wrong dimension")
    k = np.round(shift / domain.h)
    if np.any(np.abs(shift / domain.h - k) > 1e-9 * np.maximum(1.0, np.abs(k))):
        raise ConfigurationError(f"shift {tuple(shift)} is not a lattice vector")
    return k.astype(int)


def _difference_power(full: np.ndarray, k: np.ndarray, p: float) -> float:
    pad = [(abs(int(a)), abs(int(a))) for a in k]
    big = np.pad(full, pad)
    moved = np.roll(big, shift=tuple(-int(a) for a in k), axis=tuple(range(full.ndim)))
    return math.fsum(np.abs(moved - big).ravel() ** p)


def difference_profile(u: GridFunction, shift_vector, p: float) -> float:
    """``U(h) = ||u(. + h) - u||_p`` for a lattice shift ``h`` (zero extension)."""
    d = u.domain
    k = _shift_index(d, shift_vector)
    return (d.h**d.dim * _difference_power(u.full(), k, p)) ** (1.0 / p)


def spherical_average(u: GridFunction, rho: float, p: float, n_angles: int = 32) -> float:
    """Average of ``U`` over the sphere of radius ``rho``.

    In 1D the sphere is ``{-rho, rho}``; in 2D it is ``n_angles`` equally spaced
    directions.  Shifts are rounded to the nearest lattice vector.
    """
    d = u.domain
    full = u.full()
    if rho <= 0:
        raise ValueError("rho must be positive")
    if d.dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        th = 2 * np.pi * np.arange(n_angles) / n_angles
        dirs = np.column_stack([np.cos(th), np.sin(th)])
    vals = []
    for e in dirs:
        k = np.round(rho * e / d.h).astype(int)
        vals.append((d.h**d.dim * _difference_power(full, k, p)) ** (1.0 / p))
    return float(np.mean(vals))
