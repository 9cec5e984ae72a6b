"""One-dimensional weighted Hardy inequality and Picone's inequality.

For ``f`` vanishing near ``0`` and ``alpha > 0``,

    (alpha/p)^p int_0^T |f|^p t^{-alpha} dt/t  <=  int_0^T |f'|^p t^{p-alpha} dt/t.

Integrals are taken with the trapezoid rule in ``log t``, the natural
variable for the ``dt/t`` measure.  Profiles carry their derivative
explicitly, so quadrature error is not mixed up with differentiation error.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .domain import ConfigurationError

TOL_QUAD = 1e-4


@dataclass
class Profile1D:
    t_nodes: np.ndarray
    f_values: np.ndarray
    fprime_values: np.ndarray
    T: float

    def __post_init__(self):
        self.t_nodes = np.asarray(self.t_nodes, dtype=float)
        self.f_values = np.asarray(self.f_values, dtype=float)
        self.fprime_values = np.asarray(self.fprime_values, dtype=float)
        n = len(self.t_nodes)
        if n < 2 or self.f_values.shape != (n,) or self.fprime_values.shape != (n,):
            raise ConfigurationError("profile arrays must have equal length >= 2")
        if np.any(self.t_nodes <= 0) or np.any(np.diff(self.t_nodes) <= 0):
            raise ConfigurationError("t nodes must be positive and increasing")
        if self.t_nodes[-1] > self.T * (1 + 1e-12):
            raise ConfigurationError("t nodes must lie in (0, T]")
        if not (np.all(np.isfinite(self.f_values)) and np.all(np.isfinite(self.fprime_values))):
            raise ConfigurationError("profile values must be finite")

    @classmethod
    def from_functions(cls, f, fprime, t_nodes, T: float | None = None) -> "Profile1D":
        t = np.asarray(t_nodes, dtype=float)
        return cls(t, f(t), fprime(t), float(t[-1]) if T is None else T)

    def vanishes_near_zero(self) -> bool:
        """At least the first node carries ``f = f' = 0``."""
        return self.f_values[0] == 0 and self.fprime_values[0] == 0

    def derivative_mismatch(self) -> float:
        """``max_i |f(t_i) - f(t_0) - int_{t_0}^{t_i} f'|`` (trapezoid) relative to ``max |f|``."""
        integ = integrate.cumulative_trapezoid(self.fprime_values, self.t_nodes, initial=0.0)
        scale = max(np.abs(self.f_values).max(), 1e-300)
        return float(np.abs(self.f_values - self.f_values[0] - integ).max() / scale)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "f", "fprime"])
        for row in zip(self.t_nodes, self.f_values, self.fprime_values):
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, T: float | None = None) -> "Profile1D":
        rows = list(csv.reader(io.StringIO(text)))
        data = np.array([[float(x) for x in r] for r in rows[1:]])
        return cls(data[:, 0], data[:, 1], data[:, 2], float(data[-1, 0]) if T is None else T)


def log_trapezoid(t: np.ndarray, g: np.ndarray) -> float:
    """``int g(t) dt/t`` by the trapezoid rule in ``log t``."""
    x = np.log(t)
    return math.fsum(0.5 * (g[1:] + g[:-1]) * np.diff(x))


def hardy_sides(f: Profile1D, alpha: float, p: float) -> tuple[float, float]:
    """``(LHS, RHS) = (int |f|^p t^-alpha dt/t, int |f'|^p t^(p-alpha) dt/t)``."""
    t = f.t_nodes
    lhs = log_trapezoid(t, np.abs(f.f_values) ** p * t ** (-alpha))
    rhs = log_trapezoid(t, np.abs(f.fprime_values) ** p * t ** (p - alpha))
    return lhs, rhs


def hardy_margin(f: Profile1D, alpha: float, p: float) -> float:
    """``RHS - (alpha/p)^p LHS`` of the weighted Hardy inequality."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not p > 1:
        raise ValueError("p must exceed 1")
    if not f.vanishes_near_zero():
        raise ConfigurationError("profile must vanish on its first node(s)")
    lhs, rhs = hardy_sides(f, alpha, p)
    return rhs - (alpha / p) ** p * lhs


def smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def smoothstep_prime(x):
    inside = (x > 0) & (x < 1)
    return np.where(inside, 6 * x * (1 - x), 0.0)


def sharpness_profile(alpha: float, p: float, delta: float, T: float = 1.0, width: float = 1.0,
                      per_unit: int = 400) -> Profile1D:
    """``f(t) = t^{alpha/p} S((log t - log delta) / width)`` with ``S`` a smoothstep.

    ``f`` vanishes below ``delta`` and equals the extremal power ``t^{alpha/p}``
    above ``delta e^width``.  Nodes are uniform in ``log t`` from ``delta/e`` to ``T``.
    """
    if not 0 < delta * math.exp(width) < T:
        raise ConfigurationError("need delta * e^width < T")
    lo = math.log(delta) - 1.0
    n = max(int(math.ceil((math.log(T) - lo) * per_unit)) + 1, 16)
    x = np.linspace(lo, math.log(T), n)
    t = np.exp(x)
    b = alpha / p
    y = (x - math.log(delta)) / width
    S, dS = smoothstep(y), smoothstep_prime(y)
    f = t**b * S
    fp = b * t ** (b - 1) * S + t ** (b - 1) * dS / width
    return Profile1D(t, f, fp, T)


def sharpness_curve(alpha: float, p: float, deltas, T: float = 1.0, width: float = 1.0,
                    per_unit: int = 400) -> np.ndarray:
    """``margin / RHS`` for the sharpness family, one entry per ``delta``."""
    out = []
    for d in deltas:
        prof = sharpness_profile(alpha, p, d, T, width, per_unit)
        _, rhs = hardy_sides(prof, alpha, p)
        out.append(hardy_margin(prof, alpha, p) / rhs)
    return np.array(out)


def picone_values(u: Profile1D, v: Profile1D, p: float) -> np.ndarray:
    """Pointwise ``|v'|^p - |u'|^{p-2} u' (v^p / u^{p-1})'`` by the chain rule."""
    if not np.allclose(u.t_nodes, v.t_nodes, rtol=0, atol=0):
        raise ConfigurationError("profiles must share their nodes")
    if np.any(u.f_values <= 0):
        raise ConfigurationError("u must be positive on every node")
    if np.any(v.f_values < 0):
        raise ConfigurationError("v must be nonnegative")
    a, da = u.f_values, u.fprime_values
    b, db = v.f_values, v.fprime_values
    quot_prime = p * b ** (p - 1) * db / a ** (p - 1) - (p - 1) * b**p * da / a**p
    return np.abs(db) ** p - np.sign(da) * np.abs(da) ** (p - 1) * quot_prime


def picone_check(u: Profile1D, v: Profile1D, p: float = 2.0) -> float:
    """Minimum over the nodes of the Picone defect (nonnegative in exact arithmetic)."""
    return float(picone_values(u, v, p).min())


def _ubar_functions(rho, ubar, kind):
    rho = np.asarray(rho, dtype=float)
    ub = np.asarray(ubar, dtype=float)
    if kind == "linear":
        if rho[0] != 0:
            rho = np.concatenate([[0.0], rho])
            ub = np.concatenate([[0.0], ub])

        def U(t):
            return np.interp(t, rho, ub)

        cells = list(zip(rho[:-1], rho[1:]))
        tail = ub[-1]
    elif kind == "step":
        def U(t):
            k = np.searchsorted(rho, t, side="right") - 1
            return np.where((k >= 0) & (k < len(rho) - 1), ub[np.clip(k, 0, len(ub) - 1)], 0.0)

        cells = [(0.0, rho[0])] if rho[0] > 0 else []
        cells += list(zip(rho[:-1], rho[1:]))
        tail = 0.0
    else:
        raise ValueError("kind must be 'linear' or 'step'")
    # g(t) = int_0^t U, exact on each cell (U linear or constant there)
    g_nodes = [0.0]
    for a, b in cells:
        g_nodes.append(g_nodes[-1] + integrate.quad(U, a, b, limit=50)[0])
    edges = np.array([cells[0][0]] + [b for _, b in cells])
    g_nodes = np.array(g_nodes)

    def G(t):
        k = min(max(np.searchsorted(edges, t, side="right") - 1, 0), len(cells))
        if k >= len(cells):
            return g_nodes[-1] + tail * (t - edges[-1])
        return g_nodes[k] + integrate.quad(U, edges[k], t, limit=50)[0]

    return U, G, cells, tail, edges[-1], g_nodes[-1]


def hardy_in_xnorm_parts(rho, ubar, s: float, p: float, kind: str = "linear") -> tuple[float, float]:
    """``(A, B)`` with ``A = int (Ubar/t^s)^p dt/t`` and ``B = int g^p t^{-p-sp} dt/t``, ``g = int_0^t Ubar``.

    ``kind='linear'`` interpolates the samples linearly (with ``Ubar(0) = 0``)
    and continues the last value as a constant; ``kind='step'`` takes
    ``ubar[k]`` on ``[rho[k], rho[k+1])`` and zero beyond ``rho[-1]``.
    """
    U, G, cells, tail, r_end, g_end = _ubar_functions(rho, ubar, kind)
    sp = s * p
    A = B = 0.0
    for a, b in cells:
        if b <= a:
            continue
        A += integrate.quad(lambda t: U(t) ** p * t ** (-sp - 1), a, b, limit=200)[0]
        B += integrate.quad(lambda t: G(t) ** p * t ** (-p - sp - 1), a, b, limit=200)[0]
    A += tail**p * r_end ** (-sp) / sp
    B += integrate.quad(lambda t: (g_end + tail * (t - r_end)) ** p * t ** (-p - sp - 1),
                        r_end, np.inf, limit=200)[0]
    return A, B


def hardy_in_xnorm_check(rho, ubar, s: float, p: float, kind: str = "linear") -> float:
    """``int (Ubar/t^s)^p dt/t - (1+s)^p int g^p t^{-p-sp} dt/t`` (Hardy with ``alpha = p + sp``)."""
    if not np.any(np.asarray(ubar)):
        return 0.0
    A, B = hardy_in_xnorm_parts(rho, ubar, s, p, kind)
    return A - (1 + s) ** p * B
