"""Sharp discrete Poincare constants and the comparisons between them.

All quotients are minimized in lattice-index units and rescaled afterwards:

* ``lambda1 = h^{-p} min sum |D u|^p / sum |u|^p``
* ``lambdaS = h^{-sp} min E_s(u) / sum |u|^p`` with ``E_s`` the index-unit pair energy
  (:class:`fraclab.norms.PairKernel`), by default over the whole lattice ``h Z^N``.

For ``p = 2`` the minima are smallest eigenvalues.  Otherwise the quotient is
minimized by L-BFGS from several positive starting points.  The reported
value is always the quotient of the returned minimizer, recomputed through
the public norm functions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import optimize

from .domain import ConfigurationError, GridDomain, make_box, make_cracked_domain
from .kfunctional import KSolver, x_norm
from .norms import (FracParams, GridFunction, PairKernel, build_difference_operators,
                    difference_operators, discrete_laplacian, gagliardo_energy, grad_seminorm,
                    index_grad_power, lp_norm, omega, signed_power)

TOL_EIG = 1e-8
RESTARTS = 8
DENSE_MAX = 2000


@dataclass
class RayleighResult:
    value: float
    minimizer: GridFunction = field(repr=False)
    restart_values: np.ndarray = field(repr=False)
    certificate: float = 0.0

    @property
    def spread(self) -> float:
        """Relative spread of the values reached from the different starts."""
        v = self.restart_values
        if len(v) < 2 or self.value == 0:
            return 0.0
        return float((v.max() - v.min()) / self.value)

    def __float__(self) -> float:
        return float(self.value)


def _require_active(domain: GridDomain) -> None:
    if domain.n_active == 0:
        raise ConfigurationError("domain has no active nodes")


def _positive_starts(m: int, restarts: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.uniform(0.1, 1.0, m) for _ in range(restarts)]


def _minimize_quotient(num, den, starts, max_iter=20000):
    """L-BFGS on ``num(u) / den(u)``; both callables return (value, gradient)."""

    def fg(u):
        a, ga = num(u)
        b, gb = den(u)
        r = a / b
        return r, (ga - r * gb) / b

    values, best = [], None
    for u0 in starts:
        u0 = u0 / np.abs(u0).max()
        res = optimize.minimize(fg, u0, jac=True, method="L-BFGS-B",
                                options={"maxiter": max_iter, "ftol": 1e-16, "gtol": 1e-12,
                                         "maxcor": 30})
        u = res.x / np.abs(res.x).max()
        val = fg(u)[0]
        values.append(val)
        if best is None or val < best[0]:
            best = (val, u)
    return best[1], np.array(values)


def _lp_fg(p):
    return lambda u: (math.fsum(np.abs(u) ** p), p * signed_power(u, p - 1))


def _grad_fg(ops, p):
    def fg(u):
        g = np.column_stack([d @ u for d in ops])
        mag = np.sqrt(np.einsum("ij,ij->i", g, g))
        w = np.zeros_like(mag)
        pos = mag > 0
        w[pos] = mag[pos] ** (p - 2)
        grad = p * sum(d.T @ (w * g[:, k]) for k, d in enumerate(ops))
        return math.fsum(mag**p), grad
    return fg


def _smallest_eig(a, b=None):
    """Smallest eigenpair of the symmetric pencil ``(a, b)`` (``b`` diagonal or None)."""
    if hasattr(a, "toarray"):
        if a.shape[0] > DENSE_MAX:
            vals, vecs = spla.eigsh(a.tocsc(), k=1, sigma=0, which="LM",
                                    M=None if b is None else sp.diags(b))
            return float(vals[0]), vecs[:, 0]
        a = a.toarray()
    vals, vecs = scipy.linalg.eigh(a, None if b is None else np.diag(b),
                                   subset_by_index=[0, 0])
    return float(vals[0]), vecs[:, 0]


def lambda1_solve(domain: GridDomain, p: float, restarts: int = RESTARTS, seed: int = 0) -> RayleighResult:
    """``min ||grad u||_p^p / ||u||_p^p`` with its minimizer."""
    _require_active(domain)
    if not p > 1:
        raise ValueError("p must exceed 1")
    h = domain.h
    ops = difference_operators(domain)
    lam2, vec2 = _smallest_eig(discrete_laplacian(domain))
    if p == 2:
        u, values = vec2, np.array([lam2])
    else:
        starts = [np.abs(vec2) + 1e-3 * np.abs(vec2).max()] + _positive_starts(domain.n_active, restarts, seed)
        u, values = _minimize_quotient(_grad_fg(ops, p), _lp_fg(p), starts)
        values = values * h ** (-p)
    u = u / np.abs(u).max()
    if u.sum() < 0:
        u = -u
    fn = GridFunction(domain, u)
    value = grad_seminorm(fn, p) ** p / lp_norm(fn, p) ** p
    index_value = index_grad_power(ops, u, p) / math.fsum(np.abs(u) ** p) * h ** (-p)
    cert = abs(value - index_value) / value
    if p == 2:
        values = values * h ** (-p)
    return RayleighResult(value, fn, values, cert)


def lambda1(domain: GridDomain, p: float, restarts: int = RESTARTS, seed: int = 0) -> float:
    """Sharp discrete constant in ``lambda ||u||_p^p <= ||grad u||_p^p``."""
    return lambda1_solve(domain, p, restarts, seed).value


def lambdaS_solve(domain: GridDomain, s: float, p: float, exterior: bool = True,
                  restarts: int = RESTARTS, seed: int = 0) -> RayleighResult:
    """``min [u]_{s,p}^p / ||u||_p^p`` with its minimizer.

    ``exterior=True`` measures the seminorm on all of ``h Z^N`` (the zero
    extension of ``u``); ``exterior=False`` keeps only pairs inside the box.
    """
    FracParams(s, p)
    _require_active(domain)
    h = domain.h
    kern = PairKernel(domain, s, p, exterior=exterior)
    a2 = PairKernel(domain, s, 2.0, exterior=exterior).matrix() if p != 2 else kern.matrix()
    lam2, vec2 = _smallest_eig(a2)
    if p == 2:
        u, values = vec2, np.array([lam2])
    else:
        _, v1 = _smallest_eig(discrete_laplacian(domain))
        starts = ([np.abs(vec2) + 1e-3 * np.abs(vec2).max(), np.abs(v1) + 1e-3 * np.abs(v1).max()]
                  + _positive_starts(domain.n_active, restarts, seed))
        u, values = _minimize_quotient(kern.energy_and_gradient, _lp_fg(p), starts)
    values = values * h ** (-s * p)
    u = u / np.abs(u).max()
    if u.sum() < 0:
        u = -u
    fn = GridFunction(domain, u)
    value = gagliardo_energy(fn, s, p, exterior=exterior) / lp_norm(fn, p) ** p
    index_value = kern.energy(u) / math.fsum(np.abs(u) ** p) * h ** (-s * p)
    cert = abs(value - index_value) / value
    return RayleighResult(value, fn, values, cert)


def lambdaS(domain: GridDomain, s: float, p: float, exterior: bool = True,
            restarts: int = RESTARTS, seed: int = 0) -> float:
    """Sharp discrete constant in ``lambda ||u||_p^p <= [u]_{W^{s,p}}^p``."""
    return lambdaS_solve(domain, s, p, exterior, restarts, seed).value


def lp_trapezoid_weights(shape) -> np.ndarray:
    """Product trapezoid weights (1/2 on each box face) in index units."""
    w = np.ones(shape)
    for k, n in enumerate(shape):
        idx = [slice(None)] * len(shape)
        for end in (0, n - 1):
            idx[k] = end
            w[tuple(idx)] *= 0.5
    return w


def mu_mixed_solve(box_domain: GridDomain, crack, p: float, restarts: int = RESTARTS,
                   seed: int = 0) -> RayleighResult:
    """Mixed constant: Neumann on the box faces, Dirichlet on the crack nodes only.

    Every box node (faces included) is free except the crack.  Gradients use
    the in-box forward differences; the L^p norm uses trapezoid weights.
    """
    crack = np.asarray(crack, dtype=bool)
    if crack.shape != box_domain.shape:
        raise ConfigurationError("crack mask must match the box shape")
    if not crack.any():
        raise ConfigurationError("crack is empty: constants give a zero quotient")
    free = ~crack
    if not free.any():
        raise ConfigurationError("no free nodes")
    h = box_domain.h
    ops = build_difference_operators(box_domain.shape, free, neumann=True)
    weights = lp_trapezoid_weights(box_domain.shape)[free]
    lap = sum(d.T @ d for d in ops)
    lam2, vec2 = _smallest_eig(lap, weights)

    def den(u):
        return math.fsum(weights * np.abs(u) ** p), p * weights * signed_power(u, p - 1)

    if p == 2:
        u, values = vec2, np.array([lam2])
    else:
        starts = [np.abs(vec2) + 1e-3 * np.abs(vec2).max()] + _positive_starts(int(free.sum()), restarts, seed)
        u, values = _minimize_quotient(_grad_fg(ops, p), den, starts)
    values = values * h ** (-p)
    u = u / np.abs(u).max()
    if u.sum() < 0:
        u = -u
    value = index_grad_power(ops, u, p) / den(u)[0] * h ** (-p)
    dom = GridDomain(box_domain.dim, h, box_domain.lower, free, name=box_domain.name + "+neumann")
    return RayleighResult(value, GridFunction(dom, u), values, 0.0)


def mu_mixed(box_domain: GridDomain, crack, p: float, restarts: int = RESTARTS, seed: int = 0) -> float:
    return mu_mixed_solve(box_domain, crack, p, restarts, seed).value


def unit_cell(dim: int, h: float) -> tuple[GridDomain, np.ndarray]:
    """The cube ``[-1/2, 1/2]^N`` and the mask of its crack ``[-1/4, 1/4]^{N-1} x {0}``."""
    cell = make_cracked_domain(dim, 0, h)
    box = make_box(dim, 1.0, h, lower=[-0.5] * dim)
    crack = cell.constrained.copy()
    face = np.zeros(box.shape, dtype=bool)
    for k in range(dim):
        idx = [slice(None)] * dim
        for end in (0, box.shape[k] - 1):
            idx[k] = end
            face[tuple(idx)] = True
    crack &= ~face
    return box, crack


# ---------------------------------------------------------------------------
# interpolation constant


@dataclass
class LambdaUpperResult:
    value: float
    minimizer: GridFunction = field(repr=False)
    seed_values: np.ndarray = field(repr=False)
    t_min: float = 0.0
    t_max: float = 0.0
    evaluations: int = 0

    def __float__(self) -> float:
        return float(self.value)


def _fixed_t_grid(seeds, s, p, per_decade=64, bound=1e-5):
    """A log grid wide enough that head and tail bounds are ``<= bound`` for the seeds."""
    lo, hi = np.inf, 0.0
    for u in seeds:
        t_lo, t_hi = KSolver(u, p).thresholds
        lo, hi = min(lo, t_lo), max(hi, t_hi)
    lo *= bound ** (1.0 / (p * (1 - s)))
    hi /= bound ** (1.0 / (s * p))
    n = int(math.ceil(math.log10(hi / lo) * per_decade)) + 1
    return lo, hi, n


def LambdaS_upper_solve(domain: GridDomain, s: float, p: float, seeds=None, max_iter: int = 60,
                        per_decade: int = 64) -> LambdaUpperResult:
    """Upper bound on the interpolation constant ``min ||u||_X^p / ||u||_p^p``.

    Descends the quotient from the ``lambda1`` and ``lambdaS`` minimizers (or
    from ``seeds``) with L-BFGS, using a fixed log t-grid so that the
    objective is a single smooth-ish function of ``u``.  Returns the best
    quotient reached.
    """
    FracParams(s, p)
    _require_active(domain)
    if seeds is None:
        seeds = [lambda1_solve(domain, p).minimizer, lambdaS_solve(domain, s, p).minimizer]
    seeds = [u if isinstance(u, GridFunction) else GridFunction(domain, u) for u in seeds]
    t_min, t_max, n_t = _fixed_t_grid(seeds, s, p, per_decade)
    h, dim = domain.h, domain.dim
    count = [0]

    def fg(vals):
        count[0] += 1
        u = GridFunction(domain, vals)
        r = x_norm(u, s, p, t_min=t_min, t_max=t_max, n_t=n_t, with_gradient=True)
        den = h**dim * math.fsum(np.abs(vals) ** p)
        gden = h**dim * p * signed_power(vals, p - 1)
        q = r.power / den
        return q, (r.gradient - q * gden) / den

    best, seed_values = None, []
    for u0 in seeds:
        v0 = u0.values / np.abs(u0.values).max()
        q0 = fg(v0)[0]
        seed_values.append(q0)
        res = optimize.minimize(fg, v0, jac=True, method="L-BFGS-B",
                                options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-10})
        cand = [(q0, v0), (float(res.fun), res.x)]
        for q, v in cand:
            if best is None or q < best[0]:
                best = (q, v)
    q, v = best
    v = v / np.abs(v).max()
    return LambdaUpperResult(float(q), GridFunction(domain, v), np.array(seed_values), t_min, t_max, count[0])


def LambdaS_upper(domain: GridDomain, s: float, p: float, seeds=None, max_iter: int = 60) -> float:
    return LambdaS_upper_solve(domain, s, p, seeds, max_iter).value


# ---------------------------------------------------------------------------
# comparison reports


@dataclass
class ConstantReport:
    domain_id: str
    s: float
    p: float
    lambda1: float
    lambdaS: float
    LambdaS_upper: float
    residual_equivalence: float
    residual_oneside: float
    residual_twosideconv: float
    ratio_twoside: float
    oneside_constant: float
    slack: float
    minimizers: dict = field(default_factory=dict, repr=False)

    @property
    def params(self) -> FracParams:
        return FracParams(self.s, self.p)

    @property
    def oneside_ok(self) -> bool:
        """``s(1-s) lambdaS <= 2^{p(1-s)} N omega_N lambda1^s`` up to the relative slack."""
        return self.residual_oneside >= -self.slack * self.oneside_constant * self.lambda1**self.s

    def row(self) -> dict:
        return {"domain": self.domain_id, "s": self.s, "p": self.p, "lambda1": self.lambda1,
                "lambdaS": self.lambdaS, "LambdaS_upper": self.LambdaS_upper,
                "residual_equivalence": self.residual_equivalence,
                "residual_oneside": self.residual_oneside,
                "residual_twosideconv": self.residual_twosideconv,
                "ratio_twoside": self.ratio_twoside}


def oneside_constant(dim: int, s: float, p: float) -> float:
    return 2 ** (p * (1 - s)) * dim * omega(dim)


def doubleside_check(domain: GridDomain, s: float, p: float, with_upper: bool = False,
                     slack: float = 0.05, C2: float | None = None, seed: int = 0) -> ConstantReport:
    """Compute the three constants and the residuals of the comparison inequalities.

    ``residual_oneside = 2^{p(1-s)} N omega_N lambda1^s - s(1-s) lambdaS``;
    ``residual_equivalence = s(1-s) LambdaS_upper - lambda1^s`` (NaN unless
    ``with_upper``); ``residual_twosideconv = s(1-s) lambdaS - lambda1^s / C2``
    (NaN unless ``C2`` is given).  ``ratio_twoside = lambda1^s / (s(1-s) lambdaS)``.
    """
    FracParams(s, p)
    r1 = lambda1_solve(domain, p, seed=seed)
    rs = lambdaS_solve(domain, s, p, seed=seed)
    l1, ls = r1.value, rs.value
    c = oneside_constant(domain.dim, s, p)
    big = float("nan")
    mins = {"lambda1": r1.minimizer, "lambdaS": rs.minimizer}
    if with_upper:
        ru = LambdaS_upper_solve(domain, s, p, seeds=[r1.minimizer, rs.minimizer])
        big = ru.value
        mins["LambdaS_upper"] = ru.minimizer
    ss = s * (1 - s)
    return ConstantReport(
        domain_id=domain.name, s=s, p=p, lambda1=l1, lambdaS=ls, LambdaS_upper=big,
        residual_equivalence=ss * big - l1**s,
        residual_oneside=c * l1**s - ss * ls,
        residual_twosideconv=ss * ls - l1**s / C2 if C2 else float("nan"),
        ratio_twoside=l1**s / (ss * ls), oneside_constant=c, slack=slack, minimizers=mins)


# ---------------------------------------------------------------------------
# cracked cubes


@dataclass
class SweepRow:
    n: int
    h: float
    s: float
    p: float
    lambda1: float
    lambdaS: float
    mu: float
    ratio: float
    lambdaS_uncracked: float
    lambdaS_dilated_cell: float
    lambdaS_scaled_cell: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SweepTable:
    rows: list
    lambda1_lower_ok: bool
    lambdaS_decreasing: bool
    slack: float

    @property
    def ok(self) -> bool:
        return self.lambda1_lower_ok and self.lambdaS_decreasing


def counterexample_sweep(n_list, h: float, s: float, p: float, dim: int = 1,
                         slack: float = 0.05, seed: int = 0) -> SweepTable:
    """Constants of the cracked cubes ``[-n-1/2, n+1/2]^N minus cracks`` for ``n`` in ``n_list``.

    Each row also carries ``lambdaS`` of the uncracked cube of the same size on
    the same lattice, the same cube on the ``(2n+1)``-dilated lattice, and the
    rescaled unit-cube value ``(2n+1)^{-sp} lambdaS(Q)``; the last two agree
    exactly.
    """
    FracParams(s, p)
    if s * p >= 1:
        raise ConfigurationError(
            f"s*p = {s * p:g} >= 1: cracks of codimension one carry positive capacity, "
            "so the cracked constants do not degenerate; use s*p < 1")
    n_list = list(n_list)
    if not n_list:
        raise ConfigurationError("empty n list")
    box, crack = unit_cell(dim, h)
    mu = mu_mixed(box, crack, p, seed=seed)
    cell = make_box(dim, 1.0, h, lower=[-0.5] * dim)
    ls_cell = lambdaS(cell, s, p, seed=seed)
    rows = []
    for n in n_list:
        dom = make_cracked_domain(dim, n, h)
        l1 = lambda1(dom, p, seed=seed)
        ls = lambdaS(dom, s, p, seed=seed)
        side = 2 * n + 1
        plain = make_box(dim, side, h, lower=[-side / 2] * dim)
        rows.append(SweepRow(n, h, s, p, l1, ls, mu, l1**s / ls, lambdaS(plain, s, p, seed=seed),
                             lambdaS(cell.dilate(side), s, p, seed=seed), side ** (-s * p) * ls_cell))
    lower_ok = all(r.lambda1 >= mu * (1 - slack) for r in rows)
    ordered = sorted(rows, key=lambda r: r.n)
    decreasing = all(b.lambdaS < a.lambdaS for a, b in zip(ordered, ordered[1:]))
    return SweepTable(rows, lower_ok, decreasing, slack)
