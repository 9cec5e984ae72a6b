"""Capacities of lattice sets.

``cap_sp(F) = min { [u]^p_{W^{s,p}(R^N)} : u >= 0, u >= 1 on F }`` with ``R^N``
modelled by a zero-Dirichlet box (functions vanish outside it, the kernel
still sees the whole lattice ``h Z^N``).  Truncating a competitor at level 1
never increases any of the energies used here, so the constraint set is
the box ``{0 <= u <= 1, u = 1 on F}``.  It is handled exactly by L-BFGS-B
bounds, and every result carries a Frank-Wolfe gap as an optimality certificate.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .domain import ConfigurationError, GridDomain, make_box
from .kfunctional import KSolver, psi_convolve_full, x_norm
from .norms import (FracParams, GridFunction, PairKernel, difference_operators, gagliardo_energy,
                    gradient_field, omega)

TOL_CAP = 1e-6
MAX_INT_CAP_NODES = 200


@dataclass
class CapacityResult:
    value: float
    minimizer: GridFunction = field(repr=False)
    max_constraint_violation: float
    box_used: GridDomain = field(repr=False)
    fw_gap: float = 0.0
    truncation_ok: bool = True
    box_sensitivity: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def relative_gap(self) -> float:
        return self.fw_gap / self.value if self.value > 0 else 0.0

    def to_json(self) -> str:
        return json.dumps({"value": self.value, "max_constraint_violation": self.max_constraint_violation,
                           "fw_gap": self.fw_gap, "truncation_ok": self.truncation_ok,
                           "box_sensitivity": self.box_sensitivity, "box": self.box_used.describe(),
                           **self.extra})


def target_mask(box_domain: GridDomain, F_nodes) -> np.ndarray:
    """Boolean box-shaped mask of ``F`` from a mask or a list of integer node indices."""
    shape = box_domain.shape
    if F_nodes is None:
        return np.zeros(shape, dtype=bool)
    arr = np.asarray(F_nodes)
    if arr.dtype == bool:
        if arr.shape != shape:
            raise ConfigurationError("F mask does not match the box shape")
        mask = arr.copy()
    else:
        mask = np.zeros(shape, dtype=bool)
        if arr.size:
            idx = np.atleast_2d(arr).astype(int)
            if idx.shape[1] != box_domain.dim:
                raise ConfigurationError("F node indices have the wrong dimension")
            if np.any(idx < 0) or np.any(idx >= np.asarray(shape)):
                raise ConfigurationError("F lies outside the box")
            mask[tuple(idx.T)] = True
    if np.any(mask & ~box_domain.active):
        raise ConfigurationError("F must consist of active (interior) box nodes")
    return mask


def capacity_box(F_points, h: float, factor: float = 8.0) -> tuple[GridDomain, np.ndarray]:
    """A box of side ``factor * diam(F)`` (at least ``factor * h``) centred on ``F``.

    ``F_points`` are lattice coordinates (multiples of ``h``); returns the box
    domain and the mask of ``F`` in it.
    """
    pts = np.atleast_2d(np.asarray(F_points, dtype=float))
    dim = pts.shape[1]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    diam = float(np.max(np.linalg.norm(pts[:, None] - pts[None], axis=-1))) if len(pts) > 1 else 0.0
    half = max(factor * max(diam, h) / 2.0, float(np.max(hi - lo)) / 2.0 + 2 * h)
    n_half = int(math.ceil(half / h - 1e-9))
    center = np.round((lo + hi) / 2.0 / h) * h
    lower = center - n_half * h
    box = make_box(dim, 2 * n_half * h, h, lower=lower)
    idx = np.round((pts - lower) / h).astype(int)
    mask = np.zeros(box.shape, dtype=bool)
    mask[tuple(idx.T)] = True
    return box, mask


def _frank_wolfe_gap(u: np.ndarray, g: np.ndarray, fixed: np.ndarray) -> float:
    """``max_{y feasible} <g, u - y>`` over ``{0 <= y <= 1, y = 1 on fixed}``."""
    y = np.where(g < 0, 1.0, 0.0)
    y[fixed] = 1.0
    return float(g @ (u - y))


def _solve_box_constrained(fg, m: int, fixed: np.ndarray, x0: np.ndarray | None = None,
                           max_iter: int = 20000):
    bounds = [(1.0, 1.0) if f else (0.0, 1.0) for f in fixed]
    x0 = np.where(fixed, 1.0, 0.5) if x0 is None else np.clip(np.where(fixed, 1.0, x0), 0.0, 1.0)
    res = optimize.minimize(fg, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": max_iter, "ftol": 1e-16, "gtol": 1e-14, "maxcor": 30})
    return np.clip(res.x, 0.0, 1.0)


def _finish(domain, mask, u, energy_fn, grad_fn, scale, extra=None) -> CapacityResult:
    fixed = mask[domain.active]
    u = np.where(fixed, 1.0, u)
    e = energy_fn(u)
    g = grad_fn(u)
    gap = _frank_wolfe_gap(u, g, fixed)
    viol = float(max(0.0, -u.min(), (1.0 - u[fixed]).max() if fixed.any() else 0.0))
    trunc = energy_fn(np.minimum(u, 1.0)) <= e * (1 + 1e-12)
    return CapacityResult(scale * e, GridFunction(domain, u), viol, domain, scale * gap, bool(trunc),
                          extra=extra or {})


def cap_sp(F_nodes, box_domain: GridDomain, s: float, p: float, doubling: bool = False,
           tol: float = TOL_CAP) -> CapacityResult:
    """(s,p)-capacity of ``F`` with competitors supported in the box (requires ``sp < N``)."""
    FracParams(s, p)
    if s * p >= box_domain.dim:
        raise ConfigurationError(f"s*p = {s * p:g} must be below the dimension {box_domain.dim}")
    mask = target_mask(box_domain, F_nodes)
    if not mask.any():
        return CapacityResult(0.0, GridFunction.zeros(box_domain), 0.0, box_domain)
    kern = PairKernel(box_domain, s, p, exterior=True)
    fixed = mask[box_domain.active]
    u = None
    for _ in range(8):
        u = _solve_box_constrained(kern.energy_and_gradient, box_domain.n_active, fixed, u)
        res = _finish(box_domain, mask, u, kern.energy, kern.gradient, kern.scale,
                      {"s": s, "p": p, "kind": "cap_sp"})
        if res.relative_gap <= tol:
            break
    if doubling:
        big, big_mask = _doubled(box_domain, mask)
        res.box_sensitivity = abs(cap_sp(big_mask, big, s, p).value - res.value) / res.value
    return res


def _doubled(box_domain: GridDomain, mask: np.ndarray) -> tuple[GridDomain, np.ndarray]:
    """The box with twice the side, same centre and lattice, and ``F`` embedded in it."""
    shape = np.asarray(box_domain.shape)
    pad = (shape - 1) // 2
    big = make_box(box_domain.dim, float((shape - 1 + 2 * pad)[0]) * box_domain.h, box_domain.h,
                   lower=np.asarray(box_domain.lower) - pad * box_domain.h)
    big_mask = np.zeros(big.shape, dtype=bool)
    idx = np.argwhere(mask) + pad
    big_mask[tuple(idx.T)] = True
    return big, big_mask


def cap_local(F_nodes, box_domain: GridDomain, p: float, tol: float = TOL_CAP) -> CapacityResult:
    """p-capacity of ``F`` relative to the box (gradient energy, zero on the box boundary)."""
    if not p > 1:
        raise ValueError("p must exceed 1")
    mask = target_mask(box_domain, F_nodes)
    if not mask.any():
        return CapacityResult(0.0, GridFunction.zeros(box_domain), 0.0, box_domain)
    ops = difference_operators(box_domain)

    def fg(u):
        g = gradient_field(ops, u)
        mag = np.sqrt(np.einsum("ij,ij->i", g, g))
        w = np.zeros_like(mag)
        pos = mag > 0
        w[pos] = mag[pos] ** (p - 2)
        grad = p * sum(d.T @ (w * g[:, k]) for k, d in enumerate(ops))
        return math.fsum(mag**p), grad

    fixed = mask[box_domain.active]
    scale = box_domain.h ** (box_domain.dim - p)
    u = np.ones(box_domain.n_active) if fixed.all() else None
    for _ in range(8):
        if not fixed.all():
            u = _solve_box_constrained(fg, box_domain.n_active, fixed, u)
        res = _finish(box_domain, mask, u, lambda v: fg(v)[0], lambda v: fg(v)[1], scale,
                      {"p": p, "kind": "cap_local"})
        if res.relative_gap <= tol or fixed.all():
            break
    return res


def sandwich_constant(dim: int, s: float, p: float, slack: float = 0.05) -> float:
    """Largest of the two norm-comparison constants, times ``1 + slack``."""
    low = 2 ** (p * (1 - s)) * dim * omega(dim)
    up = (2 * dim * (dim + 1) / (s + 1)) ** p / (dim * omega(dim))
    return max(low, up) * (1 + slack)


def int_cap_sp(F_nodes, box_domain: GridDomain, s: float, p: float, max_iter: int = 200,
               per_decade: int = 64, slack: float = 0.05) -> CapacityResult:
    """Interpolation capacity: same constraints, ``||u||_X^p`` objective.

    Only for tiny instances (at most 200 active nodes).  The t-grid is fixed
    from the (s,p)-capacitary potential used as the starting point.  The
    result records the (s,p)-capacity and whether the value lies in
    ``[cap_sp / C, C cap_sp]``.
    """
    FracParams(s, p)
    if box_domain.n_active > MAX_INT_CAP_NODES:
        raise ConfigurationError(
            f"int_cap_sp is limited to {MAX_INT_CAP_NODES} free nodes (got {box_domain.n_active})")
    mask = target_mask(box_domain, F_nodes)
    if not mask.any():
        return CapacityResult(0.0, GridFunction.zeros(box_domain), 0.0, box_domain)
    ref = cap_sp(mask, box_domain, s, p)
    fixed = mask[box_domain.active]
    start = ref.minimizer.values
    t_lo, t_hi = KSolver(ref.minimizer, p).thresholds
    bound = 1e-5
    t_min = t_lo * bound ** (1.0 / (p * (1 - s)))
    t_max = t_hi / bound ** (1.0 / (s * p))
    n_t = int(math.ceil(math.log10(t_max / t_min) * per_decade)) + 1

    def fg(v):
        r = x_norm(GridFunction(box_domain, v), s, p, t_min=t_min, t_max=t_max, n_t=n_t,
                   with_gradient=True)
        return r.power, r.gradient

    bounds = [(1.0, 1.0) if f else (0.0, 1.0) for f in fixed]
    res = optimize.minimize(fg, start, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-12})
    u = np.clip(res.x, 0.0, 1.0)
    out = _finish(box_domain, mask, u, lambda v: fg(v)[0], lambda v: fg(v)[1], 1.0)
    c = sandwich_constant(box_domain.dim, s, p, slack)
    out.extra = {"s": s, "p": p, "kind": "int_cap_sp", "cap_sp": ref.value, "C": c,
                 "sandwich_ok": bool(ref.value / c <= out.value <= c * ref.value),
                 "t_min": t_min, "t_max": t_max}
    return out


# ---------------------------------------------------------------------------
# flat cracks


@dataclass
class FlatCrackRow:
    eps: float
    h: float
    energy: float
    nodes: int
    note: str = ""


@dataclass
class FlatCrackTable:
    rows: list
    slope: float
    expected: float
    tolerance: float = 0.2

    @property
    def ok(self) -> bool:
        return bool(self.slope >= self.expected - self.tolerance)

    def stability(self) -> dict:
        """Relative change between the two finest lattices, per epsilon."""
        out = {}
        for eps in sorted({r.eps for r in self.rows}):
            rs = sorted((r for r in self.rows if r.eps == eps and not r.note), key=lambda r: r.h)
            if len(rs) >= 2:
                out[eps] = abs(rs[0].energy - rs[1].energy) / rs[0].energy
        return out


def mollified_crack(a: float, eps: float, h: float) -> GridFunction:
    """``1_{F_eps} * psi_eps`` for ``F = [-a, a] x {0}`` on a lattice box around its support."""
    half_x = a + 2 * eps + 2 * h
    half_y = 2 * eps + 2 * h
    nx, ny = int(math.ceil(half_x / h)), int(math.ceil(half_y / h))
    box = _rect_box(nx, ny, h)
    xy = box.coordinates()
    dx = np.maximum(np.abs(xy[..., 0]) - a, 0.0)
    dist = np.hypot(dx, xy[..., 1])
    ind = GridFunction.from_full(box, (dist <= eps + 1e-12 * h).astype(float), strict=False)
    phi = psi_convolve_full(ind, eps)
    return GridFunction.from_full(box, phi, strict=True, tol=1e-12)


def _rect_box(nx: int, ny: int, h: float) -> GridDomain:
    shape = (2 * nx + 1, 2 * ny + 1)
    active = np.zeros(shape, dtype=bool)
    active[1:-1, 1:-1] = True
    return GridDomain(2, h, (-nx * h, -ny * h), active, name=f"rect[{nx},{ny}]@{h:g}")


def flat_crack_law(a: float, epsilon_list, h_list, s: float, p: float, tolerance: float = 0.2) -> FlatCrackTable:
    """Gagliardo energy of the mollified thickened crack against ``eps``.

    Pairs ``(eps, h)`` with ``h > eps / 4`` are skipped.  The slope of
    ``log energy`` against ``log eps`` uses the finest lattice for each ``eps``.
    """
    FracParams(s, p)
    if s * p >= 1:
        raise ConfigurationError("flat cracks only have vanishing capacity for s*p < 1")
    rows = []
    for eps in epsilon_list:
        for h in h_list:
            if h > eps / 4 + 1e-15:
                rows.append(FlatCrackRow(eps, h, float("nan"), 0, "skipped: h > eps/4"))
                continue
            phi = mollified_crack(a, eps, h)
            e = gagliardo_energy(phi, s, p, exterior=True)
            rows.append(FlatCrackRow(eps, h, e, int(np.count_nonzero(phi.values))))
    finest = {}
    for r in rows:
        if not r.note and (r.eps not in finest or r.h < finest[r.eps].h):
            finest[r.eps] = r
    if len(finest) < 2:
        slope = float("nan")
    else:
        x = np.log([e for e in finest])
        y = np.log([finest[e].energy for e in finest])
        slope = float(np.polyfit(x, y, 1)[0])
    return FlatCrackTable(rows, slope, 1 - s * p, tolerance)
