"""K-functional of the couple (L^p, D^{1,p}_0) and the interpolation norm.

``K(t, u) = min_v ||u - v||_p + t ||grad v||_p`` over grid functions ``v`` that
vanish on constrained nodes.  The objective is a sum of two norms.  It is
smooth except at ``v = u`` and ``v = 0``, and both of those kinks are the exact
minimizers on whole intervals of ``t``:

* ``t <= t_lo``: ``v = u`` is optimal and ``K = t ||grad u||``;
* ``t >= t_hi``: ``v = 0`` is optimal and ``K = ||u||``.

``t_lo`` is explicit.  ``t_hi`` is the least dual norm of a field whose
divergence is the norming functional of ``u``; it is explicit for ``p = 2`` and
comes from a discrete p-Laplace solve otherwise.  Between the two thresholds we
solve the smooth scalarized problem

    min_v ||u - v||^p / p + lam ||grad v||^p / p,

whose minimizer is optimal for the K-problem at ``t = lam (b / a)^(p-1)``
(``a = ||u - v||``, ``b = ||grad v||``), and root-find ``lam`` for the requested ``t``.
For ``p = 2`` the scalarized problem is diagonal in the eigenbasis of the
discrete Laplacian; otherwise it is solved by damped Newton.  Every value comes
with a duality gap from the dual problem

    max <eta, grad u>  s.t.  ||eta||_* <= t,  ||div eta||_* <= 1.

Computations are carried out in lattice-index units, where
``K(t) = h^(N/p) K_index(t / h)``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage, optimize

from .domain import ConfigurationError, GridDomain
from .norms import (GridFunction, difference_operators, discrete_laplacian, grad_seminorm,
                    gradient_field, lp_norm, omega, signed_power, spherical_average)

TOL_K = 1e-8
PER_DECADE = 64
SPECTRAL_MAX_NODES = 2500


class KFunctionalError(RuntimeError):
    def __init__(self, message: str, value: float, gap: float):
        super().__init__(f"{message} (best value {value:.6g}, gap {gap:.3g})")
        self.value = value
        self.gap = gap


# ---------------------------------------------------------------------------
# index-unit helpers


def _pnorm(x: np.ndarray, p: float) -> float:
    return math.fsum(np.abs(x) ** p) ** (1.0 / p)


def _field_mag(g: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", g, g))


def _field_norm(g: np.ndarray, p: float) -> float:
    return math.fsum(_field_mag(g) ** p) ** (1.0 / p)


def _safe_pow(mag: np.ndarray, e: float) -> np.ndarray:
    """``mag ** e`` with the convention ``0 ** e = 0`` for negative ``e``."""
    if e >= 0:
        return mag**e
    out = np.zeros_like(mag)
    pos = mag > 0
    out[pos] = mag[pos] ** e
    return out


def _norm_grad(x: np.ndarray, p: float) -> np.ndarray:
    """Gradient of ``x -> ||x||_p`` (unit dual norm); zero at the origin."""
    n = _pnorm(x, p)
    if n == 0:
        return np.zeros_like(x)
    return signed_power(x / n, p - 1)


def _field_norm_grad(g: np.ndarray, p: float) -> np.ndarray:
    n = _field_norm(g, p)
    if n == 0:
        return np.zeros_like(g)
    gn = g / n
    mag = _field_mag(gn)
    return gn * _safe_pow(mag, p - 2)[:, None]


@dataclass
class KResult:
    t: float
    value: float
    gap: float
    regime: str
    v: np.ndarray = field(repr=False)
    du: np.ndarray = field(repr=False)

    @property
    def relative_gap(self) -> float:
        return self.gap / self.value if self.value > 0 else 0.0


class _Problem:
    """Per-(domain, p) operators in index units."""

    def __init__(self, domain: GridDomain, p: float):
        self.domain = domain
        self.p = p
        self.q = p / (p - 1.0)
        self.ops = difference_operators(domain)
        self.lap = discrete_laplacian(domain)
        self.m = domain.n_active
        self._eig = None
        self._lap_lu = None
        self._pattern = None
        self._divmat = None

    def grad(self, v):
        return gradient_field(self.ops, v)

    def div(self, eta):
        return sum(d.T @ eta[:, k] for k, d in enumerate(self.ops))

    def field_dual(self, eta):
        return _field_norm(eta, self.q)

    def node_dual(self, xi):
        return _pnorm(xi, self.q)

    @property
    def spectral(self) -> bool:
        return self.p == 2 and self.m <= SPECTRAL_MAX_NODES

    def eig(self):
        if self._eig is None:
            mu, vec = np.linalg.eigh(self.lap.toarray())
            self._eig = (np.maximum(mu, 0.0), vec)
        return self._eig

    def lap_solve(self, rhs):
        if self._lap_lu is None:
            self._lap_lu = spla.splu(self.lap.tocsc())
        return self._lap_lu.solve(rhs)

    # --- scalarized subproblem -------------------------------------------------

    def _field_hessian(self, g, mag, lam, diag):
        """``lam * sum_kl D_k^T diag(c_kl) D_l + diag(diag)``, the Hessian of ``lam ||grad v||^p / p``.

        Gradient magnitudes are floored at ``1e-10`` of their maximum.
        """
        p, dim = self.p, len(self.ops)
        mg = np.maximum(mag, 1e-10 * max(mag.max(), 1e-300))
        w = mg ** (p - 2)
        gn = g / mg[:, None]
        coef = np.concatenate([w * ((k == l) + (p - 2) * gn[:, k] * gn[:, l])
                               for k in range(dim) for l in range(dim)])
        pattern, diag_pos, assemble = self._hessian_pattern()
        data = lam * (assemble @ coef)
        data[diag_pos] += diag
        return sp.csc_matrix((data, pattern.indices, pattern.indptr), shape=pattern.shape)

    @staticmethod
    def _damped_newton(objective, grad_hess, x, tol, max_iter, single_step=False):
        f = objective(x)
        for _ in range(max_iter):
            grad, hess = grad_hess(x)
            step = spla.spsolve(hess, -grad, permc_spec="MMD_AT_PLUS_A")
            dec = -float(grad @ step)
            if not dec > 0:
                break
            alpha = 1.0
            while True:
                xn = x + alpha * step
                fn = objective(xn)
                if fn <= f - 1e-4 * alpha * dec or alpha < 1e-12:
                    break
                alpha *= 0.5
            converged = dec <= tol**2 * max(abs(f), 1e-300) or abs(f - fn) <= 1e-16 * abs(f)
            x, f = xn, fn
            if single_step or converged:
                break
        return x

    def newton(self, u, lam, v0, tol=1e-10, max_iter=200):
        """Minimize ``||u - v||^p / p + lam ||grad v||^p / p`` by damped Newton."""
        p = self.p

        def objective(v):
            g = self.grad(v)
            return (math.fsum(np.abs(u - v) ** p) + lam * math.fsum(_field_mag(g) ** p)) / p

        def grad_hess(v):
            r = u - v
            g = self.grad(v)
            mag = _field_mag(g)
            grad = -signed_power(r, p - 1) + lam * self.div(g * _safe_pow(mag, p - 2)[:, None])
            if p == 2:
                return grad, (sp.identity(self.m) + lam * self.lap).tocsc()
            floor_r = 1e-10 * max(np.abs(u).max(), 1e-300)
            diag = (p - 1) * np.maximum(np.abs(r), floor_r) ** (p - 2)
            return grad, self._field_hessian(g, mag, lam, diag)

        # for p = 2 the problem is quadratic and one Newton step is exact
        return self._damped_newton(objective, grad_hess, v0.copy(), tol, max_iter, single_step=p == 2)

    def _div_matrix(self):
        """``div`` as one sparse matrix acting on the axis-stacked flattened field."""
        if self._divmat is None:
            self._divmat = sp.hstack([d.T for d in self.ops]).tocsr()
        return self._divmat

    def dual_newton(self, u, lam, eta0, tol=1e-12, max_iter=200):
        """Flux ``eta = lam |grad v|^{p-2} grad v`` of the scalarized minimizer, for ``p < 2``.

        Minimizes the Fenchel dual ``||div eta||_q^q / q + lam^{1-q} ||eta||_q^q / q
        - <div eta, u>``, which is twice differentiable because ``q > 2``; the
        primal solution is then ``v = u - |div eta|^{q-2} div eta``.  Working
        with the flux avoids ``|r|^{p-1}``, whose slope is unbounded near ``r = 0``.
        """
        q = self.q
        dim = len(self.ops)
        M = self._div_matrix()
        c = lam ** (1.0 - q)
        nb = self.ops[0].shape[0]

        def split(x):
            return x.reshape(dim, nb).T

        def objective(x):
            xi = M @ x
            mag = _field_mag(split(x))
            return (math.fsum(np.abs(xi) ** q) + c * math.fsum(mag**q)) / q - float(xi @ u)

        def grad_hess(x):
            xi = M @ x
            eta = split(x)
            mag = _field_mag(eta)
            grad = M.T @ (signed_power(xi, q - 1) - u) + c * (eta * mag[:, None] ** (q - 2)).T.ravel()
            wx = (q - 1) * np.maximum(np.abs(xi), 1e-10 * max(np.abs(xi).max(), 1e-300)) ** (q - 2)
            mg = np.maximum(mag, 1e-10 * max(mag.max(), 1e-300))
            en = eta / mg[:, None]
            w = mg ** (q - 2)
            blocks = [[sp.diags(c * w * ((k == l) + (q - 2) * en[:, k] * en[:, l])) for l in range(dim)]
                      for k in range(dim)]
            hess = (M.T @ sp.diags(wx) @ M + sp.bmat(blocks)).tocsc()
            return grad, hess

        x = self._damped_newton(objective, grad_hess, eta0.T.ravel().copy(), tol, max_iter)
        return split(x).copy()

    def min_norm_flux(self, xi, tol=1e-12, max_iter=200):
        """Field ``eta`` of least dual norm with ``div eta = xi``.

        It is ``|grad w|^{p-2} grad w`` for the minimizer ``w`` of
        ``||grad w||^p / p - <xi, w>`` (a discrete p-Laplace equation); for
        ``p = 2`` this is the least-squares field ``grad L^{-1} xi``.
        """
        p = self.p
        w = self.lap_solve(xi)
        if p == 2:
            return self.grad(w)
        # best multiple of the p = 2 solution as the starting point
        a = _field_norm(self.grad(w), p) ** p
        b = float(xi @ w)
        if a > 0 and b > 0:
            w = w * (b / a) ** (1.0 / (p - 1))

        def objective(w):
            return math.fsum(_field_mag(self.grad(w)) ** p) / p - float(xi @ w)

        def grad_hess(w):
            g = self.grad(w)
            mag = _field_mag(g)
            grad = self.div(g * _safe_pow(mag, p - 2)[:, None]) - xi
            return grad, self._field_hessian(g, mag, 1.0, np.zeros(self.m))

        w = self._damped_newton(objective, grad_hess, w, tol, max_iter)
        g = self.grad(w)
        return g * _safe_pow(_field_mag(g), p - 2)[:, None]

    def _hessian_pattern(self):
        """Fixed CSC pattern of ``sum_kl D_k^T diag(c_kl) D_l`` plus the diagonal.

        Returns the pattern, the positions of the diagonal entries in its data
        array, and a sparse map from the stacked weights ``c_kl`` to the data.
        """
        if self._pattern is None:
            ops = [d.tocsr() for d in self.ops]
            dim, m = len(ops), self.m
            nb = ops[0].shape[0]
            rows, cols, src_idx, vals = [], [], [], []
            for k in range(dim):
                for l in range(dim):
                    a, b = ops[k].tocoo(), ops[l].tocoo()
                    # pair nonzeros of row x of D_k with those of row x of D_l
                    by_row_b = {}
                    for x, j, vb in zip(b.row, b.col, b.data):
                        by_row_b.setdefault(x, []).append((j, vb))
                    for x, i, va in zip(a.row, a.col, a.data):
                        for j, vb in by_row_b.get(x, ()):
                            rows.append(i)
                            cols.append(j)
                            src_idx.append((k * dim + l) * nb + x)
                            vals.append(va * vb)
            rows = np.concatenate([np.asarray(rows, dtype=np.int64), np.arange(m)])
            cols = np.concatenate([np.asarray(cols, dtype=np.int64), np.arange(m)])
            pattern = sp.csc_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))
            pattern.sum_duplicates()
            pattern.sort_indices()
            pos_of = {}
            for jc in range(m):
                for q in range(pattern.indptr[jc], pattern.indptr[jc + 1]):
                    pos_of[(pattern.indices[q], jc)] = q
            dest = np.array([pos_of[(i, j)] for i, j in zip(rows[:-m], cols[:-m])], dtype=np.int64)
            assemble = sp.csr_matrix((np.asarray(vals), (dest, np.asarray(src_idx))),
                                     shape=(pattern.nnz, dim * dim * nb))
            diag_pos = np.array([pos_of[(i, i)] for i in range(m)], dtype=np.int64)
            self._pattern = (pattern, diag_pos, assemble)
        return self._pattern

    def scalarized(self, u, lam, v0=None, cu=None):
        """Scalarized minimizer ``v``, the ``t`` it is optimal for, ``a``, ``b``, and the flux.

        The flux ``lam |grad v|^{p-2} grad v`` (``None`` unless computed
        directly) is an exact dual candidate.
        """
        eta = None
        if self.spectral:
            mu, vec = self.eig()
            damp = 1.0 / (1.0 + lam * mu)
            v = vec @ (cu * damp)
            a = math.sqrt(math.fsum((cu * lam * mu * damp) ** 2))
            b = math.sqrt(math.fsum(mu * (cu * damp) ** 2))
        elif self.p < 2:
            w = u if v0 is None else v0
            g = self.grad(w)
            eta = self.dual_newton(u, lam, lam * g * _safe_pow(_field_mag(g), self.p - 2)[:, None])
            v = u - signed_power(self.div(eta), self.q - 1)
            a = _pnorm(u - v, self.p)
            b = _field_norm(self.grad(v), self.p)
        else:
            v = self.newton(u, lam, u.copy() if v0 is None else v0)
            a = _pnorm(u - v, self.p)
            b = _field_norm(self.grad(v), self.p)
        t = lam * (b / a) ** (self.p - 1) if a > 0 else 0.0
        return v, t, a, b, eta


class _UData:
    """Quantities of ``u`` that do not depend on ``t``."""

    def __init__(self, prob: _Problem, u: np.ndarray):
        p = prob.p
        self.u = u
        self.norm_u = _pnorm(u, p)
        self.gu = prob.grad(u)
        self.norm_gu = _field_norm(self.gu, p)
        if self.norm_u == 0:
            self.t_lo = self.t_hi = 0.0
            return
        self.zeta_u = _field_norm_grad(self.gu, p)
        self.t_lo = 1.0 / prob.node_dual(prob.div(self.zeta_u))
        self.xi_u = _norm_grad(u, p)
        eta = prob.min_norm_flux(self.xi_u)
        # normalized so that ||div eta||_* = 1; then v = 0 is certified for t >= ||eta||_*
        self.eta_hi = eta / prob.node_dual(prob.div(eta))
        self.t_hi = prob.field_dual(self.eta_hi)
        self.cu = prob.eig()[1].T @ u if prob.spectral else None


def _certify(prob: _Problem, ud: _UData, tau: float, candidates, fluxes=()) -> KResult:
    """Best primal among ``candidates`` and best dual among the associated multipliers.

    ``fluxes`` are additional dual directions, rescaled to the ``tau`` ball.
    """
    p = prob.p
    u = ud.u
    best = None
    for v in candidates:
        a = _pnorm(u - v, p)
        b = _field_norm(prob.grad(v), p)
        val = a + tau * b
        if best is None or val < best[0]:
            best = (val, v)
    duals = [tau * ud.zeta_u, ud.eta_hi]
    for v in candidates:
        duals.append(tau * _field_norm_grad(prob.grad(v), p))
    for eta in fluxes:
        n1 = prob.field_dual(eta)
        if n1 > 0:
            duals.append(eta * (tau / n1))
    best_dual, best_eta = -np.inf, None
    for eta in duals:
        n1 = prob.field_dual(eta)
        if n1 > tau:
            eta = eta * (tau / n1)
        n2 = prob.node_dual(prob.div(eta))
        if n2 > 1.0:
            eta = eta / n2
        dv = float(np.sum(eta * ud.gu))
        if dv > best_dual:
            best_dual, best_eta = dv, eta
    val, v = best
    if np.array_equal(v, u):
        regime = "identity"
    elif not np.any(v):
        regime = "zero"
    else:
        regime = "interior"
    return KResult(tau, val, max(val - best_dual, 0.0), regime, v, prob.div(best_eta))


class KSolver:
    """K-functional evaluations for one grid function; warm-starts across calls."""

    def __init__(self, u: GridFunction, p: float, tol: float = TOL_K):
        if not p > 1:
            raise ValueError("p must exceed 1")
        self.u = u
        self.p = p
        self.tol = tol
        self.domain = u.domain
        self.prob = _problem(u.domain, p)
        self.scale = float(np.abs(u.values).max()) if u.values.size else 0.0
        self.ud = _UData(self.prob, u.values / self.scale) if self.scale > 0 else None
        self._warm = None
        self._history: list = []

    @property
    def h(self) -> float:
        return self.domain.h

    @property
    def unit(self) -> float:
        """Physical value of an index-unit K for unit-sup data."""
        return self.scale * self.h ** (self.domain.dim / self.p)

    @property
    def thresholds(self) -> tuple[float, float]:
        """Physical ``(t_lo, t_hi)``: ``v = u`` optimal below, ``v = 0`` optimal above."""
        if self.ud is None:
            return 0.0, 0.0
        return self.ud.t_lo * self.h, self.ud.t_hi * self.h

    def solve(self, t: float) -> KResult:
        if t < 0:
            raise ValueError("t must be nonnegative")
        if self.ud is None or t == 0:
            z = np.zeros(self.domain.n_active)
            return KResult(t, 0.0, 0.0, "identity", self.u.values.copy(), z)
        res = self._solve_index(t / self.h)
        res.t = t
        res.value *= self.unit
        res.gap *= self.unit
        res.v = res.v * self.scale
        res.du = res.du * self.h ** (self.domain.dim / self.p)
        return res

    def _solve_index(self, tau: float) -> KResult:
        prob, ud = self.prob, self.ud
        u = ud.u
        zero = np.zeros_like(u)
        if tau <= ud.t_lo:
            return _certify(prob, ud, tau, [u])
        if tau >= ud.t_hi:
            return _certify(prob, ud, tau, [zero])

        cache = {}
        evaluate = self._path_evaluator(cache)

        def g(x):
            t = evaluate(x)[1]
            return math.log(t) - math.log(tau) if t > 0 else -np.inf

        x0 = self._predict(tau)
        root = self._root(g, x0)
        cands = [u, zero]
        fluxes = []
        if root is not None:
            cands.append(evaluate(root)[0])
            if cache[root][4] is not None:
                fluxes.append(cache[root][4])
            self._warm = (root, cache[root][0])
            self._history.append((math.log(tau), root))
        else:
            # plateau of the Pareto front: keep the nearest computed points
            for x in sorted(cache, key=lambda y: abs(g(y)))[:2]:
                cands.append(cache[x][0])
        res = _certify(prob, ud, tau, cands, fluxes)
        if res.relative_gap > self.tol:
            res = self._fallback(tau, cands, fluxes)
        return res

    #: largest jump in ``log lam`` taken by one warm-started Newton solve
    PATH_STEP = 1.0
    #: a cold start begins this far below the requested ``log lam``, from ``v = u``
    COLD_SPAN = 6.0

    def _path_evaluator(self, cache: dict):
        """``x -> scalarized(exp(x))`` with results cached in ``cache``.

        Newton is only reliable close to a solution, so points far from every
        known solution are reached by continuation in ``log lam`` with steps of
        at most ``PATH_STEP`` (the spectral path is exact and needs none).
        """
        prob, ud = self.prob, self.ud
        u = ud.u

        def solve(x, warm):
            cache[x] = prob.scalarized(u, math.exp(x), warm, ud.cu)
            return cache[x]

        def evaluate(x):
            if x in cache:
                return cache[x]
            if prob.spectral:
                return solve(x, None)
            if cache:
                start = min(cache, key=lambda y: abs(y - x))
                warm = cache[start][0]
            elif self._warm is not None:
                start, warm = self._warm
            else:
                start, warm = x - self.COLD_SPAN, u.copy()
                warm = solve(start, warm)[0]
            n = int(math.ceil(abs(x - start) / self.PATH_STEP - 1e-12))
            for k in range(1, n):
                warm = solve(start + (x - start) * k / n, warm)[0]
            return solve(x, warm)

        return evaluate

    def _predict(self, tau: float) -> float:
        """Initial ``log lam``, extrapolated from previous roots when available."""
        ud, lt = self.ud, math.log(tau)
        hist = self._history
        if len(hist) >= 2:
            (t1, x1), (t2, x2) = hist[-2], hist[-1]
            if t2 != t1:
                slope = min(max((x2 - x1) / (t2 - t1), 1.0), 20.0)
                return x2 + slope * (lt - t2)
        if hist:
            return hist[-1][1] + (lt - hist[-1][0])
        return (self.p - 1) * math.log(tau * max(ud.norm_gu, 1e-300) / max(ud.norm_u, 1e-300))

    @staticmethod
    def _root(g, x0: float, ftol: float = 1e-12, span: float = 80.0):
        """Safeguarded secant for the increasing function ``g``; ``None`` if no sign change."""
        pts = [(x0, g(x0))]
        lo = hi = None
        x_prev, g_prev = pts[0]
        if g_prev < 0:
            lo = (x_prev, g_prev)
        else:
            hi = (x_prev, g_prev)
        x = x_prev - g_prev if np.isfinite(g_prev) else x_prev + 1.0
        for _ in range(200):
            if abs(g_prev) <= ftol:
                return x_prev
            if lo is not None and hi is not None and not lo[0] < x < hi[0]:
                x = 0.5 * (lo[0] + hi[0])
            if abs(x - x0) > span:
                return None
            gx = g(x)
            if gx < 0:
                if lo is None or x > lo[0]:
                    lo = (x, gx)
            elif hi is None or x < hi[0]:
                hi = (x, gx)
            if lo is not None and hi is not None and hi[0] - lo[0] < 1e-13 * max(1.0, abs(x)):
                return x if abs(gx) <= abs(g_prev) else x_prev
            denom = gx - g_prev
            if np.isfinite(gx) and np.isfinite(g_prev) and denom != 0:
                x_new = x - gx * (x - x_prev) / denom
            else:
                x_new = x + (1.0 if gx < 0 else -1.0)
            if lo is None or hi is None:
                # no bracket yet: cap the extrapolation
                x_new = x + float(np.clip(x_new - x, -8.0, 8.0))
                if hi is None and x_new <= x and gx < 0:
                    x_new = x + 1.0
                if lo is None and x_new >= x and gx >= 0:
                    x_new = x - 1.0
                if hi is None and gx < 0 and abs(gx - g_prev) < 1e-14:
                    return None
            x_prev, g_prev, x = x, gx, x_new
        return x_prev if abs(g_prev) <= 1e3 * ftol else None

    def _fallback(self, tau: float, cands, fluxes=()) -> KResult:
        """Minimize ``a(lam) + tau b(lam)`` over the scalarization path (unimodal)."""
        prob, ud = self.prob, self.ud
        u = ud.u

        evaluate = self._path_evaluator({})

        def phi(x):
            v, _, a, b, eta = evaluate(x)
            return a + tau * b, v, eta

        x0 = (prob.p - 1) * math.log(tau * max(ud.norm_gu, 1e-300) / max(ud.norm_u, 1e-300))
        r = optimize.minimize_scalar(lambda x: phi(x)[0], bracket=(x0 - 5, x0 + 5),
                                     method="brent", options={"xtol": 1e-12})
        _, v, eta = phi(r.x)
        extra = list(fluxes) + ([eta] if eta is not None else [])
        res = _certify(prob, ud, tau, list(cands) + [v], extra)
        if res.relative_gap > self.tol:
            raise KFunctionalError(f"K-functional did not reach tol {self.tol} at t={tau * self.h}",
                                   res.value * self.unit, res.gap * self.unit)
        return res


_PROBLEMS: "weakref.WeakKeyDictionary[GridDomain, dict]" = weakref.WeakKeyDictionary()


def _problem(domain: GridDomain, p: float) -> _Problem:
    per = _PROBLEMS.setdefault(domain, {})
    if p not in per:
        per[p] = _Problem(domain, p)
    return per[p]


def k_functional(t: float, u: GridFunction, p: float, tol: float = TOL_K) -> float:
    """``K(t, u; L^p, D^{1,p}_0)`` on the domain of ``u``."""
    return KSolver(u, p, tol).solve(t).value


# ---------------------------------------------------------------------------
# profiles and the interpolation norm


@dataclass
class KProfile:
    t_samples: np.ndarray
    k_values: np.ndarray
    residuals: np.ndarray
    regimes: list
    norm_u: float
    norm_grad: float
    t_lo: float
    t_hi: float
    domain_id: str = ""
    u_id: str = ""
    derivatives: np.ndarray | None = field(default=None, repr=False)

    def upper_envelope(self) -> np.ndarray:
        return np.minimum(self.norm_u, self.t_samples * self.norm_grad)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "K", "residual", "regime"])
        for t, k, r, g in zip(self.t_samples, self.k_values, self.residuals, self.regimes):
            w.writerow([repr(float(t)), repr(float(k)), repr(float(r)), g])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"t": self.t_samples.tolist(), "K": self.k_values.tolist(),
                           "residual": self.residuals.tolist(), "norm_u": self.norm_u,
                           "norm_grad": self.norm_grad, "t_lo": self.t_lo, "t_hi": self.t_hi,
                           "domain_id": self.domain_id, "u_id": self.u_id})


def k_profile(u: GridFunction, t_samples, p: float, tol: float = TOL_K,
              with_derivatives: bool = False) -> KProfile:
    """K at each of ``t_samples`` (processed in increasing order with warm starts)."""
    ts = np.asarray(t_samples, dtype=float)
    solver = KSolver(u, p, tol)
    order = np.argsort(ts)
    k = np.empty(len(ts))
    res = np.empty(len(ts))
    reg = [""] * len(ts)
    der = np.empty((len(ts), u.domain.n_active)) if with_derivatives else None
    for i in order:
        r = solver.solve(float(ts[i]))
        k[i], res[i], reg[i] = r.value, r.gap, r.regime
        if der is not None:
            der[i] = r.du
    t_lo, t_hi = solver.thresholds
    return KProfile(ts, k, res, reg, lp_norm(u, p), grad_seminorm(u, p), t_lo, t_hi,
                    domain_id=u.domain.name, u_id=hashlib.sha256(u.values.tobytes()).hexdigest()[:8],
                    derivatives=der)


@dataclass
class XNormResult:
    value: float
    quadrature_part: float
    head_bound: float
    tail_bound: float
    t_min: float
    t_max: float
    head_exact: bool
    tail_exact: bool
    s: float
    p: float
    profile: KProfile | None = field(default=None, repr=False)
    gradient: np.ndarray | None = field(default=None, repr=False)

    @property
    def power(self) -> float:
        """``value ** p``."""
        return self.quadrature_part + self.head_bound + self.tail_bound


def default_t_grid(u: GridFunction, p: float, per_decade: int = PER_DECADE) -> np.ndarray:
    """Log grid over the transition region ``[t_lo, t_hi]`` with both end points included."""
    solver = KSolver(u, p)
    t_lo, t_hi = solver.thresholds
    if t_lo <= 0:
        return np.array([])
    decades = max(math.log10(t_hi / t_lo), 0.0)
    n = max(int(math.ceil(decades * per_decade)) + 1, 16)
    return np.geomspace(t_lo, max(t_hi, t_lo * (1 + 1e-9)), n)


def _log_trapezoid_weights(ts: np.ndarray) -> np.ndarray:
    x = np.log(ts)
    w = np.zeros_like(x)
    dx = np.diff(x)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


def x_norm(u: GridFunction, s: float, p: float, t_min: float | None = None, t_max: float | None = None,
           n_t: int | None = None, profile: KProfile | None = None, tol: float = TOL_K,
           bound_fraction: float = 1e-3, with_gradient: bool = False) -> XNormResult:
    """``||u||_{X^{s,p}_0} = (int_0^inf (K(t)/t^s)^p dt/t)^(1/p)``.

    The integral over ``[t_min, t_max]`` uses the trapezoid rule in ``log t``; the
    pieces below ``t_min`` and above ``t_max`` are replaced by the analytic bounds
    ``||grad u||^p t_min^{p(1-s)} / (p(1-s))`` and ``||u||^p t_max^{-sp} / (sp)``,
    which are exact when ``t_min <= t_lo`` and ``t_max >= t_hi``.  Without explicit
    limits the grid is extended (with closed-form K values) until both bounds are
    below ``bound_fraction`` times the quadrature part.  ``value ** p`` is the sum
    of the three parts.
    """
    if not 0 < s < 1:
        raise ValueError("s must lie in (0, 1)")
    nu, ng = lp_norm(u, p), grad_seminorm(u, p)
    if nu == 0:
        return XNormResult(0.0, 0.0, 0.0, 0.0, t_min or 0.0, t_max or 0.0, True, True, s, p,
                           profile=None, gradient=np.zeros(u.domain.n_active) if with_gradient else None)
    solver = None
    if profile is None:
        solver = KSolver(u, p, tol)
        t_lo, t_hi = solver.thresholds
        if t_min is not None or t_max is not None or n_t is not None:
            lo = t_min if t_min is not None else t_lo
            hi = t_max if t_max is not None else t_hi
            if not 0 < lo < hi:
                raise ValueError("need 0 < t_min < t_max")
            n = n_t if n_t is not None else max(16, int(math.ceil(math.log10(hi / lo) * PER_DECADE)) + 1)
            if n < 16:
                raise ValueError("n_t must be at least 16")
            ts = np.geomspace(lo, hi, n)
            extra = [t for t in (t_lo, t_hi) if lo < t < hi]
            ts = np.unique(np.concatenate([ts, extra]))
        else:
            ts = default_t_grid(u, p)
        profile = k_profile(u, ts, p, tol, with_derivatives=with_gradient)
    ts, ks = profile.t_samples, profile.k_values
    order = np.argsort(ts)
    ts, ks = ts[order], ks[order]
    der = profile.derivatives[order] if profile.derivatives is not None else None
    sp_ = s * p

    def parts(ts, ks):
        w = _log_trapezoid_weights(ts)
        quad = math.fsum(w * (ks / ts**s) ** p)
        head = ng**p * ts[0] ** (p * (1 - s)) / (p * (1 - s))
        tail = nu**p * ts[-1] ** (-sp_) / sp_
        return w, quad, head, tail

    w, quad, head, tail = parts(ts, ks)
    explicit = t_min is not None or t_max is not None or n_t is not None
    if not explicit:
        # Below t_lo and above t_hi K is known in closed form, so the grid is
        # extended there until each analytic bound falls under its share of the
        # (pre-extension, hence smaller) quadrature part.
        step = 10 ** (1.0 / PER_DECADE)
        target = 0.5 * bound_fraction * quad
        n_lo = n_hi = 0
        if head > target:
            t_head = (target * p * (1 - s) / ng**p) ** (1.0 / (p * (1 - s)))
            n_lo = int(math.ceil(math.log(ts[0] / t_head) / math.log(step)))
        if tail > target:
            t_tail = (nu**p / (target * sp_)) ** (1.0 / sp_)
            n_hi = int(math.ceil(math.log(t_tail / ts[-1]) / math.log(step)))
        lo_ext = list(ts[0] * step ** -np.arange(n_lo, 0, -1.0))[::-1]
        hi_ext = list(ts[-1] * step ** np.arange(1.0, n_hi + 1))
        if lo_ext or hi_ext:
            lo_t = np.asarray(lo_ext[::-1])
            hi_t = np.asarray(hi_ext)
            ts = np.concatenate([lo_t, ts, hi_t])
            ks = np.concatenate([lo_t * ng, ks, np.full(len(hi_t), nu)])
            if der is not None:
                solver = solver or KSolver(u, p, tol)
                lo_d = [solver.solve(t).du for t in lo_t]
                hi_d = [solver.solve(t).du for t in hi_t]
                der = np.vstack([np.reshape(lo_d, (-1, der.shape[1])), der,
                                 np.reshape(hi_d, (-1, der.shape[1]))])
            w, quad, head, tail = parts(ts, ks)
    head_exact = ts[0] <= profile.t_lo * (1 + 1e-12)
    tail_exact = ts[-1] >= profile.t_hi * (1 - 1e-12)
    grad = None
    if with_gradient:
        grad = _xnorm_gradient(u, p, s, ts, ks, w, der)
    total = quad + head + tail
    return XNormResult(total ** (1.0 / p), quad, head, tail, float(ts[0]), float(ts[-1]),
                       bool(head_exact), bool(tail_exact), s, p, profile=profile, gradient=grad)


def _xnorm_gradient(u, p, s, ts, ks, w, der):
    """Gradient of ``value ** p`` in ``u`` (envelope theorem; fixed t-grid)."""
    d = u.domain
    coef = w * p * ks ** (p - 1) * ts ** (-s * p)
    g = coef @ der
    prob = _problem(d, p)
    gu = prob.grad(u.values)
    mag = _field_mag(gu)
    gp = gu * _safe_pow(mag, p - 2)[:, None]
    head_coef = ts[0] ** (p * (1 - s)) / (p * (1 - s))
    tail_coef = ts[-1] ** (-s * p) / (s * p)
    g = g + head_coef * p * d.h ** (d.dim - p) * prob.div(gp)
    g = g + tail_coef * p * d.h**d.dim * signed_power(u.values, p - 1)
    return g


def k_domain_monotonicity(t: float, u: GridFunction, small_domain: GridDomain, big_domain: GridDomain,
                          p: float, tol: float = TOL_K) -> tuple[float, float]:
    """``(K_small, K_big)`` for ``u`` viewed on two nested domains of the same lattice."""
    if abs(small_domain.h - big_domain.h) > 1e-12 * big_domain.h or small_domain.dim != big_domain.dim:
        raise ConfigurationError("domains must share the lattice")
    xs = small_domain.active_coordinates()
    big_idx = np.round((xs - np.asarray(big_domain.lower)) / big_domain.h).astype(int)
    inside = np.all((big_idx >= 0) & (big_idx < np.asarray(big_domain.shape)), axis=1)
    if not inside.all() or not big_domain.active[tuple(big_idx.T)].all():
        raise ConfigurationError("small domain is not contained in the big domain")
    if u.domain is not small_domain:
        u = GridFunction(small_domain, u.values)
    arr = np.zeros(big_domain.shape)
    arr[tuple(big_idx.T)] = u.values
    ub = GridFunction.from_full(big_domain, arr)
    return k_functional(t, u, p, tol), k_functional(t, ub, p, tol)


# ---------------------------------------------------------------------------
# mollifier and rescaling


def mollifier_psi(dim: int, x) -> np.ndarray:
    """``psi(x) = (N+1)/omega_N (1 - |x|)_+``; unit mass.

    ``x`` has shape ``(..., dim)``; in 1D plain scalars and arrays are accepted too.
    """
    x = np.asarray(x, dtype=float)
    if dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        r = np.abs(x)
    else:
        r = np.linalg.norm(x, axis=-1)
    return (dim + 1) / omega(dim) * np.clip(1.0 - r, 0.0, None)


def psi_kernel(dim: int, h: float, t: float) -> np.ndarray:
    """Lattice stencil of ``psi_t`` renormalized to discrete mass ``h^N sum = 1``."""
    if t <= 0:
        raise ValueError("t must be positive")
    r = int(math.ceil(t / h))
    ax = np.arange(-r, r + 1) * h
    grids = np.meshgrid(*([ax] * dim), indexing="ij")
    dist = np.sqrt(sum(g * g for g in grids))
    ker = (dim + 1) / omega(dim) / t**dim * np.clip(1.0 - dist / t, 0.0, None)
    total = ker.sum() * h**dim
    if total == 0:
        ker = np.zeros_like(ker)
        ker[(r,) * dim] = 1.0 / h**dim
    else:
        ker /= total
    return ker


def psi_convolve_full(u: GridFunction, t: float) -> np.ndarray:
    """``psi_t * u`` on the box nodes (node-rule quadrature, zero extension)."""
    d = u.domain
    ker = psi_kernel(d.dim, d.h, t) * d.h**d.dim
    return ndimage.convolve(u.full(), ker, mode="constant", cval=0.0)


def psi_convolve(u: GridFunction, t: float, strict: bool = False) -> GridFunction:
    """Mollified function restricted to the active nodes (raises on leakage if ``strict``)."""
    return GridFunction.from_full(u.domain, psi_convolve_full(u, t), strict=strict, tol=1e-14)


def ubar_samples(u: GridFunction, p: float, r_max: float, n_angles: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Spherical averages at the lattice radii ``0, h, ..., >= r_max``."""
    h = u.domain.h
    m = int(math.ceil(r_max / h - 1e-12))
    rho = h * np.arange(m + 1)
    vals = np.array([0.0] + [spherical_average(u, r, p, n_angles) for r in rho[1:]])
    return rho, vals


def k_upper_bound_mollifier(t: float, u: GridFunction, p: float, n_angles: int = 32) -> float:
    """``(2N(N+1)/t) int_0^t Ubar(rho) d rho`` with the trapezoid rule on lattice radii."""
    if t <= 0:
        raise ValueError("t must be positive")
    dim = u.domain.dim
    rho, ub = ubar_samples(u, p, t, n_angles)
    keep = rho < t
    r = np.append(rho[keep], t)
    v = np.append(ub[keep], np.interp(t, rho, ub))
    integral = float(np.trapezoid(v, r))
    return 2 * dim * (dim + 1) / t * integral


def convex_rescale(u: GridFunction, t: float, R: float, incenter) -> GridFunction:
    """``u_t(x) = u(x0 + R/(R-t) (x - x0))`` by piecewise-linear interpolation."""
    if not 0 < t < R / 2:
        raise ValueError("need 0 < t < R/2")
    d = u.domain
    x0 = np.atleast_1d(np.asarray(incenter, dtype=float))
    coords = d.coordinates().reshape(-1, d.dim)
    y = x0 + R / (R - t) * (coords - x0)
    idx = (y - np.asarray(d.lower)) / d.h
    vals = ndimage.map_coordinates(u.full(), idx.T, order=1, mode="constant", cval=0.0)
    return GridFunction.from_full(d, vals.reshape(d.shape), strict=False)
