import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from fraclab.constants import lambda1_solve
from fraclab.domain import ConfigurationError, ConvexPolygon, make_box, make_cracked_domain, make_polygon_domain
from fraclab.kfunctional import (KSolver, convex_rescale, default_t_grid, k_domain_monotonicity, k_functional,
                                 k_profile, k_upper_bound_mollifier, mollifier_psi, psi_convolve,
                                 psi_convolve_full, psi_kernel, x_norm)
from fraclab.norms import GridFunction, grad_seminorm, lp_norm
from oracles import k_grid_search


def _eigenfunction(domain):
    """Smallest Dirichlet eigenpair of the discrete Laplacian (1D closed form)."""
    n = domain.n_active
    h = domain.h
    k = np.arange(1, n + 1)
    lam = 4 / h**2 * math.sin(math.pi * h / 2) ** 2
    return GridFunction(domain, np.sin(math.pi * k / (n + 1))), lam


def test_zero_t_and_zero_function():
    d = make_box(1, 1.0, 0.25)
    u = GridFunction(d, [0.3, -1.0, 0.5])
    assert k_functional(0.0, u, 2.0) == 0.0
    assert k_functional(1.0, GridFunction.zeros(d), 2.0) == 0.0
    with pytest.raises(ValueError):
        k_functional(-1.0, u, 2.0)


def test_three_node_example_against_grid_search():
    d = make_box(1, 1.0, 0.25)
    u = GridFunction(d, [0.0, 1.0, 0.0])
    oracle = k_grid_search(1.0, u, 2.0)
    assert k_functional(1.0, u, 2.0) == pytest.approx(oracle, rel=1e-3)
    # frozen from the oracle run: t = 1 is past the last kink, so K = ||u||_2
    assert oracle == pytest.approx(0.5, rel=1e-6)


@pytest.mark.parametrize("seed", range(6))
def test_random_small_instances_against_grid_search(seed):
    rng = np.random.default_rng(100 + seed)
    m = int(rng.integers(1, 6))
    p = [1.5, 2.0, 3.0][seed % 3]
    t = [0.1, 1.0, 10.0][seed // 2 % 3]
    d = make_box(1, 1.0, 1 / (m + 1))
    u = GridFunction(d, rng.uniform(-1, 1, m))
    assert k_functional(t, u, p) == pytest.approx(k_grid_search(t, u, p), rel=1e-6)


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_upper_envelope_and_thresholds(p):
    d = make_box(1, 1.0, 1 / 16)
    u = GridFunction.from_callable(d, lambda x: x * (1 - x) * (1 + np.sin(7 * x)))
    nu, ng = lp_norm(u, p), grad_seminorm(u, p)
    t_lo, t_hi = KSolver(u, p).thresholds
    assert k_functional(0.5 * t_lo, u, p) == pytest.approx(0.5 * t_lo * ng, rel=1e-12)
    assert k_functional(2 * t_hi, u, p) == pytest.approx(nu, rel=1e-12)
    for t in np.geomspace(t_lo, t_hi, 9):
        assert k_functional(t, u, p) <= min(nu, t * ng) * (1 + 1e-8)


def test_eigenfunction_closed_form():
    d = make_box(1, 1.0, 1 / 32)
    u, lam = _eigenfunction(d)
    nu = lp_norm(u, 2)
    for t in (0.01, 0.1, 0.3, 1.0):
        assert k_functional(t, u, 2.0) == pytest.approx(nu * min(1.0, t * math.sqrt(lam)), rel=1e-8)


@pytest.mark.parametrize("s", [0.3, 0.5, 0.7])
def test_x_norm_eigenfunction_closed_form(s):
    d = make_box(1, 1.0, 1 / 32)
    u, lam = _eigenfunction(d)
    r = x_norm(u, s, 2.0)
    exact = lp_norm(u, 2) ** 2 * lam**s / (2 * s * (1 - s))
    assert r.power == pytest.approx(exact, rel=2e-4)
    assert r.head_exact and r.tail_exact


def _profile_checks(prof, tol):
    order = np.argsort(prof.t_samples)
    t, k = prof.t_samples[order], prof.k_values[order]
    assert np.all(k >= -tol)
    assert np.all(np.diff(k) >= -tol)
    chord = k[:-2] + (k[2:] - k[:-2]) * (t[1:-1] - t[:-2]) / (t[2:] - t[:-2])
    assert np.all(k[1:-1] >= chord - 2 * tol)
    assert np.all(k <= prof.upper_envelope()[order] + tol)


@given(st.integers(0, 10**6), st.sampled_from([1.5, 2.0, 3.0]), st.integers(2, 9))
def test_profile_shape_property(seed, p, m):
    rng = np.random.default_rng(seed)
    d = make_box(1, 1.0, 1 / (m + 1))
    u = GridFunction(d, rng.uniform(-1, 1, m))
    prof = k_profile(u, np.geomspace(1e-3, 1e2, 25), p)
    _profile_checks(prof, 1e-8 * max(1.0, prof.norm_u))


def test_profile_2d_shape_and_gaps():
    d = make_cracked_domain(2, 0, 1 / 8)
    u = GridFunction.from_callable(d, lambda x, y: np.cos(np.pi * x) * np.cos(np.pi * y) * (1 + x))
    prof = k_profile(u, default_t_grid(u, 1.5, per_decade=16), 1.5)
    _profile_checks(prof, 1e-8 * prof.norm_u)
    assert np.all(prof.residuals <= 1e-8 * np.maximum(prof.k_values, 1e-300) + 1e-14)


def test_profile_serialization():
    d = make_box(1, 1.0, 1 / 8)
    u = GridFunction.from_callable(d, lambda x: np.sin(np.pi * x))
    prof = k_profile(u, [0.01, 0.1, 1.0], 2.0)
    lines = prof.to_csv().splitlines()
    assert lines[0] == "t,K,residual,regime" and len(lines) == 4
    doc = json.loads(prof.to_json())
    assert doc["K"] == prof.k_values.tolist()


def test_x_norm_zero_and_parts():
    d = make_box(1, 1.0, 1 / 16)
    assert x_norm(GridFunction.zeros(d), 0.5, 2.0).value == 0.0
    u = GridFunction.from_callable(d, lambda x: x * (1 - x) ** 2)
    r = x_norm(u, 0.4, 1.5)
    assert r.value ** 1.5 == pytest.approx(r.quadrature_part + r.head_bound + r.tail_bound, rel=1e-14)
    assert 0 <= r.head_bound + r.tail_bound <= 1e-3 * r.quadrature_part
    with pytest.raises(ValueError):
        x_norm(u, 0.4, 1.5, t_min=0.1, t_max=1.0, n_t=8)


def test_x_norm_explicit_grid_bounds():
    d = make_box(1, 1.0, 1 / 16)
    u = GridFunction.from_callable(d, lambda x: np.sin(np.pi * x) ** 3)
    p, s = 2.0, 0.5
    r = x_norm(u, s, p, t_min=1e-3, t_max=1e1, n_t=65)
    assert r.head_bound == pytest.approx(grad_seminorm(u, p) ** p * 1e-3 ** (p * (1 - s)) / (p * (1 - s)))
    assert r.tail_bound == pytest.approx(lp_norm(u, p) ** p * 10.0 ** (-s * p) / (s * p))
    ref = x_norm(u, s, p)
    assert r.power == pytest.approx(ref.power, rel=1e-3)


@given(st.integers(0, 10**6), st.sampled_from([0.3, 0.5, 0.7]), st.sampled_from([1.5, 2.0]))
def test_interpolation_inequality(seed, s, p):
    rng = np.random.default_rng(seed)
    d = make_box(1, 1.0, 1 / 12)
    u = GridFunction(d, rng.uniform(-1, 1, d.n_active))
    lhs = s * (1 - s) * x_norm(u, s, p).power
    rhs = lp_norm(u, p) ** (p * (1 - s)) * grad_seminorm(u, p) ** (s * p)
    # the sharper form carries an extra 1/p
    assert p * lhs <= rhs * (1 + 1e-3)


@pytest.mark.parametrize("p", [1.5, 2.0])
def test_poincare_for_interpolation_norm(p):
    """(lambda1)^s ||u||^p <= p s(1-s) ||u||_X^p, with equality for the p=2 eigenfunction."""
    d = make_box(1, 1.0, 1 / 16)
    l1 = lambda1_solve(d, p).value
    rng = np.random.default_rng(5)
    for _ in range(3):
        u = GridFunction(d, rng.uniform(0, 1, d.n_active))
        for s in (0.3, 0.7):
            assert l1**s * lp_norm(u, p) ** p <= p * s * (1 - s) * x_norm(u, s, p).power * (1 + 1e-3)
    if p == 2.0:
        u, lam = _eigenfunction(d)
        ratio = 2 * 0.5 * 0.5 * x_norm(u, 0.5, 2.0).power / (lam**0.5 * lp_norm(u, 2) ** 2)
        assert ratio == pytest.approx(1.0, rel=1e-3)


def test_x_norm_gradient_matches_finite_differences():
    # the kinks t_lo, t_hi move with u, so compare on a fixed t grid
    d = make_box(1, 1.0, 1 / 8)
    u = GridFunction.from_callable(d, lambda x: np.sin(np.pi * x) + 0.3 * x)
    s, p = 0.4, 1.5
    ts = np.geomspace(1e-4, 1e3, 200)

    def power(w, grad=False):
        prof = k_profile(w, ts, p, with_derivatives=grad)
        return x_norm(w, s, p, profile=prof, with_gradient=grad)

    r = power(u, True)
    eps = 1e-6
    for i in (0, 3, 6):
        dv = np.zeros(d.n_active)
        dv[i] = eps
        fd = (power(u + dv).power - power(u - dv).power) / (2 * eps)
        assert r.gradient[i] == pytest.approx(fd, rel=1e-4)


def test_domain_monotonicity():
    h = 1 / 16
    small = make_cracked_domain(1, 0, h)
    big = make_box(1, 1.0, h, lower=-0.5)
    assert k_domain_monotonicity(1.0, GridFunction.zeros(small), small, big, 2.0) == (0.0, 0.0)
    u = GridFunction.from_callable(small, lambda x: np.abs(np.sin(2 * np.pi * x)))
    for p in (1.5, 2.0):
        for t in (0.01, 0.05, 0.2):
            ks, kb = k_domain_monotonicity(t, u, small, big, p)
            assert kb <= ks + 2e-8 * ks
    ks, kb = k_domain_monotonicity(0.05, u, small, small, 2.0)
    assert abs(ks - kb) <= 2e-8 * ks
    with pytest.raises(ConfigurationError):
        k_domain_monotonicity(0.05, GridFunction.zeros(big), big, small, 2.0)


def test_mollifier_mass():
    assert integrate.quad(lambda x: mollifier_psi(1, x), -1, 1)[0] == pytest.approx(1.0, rel=1e-12)
    val, _ = integrate.quad(lambda r: 2 * math.pi * r * mollifier_psi(2, [r, 0.0]), 0, 1)
    assert val == pytest.approx(1.0, rel=1e-12)
    for dim in (1, 2):
        for t in (0.05, 0.3):
            assert psi_kernel(dim, 0.05, t).sum() * 0.05**dim == pytest.approx(1.0, rel=1e-14)


def test_psi_convolve_constant_and_support():
    d = make_box(2, 4.0, 1 / 8, lower=-2.0)
    ones = GridFunction(d, np.ones(d.n_active))
    v = psi_convolve_full(ones, 0.5).reshape(d.shape)
    mid = d.shape[0] // 2
    assert v[mid, mid] == pytest.approx(1.0, rel=1e-14)
    d1 = make_box(1, 4.0, 1 / 16, lower=-2.0)
    u = GridFunction.from_callable(d1, lambda x: (np.abs(x) <= 0.25).astype(float))
    w = psi_convolve_full(u, 0.3)
    x = d1.coordinates()[..., 0]
    assert np.all(w[np.abs(x) > 0.25 + 0.3 + d1.h] == 0)


def test_psi_convolve_converges():
    d = make_box(1, 2.0, 1 / 256, lower=-1.0)
    u = GridFunction.from_callable(d, lambda x: np.maximum(0.0, 0.5 - np.abs(x)))
    errs = [lp_norm(psi_convolve(u, t) - u, 2) for t in (0.2, 0.1, 0.05)]
    assert errs[0] > errs[1] > errs[2]


def test_mollifier_upper_bound_dominates():
    d = make_box(1, 6.0, 1 / 16, lower=-3.0)
    u = GridFunction.from_callable(d, lambda x: np.maximum(0.0, 1 - 4 * x * x) ** 2)
    assert k_upper_bound_mollifier(0.5, GridFunction.zeros(d), 2.0) == 0.0
    for p in (1.5, 2.0):
        for t in np.geomspace(0.05, 2.0, 8):
            assert k_upper_bound_mollifier(t, u, p) >= k_functional(t, u, p) * (1 - 1e-4)


def test_convex_rescale():
    poly = ConvexPolygon.regular(6)
    d = make_polygon_domain(poly, 1 / 16)
    R, x0 = poly.inradius, poly.incenter
    u = GridFunction.from_callable(d, lambda x, y: np.maximum(0.0, (R / 2) ** 2 - x * x - y * y))
    same = convex_rescale(u, 1e-9, R, x0)
    assert np.max(np.abs(same.values - u.values)) <= 1e-7
    t = R / 4
    v = convex_rescale(u, t, R, x0)
    r = np.linalg.norm(d.active_coordinates() - x0, axis=1)
    assert np.all(v.values[r > 0.75 * R / 2 + d.h] == 0)
    w = psi_convolve_full(v, t)
    assert np.all(w[d.constrained] == 0)
    with pytest.raises(ValueError):
        convex_rescale(u, R / 2, R, x0)
