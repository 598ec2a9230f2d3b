import math
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.integrate import quad, trapezoid
from scipy.special import gamma
from scipy.stats import levy_stable

from chain_sim import Box
from convergence_lab import TestFunction
from kernel_model import ConstantSymbol, LatticeSite, ModelSpec
from lattice_generator import build_generator, heat_kernel
from stable_oracle import (OracleSpec, calibrate_sigma, fdd_box_probability, on_diagonal, oracle_semigroup,
                           product_density, stable_1d_cdf, stable_1d_density, stable_1d_density_quadrature)


def test_cauchy_on_diagonal_values():
    assert on_diagonal(OracleSpec(1.0, 1, 1.0), 1.0) == pytest.approx(1 / math.pi)
    assert on_diagonal(OracleSpec(1.0, 2, 1.0), 1.0) == pytest.approx(1 / math.pi ** 2)
    assert product_density(OracleSpec(1.0, 2, 1.0), 1.0, [0, 0], [0, 0]) == pytest.approx(1 / math.pi ** 2)


def test_half_alpha_at_origin():
    # Gamma(1 + 1/alpha) / pi with alpha = 1/2
    assert stable_1d_density(0.5, 1.0, 0.0) == pytest.approx(2 / math.pi)


@pytest.mark.parametrize("alpha", [1.0, 2.0])
def test_quadrature_matches_closed_forms(alpha):
    x = np.array([0.0, 0.3, 1.0, 2.5, 7.0])
    closed = stable_1d_density(alpha, 1.3, x)
    numeric = stable_1d_density_quadrature(alpha, 1.3, x)
    assert np.allclose(numeric, closed, rtol=1e-6, atol=1e-10)


def test_density_agrees_with_scipy_levy_stable():
    x = np.array([0.0, 0.5, 2.0])
    # exp(-tau |xi|^alpha) is levy_stable with scale tau^(1/alpha)
    ref = levy_stable.pdf(x, 1.5, 0.0, scale=2.0 ** (1 / 1.5))
    assert np.allclose(stable_1d_density(1.5, 2.0, x), ref, rtol=1e-4)


def test_cauchy_cdf():
    assert stable_1d_cdf(1.0, 1.0, 1.0) == pytest.approx(0.75)
    assert stable_1d_cdf(1.5, 1.0, 0.0) == 0.5


def test_cdf_is_symmetric_and_differentiates_to_density():
    for x in (0.4, 1.7):
        assert stable_1d_cdf(1.5, 1.0, x) + stable_1d_cdf(1.5, 1.0, -x) == pytest.approx(1.0, abs=1e-8)
        h = 1e-3
        slope = (stable_1d_cdf(1.5, 1.0, x + h) - stable_1d_cdf(1.5, 1.0, x - h)) / (2 * h)
        assert slope == pytest.approx(stable_1d_density(1.5, 1.0, x), rel=1e-4)


def test_oracle_needs_constant_symbol(checkerboard_1d, cauchy_1d):
    with pytest.raises(ValueError, match="oracle invalid for variable c"):
        OracleSpec.from_model(checkerboard_1d, 1.0)
    with pytest.raises(ValueError):
        product_density(OracleSpec(1.0, 1, 1.0), 1.0, [0], [0], model=checkerboard_1d)
    assert OracleSpec.from_model(cauchy_1d, 2.0).sigma == 2.0
    with pytest.raises(ValueError):
        OracleSpec(1.0, 1, 0.0)


def test_calibrate_sigma_inverts_the_on_diagonal_value(cauchy_1d, checkerboard_1d):
    ref = SimpleNamespace(source=LatticeSite((0,)), t=1.0, value_at=lambda site: 1 / (2 * math.pi))
    assert calibrate_sigma(cauchy_1d, ref) == pytest.approx(2.0, rel=1e-10)
    with pytest.raises(ValueError):
        calibrate_sigma(checkerboard_1d, ref)
    with pytest.raises(ValueError):
        calibrate_sigma(cauchy_1d, SimpleNamespace(source=LatticeSite((0,)), t=1.0, value_at=lambda s: 0.0))


def test_oracle_semigroup_at_time_zero_is_identity():
    f = TestFunction("gaussian", 1, width=0.5, radius=2.0)
    pts = np.array([[0.0], [0.7], [3.0]])
    assert np.allclose(oracle_semigroup(OracleSpec(1.0, 1, 1.0), 0.0, f, pts), f(pts))


def test_oracle_semigroup_against_direct_quadrature():
    spec = OracleSpec(1.0, 1, 1.0)
    f = lambda p: np.exp(-np.sum(np.asarray(p) ** 2, axis=-1))
    pts = np.array([[0.0], [1.5]])
    got = oracle_semigroup(spec, 0.5, f, pts, support=[(-8.0, 8.0)])
    for p, v in zip(pts[:, 0], got):
        ref = quad(lambda y: stable_1d_density(1.0, 0.5, y - p) * math.exp(-y * y), -np.inf, np.inf)[0]
        assert v == pytest.approx(ref, rel=1e-8)


def test_product_functions_use_factorised_kernel():
    spec = OracleSpec(1.0, 2, 1.0)
    f = TestFunction("gaussian", 2, width=0.5, radius=2.0)
    plain = lambda p: f(p)
    pts = np.array([[0.0, 0.0], [0.5, -1.0]])
    a = oracle_semigroup(spec, 1.0, f, pts)
    b = oracle_semigroup(spec, 1.0, plain, pts, support=f.support())
    assert np.allclose(a, b, rtol=1e-10)


def test_fdd_box_probability():
    spec = OracleSpec(1.0, 1, 1.0)
    with pytest.raises(ValueError):
        fdd_box_probability(spec, [0.0], (1.0, 1.0), (Box((-1.0,), (1.0,)), Box((-1.0,), (1.0,))))
    # an almost unconstrained second box leaves P(|X_1| <= 1) = 1/2
    p = fdd_box_probability(spec, [0.0], (1.0, 2.0), (Box((-1.0,), (1.0,)), Box((-1e4,), (1e4,))))
    assert p == pytest.approx(0.5, abs=1e-3)
    both = fdd_box_probability(spec, [0.0], (1.0, 2.0), (Box((-1.0,), (1.0,)), Box((-1.0,), (1.0,))))
    assert 0.0 < both < p


def _tail_constant(alpha, tau):
    """p(x) ~ tau Gamma(1 + alpha) sin(pi alpha / 2) / pi |x|^-(1 + alpha)"""
    return tau * gamma(1.0 + alpha) * math.sin(math.pi * alpha / 2) / math.pi


@pytest.mark.parametrize("alpha, tau", [(1.5, 1.0), (1.5, 2.0), (1.0, 0.7)])
def test_density_integrates_to_one(alpha, tau):
    big = 200.0
    x = np.linspace(0.0, big, 2001)
    body = 2 * trapezoid(stable_1d_density(alpha, tau, x), x)
    tail = 2 * _tail_constant(alpha, tau) / (alpha * big ** alpha)
    assert body + tail == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("alpha", [0.8, 1.5])
def test_density_tail_exponent(alpha):
    x = np.geomspace(100.0, 1000.0, 5)
    slope = np.polyfit(np.log(x), np.log(stable_1d_density(alpha, 1.0, x)), 1)[0]
    assert slope == pytest.approx(-(1.0 + alpha), abs=0.02)
    assert stable_1d_density(alpha, 1.0, 1000.0) * 1000.0 ** (1 + alpha) == pytest.approx(
        _tail_constant(alpha, 1.0), rel=0.01)


@pytest.mark.parametrize("alpha", [1.0, 1.5])
def test_chapman_kolmogorov(alpha):
    spec = OracleSpec(alpha, 1, 0.7)
    s, t, x, y = 0.4, 0.6, 0.0, 1.3
    glued = quad(lambda z: product_density(spec, s, [x], [z]) * product_density(spec, t, [z], [y]),
                 -np.inf, np.inf, epsabs=1e-12, limit=400)[0]
    assert glued == pytest.approx(product_density(spec, s + t, [x], [y]), rel=1e-6)


def _form_rate_kernel(c0, t, rho=4, window=64.0):
    spec = ModelSpec(d=1, alpha=1.0, kappa1=c0, kappa2=c0, symbol=ConstantSymbol(c0))
    G = build_generator(spec, rho, window=window, boundary_mode="killed", rate_convention="form_rate")
    return spec, heat_kernel(G, t, LatticeSite((0,), rho))


def test_calibrated_sigma_scales_with_the_symbol():
    spec1, p1 = _form_rate_kernel(1.0, 1.0)
    spec2, p2 = _form_rate_kernel(2.0, 0.5)
    # doubling c doubles the generator, so p2 at t equals p1 at 2t
    assert calibrate_sigma(spec2, p2) == pytest.approx(2 * calibrate_sigma(spec1, p1), rel=1e-6)
    same_time = calibrate_sigma(*_form_rate_kernel(2.0, 1.0))
    assert same_time / calibrate_sigma(spec1, p1) == pytest.approx(2.0, rel=0.03)


def test_calibrated_sigma_is_stable_across_times():
    # the Cauchy limit of the form-rate chain has sigma = 2 pi c
    sigmas = [calibrate_sigma(*_form_rate_kernel(1.0, t)) for t in (0.5, 1.0, 2.0)]
    assert max(sigmas) / min(sigmas) < 1.05
    for sigma in sigmas:
        assert sigma == pytest.approx(2 * math.pi, rel=0.05)


def test_calibration_round_trip_on_lattice_kernel():
    spec, p = _form_rate_kernel(1.0, 1.0)
    sigma = calibrate_sigma(spec, p)
    oracle = OracleSpec.from_model(spec, sigma)
    assert on_diagonal(oracle, 1.0) == pytest.approx(p.value_at(LatticeSite((0,), 4)), rel=1e-10)
    for k in (4, 8, 16):
        lattice = p.value_at(LatticeSite((k,), 4))
        assert product_density(oracle, 1.0, [0.0], [k / 4]) == pytest.approx(lattice, rel=0.05)


def test_fdd_box_probability_against_sampling():
    n = 200_000
    spec = OracleSpec(1.5, 1, 1.0)
    times = (0.5, 1.0)
    boxes = (Box((-1.0,), (1.0,)), Box((0.0,), (2.0,)))
    rng = np.random.default_rng(12)
    first = levy_stable.rvs(1.5, 0.0, scale=0.5 ** (1 / 1.5), size=n, random_state=rng)
    second = first + levy_stable.rvs(1.5, 0.0, scale=0.5 ** (1 / 1.5), size=n, random_state=rng)
    hits = (np.abs(first) <= 1.0) & (second >= 0.0) & (second <= 2.0)
    exact = fdd_box_probability(spec, [0.0], times, boxes)
    assert abs(hits.mean() - exact) < 4 * math.sqrt(exact * (1 - exact) / n)


def test_fdd_box_probability_factorises_over_coordinates():
    n = 200_000
    spec = OracleSpec(1.0, 2, 1.5)
    boxes = (Box((-1.0, -0.5), (1.0, 2.0)), Box((-2.0, 0.0), (0.5, 3.0)))
    rng = np.random.default_rng(5)
    # both steps span one time unit: Cauchy with scale sigma
    first = np.array([0.2, 0.0]) + 1.5 * rng.standard_cauchy((n, 2))
    second = first + 1.5 * rng.standard_cauchy((n, 2))
    hits = boxes[0].contains_positions(first) & boxes[1].contains_positions(second)
    exact = fdd_box_probability(spec, [0.2, 0.0], (1.0, 2.0), boxes)
    assert abs(hits.mean() - exact) < 4 * math.sqrt(exact * (1 - exact) / n)
