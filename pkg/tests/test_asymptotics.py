import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from oracles import PASTUR_ORACLE, full_2d_inner
from perturbed_lattice import ConfigError, DomainError
from perturbed_lattice.asymptotics import (
    compute_constants, cosine_profile, gamma_exponent, inner_minimum, k0_objective, kappa,
    kasahara_map, lambda1_hard_1d, legendre_coefficient, lifshitz_1d_constant, mu_exponent,
    neg_laplace_coefficient, negative_constant, optimize_k0_width, pastur_constant)

# Width scan of the cosine profile for d=1, theta=1, h=1, c0=1 (200 points per unit,
# sigmas geomspace(0.2, 8, 17), 20 golden-section steps).
K0_SCAN = (1.3576554640073606, 6.097161162067902)


@pytest.mark.parametrize("k,c,expected", [(1.0, 1.0, (0.5, 0.25)), (2.0, 1.0, (2 / 3, 4 / 27)),
                                          (1.0, 2.0, (0.5, 1.0))])
def test_kasahara_map(k, c, expected):
    g, b = kasahara_map(k, c)
    assert g == pytest.approx(expected[0], rel=1e-12)
    assert b == pytest.approx(expected[1], rel=1e-12)


@pytest.mark.parametrize("theta,h,expected", [(1.0, 1.0, math.pi**2 / 4), (1.0, 4.0, math.pi**2),
                                              (3.0, 1.0, math.pi**4 / 32)])
def test_lifshitz_1d_constant(theta, h, expected):
    assert lifshitz_1d_constant(theta, h) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("d,theta,expected", [(1, 1.0, 0.25), (2, 2.0, 1 / (2 * math.pi))])
def test_negative_constant(d, theta, expected):
    assert negative_constant(d, theta) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("d,theta,u0,expected", [(1, 1.0, 1.0, 1.0), (1, 1.0, 2.0, 4.0),
                                                 (2, 2.0, 1.0, math.pi / 2)])
def test_neg_laplace_coefficient(d, theta, u0, expected):
    assert neg_laplace_coefficient(d, theta, u0) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("d,theta", [(1, 1.0), (1, 2.5), (2, 1.0), (3, 2.0)])
def test_neg_laplace_coefficient_is_ball_integral(d, theta):
    area = {1: 2.0, 2: 2 * math.pi, 3: 4 * math.pi}[d]
    val, _ = integrate.quad(lambda r: r ** (d - 1) * (1 - r**theta), 0, 1, epsabs=0, epsrel=1e-13)
    assert neg_laplace_coefficient(d, theta, 1.0) == pytest.approx(area * val, rel=1e-12)


def test_negative_constant_from_laplace_side():
    """C1 u0^(1+theta/d) is the Legendre conjugate of the Laplace coefficient (d=1, theta=1)."""
    a = neg_laplace_coefficient(1, 1.0, 1.0)
    p = 2.0  # Laplace exponent 1 + d/theta
    b = legendre_coefficient(a, p)
    # direct 1-D scan of sup_t (t s - a t^p) at s = 1
    t = np.linspace(0, 5, 500_001)
    assert np.max(t - a * t**p) == pytest.approx(b, rel=1e-9)
    assert b == pytest.approx(negative_constant(1, 1.0), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(d=st.sampled_from([1, 2, 3]), theta=st.floats(0.1, 10), gap=st.floats(0.05, 10))
def test_gamma_is_kasahara_image_of_kappa(d, theta, gap):
    alpha = d + gap
    k = kappa(d, theta, alpha)
    assert gamma_exponent(d, theta, alpha) == pytest.approx(k / (k + 1), rel=1e-12)
    assert kasahara_map(k, 1.0)[0] == pytest.approx(gamma_exponent(d, theta, alpha), rel=1e-12)


def test_exponent_domains():
    with pytest.raises(DomainError):
        kappa(2, 1.0, 2.0)
    with pytest.raises(DomainError):
        mu_exponent(1, 0.5)
    assert mu_exponent(1, 4.0) == pytest.approx(4 / 3)


@pytest.mark.parametrize("gap,expected", [(1.0, math.pi**2), (2.0, math.pi**2 / 4)])
def test_lambda1_hard_1d(gap, expected):
    assert lambda1_hard_1d(gap) == pytest.approx(expected, rel=1e-14)


def test_lambda1_hard_1d_with_c6():
    assert lambda1_hard_1d(1.0, h=2.0, c6=1.0) == pytest.approx(2 * math.pi**2 / 4)


@pytest.mark.parametrize("triple", sorted(PASTUR_ORACLE))
def test_pastur_constant_matches_oracle(triple):
    theta, alpha, c0 = triple
    assert pastur_constant(1, theta, alpha, c0) == pytest.approx(PASTUR_ORACLE[triple], rel=1e-2)
    # the adaptive route converges far tighter than the acceptance tolerance
    assert pastur_constant(1, theta, alpha, c0) == pytest.approx(PASTUR_ORACLE[triple], rel=1e-6)


def test_pastur_monotone_in_c0():
    vals = [pastur_constant(1, 1.0, 2.0, c) for c in (0.5, 1.0, 2.0)]
    assert vals[0] < vals[1] < vals[2]


def test_pastur_decreasing_in_alpha():
    vals = [pastur_constant(1, 1.0, a, 1.0) for a in (2.0, 2.5, 3.0)]
    assert vals[0] > vals[1] > vals[2]


def test_pastur_divergence():
    with pytest.raises(DomainError):
        pastur_constant(2, 1.0, 2.0, 1.0)


def test_pastur_info():
    val, info = pastur_constant(2, 1.0, 3.5, 1.0, return_info=True)
    assert info["tail"] < 1e-6 * val
    assert info["scan_points"] == 128


@settings(max_examples=50, deadline=None)
@given(s=st.floats(0, 30), theta=st.floats(0.3, 4), alpha=st.floats(1.2, 8), c0=st.floats(0.05, 5))
def test_inner_minimum_is_a_minimum(s, theta, alpha, c0):
    val = inner_minimum(s, theta, alpha, c0)[0]
    r = np.geomspace(1e-3, 1e3, 20_001)
    brute = np.min(c0 * r**-alpha + np.abs(r - s) ** theta)
    assert val <= brute + 1e-12 * max(1.0, brute)
    assert val >= 0.0


def test_collinearity_reduction_on_random_problems():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        q = rng.uniform(-6, 6, 2)
        theta, alpha, c0 = rng.uniform(0.5, 3), rng.uniform(2.2, 6), rng.uniform(0.2, 3)
        reduced = inner_minimum(np.linalg.norm(q), theta, alpha, c0)[0]
        full = full_2d_inner(q, theta, alpha, c0)
        assert reduced <= full + 1e-9 * max(1, full)
        assert full == pytest.approx(reduced, rel=1e-5, abs=1e-8)


def test_cosine_profile_normalized():
    for d in (1, 2):
        assert cosine_profile(d, 1.3, 60).norm2 == pytest.approx(1.0, abs=1e-9)


def test_k0_kinetic_term_scales_inverse_square():
    k1 = k0_objective(1, 1, 1, cosine_profile(1, 1.0), return_parts=True)[1]["kinetic"]
    k2 = k0_objective(1, 1, 1, cosine_profile(1, 2.0), return_parts=True)[1]["kinetic"]
    assert k1 / k2 == pytest.approx(4.0, rel=0.02)


def test_k0_rejects_unnormalized():
    psi = cosine_profile(1, 1.0)
    bad = type(psi)(axis=psi.axis, values=2 * psi.values, support_radius=psi.support_radius)
    with pytest.raises(DomainError):
        k0_objective(1, 1, 1, bad)


def test_k0_width_scan_fixture():
    sigma, value, record = optimize_k0_width(1.0, 1.0, 1.0)
    assert sigma == pytest.approx(K0_SCAN[0], rel=1e-6)
    assert value == pytest.approx(K0_SCAN[1], rel=1e-8)
    assert value <= min(record["values"])


def test_k0_optimizer_beats_coarse_profile():
    coarse = k0_objective(1, 1, 1, cosine_profile(1, 4.0))
    _, refined, _ = optimize_k0_width(1.0, 1.0, 1.0, sigmas=np.geomspace(0.5, 6, 7), iters=10)
    assert refined <= coarse


def test_k0_subcritical_kernel_has_interior_minimum():
    sig = np.geomspace(0.05, 5, 9)
    vals = [k0_objective(1, 1, 1, cosine_profile(1, s, 100), kernel_exponent=2.0) for s in sig]
    i = int(np.argmin(vals))
    assert 0 < i < len(sig) - 1


def test_compute_constants_bundle():
    c = compute_constants(1, 1.0, 2.0, 1.0)
    assert c.kappa == 2 and c.gamma == pytest.approx(2 / 3)
    assert c.lifshitz_1d == pytest.approx(math.pi**2 / 4)
    assert set(c.to_dict()) == {"kappa", "mu", "gamma", "pastur_k", "lifshitz_1d", "c1", "neg_coeff"}
    with pytest.raises(ConfigError):
        compute_constants(2, 1.0, 2.0, 1.0)
