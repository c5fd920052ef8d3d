import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from perturbed_lattice import ConfigError, DomainError, ResourceError
from perturbed_lattice.randfield import (
    SPHERE_AREA, Configuration, ModelParams, PotentialSpec, field_v, max_gap, max_gap_points,
    normalizer, potential_u, radial_moment, sample_configuration, sample_displacement, site_uniforms,
    stream_key, tail_bound, truncation_margin)


@pytest.mark.parametrize("d,theta,expected", [(1, 2.0, math.sqrt(math.pi)), (1, 1.0, 2.0),
                                              (3, 1.0, 8 * math.pi)])
def test_normalizer_examples(d, theta, expected):
    assert normalizer(d, theta) == pytest.approx(expected, rel=1e-14)


def test_normalizer_rejects_nonpositive_theta():
    with pytest.raises(DomainError):
        normalizer(1, 0.0)


@settings(max_examples=40, deadline=None)
@given(d=st.sampled_from([1, 2, 3]), theta=st.floats(0.3, 8.0))
def test_normalizer_matches_radial_quadrature(d, theta):
    val, _ = integrate.quad(lambda r: r ** (d - 1) * math.exp(-r**theta), 0, np.inf,
                            epsabs=0, epsrel=1e-12, limit=200)
    assert normalizer(d, theta) == pytest.approx(SPHERE_AREA[d] * val, rel=1e-8)


@pytest.mark.parametrize("d,theta,power", [(1, 1.0, 1), (2, 2.0, 2)])
def test_radial_moment_of_samples(d, theta, power):
    xi = sample_displacement(ModelParams(d=d, theta=theta, seed=11), size=100_000)
    r = np.linalg.norm(xi, axis=1) ** power
    expected = radial_moment(d, theta, power)
    assert expected == pytest.approx(1.0)
    assert abs(r.mean() - expected) < 3 * r.std() / math.sqrt(r.size)


def test_large_theta_concentrates_on_unit_ball():
    xi = sample_displacement(ModelParams(d=2, theta=64.0, seed=3), size=100_000)
    assert np.mean(np.linalg.norm(xi, axis=1) > 1.5) <= 1e-3


def test_sample_displacement_single_draw_shape():
    assert sample_displacement(ModelParams(d=3)).shape == (3,)


@pytest.mark.parametrize("d", [2, 3])
def test_directions_are_isotropic(d):
    xi = sample_displacement(ModelParams(d=d, theta=1.0, seed=5), size=50_000)
    unit = xi / np.linalg.norm(xi, axis=1, keepdims=True)
    # first-axis component: uniform angle (d=2) or uniform on [-1, 1] (d=3)
    ref = stats.arcsine(loc=-1, scale=2).cdf if d == 2 else stats.uniform(loc=-1, scale=2).cdf
    assert stats.kstest(unit[:, 0], ref).statistic < 0.01


def test_site_uniforms_are_addressed_by_site():
    key = stream_key(7, 0)
    a = site_uniforms(key, np.array([[0], [1], [2]]))
    b = site_uniforms(key, np.array([[2], [0]]))
    np.testing.assert_array_equal(a[[2, 0]], b)
    assert np.all((a > 0) & (a < 1))


def test_stream_keys_differ_by_replicate_and_stream():
    keys = {int(stream_key(1, r, s)) for r in range(4) for s in range(3)}
    assert len(keys) == 12


def test_potential_examples():
    spec = PotentialSpec(c0=1.0, alpha=2.0, r0=0.1, u_cap=1e6)
    assert potential_u(spec, [2.0, 0.0]) == pytest.approx(0.25)
    assert potential_u(spec, [0.0, 0.0]) == pytest.approx(100.0)
    box = PotentialSpec(compact_r=1.0, u_cap=5.0)
    assert potential_u(box, [0.9, 0.0]) == 5.0
    assert potential_u(box, [1.1, 0.0]) == 0.0


@settings(max_examples=60, deadline=None)
@given(c0=st.floats(0.01, 10), alpha=st.floats(1.5, 8), r0=st.floats(0, 1), cap=st.floats(0.5, 1e4),
       r=st.floats(0, 50))
def test_potential_bounded_and_exact_outside_core(c0, alpha, r0, cap, r):
    spec = PotentialSpec(c0=c0, alpha=alpha, r0=r0, u_cap=cap)
    val = float(potential_u(spec, [r]))
    assert 0 <= val <= cap
    if r >= spec.core_radius and r > 0:
        assert val == pytest.approx(c0 * r**-alpha, rel=1e-12)


@pytest.mark.parametrize("kwargs,field", [
    (dict(c0=0.0), "spec.c0"), (dict(r0=0.0), "spec.u_cap"), (dict(sign=2, r0=1), "spec.sign"),
    (dict(sign=-1, r0=1), "spec.u_cap"), (dict(sign=-1, u_cap=1, obstacle_rho=0.1), "spec.obstacle_rho"),
    (dict(compact_r=1.0), "spec.u_cap")])
def test_potential_spec_validation(kwargs, field):
    with pytest.raises(ConfigError) as err:
        PotentialSpec(**kwargs)
    assert err.value.field == field


@pytest.mark.parametrize("kwargs", [dict(d=4), dict(theta=0.0), dict(theta=-1.0), dict(h=0.0),
                                    dict(workers=0)])
def test_model_params_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelParams(**kwargs)


def test_alpha_must_exceed_dimension():
    with pytest.raises(ConfigError):
        sample_configuration(ModelParams(d=2), PotentialSpec(alpha=2.0, r0=0.1), 4.0, 0)


def test_configuration_determinism_and_independence():
    params, spec = ModelParams(d=1, seed=42), PotentialSpec(alpha=4.0, r0=0.1)
    a = sample_configuration(params, spec, 8.0, 0)
    b = sample_configuration(params, spec, 8.0, 0)
    c = sample_configuration(params, spec, 8.0, 1)
    np.testing.assert_array_equal(a.xi, b.xi)
    assert not np.array_equal(a.xi, c.xi)


def test_configuration_independent_of_box_for_shared_sites():
    params, spec = ModelParams(d=2, seed=9), PotentialSpec(alpha=4.0, r0=0.1)
    small = sample_configuration(params, spec, 4.0, 3, margin=2)
    big = sample_configuration(params, spec, 10.0, 3, margin=2)
    index = {tuple(s): i for i, s in enumerate(big.sites)}
    rows = [index[tuple(s)] for s in small.sites]
    np.testing.assert_array_equal(small.xi, big.xi[rows])


def test_site_count_in_closed_box():
    cfg = sample_configuration(ModelParams(d=2), PotentialSpec(alpha=4.0, r0=0.1), 10.0, 0, margin=5)
    assert len(cfg) == 441
    assert len({tuple(s) for s in cfg.sites}) == 441


def test_resource_error_on_huge_box():
    with pytest.raises(ResourceError):
        sample_configuration(ModelParams(d=3), PotentialSpec(alpha=4.0, r0=0.1), 400.0, 0, max_sites=10_000)


def test_configuration_json_round_trip():
    cfg = sample_configuration(ModelParams(d=2, seed=1), PotentialSpec(alpha=4.0, r0=0.1), 4.0, 2, margin=2)
    data = cfg.to_dict()
    assert set(data) >= {"d", "theta", "box_r", "margin", "seed", "replicate", "displacements"}
    back = Configuration.from_json(cfg.to_json())
    np.testing.assert_array_equal(back.xi, cfg.xi)
    np.testing.assert_array_equal(back.sites, cfg.sites)
    assert back.margin == cfg.margin


def _frozen(d, box_r, margin, spec=PotentialSpec(alpha=4.0, r0=0.1)):
    cfg = sample_configuration(ModelParams(d=d), spec, box_r, 0, margin=margin)
    cfg.xi[:] = 0.0
    return cfg


def test_field_zero_potential():
    cfg = sample_configuration(ModelParams(d=2), PotentialSpec(u_cap=0.0), 6.0, 0)
    assert np.all(field_v(cfg, PotentialSpec(u_cap=0.0), np.zeros((5, 2))) == 0)


def test_field_single_site_compact():
    spec = PotentialSpec(compact_r=0.25, u_cap=1.0)
    cfg = _frozen(2, 6.0, 3)
    assert field_v(cfg, spec, [0.0, 0.0]) == 1.0


def test_field_frozen_lattice_series():
    spec = PotentialSpec(c0=1.0, alpha=2.0, r0=0.1, u_cap=1e6)
    margin = truncation_margin(1, 1.0, spec)
    cfg = _frozen(1, 2.0, margin, spec)
    val = field_v(cfg, spec, 0.5)
    assert val <= math.pi**2
    assert math.pi**2 - val <= cfg.tail_bound + 1e-12


def test_field_outside_box():
    cfg = _frozen(1, 4.0, 3)
    with pytest.raises(DomainError):
        field_v(cfg, PotentialSpec(alpha=4.0, r0=0.1), 2.5)


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(1.5, 8), m1=st.integers(1, 100), m2=st.integers(1, 100))
def test_tail_bound_decreases_with_margin(alpha, m1, m2):
    spec = PotentialSpec(alpha=alpha, r0=0.1)
    lo, hi = sorted((m1, m2))
    assert tail_bound(1, spec, hi) <= tail_bound(1, spec, lo)
    assert tail_bound(1, spec, 2 * lo) == pytest.approx(tail_bound(1, spec, lo) * 2 ** (1 - alpha))


@pytest.mark.parametrize("d,alpha", [(1, 4.0), (2, 5.0), (3, 6.0)])
def test_truncation_margin_meets_budget(d, alpha):
    spec = PotentialSpec(alpha=alpha, r0=0.1)
    m = truncation_margin(d, 1.0, spec, 1e-6)
    assert tail_bound(d, spec, m) <= 1e-6 * spec.c0
    assert m == 1 or tail_bound(d, spec, m - 1) > 1e-6 * spec.c0


def test_max_gap_examples():
    assert max_gap(_frozen(1, 10.0, 3)) == pytest.approx(1.0)
    assert max_gap_points([-1, 0, 3], 8.0) == 3.0
    assert max_gap_points([0.0], 10.0) == 5.0


def test_max_gap_requires_d1():
    with pytest.raises(ConfigError):
        max_gap(_frozen(2, 4.0, 2))
