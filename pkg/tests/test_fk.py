import math

import numpy as np
import pytest

from perturbed_lattice import ConfigError, DomainError
from perturbed_lattice.fk import PathEstimate, growth, lemma61_check, survival
from perturbed_lattice.ids import LaplaceCurve
from perturbed_lattice.randfield import ModelParams, PotentialSpec, sample_configuration

FREE = PotentialSpec(u_cap=0.0)
COMPACT = PotentialSpec(compact_r=0.3, u_cap=1.0)
NEG_COMPACT = PotentialSpec(compact_r=0.3, u_cap=1.0, sign=-1)
T = [0.0, 0.5, 1.0, 2.0]


@pytest.mark.parametrize("d", [1, 2])
def test_free_survival_is_exactly_one(d):
    est = survival(ModelParams(d=d), FREE, [0.0] * d, T, 256, 2, 0.05)
    assert np.all(est.log_s == 0.0)
    assert np.all(est.stderr == 0.0)


def test_free_growth_is_exactly_one():
    spec = PotentialSpec(u_cap=0.0, sign=-1)
    est = growth(ModelParams(d=1), spec, [0.0], T, 128, 2, 0.05)
    assert np.all(est.log_s == 0.0)


def test_time_zero_counts_unobstructed_configurations():
    params = ModelParams(d=1, seed=3)
    spec = PotentialSpec(alpha=4.0, r0=0.3, obstacle_rho=0.05)
    est = survival(params, spec, [0.5], [0.0, 0.2], 256, 4, 0.002)
    free = [np.min(np.abs(sample_configuration(params, spec, est.meta["box_r"], c).positions - 0.5)) > 0.05
            for c in range(4)]
    assert est.log_s[0] == pytest.approx(math.log(np.mean(free)), abs=1e-14)


@pytest.mark.parametrize("v0", [0.3, 2.0])
def test_frozen_constant_survival(v0):
    t = np.array(T)
    est = survival(ModelParams(d=1, seed=5), COMPACT, [0.0], t, 512, 2, 0.05, frozen_potential=v0)
    assert np.all(np.abs(est.log_s + v0 * t) <= 3 * est.stderr + 1e-12)


def test_frozen_constant_growth():
    t = np.array(T)
    est = growth(ModelParams(d=2, seed=5), NEG_COMPACT, [0.0, 0.0], t, 512, 2, 0.05, frozen_potential=0.7)
    np.testing.assert_allclose(est.log_s, 0.7 * t, atol=1e-12)


def test_survival_is_subunit_and_nonincreasing():
    est = survival(ModelParams(d=1, seed=1), COMPACT, [0.5], [0.5, 1.0, 2.0, 4.0], 1024, 4, 0.01)
    assert np.all(est.log_s <= 0)
    assert np.all(np.diff(est.log_s) <= 2 * (est.stderr[1:] + est.stderr[:-1]))


def test_growth_is_nondecreasing():
    est = growth(ModelParams(d=1, seed=1), NEG_COMPACT, [0.5], [0.5, 1.0, 2.0, 4.0], 1024, 4, 0.01)
    assert np.all(est.log_s >= 0)
    assert np.all(np.diff(est.log_s) >= -2 * (est.stderr[1:] + est.stderr[:-1]))


def test_obstacles_kill_paths():
    with_obs = PotentialSpec(u_cap=0.0, obstacle_rho=0.2)
    est = survival(ModelParams(d=1, seed=2), with_obs, [0.5], [0.01, 0.02, 0.05, 0.1], 1024, 4, 0.001)
    assert np.all(est.log_s < 0)
    assert np.all(np.diff(est.log_s) <= 0)  # killing is cumulative on shared paths


def test_dt_halving_is_stable():
    params = ModelParams(d=1, seed=7)
    t = [0.5, 1.0, 2.0]
    coarse = survival(params, COMPACT, [0.5], t, 2048, 4, 0.02)
    fine = survival(params, COMPACT, [0.5], t, 2048, 4, 0.01)
    sigma = np.hypot(coarse.stderr, fine.stderr)
    assert np.all(np.abs(coarse.log_s - fine.log_s) <= 2 * sigma)


def test_deterministic():
    args = (ModelParams(d=1, seed=11), COMPACT, [0.5], [0.5, 1.0], 600, 3, 0.01)
    a, b = survival(*args), survival(*args)
    assert np.array_equal(a.log_s, b.log_s) and np.array_equal(a.stderr, b.stderr)
    c = survival(ModelParams(d=1, seed=12), *args[1:])
    assert not np.array_equal(a.log_s, c.log_s)


def test_table_potential_in_two_dimensions():
    spec = PotentialSpec(alpha=5.0, r0=0.3)
    est = survival(ModelParams(d=2, seed=1), spec, [0.5, 0.5], [0.2, 0.4], 256, 2, 0.02, tail_tol=1e-3)
    assert np.all(np.isfinite(est.log_s)) and np.all(est.log_s < 0)


@pytest.mark.parametrize("call,kw", [
    (survival, dict(spec=NEG_COMPACT)),
    (growth, dict(spec=COMPACT)),
    (survival, dict(spec=PotentialSpec(u_cap=0.0, obstacle_rho=0.1), dt=0.1)),
    (survival, dict(t_grid=[0.0, 0.33], dt=0.1)),
    (survival, dict(x=[0.0, 0.0])),
])
def test_config_errors(call, kw):
    args = dict(params=ModelParams(d=1), spec=FREE, x=[0.0], t_grid=[0.0, 0.5], n_paths=8,
                n_configs=1, dt=0.1)
    args.update(kw)
    with pytest.raises(ConfigError):
        call(**args)


def _free_laplace(t, d=1, h=1.0, v0=0.0, shift=0.0):
    t = np.asarray(t, dtype=float)
    vals = -v0 * t - 0.5 * d * np.log(4 * math.pi * h * t) + shift
    return LaplaceCurve(t_grid=t, log_values=vals, kind="from_ids", stderr=np.zeros_like(t))


def _constant_survival(t, v0, stderr=0.0):
    t = np.asarray(t, dtype=float)
    return PathEstimate(t_grid=t, log_s=-v0 * t, stderr=np.full(t.shape, stderr), x=np.zeros(1),
                        n_paths=1, dt=0.1, n_configs=1, meta={"h": 1.0, "d": 1})


def test_lemma61_free_case_passes():
    est = survival(ModelParams(d=1), FREE, [0.0], [1.0, 2.0, 4.0], 64, 2, 0.1)
    report = lemma61_check(est, _free_laplace([0.5, 1.5, 3.5]), 0.5)
    assert report["verdict"] == "PASS"
    # the free reference is log N_tilde + (d/2) log(4 pi h t) = 0 exactly
    for row in report["rows"]:
        assert row["reference"] == pytest.approx(0.0, abs=1e-12)


def test_lemma61_point_mass_against_constant_potential():
    """Constant V = v0: Ntilde(t) = exp(-v0 t)(4 pi h t)^(-d/2), log S = -v0 t <= -v0 (t - eps)."""
    v0, eps = 1.5, 0.25
    t = np.array([1.0, 2.0, 3.0])
    report = lemma61_check(_constant_survival(t, v0), _free_laplace(t - eps, v0=v0), eps)
    assert report["verdict"] == "PASS"
    for row, ti in zip(report["rows"], t):
        assert row["reference"] - row["log_s"] == pytest.approx(v0 * eps, rel=1e-12)


def test_lemma61_detects_reversed_inequality():
    t = np.array([1.0, 2.0])
    report = lemma61_check(_constant_survival(t, 0.5), _free_laplace(t - 0.1, v0=0.5, shift=-3.0), 0.1)
    assert report["verdict"] == "FAIL"


def test_lemma61_noise_dominated_is_inconclusive():
    t = np.array([1.0, 2.0])
    report = lemma61_check(_constant_survival(t, 0.1, stderr=5.0), _free_laplace(t - 0.1, shift=-3.0), 0.1)
    assert report["verdict"] == "INCONCLUSIVE"
    assert {r["status"] for r in report["rows"]} == {"INCONCLUSIVE"}


def test_lemma61_grid_mismatch():
    t = np.array([1.0, 2.0])
    with pytest.raises(DomainError):
        lemma61_check(_constant_survival(t, 0.1), _free_laplace([0.3, 0.7]), 0.5)
    with pytest.raises(DomainError):
        lemma61_check(_constant_survival(t, 0.1), _free_laplace(t), 0.0)
