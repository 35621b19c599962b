import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from fivess.certify import (
    boost_case_selector,
    boost_gas_certificate,
    buck_gas_certificate,
    check_discrete_stability,
    measure_step_metrics,
    overshoot_bound,
    sector_bounds,
    sensor_monotonicity,
    settling_time_bound,
)
from fivess.controller import S2PiController
from fivess.converter import ContinuousState, CycleRecord, Termination, Trace, find_equilibrium
from fivess.errors import ParameterError, TopologyError, UnboundedSector
from fivess.model import BUCK_DESIGN_EXAMPLE, boost_plant
from fivess.runner import bound_suite, run_reference_step

from conftest import table1_buck, table2_boost


def test_open_integrator_is_not_stable():
    plant = boost_plant(table2_boost(), 40.0)
    rep = check_discrete_stability(plant, S2PiController(0.0, 0.9))
    assert not rep and rep.max_radius == pytest.approx(1.0)


def test_buck_fixture_is_stable():
    rep = check_discrete_stability(BUCK_DESIGN_EXAMPLE, S2PiController(62.0, 0.975))
    assert rep.stable and rep.max_radius < 1
    assert list(rep.radii) == sorted(rep.radii, reverse=True)


def synthetic_trace(v1, v2, tau, period, cycles, points=20, ripple=0.0):
    """Cycle records and dense samples of a first-order step response."""

    def v(t):
        return v2 + (v1 - v2) * np.exp(-t / tau)

    recs, ts = [], []
    for n in range(cycles):
        t0 = n * period
        ts.append(t0 + period * np.arange(points) / points)
        recs.append(CycleRecord(n, t0, t0 + period / 2, float(v(t0 + period / 2)), t0 + period, 1.0, 1.0,
                                period / 2, False, float(v(t0)) + ripple, float(v(t0 + period)), 100.0))
    t = np.concatenate(ts)
    return Trace(t, v(t), np.ones_like(t), np.zeros(len(t), dtype=np.int8), np.repeat(np.arange(cycles), points),
                 tuple(recs), Termination.MAX_CYCLES, ContinuousState(v1, 1.0))


def test_metrics_zero_step():
    tr = synthetic_trace(40.0, 40.0, 1e-6, 1e-7, 50)
    m = measure_step_metrics(tr, 40.0, 40.0, 1.0, 1.0)
    assert (m.sigma_t_v, m.sigma_d_v, m.sigma_d_i, m.N_t) == (0.0, 0.0, 0.0, 0)


@pytest.mark.parametrize("up", [True, False])
def test_metrics_first_order_response(up):
    tau, period = 20e-6, 0.5e-6
    v1, v2 = (40.0, 42.0) if up else (42.0, 40.0)
    tr = synthetic_trace(v1, v2, tau, period, 600)
    m = measure_step_metrics(tr, v1, v2, 1.0, 1.0)
    assert m.sigma_t_v == 0.0 and m.sigma_d_v == 0.0 and m.settled
    assert m.rise_time_10_90 == pytest.approx(tau * math.log(9.0), rel=1e-3)
    assert m.T_t == pytest.approx(m.rise_time_10_90 * math.log(50.0) / math.log(9.0), rel=0.2)


def test_metrics_censored_when_never_settling():
    tr = synthetic_trace(40.0, 42.0, 1e-3, 1e-7, 30)
    m = measure_step_metrics(tr, 40.0, 42.0, 1.0, 1.0)
    assert not m.settled and m.N_t == 30


def test_discrete_overshoot_equals_dense_values_at_sample_instants():
    p = table2_boost()
    tr = run_reference_step(p, S2PiController(1.0, 0.95), 40.0, 41.0, 200)
    e1, e2 = find_equilibrium(p, 40.0), find_equilibrium(p, 41.0)
    m = measure_step_metrics(tr, 40.0, 41.0, e1.command, e2.command)
    at_samples = np.array([tr.v[np.searchsorted(tr.t, r.t_sample)] for r in tr.records])
    np.testing.assert_array_equal(at_samples, tr.v_samples)
    assert m.sigma_d_v == max((at_samples.max() - 41.0) / 1.0, 0.0)
    assert m.sigma_d_v <= m.sigma_t_v


def test_settling_bound_formula():
    p = table2_boost()
    tr = synthetic_trace(40.0, 40.0, 1e-6, 1e-7, 5)
    m0 = measure_step_metrics(tr, 40.0, 40.0, 1.0, 1.0)
    bound, holds = settling_time_bound(m0, p, 40.0, 40.0, 1.0, 1.0, period_reference="initial")
    assert bound == 0.0 and holds
    m = measure_step_metrics(synthetic_trace(40.0, 42.0, 2e-6, 0.6e-6, 100), 40.0, 42.0, 2.0, 2.2)
    assert m.sigma_d_v == 0.0
    b_init, _ = settling_time_bound(m, p, 40.0, 42.0, 2.0, 2.2, period_reference="initial")
    assert b_init == pytest.approx(40.0 / 12.0 * 200e-9 * m.N_t + 6.8e-6 / 12.0 * 0.2)
    b_final, _ = settling_time_bound(m, p, 40.0, 42.0, 2.0, 2.2)
    assert b_final == pytest.approx(42.0 / 12.0 * 200e-9 * m.N_t + 6.8e-6 / 12.0 * 0.2)
    with pytest.raises(TopologyError):
        settling_time_bound(m, table1_buck(), 1.8, 1.9, 1.0, 1.1)
    with pytest.raises(ParameterError):
        settling_time_bound(m, p, 40.0, 42.0, 2.0, 2.2, period_reference="middle")


def test_overshoot_bound_formula_and_limits():
    p = table2_boost()
    m = measure_step_metrics(synthetic_trace(40.0, 42.0, 2e-6, 0.6e-6, 100), 40.0, 42.0, 2.0, 2.2)
    bound, holds = overshoot_bound(m, p)
    assert bound == 0.0 and holds
    m2 = replace(m, sigma_d_v=0.03, sigma_d_i=0.2, sigma_t_v=0.031)
    alpha = 200e-9 / 100e-6
    bound, _ = overshoot_bound(m2, p)
    assert bound == pytest.approx((1 - 0.5 * alpha) * 0.03 + 0.5 * alpha * 0.2)
    near_peak = table2_boost(lam=1 - 1e-12)
    assert overshoot_bound(m2, near_peak)[0] == pytest.approx(0.03, rel=1e-9)


def test_bound_suite_small():
    checks = bound_suite(table2_boost(), 40.0, runs=12, seed=3)
    assert len(checks) == 12
    assert all(c.settling_holds and c.overshoot_holds for c in checks)
    assert all(c.metrics.sigma_d_v <= c.metrics.sigma_t_v for c in checks)


# Independent high-precision evaluation of the certificate formulas.
BOOST_GAS = dict(selector=1.89674771241830065e-7, gamma_i_to_v=16.9378943872467619,
                 g_limit=0.9522, gamma_v_to_i=0.0147058823529411765)
BUCK_GAS = dict(gamma_v_to_i=0.222222222222222222, gamma_i_to_v=0.518981259010091302,
                g_limit=0.867083333333333333, rc_period=3.19838e-5)


def test_boost_gas_fixture():
    cert = boost_gas_certificate(table2_boost(), 0.5, 0.5, 20e-9, 2e-6, 40.0)
    assert cert.case_branch == "i" and cert.stable
    assert cert.margins["case_selector"] == pytest.approx(BOOST_GAS["selector"], rel=1e-9)
    assert cert.gamma_i_to_v == pytest.approx(BOOST_GAS["gamma_i_to_v"], rel=1e-12)
    assert cert.gamma_v_to_i == pytest.approx(BOOST_GAS["gamma_v_to_i"], rel=1e-12)
    assert cert.margins["g_threshold"] == pytest.approx(BOOST_GAS["g_limit"] - 0.5, rel=1e-12)
    assert cert.periods["T_s_max"] == pytest.approx(2.2e-6) and cert.periods["T_s_min"] == pytest.approx(220e-9)


def test_buck_gas_fixture():
    cert = buck_gas_certificate(table1_buck(), 0.1, 20e-9, 300e-9, 1.8)
    assert cert.stable and cert.case_branch is None
    assert cert.gamma_v_to_i == pytest.approx(BUCK_GAS["gamma_v_to_i"], rel=1e-12)
    assert cert.gamma_i_to_v == pytest.approx(BUCK_GAS["gamma_i_to_v"], rel=1e-12)
    assert cert.margins["g_threshold"] == pytest.approx(BUCK_GAS["g_limit"] - 0.1, rel=1e-12)
    assert cert.margins["rc_period"] == pytest.approx(BUCK_GAS["rc_period"], rel=1e-9)


def test_gas_zero_interference_gain():
    buck = buck_gas_certificate(table1_buck(), 0.0, 20e-9, 300e-9, 1.8)
    assert buck.gamma_v_to_i == 0.0 and buck.stable == (buck.margins["rc_period"] > 0)
    cert = boost_gas_certificate(table2_boost(), 0.0, 0.5, 20e-9, 2e-6, 40.0)
    assert cert.stable and cert.margins["g_threshold"] > 0


def test_buck_equal_bounds_give_unit_ratios():
    b = table1_buck()
    cert = buck_gas_certificate(b, 0.1, 200e-9, 200e-9, 1.8)
    assert cert.periods["T_s_max"] == cert.periods["T_s_min"]
    tau2 = b.inductance / b.load_resistance
    assert cert.gamma_i_to_v == pytest.approx(b.load_resistance / (1 + b.fixed_time / (2 * tau2)))


@settings(max_examples=200, deadline=None)
@given(st.floats(0.5, 20), st.floats(50e-9, 500e-9), st.floats(50e-9, 2e-6), st.floats(0.0, 3.0),
       st.floats(0.1, 0.9))
def test_buck_certificate_small_gain_consistency(r, t_on, t_off_max, g_ab, frac):
    p = table1_buck(load_resistance=r, fixed_time=t_on)
    cert = buck_gas_certificate(p, g_ab, frac * t_off_max, t_off_max, 1.8)
    if cert.stable:
        assert cert.loop_gain < 1.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(0.01, 5.0))
def test_buck_certificate_monotone_in_interference_gain(g1, g2):
    lo, hi = sorted((g1, g2))
    b = table1_buck()
    if buck_gas_certificate(b, hi, 20e-9, 300e-9, 1.8).stable:
        assert buck_gas_certificate(b, lo, 20e-9, 300e-9, 1.8).stable


def test_boost_branch_boundary_in_lambda():
    p = table2_boost(capacitance=48e-9)

    def sel(lam):
        return boost_case_selector(p, lam, 2e-6, 40.0)

    assert sel(0.0) * sel(1.0) < 0
    lam_star = brentq(sel, 0.0, 1.0, xtol=1e-14)
    below = boost_gas_certificate(p, 0.1, lam_star - 1e-6, 20e-9, 2e-6, 40.0).case_branch
    above = boost_gas_certificate(p, 0.1, lam_star + 1e-6, 20e-9, 2e-6, 40.0).case_branch
    assert {below, above} == {"i", "ii"}
    assert abs(sel(lam_star)) < 1e-18


def test_boost_branch_ii_threshold_matches_small_gain_product():
    p = table2_boost(capacitance=48e-9)
    cert = boost_gas_certificate(p, 0.1, 0.0, 20e-9, 2e-6, 40.0)
    assert cert.case_branch == "ii"
    g_limit = cert.margins["g_threshold"] + 0.1
    at_limit = boost_gas_certificate(p, g_limit, 0.0, 20e-9, 2e-6, 40.0)
    assert at_limit.loop_gain == pytest.approx(1.0, rel=1e-9)


def test_sector_examples():
    s = sector_bounds(1e6, 0.01, 2e-6)
    assert s.lambda_ub == pytest.approx(1.2566370614359173e5, rel=1e-12)
    assert s.K_lb == pytest.approx(0.7991513573351632, rel=1e-12)
    assert s.K_ub == pytest.approx(1.3356973614527345, rel=1e-12)
    z = sector_bounds(1e6, 0.0, 2e-6)
    assert (z.lambda_ub, z.K_lb, z.K_ub) == (0.0, 1.0, 1.0)
    with pytest.raises(UnboundedSector):
        sector_bounds(1e6, 0.01, 1.0 / (4 * math.pi * 1e4))


@settings(max_examples=200, deadline=None)
@given(st.floats(1e3, 1e8), st.floats(1e-6, 1.0), st.floats(0.0, 1.0))
def test_sector_identities(f, a, frac):
    lam = 4 * math.pi * f * a
    g0 = frac * 0.999 / lam
    s = sector_bounds(f, a, g0)
    assert s.K_lb * (1 + s.lambda_ub * g0) == pytest.approx(1.0, abs=4e-16)
    assert s.K_ub * (1 - s.lambda_ub * g0) == pytest.approx(1.0, abs=1e-15)
    assert s.K_lb <= 1.0 <= s.K_ub


def test_sector_tends_to_unity_as_amplitude_vanishes():
    ks = [sector_bounds(1e6, a, 2e-6) for a in (1e-2, 1e-3, 1e-4, 1e-6)]
    assert all(a.K_ub > b.K_ub and a.K_lb < b.K_lb for a, b in zip(ks, ks[1:]))
    assert ks[-1].K_ub == pytest.approx(1.0, abs=1e-4)


def test_monotonicity_predicate():
    m1 = 1e6
    t = np.linspace(0, 2e-6, 401)
    assert sensor_monotonicity(np.column_stack([t, m1 * t]))
    w = 1.0 * np.sin(2 * np.pi * 1e6 * t)  # peak slope 2*pi*1e6 > m1
    res = sensor_monotonicity(np.column_stack([t, m1 * t + w]))
    assert not res
    a, b = res.interval
    assert b > a and np.sin(2 * np.pi * 1e6 * a) > np.sin(2 * np.pi * 1e6 * b) - (b - a) * m1
    assert sensor_monotonicity([(0.0, 1.0)])
    with pytest.raises(ParameterError):
        sensor_monotonicity([(0.0, 1.0), (0.0, 2.0)])
