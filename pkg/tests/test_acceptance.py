"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from fivess.certify import check_discrete_stability, measure_step_metrics, sector_bounds
from fivess.config import preset_config
from fivess.controller import (
    ConverterType,
    S2PiController,
    closed_loop_poles,
    closed_loop_step,
    current_loop_design,
    dominant_radius,
    step_overshoot,
)
from fivess.converter import (
    CircuitParams,
    ContinuousState,
    Termination,
    find_equilibrium,
    phase_model,
    propagate_exact,
    propagate_quadratic,
)
from fivess.errors import UnboundedSector
from fivess.model import BUCK_DESIGN_EXAMPLE, boost_plant, buck_plant, numerical_linearization_oracle, plant_for
from fivess.runner import bound_suite, controller_for, run_reference_step, run_scenario, run_sweep
from scipy.integrate import solve_ivp

from conftest import TABLE_FIXTURES, random_ccm_boost, random_ccm_buck, table1_buck, table2_boost


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

    return emit


def test_criterion_01_model_fidelity(report):
    cfg = preset_config("sweep")
    v = float(cfg.scenario["v_from"])
    ctrl, _ = controller_for(cfg.params, v, cfg.controller)
    steps = [0.5, 1.0, 2.0, 4.0, 6.0, 8.0]
    t0 = time.perf_counter()
    rows = run_sweep(cfg.params, ctrl, v, steps, int(cfg.sweep["cycles"]), threads=len(steps))
    elapsed = time.perf_counter() - t0
    e = {r["step_V"]: r["e_w_percent"] for r in rows}
    small_ok = all(e[s] < 1.0 for s in steps if s <= 4.0)
    large = [e[s] for s in steps if s >= 4.0]
    increasing = all(b > a for a, b in zip(large, large[1:]))
    ok = small_ok and increasing and elapsed < 60.0
    report(1, ok, "e_w % " + ", ".join(f"{s:g} V: {e[s]:.3f}" for s in steps) + f"  ({elapsed:.1f} s)")
    assert increasing
    assert small_ok, f"e_w above 1 % for a step <= 4 V: {e}"


def test_criterion_02_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    worst = {"a1": 0.0, "g1": 0.0}
    for gen, plant in ((random_ccm_boost, boost_plant), (random_ccm_buck, buck_plant)):
        for _ in range(50):
            p, v = gen(rng)
            closed, oracle = plant(p, v), numerical_linearization_oracle(p, v)
            for key in worst:
                ref = getattr(closed, key)
                worst[key] = max(worst[key], abs(getattr(oracle, key) - ref) / abs(ref))
    ok = max(worst.values()) <= 0.02
    report(2, ok, f"worst relative error a1 {worst['a1']:.2e}, g1 {worst['g1']:.2e} over 100 sets")
    assert ok


def test_criterion_03_simulator_exactness(report):
    rng = np.random.default_rng(3)
    ratios, fine = [], []
    for _ in range(20):
        p = CircuitParams("boost", rng.uniform(5, 20), rng.uniform(2e-6, 20e-6), rng.uniform(0.5e-6, 10e-6),
                          rng.uniform(20, 300), 200e-9)
        x = ContinuousState(rng.uniform(20, 50), rng.uniform(0.5, 3))
        for phase in (0, 1):
            pm = phase_model(p, phase)
            errs = [
                np.linalg.norm(propagate_exact(x, pm, dt).as_array() - propagate_quadratic(x, p, phase, dt).as_array())
                for dt in (200e-9, 100e-9)
            ]
            if errs[1] > 0:
                ratios.append(errs[0] / errs[1])
        pm = phase_model(p, 0)
        sol = solve_ivp(lambda t, y: pm.A @ y + pm.b, (0.0, 200e-9), x.as_array(), method="DOP853",
                        max_step=0.1e-9, rtol=1e-13, atol=1e-15)
        exact = propagate_exact(x, pm, 200e-9).as_array()
        fine.append(np.max(np.abs(sol.y[:, -1] - exact) / np.abs(exact)))
    ok = min(ratios) >= 6.0 and max(fine) <= 1e-9
    report(3, ok, f"min halving ratio {min(ratios):.2f}, max fine-step relative error {max(fine):.1e}")
    assert ok


def test_criterion_04_switching_frequencies(report):
    p = table2_boost()
    f40 = 1.0 / find_equilibrium(p, 40.0).period
    f20 = 1.0 / find_equilibrium(p, 20.0).period
    b = table1_buck()
    fb = 1.0 / find_equilibrium(b, 1.8).period
    fb_ideal = 1.8 / (8.0 * b.fixed_time)
    ok = (abs(f40 / 1.5e6 - 1) <= 0.02 and abs(f20 / 3.0e6 - 1) <= 0.02 and abs(fb / fb_ideal - 1) <= 0.02)
    report(4, ok, f"boost {f40 / 1e6:.4f} MHz at 40 V, {f20 / 1e6:.4f} MHz at 20 V; "
                  f"buck {fb / 1e6:.4f} MHz vs lossless {fb_ideal / 1e6:.4f} MHz")
    assert ok


def test_criterion_05_bound_suites(report):
    t0 = time.perf_counter()
    suite = bound_suite(table2_boost(), 40.0, 100, seed=5)
    elapsed = time.perf_counter() - t0
    n2 = sum(c.settling_holds for c in suite)
    n3 = sum(c.overshoot_holds for c in suite)
    ok = len(suite) >= 100 and n2 == n3 == len(suite) and elapsed < 60.0
    report(5, ok, f"settling bound {n2}/{len(suite)}, overshoot bound {n3}/{len(suite)} in {elapsed:.1f} s")
    assert ok


def test_criterion_06_closed_loop_performance(report):
    stair = run_scenario(preset_config("staircase"))
    legs = [(x.v_from, x.v_to) for x in stair.transitions]
    rise = [x.metrics.rise_time_10_90 for x in stair.transitions]
    over = [x.metrics.sigma_t_v for x in stair.transitions]
    stair_ok = (
        legs == [(20.0, 25.0), (25.0, 30.0), (30.0, 35.0), (35.0, 40.0)]
        and all(x.metrics.settled for x in stair.transitions)
        and max(rise) <= 10e-6
        and max(over) <= 0.05
        and stair.ok
    )
    load = run_scenario(preset_config("load_step"))
    dev = load.extra["max_deviation_fraction"]
    load_ok = 0.005 <= dev <= 0.04 and load.ok
    ok = stair_ok and load_ok
    report(6, ok, f"staircase rise max {max(rise) * 1e6:.2f} us, overshoot max {100 * max(over):.2f} %; "
                  f"load-step deviation {100 * dev:.2f} % of 40 V")
    assert ok


def test_criterion_07_buck_design_example(report):
    ctrl = S2PiController(62.0, 0.9750, 1.0)
    poles = closed_loop_poles(BUCK_DESIGN_EXAMPLE, ctrl)
    resp = closed_loop_step(BUCK_DESIGN_EXAMPLE, 62.0, 0.9750, 1.0, 2000)
    over = step_overshoot(resp)
    ok = bool(check_discrete_stability(BUCK_DESIGN_EXAMPLE, ctrl)) and np.all(np.abs(poles) < 1) and over <= 1e-3
    report(7, ok, f"max |z| {np.max(np.abs(poles)):.5f}, step overshoot {over:.1e}")
    assert ok


def test_criterion_08_current_loop_table(report):
    # (row, rising slope, falling slope, interference slope at the stability boundary)
    cases = [
        (ConverterType.CONST_OFF_TIME, 3e6, 1e6, 1.5e6),
        (ConverterType.CONST_ON_TIME, 3e6, 1e6, 0.5e6),
        (ConverterType.FIXED_FREQ_PEAK, 3e6, 1e6, 1e6),
        (ConverterType.FIXED_FREQ_VALLEY, 1e6, 3e6, 1e6),
    ]
    rows = []
    for kind, m1, m2, edge in cases:
        zero = current_loop_design(kind, m1, m2, 0.0)
        if kind in (ConverterType.CONST_OFF_TIME, ConverterType.CONST_ON_TIME):
            rows.append(zero.deadbeat and zero.N_w == 1.0)
        else:
            # Without interference both poles sit on the zero, so nothing overshoots.
            rows.append(zero.a_min == zero.a_max == zero.b and zero.O_w == 0.0)
        at = current_loop_design(kind, m1, m2, edge)
        rows.append(at.stable and math.isclose(at.a_min, -1.0, rel_tol=1e-12))
        rows.append(not current_loop_design(kind, m1, m2, edge * 1.0001).stable)
    fixtures = [
        math.isclose(d.N_w, N_w, rel_tol=1e-12) and math.isclose(d.O_w, O_w, rel_tol=1e-12, abs_tol=1e-15)
        for d, N_w, O_w in ((current_loop_design(k, a, b, lam), n, o) for k, a, b, lam, n, o in TABLE_FIXTURES)
    ]
    ok = all(rows) and all(fixtures) and len(fixtures) == 10
    report(8, ok, f"boundary checks {sum(rows)}/{len(rows)}, fixtures {sum(fixtures)}/{len(fixtures)}")
    assert ok


def test_criterion_09_sector_bounds(report):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        f, a = 10 ** rng.uniform(3, 8), 10 ** rng.uniform(-6, 0)
        g0 = rng.uniform(0, 0.999) / (4 * math.pi * f * a)
        s = sector_bounds(f, a, g0)
        lg = s.lambda_ub * g0
        worst = max(worst, abs(s.K_lb * (1 + lg) - 1), abs(s.K_ub * (1 - lg) - 1))
    raised = 0
    for x in (1.0, 1.5, 10.0):
        try:
            sector_bounds(1e6, 1e-3, x / (4 * math.pi * 1e3))
        except UnboundedSector:
            raised += 1
    ok = worst <= 4 * np.finfo(float).eps and raised == 3
    report(9, ok, f"max identity residual {worst:.1e}, errors raised {raised}/3")
    assert ok


def _c10_settles(p, ctrl, v1, v2, e1, e2):
    tr = run_reference_step(p, ctrl, v1, v2, 5000, resolution=None)
    if tr.termination is Termination.CCM_VIOLATION:
        return False
    return measure_step_metrics(tr, v1, v2, e1.command, e2.command).settled


def test_criterion_10_stability_dichotomy(report):
    p = table2_boost()
    plant = plant_for(p, 40.0)
    v1, v2 = 40.0, 40.5
    e1, e2 = find_equilibrium(p, v1), find_equilibrium(p, v2)
    rng = np.random.default_rng(10)
    stable, unstable = [], []
    while len(stable) < 20:
        k, z_k = rng.uniform(0.1, 1.5), plant.a1 - rng.uniform(0.005, 0.08)
        ctrl = S2PiController(k, z_k)
        if dominant_radius(plant, ctrl) >= 0.98:
            continue
        scale = 1.0
        while dominant_radius(plant, S2PiController(k * scale, z_k)) <= 1.02:
            scale *= 1.02
        bad = S2PiController(k * scale, z_k)
        stable.append(_c10_settles(p, ctrl, v1, v2, e1, e2))
        unstable.append(_c10_settles(p, bad, v1, v2, e1, e2))
    ok = all(stable) and not any(unstable)
    report(10, ok, f"radius < 0.98 settled {sum(stable)}/20; radius > 1.02 settled {sum(unstable)}/20")
    assert ok
