import math

import numpy as np
import pytest

from fivess.certify import check_discrete_stability
from fivess.config import preset_config
from fivess.controller import DesignSpec, S2PiController, design_s2pi
from fivess.errors import NegativeIncrementalResistance, ParameterError, PlanningError, TopologyError
from fivess.model import boost_plant
from fivess.runner import run_scenario
from fivess.scheduler import (
    ControllerTable,
    GainScheduledLoop,
    LoadModel,
    OperatingPointGrid,
    SupervisorState,
    TableEntry,
    build_controller_table,
    ccm_command_floor,
    effective_load_resistance,
    plan_steps,
    supervisor_step,
)

from conftest import table2_boost

GRID = OperatingPointGrid((20.0, 25.0, 30.0, 35.0, 40.0), region_radius=3.0)


def test_grid_validation():
    with pytest.raises(ParameterError):
        OperatingPointGrid(())
    with pytest.raises(ParameterError):
        OperatingPointGrid((20.0, 20.0))
    with pytest.raises(ParameterError):
        OperatingPointGrid((20.0, 25.0), region_radius=2.0)
    assert OperatingPointGrid((20.0, 23.9), region_radius=2.0).nearest(23.0) == 1


def test_plan_steps_examples():
    assert plan_steps(30.0, 30.0, GRID) == []
    assert plan_steps(20.0, 40.0, GRID) == [25.0, 30.0, 35.0, 40.0]
    assert plan_steps(40.0, 22.0, GRID) == [35.0, 30.0, 25.0, 22.0]
    assert plan_steps(26.0, 28.0, GRID) == [28.0]
    with pytest.raises(PlanningError):
        plan_steps(20.0, 41.0, GRID)
    sparse = OperatingPointGrid((20.0, 25.0), region_radius=2.6)
    assert plan_steps(20.0, 25.0, sparse) == [25.0]


def _dummy_table(grid=GRID):
    entries = tuple(
        TableEntry(v, None, S2PiController(0.5 + 0.1 * n, 0.9 - 0.01 * n)) for n, v in enumerate(grid.voltages)
    )
    return ControllerTable(grid, entries)


def test_supervisor_waits_for_settle_count_then_advances():
    table = _dummy_table()
    st = SupervisorState.start(20.0, 30.0, table)
    assert st.plan == (25.0, 30.0) and st.current_target == 20.0
    for _ in range(4):
        ref, idx, st = supervisor_step(st, 20.0, table)
        assert ref == 20.0 and st.phase == "settled"
    ref, idx, st = supervisor_step(st, 20.0, table)
    assert ref == 25.0 and idx == 1 and st.phase == "stepping"
    # Outside the band resets the counter.
    _, _, st = supervisor_step(st, 24.0, table)
    assert st.consecutive_in_band == 0
    for _ in range(5):
        ref, idx, st = supervisor_step(st, 25.0, table)
    assert ref == 30.0 and idx == 2
    for _ in range(5):
        ref, idx, st = supervisor_step(st, 30.0, table)
    assert st.phase == "done"
    assert supervisor_step(st, 0.0, table) == (30.0, 2, st)


def test_supervisor_infinite_band_advances_every_cycle():
    table = _dummy_table()
    st = SupervisorState.start(20.0, 40.0, table)
    refs = []
    for _ in range(5):
        ref, _, st = supervisor_step(st, -1e9, table, settle_band=math.inf, settle_count=1)
        refs.append(ref)
    assert refs == [25.0, 30.0, 35.0, 40.0, 40.0]
    assert st.phase == "done"


def test_effective_load_resistance():
    assert effective_load_resistance(LoadModel(resistance=100.0), 40.0) == 100.0
    # i = (v/40)^2 * 0.4 has di/dv = 2 v 0.4 / 1600 = 0.02 S at 40 V.
    quad = LoadModel(current=lambda v: (v / 40.0) ** 2 * 0.4)
    assert effective_load_resistance(quad, 40.0) == pytest.approx(50.0, rel=1e-8)
    v = np.linspace(10, 50, 9)
    tab = LoadModel(table=(tuple(v), tuple(v / 80.0)))
    assert effective_load_resistance(tab, 33.0) == pytest.approx(80.0, rel=1e-6)
    with pytest.raises(NegativeIncrementalResistance):
        effective_load_resistance(LoadModel(current=lambda v: 1.0 / v), 40.0)
    with pytest.raises(ParameterError):
        LoadModel(resistance=10.0, current=lambda v: v)
    with pytest.raises(ParameterError):
        effective_load_resistance(tab, 60.0)


def test_single_entry_table_equals_direct_design():
    p = table2_boost()
    table = build_controller_table(p, OperatingPointGrid((40.0,)))
    direct = design_s2pi(boost_plant(p, 40.0), DesignSpec())
    assert table[0].controller.k == direct.k and table[0].controller.z_k == direct.z_k


def test_table_entries_stable_with_load_model():
    p = table2_boost()
    # Constant-power style load expressed through its incremental resistance.
    load = LoadModel(current=lambda v: 0.01 * v + 0.2)
    table = build_controller_table(p, GRID, load=load)
    assert len(table) == 5
    for e in table.entries:
        assert e.plant.gamma_v == e.plant.a1
        rep = check_discrete_stability(e.plant, e.controller)
        # A zero at a1 cancels the open-loop pole, so equality is allowed.
        assert rep and rep.max_radius <= e.plant.a1 * (1 + 1e-12)


def test_table_rejects_grid_point_at_input_voltage():
    with pytest.raises(TopologyError):
        build_controller_table(table2_boost(), OperatingPointGrid((12.0, 15.0)))


def test_ccm_command_floor():
    p = table2_boost()
    assert ccm_command_floor(p, 5.0) == 0.0
    assert ccm_command_floor(p, 40.0) == pytest.approx((52.0 - 12.0) * 200e-9 / 6.8e-6)


def test_bumpless_transfer():
    table = _dummy_table()
    loop = GainScheduledLoop(table, 20.0, 25.0, initial_command=1.5, settle_count=1)
    samples = [20.0, 20.3, 21.0, 22.5]
    for s in samples:
        loop(s, [None] * len(loop.commands))
    assert loop.switches and loop.switches[0].cycle == 0
    # The incoming controller continues from the stored command and error.
    new = table[1].controller
    e = [r - s for r, s in zip(loop.references, samples)]
    assert loop.commands[0] == pytest.approx(1.5 + new.k * e[0])
    for n in range(1, len(samples)):
        step = new.k * (e[n] - new.z_k * e[n - 1])
        assert loop.commands[n] - loop.commands[n - 1] == pytest.approx(step)


def test_staircase_switches_are_deterministic():
    cfg = preset_config("staircase")
    a, b = run_scenario(cfg), run_scenario(cfg)
    assert len(a.switches) == 4
    assert [s["cycle"] for s in a.switches] == [s["cycle"] for s in b.switches]
    assert [s["target"] for s in a.switches] == [25.0, 30.0, 35.0, 40.0]
    assert a.extra["done"]
    assert a.trace.v.tobytes() == b.trace.v.tobytes()
