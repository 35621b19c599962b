"""Scenario execution shared by the command line and the acceptance suite."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .certify import (
    StepMetrics,
    check_discrete_stability,
    measure_step_metrics,
    overshoot_bound,
    settling_time_bound,
)
from .config import ScenarioConfig
from .controller import (
    DesignSpec,
    S2PiController,
    VoltageLoop,
    closed_loop_poles,
    closed_loop_step,
    design_s2pi,
)
from .converter import (
    CircuitParams,
    Termination,
    Topology,
    Trace,
    constant_command,
    find_equilibrium,
    simulate,
)
from .model import PlantCoefficients, model_error, plant_for
from .scheduler import (
    ControllerTable,
    GainScheduledLoop,
    OperatingPointGrid,
    build_controller_table,
    ccm_command_floor,
    validated_design,
)


def design_spec_from(ctrl_cfg: dict) -> DesignSpec:
    lo, hi, n = ctrl_cfg["gain_grid"]
    return DesignSpec(
        max_overshoot=float(ctrl_cfg["max_overshoot"]),
        gain_grid=(float(lo), float(hi), int(n)),
        zk_points=int(ctrl_cfg["zk_points"]),
        zk_span=float(ctrl_cfg["zk_span"]),
        objective=ctrl_cfg["objective"],
        settle_band=float(ctrl_cfg["settle_band"]),
    )


def command_limits_for(params: CircuitParams, v: float, ctrl_cfg: dict) -> tuple[float, float]:
    floor = ctrl_cfg.get("command_floor", "none")
    if floor == "ccm":
        lo = ccm_command_floor(params, v) if params.topology is Topology.BOOST else -math.inf
    elif floor == "none":
        lo = -math.inf
    else:
        lo = float(floor)
    hi = ctrl_cfg.get("command_max")
    return lo, (math.inf if hi is None else float(hi))


def controller_for(params: CircuitParams, v: float, ctrl_cfg: dict) -> tuple[S2PiController, PlantCoefficients]:
    """Controller for operating point ``v`` from the ``controller`` config section."""
    plant = plant_for(params, v)
    limits = command_limits_for(params, v, ctrl_cfg)
    if ctrl_cfg["mode"] == "explicit":
        ctrl = S2PiController(float(ctrl_cfg["k"]), float(ctrl_cfg["z_k"]), float(ctrl_cfg["p_k"]))
    elif ctrl_cfg.get("validate_from") is not None:
        ctrl = validated_design(params, plant, design_spec_from(ctrl_cfg), float(ctrl_cfg["validate_from"]), v, limits)
    else:
        ctrl = design_s2pi(plant, design_spec_from(ctrl_cfg))
    return S2PiController(ctrl.k, ctrl.z_k, ctrl.p_k, command_limits=limits), plant


def table_for(params: CircuitParams, voltages, region_radius: float, ctrl_cfg: dict) -> ControllerTable:
    grid = OperatingPointGrid(tuple(voltages), region_radius)
    return build_controller_table(
        params,
        grid,
        design_spec_from(ctrl_cfg),
        command_limits=lambda p, v: command_limits_for(p, v, ctrl_cfg),
        validate_hops=ctrl_cfg["mode"] == "design",
    )


@dataclass
class Transition:
    v_from: float
    v_to: float
    start_cycle: int
    end_cycle: int
    metrics: StepMetrics


@dataclass
class ScenarioResult:
    trace: Trace
    transitions: list[Transition] = field(default_factory=list)
    controllers: list[dict] = field(default_factory=list)
    switches: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.trace.termination is not Termination.CCM_VIOLATION


def _ripple(eq) -> float:
    return eq.v_max - eq.v_sample


def _transition(params, trace, v1, v2, n0, n1, band) -> Transition:
    e1, e2 = find_equilibrium(params, v1), find_equilibrium(params, v2)
    recs = trace.records
    t_end = recs[n1 - 1].t_start + 1e-15 if n1 < len(recs) else None
    m = measure_step_metrics(
        trace, v1, v2, e1.command, e2.command, band=band,
        t_step=recs[n0].t_start, t_end=t_end, ripple=_ripple(e2),
    )
    return Transition(v1, v2, n0, n1, m)


def run_reference_step(
    params: CircuitParams, ctrl: S2PiController, v_from: float, v_to: float, cycles: int,
    resolution: Optional[int] = 16,
) -> Trace:
    """Closed-loop step from the equilibrium at ``v_from``."""
    eq = find_equilibrium(params, v_from)
    c = ctrl.copy()
    c.reset(eq.command, 0.0)
    return simulate(params, eq.state, VoltageLoop(c, v_to), cycles, resolution=resolution)


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    params, sc, cc = cfg.params, cfg.scenario, cfg.controller
    res = cfg.outputs["resolution"]
    kind = sc["type"]
    if kind == "reference_step":
        v1, v2 = float(sc["v_from"]), float(sc.get("v_to", sc["v_from"]))
        ctrl, plant = controller_for(params, v2, cc)
        tr = run_reference_step(params, ctrl, v1, v2, int(sc["cycles"]), res)
        out = ScenarioResult(tr, controllers=[_ctrl_info(v2, ctrl, plant)])
        if v1 != v2 and tr.records:
            out.transitions.append(_transition(params, tr, v1, v2, 0, len(tr.records), sc["band"]))
        return out
    if kind == "staircase":
        table = table_for(params, sc["voltages"], float(sc["region_radius"]), cc)
        v1, v2 = float(sc["v_from"]), float(sc["v_to"])
        eq = find_equilibrium(params, v1)
        loop = GainScheduledLoop(table, v1, v2, eq.command, float(sc["settle_band"]), int(sc["settle_count"]))
        tr = simulate(params, eq.state, loop, int(sc["cycles"]), resolution=res, stop=lambda h: loop.done)
        out = ScenarioResult(
            tr,
            controllers=[_ctrl_info(e.voltage, e.controller, e.plant) for e in table.entries],
            switches=[asdict(s) for s in loop.switches],
        )
        bounds = [n for n, _ in loop.target_changes] + [len(tr.records)]
        prev = v1
        for (n0, tgt), n1 in zip(loop.target_changes, bounds[1:]):
            out.transitions.append(_transition(params, tr, prev, tgt, n0, n1, sc["band"]))
            prev = tgt
        out.extra["done"] = loop.done
        return out
    if kind == "load_step":
        v = float(sc["v_from"])
        ctrl, plant = controller_for(params, v, cc)
        eq = find_equilibrium(params, v)
        c = ctrl.copy()
        c.reset(eq.command, 0.0)
        t_step = float(sc["t_step"])
        tr = simulate(
            params, eq.state, VoltageLoop(c, v), int(sc["cycles"]), resolution=res,
            load_schedule=((t_step, float(sc["r_to"])),),
        )
        after = [r for r in tr.records if r.t_start >= t_step]
        dev = max((max(abs(r.v_max - v), abs(r.v_min - v)) for r in after), default=0.0)
        out = ScenarioResult(tr, controllers=[_ctrl_info(v, ctrl, plant)])
        out.extra.update(max_deviation_V=dev, max_deviation_fraction=dev / v)
        return out
    if kind == "open_loop":
        v = float(sc["v_from"])
        eq = find_equilibrium(params, v)
        cmd = float(sc.get("command", eq.command))
        tr = simulate(params, eq.state, constant_command(cmd), int(sc["cycles"]), resolution=res)
        return ScenarioResult(tr)
    raise ValueError(f"unknown scenario type {kind!r}")


def _ctrl_info(v: float, ctrl: S2PiController, plant: PlantCoefficients) -> dict:
    rep = check_discrete_stability(plant, ctrl)
    return {
        "v_op": v,
        "k": ctrl.k,
        "z_k": ctrl.z_k,
        "p_k": ctrl.p_k,
        "command_limits": list(ctrl.command_limits),
        "plant": {"a1": plant.a1, "b1": plant.b1, "g1": plant.g1},
        "poles": [[float(z.real), float(z.imag)] for z in closed_loop_poles(plant, ctrl)],
        "max_radius": rep.max_radius,
        "stable": rep.stable,
    }


def sweep_point(params: CircuitParams, ctrl: S2PiController, v_op: float, step: float, cycles: int) -> dict:
    """Worst-case error between the closed-loop 5S model and the simulator for one step."""
    plant = plant_for(params, v_op)
    tr = run_reference_step(params, ctrl, v_op, v_op + step, cycles, resolution=None)
    model = v_op + step * closed_loop_step(plant, ctrl.k, ctrl.z_k, ctrl.p_k, cycles)
    vs = tr.v_samples
    if len(vs) < cycles:
        return {"step_V": step, "e_w_percent": math.nan, "termination": tr.termination.value}
    rep = model_error(model, vs, step)
    return {"step_V": step, "e_w_percent": rep.e_w, "termination": tr.termination.value}


def _sweep_job(args):
    return sweep_point(*args)


def run_sweep(
    params: CircuitParams, ctrl: S2PiController, v_op: float, steps, cycles: int, threads: int = 1
) -> list[dict]:
    jobs = [(params, ctrl, v_op, float(s), cycles) for s in steps]
    if threads <= 1 or len(jobs) == 1:
        return [_sweep_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_sweep_job, jobs))


@dataclass
class BoundCheck:
    step: float
    k: float
    z_k: float
    metrics: StepMetrics
    settling_bound: float
    settling_holds: bool
    overshoot_bound: float
    overshoot_holds: bool


def bound_suite(
    params: CircuitParams,
    v_op: float,
    runs: int,
    seed: int = 0,
    max_step: float = 2.0,
    min_step: float = 0.2,
    cycles: int = 1000,
    period_reference: str = "final",
) -> list[BoundCheck]:
    """Randomised closed-loop step-ups checking the settling-time and overshoot bounds.

    Each run draws a step in [min_step, max_step] volts, a compensator zero
    2 to 20 thousandths below the plant pole and a gain in [0.2, 0.9] A/V,
    keeping only discretely stable loops.
    """
    rng = np.random.default_rng(seed)
    plant = plant_for(params, v_op)
    e1 = find_equilibrium(params, v_op)
    floor = ccm_command_floor(params, v_op) if params.topology is Topology.BOOST else -math.inf
    out: list[BoundCheck] = []
    while len(out) < runs:
        dv = float(rng.uniform(min_step, max_step))
        z_k = plant.a1 - float(rng.uniform(0.002, 0.02))
        k = float(rng.uniform(0.2, 0.9)) * (1.0 if plant.dc_gain > 0 else -1.0)
        ctrl = S2PiController(k, z_k, command_limits=(floor, math.inf))
        if not check_discrete_stability(plant, ctrl):
            continue
        v2 = v_op + dv
        e2 = find_equilibrium(params, v2)
        tr = run_reference_step(params, ctrl, v_op, v2, cycles, resolution=None)
        m = measure_step_metrics(tr, v_op, v2, e1.command, e2.command, ripple=_ripple(e2))
        b2, h2 = settling_time_bound(m, params, v_op, v2, e1.command, e2.command, period_reference=period_reference)
        b3, h3 = overshoot_bound(m, params)
        out.append(BoundCheck(dv, k, z_k, m, b2, h2 and m.settled, b3, h3))
    return out


def trace_stats(t: np.ndarray, v: np.ndarray, v_ref: Optional[float] = None) -> dict:
    """Summary statistics of a dense voltage waveform."""
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    stats = {
        "t_end_s": float(t[-1]),
        "v_max_V": float(v.max()),
        "v_min_V": float(v.min()),
        "v_final_V": float(v[-1]),
        "points": int(len(t)),
    }
    if v_ref is not None:
        stats["max_abs_deviation_V"] = float(np.max(np.abs(v - v_ref)))
    return stats
