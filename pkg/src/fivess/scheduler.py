"""Gain-scheduled supervisory control for large reference steps.

A large step is split into hops between points of an operating-point grid.
Each grid point carries a controller designed on the local linear plant, and
a supervisor advances to the next hop once the sampled voltage has settled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .certify import StepMetrics, measure_step_metrics
from .controller import DesignSpec, S2PiController, VoltageLoop, design_candidates, design_s2pi
from .converter import CircuitParams, CycleRecord, Termination, find_equilibrium, simulate
from .errors import InfeasibleDesign, NegativeIncrementalResistance, ParameterError, PlanningError
from .model import PlantCoefficients, plant_for

DEFAULT_SETTLE_BAND = 0.01
DEFAULT_SETTLE_COUNT = 5


@dataclass(frozen=True)
class OperatingPointGrid:
    """Output voltages at which local controllers are designed.

    Neighbouring linearised regions of half-width ``region_radius`` must overlap.
    """

    voltages: tuple[float, ...]
    region_radius: float = 2.0

    def __post_init__(self) -> None:
        v = tuple(float(x) for x in self.voltages)
        object.__setattr__(self, "voltages", v)
        if not v:
            raise ParameterError("grid needs at least one voltage")
        if not self.region_radius > 0:
            raise ParameterError("region_radius must be positive")
        gaps = np.diff(v)
        if np.any(gaps <= 0):
            raise ParameterError("grid voltages must be strictly increasing")
        if np.any(gaps >= 2 * self.region_radius):
            raise ParameterError(
                f"grid spacing {gaps.max():g} V leaves a gap between regions of radius {self.region_radius:g} V"
            )

    def nearest(self, v: float) -> int:
        return int(np.argmin(np.abs(np.asarray(self.voltages) - v)))


@dataclass(frozen=True)
class LoadModel:
    """Load as a fixed resistance, a static current law i = f(v), or a table."""

    resistance: Optional[float] = None
    current: Optional[Callable[[float], float]] = None
    table: Optional[tuple[tuple[float, ...], tuple[float, ...]]] = None

    def __post_init__(self) -> None:
        given = sum(x is not None for x in (self.resistance, self.current, self.table))
        if given != 1:
            raise ParameterError("LoadModel needs exactly one of resistance, current or table")
        if self.resistance is not None and not self.resistance > 0:
            raise ParameterError("load resistance must be positive")
        if self.table is not None:
            v, i = (np.asarray(a, dtype=float) for a in self.table)
            if v.shape != i.shape or v.size < 3 or np.any(np.diff(v) <= 0):
                raise ParameterError("load table needs >= 3 points with increasing voltage")


def effective_load_resistance(load: LoadModel, v: float) -> float:
    """Incremental resistance 1/(di/dv) of the load at voltage ``v``."""
    if load.resistance is not None:
        return float(load.resistance)
    if load.current is not None:
        h = 1e-4 * max(abs(v), 1.0)
        g = (load.current(v + h) - load.current(v - h)) / (2 * h)
    else:
        vv, ii = (np.asarray(a, dtype=float) for a in load.table)
        if not vv[0] <= v <= vv[-1]:
            raise ParameterError(f"{v} V outside the load table")
        g = float(np.interp(v, vv, np.gradient(ii, vv)))
    if not g > 0:
        raise NegativeIncrementalResistance(f"incremental conductance {g:g} S at {v} V is not positive")
    return 1.0 / g


@dataclass(frozen=True)
class TableEntry:
    voltage: float
    plant: PlantCoefficients
    controller: S2PiController

    def fresh_controller(self) -> S2PiController:
        return self.controller.copy()


@dataclass(frozen=True)
class ControllerTable:
    grid: OperatingPointGrid
    entries: tuple[TableEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx: int) -> TableEntry:
        return self.entries[idx]

    def nearest(self, v: float) -> int:
        return self.grid.nearest(v)


CommandLimits = Union[tuple[float, float], Callable[[CircuitParams, float], tuple[float, float]], None]


def ccm_command_floor(params: CircuitParams, v: float, headroom: float = 0.3) -> float:
    """Smallest boost peak command that keeps the inductor current positive
    through one off-interval while the output sits up to ``headroom`` above ``v``."""
    return max(((1.0 + headroom) * v - params.v_in) * params.fixed_time / params.inductance, 0.0)


def simulate_hop(
    params: CircuitParams, v_from: float, v_to: float, ctrl: S2PiController, n_cycles: int = 400,
    band: float = DEFAULT_SETTLE_BAND, abort_overshoot: Optional[float] = None,
) -> tuple[bool, Optional[StepMetrics]]:
    """Closed-loop step ``v_from -> v_to`` on the simulator from equilibrium.

    Returns (stayed in CCM, metrics). With ``abort_overshoot`` the run stops
    as soon as the voltage exceeds that overshoot plus the steady ripple.
    """
    e1, e2 = find_equilibrium(params, v_from), find_equilibrium(params, v_to)
    ripple = e2.v_max - e2.v_sample
    c = ctrl.copy()
    c.reset(e1.command, 0.0)
    stop = None
    if abort_overshoot is not None:
        up = v_to > v_from
        lim = v_to + (1 if up else -1) * (abort_overshoot * abs(v_to - v_from) + ripple)

        def stop(hist):
            r = hist[-1]
            return r.v_max > lim if up else r.v_min < lim

    tr = simulate(params, e1.state, VoltageLoop(c, v_to), n_cycles, resolution=None, stop=stop)
    if tr.termination is Termination.CCM_VIOLATION:
        return False, None
    m = measure_step_metrics(tr, v_from, v_to, e1.command, e2.command, band=band, ripple=ripple)
    return True, m


def validated_design(
    params: CircuitParams, plant: PlantCoefficients, spec: DesignSpec, v_from: float, v_to: float,
    limits: Optional[tuple[float, float]] = None, n_cycles: int = 400, max_tries: int = 200,
) -> S2PiController:
    """Best-ranked design whose simulated ``v_from -> v_to`` step settles with
    at most ``spec.max_overshoot`` continuous overshoot (net of ripple)."""
    tried = 0
    for cand in design_candidates(plant, spec):
        if tried >= max_tries:
            break
        tried += 1
        ctrl = S2PiController(cand.k, cand.z_k, 1.0, command_limits=limits or (-math.inf, math.inf))
        ok, m = simulate_hop(params, v_from, v_to, ctrl, n_cycles, abort_overshoot=spec.max_overshoot)
        if ok and m is not None and m.settled and m.sigma_t_v <= spec.max_overshoot:
            return ctrl
    raise InfeasibleDesign(
        f"no design among {tried} candidates keeps the {v_from:g} -> {v_to:g} V step within "
        f"{spec.max_overshoot:.3g} overshoot on the simulator"
    )


def build_controller_table(
    params: CircuitParams,
    grid: OperatingPointGrid,
    spec: DesignSpec = DesignSpec(),
    load: Optional[LoadModel] = None,
    command_limits: CommandLimits = None,
    *,
    validate_hops: bool = False,
    hop_cycles: int = 400,
    max_tries: int = 200,
) -> ControllerTable:
    """Design one compensator per grid voltage on the local linear plant.

    ``command_limits`` is either a fixed pair or a function of
    ``(params, voltage)`` returning the pair for that entry.

    With ``validate_hops`` each entry above the lowest grid point is the best
    design (in the order of :func:`design_candidates`) whose simulated step
    from the grid point below settles with at most ``spec.max_overshoot``
    continuous overshoot; the discrete-model ranking alone cannot see
    actuator saturation during hops.
    """
    load = load or LoadModel(resistance=params.load_resistance)
    entries = []
    for idx, v in enumerate(grid.voltages):
        local = params.with_load(effective_load_resistance(load, v))
        plant = plant_for(local, v)
        lim = None
        if command_limits is not None:
            lim = tuple(command_limits(local, v) if callable(command_limits) else command_limits)
        try:
            if validate_hops and idx > 0:
                ctrl = validated_design(local, plant, spec, grid.voltages[idx - 1], v, lim, hop_cycles, max_tries)
            else:
                ctrl = design_s2pi(plant, spec)
                if lim is not None:
                    ctrl = S2PiController(ctrl.k, ctrl.z_k, ctrl.p_k, command_limits=lim)
        except InfeasibleDesign as exc:
            raise InfeasibleDesign(f"grid point {v:g} V: {exc}", best=exc.best) from exc
        entries.append(TableEntry(v, plant, ctrl))
    return ControllerTable(grid, tuple(entries))


def plan_steps(v_from: float, v_to: float, grid: OperatingPointGrid) -> list[float]:
    """Intermediate targets from ``v_from`` to ``v_to`` through the grid points."""
    lo, hi = grid.voltages[0], grid.voltages[-1]
    for v in (v_from, v_to):
        if not lo <= v <= hi:
            raise PlanningError(f"{v} V lies outside the grid span [{lo}, {hi}] V")
    if v_from == v_to:
        return []
    up = v_to > v_from
    inner = [g for g in grid.voltages if (v_from < g < v_to if up else v_to < g < v_from)]
    plan = (inner if up else inner[::-1]) + [float(v_to)]
    prev = v_from
    for v in plan:
        if abs(v - prev) > 2 * grid.region_radius:
            raise PlanningError(f"hop {prev} -> {v} V exceeds twice the region radius")
        prev = v
    return plan


@dataclass(frozen=True)
class SupervisorState:
    """Supervisor memory.

    ``phase`` is ``"stepping"`` while the sample is outside the settle band,
    ``"settled"`` while it is inside but has not yet stayed long enough, and
    ``"done"`` once the final target has been held.
    """

    current_target: float
    final_target: float
    active_entry: int
    consecutive_in_band: int = 0
    phase: str = "stepping"
    plan: tuple[float, ...] = ()
    step: float = 0.0

    @classmethod
    def start(cls, v_from: float, v_to: float, table: ControllerTable) -> "SupervisorState":
        """State settled at ``v_from`` with the hops to ``v_to`` queued."""
        plan = tuple(plan_steps(v_from, v_to, table.grid))
        step = plan[0] - v_from if plan else 0.0
        return cls(v_from, v_to, table.nearest(v_from), 0, "stepping", plan, step)


def supervisor_step(
    state: SupervisorState,
    sample: float,
    table: ControllerTable,
    settle_band: float = DEFAULT_SETTLE_BAND,
    settle_count: int = DEFAULT_SETTLE_COUNT,
) -> tuple[float, int, SupervisorState]:
    """Advance the supervisor by one sample.

    Returns the reference for this cycle, the active table index and the
    new state.
    """
    if state.phase == "done":
        return state.current_target, state.active_entry, state
    scale = abs(state.step) if state.step else abs(state.current_target)
    tol = settle_band * scale if math.isfinite(settle_band) else math.inf
    in_band = abs(sample - state.current_target) <= tol
    count = state.consecutive_in_band + 1 if in_band else 0
    if count < settle_count:
        new = replace(state, consecutive_in_band=count, phase="settled" if in_band else "stepping")
        return new.current_target, new.active_entry, new
    if not state.plan:
        new = replace(state, consecutive_in_band=count, phase="done")
        return new.current_target, new.active_entry, new
    nxt = state.plan[0]
    new = replace(
        state,
        current_target=nxt,
        active_entry=table.nearest(nxt),
        consecutive_in_band=0,
        phase="stepping",
        plan=state.plan[1:],
        step=nxt - state.current_target,
    )
    return new.current_target, new.active_entry, new


@dataclass(frozen=True)
class SwitchEvent:
    cycle: int
    from_entry: int
    to_entry: int
    target: float


class GainScheduledLoop:
    """Command source running the supervisor and the active table controller.

    The loop starts settled at ``v_from`` holding ``initial_command``. On a
    switch the incoming controller is seeded with the last command and the
    last error so the command continues without a jump.
    """

    def __init__(
        self,
        table: ControllerTable,
        v_from: float,
        v_to: float,
        initial_command: float,
        settle_band: float = DEFAULT_SETTLE_BAND,
        settle_count: int = DEFAULT_SETTLE_COUNT,
    ):
        self.table = table
        self.settle_band = settle_band
        self.settle_count = settle_count
        self.state = SupervisorState.start(v_from, v_to, table)
        self.ctrl = table[self.state.active_entry].fresh_controller()
        self.ctrl.reset(initial_command, 0.0)
        self.switches: list[SwitchEvent] = []
        self.references: list[float] = []
        self.commands: list[float] = []
        # Cycle index at which each new target became active.
        self.target_changes: list[tuple[int, float]] = []

    def __call__(self, v_sample: float, history: Sequence[CycleRecord]) -> float:
        n = len(history)
        old = self.state
        ref, entry, self.state = supervisor_step(old, v_sample, self.table, self.settle_band, self.settle_count)
        if ref != old.current_target:
            self.target_changes.append((n, ref))
        if entry != old.active_entry:
            last_u, last_e = self.ctrl.u_prev, self.ctrl.e_prev
            self.ctrl = self.table[entry].fresh_controller()
            self.ctrl.reset(last_u, last_e)
            self.switches.append(SwitchEvent(n, old.active_entry, entry, ref))
        u = self.ctrl.step(ref - v_sample)
        self.references.append(ref)
        self.commands.append(u)
        return u

    @property
    def done(self) -> bool:
        return self.state.phase == "done"
