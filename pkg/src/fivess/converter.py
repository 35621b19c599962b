"""Exact event-driven simulation of current-mode dc-dc converters.

Two topologies are supported:

* a buck converter with constant on-time and valley-current control: each
  cycle starts at a current valley, keeps S1 on for the fixed time ``T_on``
  and then turns it off until the inductor current falls to the valley
  command;
* a boost converter with constant off-time and peak-current control: each
  cycle starts at a current peak, keeps S1 off for the fixed time ``T_off``
  and then turns it on until the inductor current rises to the peak command.

In both cases the output voltage is sampled a fraction ``lam`` into the fixed
interval, and the controller computes the command that ends the same cycle.
Within a phase the circuit is a linear time-invariant affine system, which is
propagated in closed form.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import optimize

from .errors import CCMViolation, ParameterError, TopologyError

# Above this ratio of fixed time to RC the quadratic/Taylor plant models lose accuracy.
TAYLOR_VALIDITY_RATIO = 0.05


class Topology(str, enum.Enum):
    BUCK = "buck"
    BOOST = "boost"

    @property
    def fixed_phase(self) -> int:
        """Switch state of S1 during the fixed-duration interval."""
        return 1 if self is Topology.BUCK else 0

    @property
    def controlled_phase(self) -> int:
        return 1 - self.fixed_phase


@dataclass(frozen=True)
class CircuitParams:
    """Physical description of a converter.

    ``fixed_time`` is T_on for the buck and T_off for the boost. ``lam`` is
    the sampling fraction inside the fixed interval.
    """

    topology: Topology
    v_in: float
    inductance: float
    capacitance: float
    load_resistance: float
    fixed_time: float
    lam: float = 0.5
    min_controlled_time: float = 20e-9
    series_resistance: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "topology", Topology(self.topology))
        for name in ("v_in", "inductance", "capacitance", "load_resistance", "fixed_time"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ParameterError(f"{name} must be finite and > 0, got {value!r}")
        if not (0.0 < self.lam < 1.0):
            raise ParameterError(f"lam must lie strictly inside (0, 1), got {self.lam!r}")
        if not (math.isfinite(self.min_controlled_time) and self.min_controlled_time >= 0):
            raise ParameterError("min_controlled_time must be finite and >= 0")
        if not (math.isfinite(self.series_resistance) and self.series_resistance >= 0):
            raise ParameterError("series_resistance must be finite and >= 0")

    @property
    def rc(self) -> float:
        return self.load_resistance * self.capacitance

    @property
    def taylor_warning(self) -> bool:
        """True when the fixed time is not small against RC."""
        return self.fixed_time > TAYLOR_VALIDITY_RATIO * self.rc

    def with_load(self, resistance: float) -> "CircuitParams":
        return replace(self, load_resistance=resistance)

    def ideal_controlled_time(self, v_out: float) -> float:
        """Steady controlled interval of the lossless converter at ``v_out``."""
        if self.topology is Topology.BOOST:
            return self.fixed_time * (v_out - self.v_in) / self.v_in
        return self.fixed_time * (self.v_in - v_out) / v_out

    def ideal_period(self, v_out: float) -> float:
        return self.fixed_time + self.ideal_controlled_time(v_out)


@dataclass(frozen=True)
class ContinuousState:
    """Capacitor voltage, inductor current and absolute time."""

    v: float
    i_L: float
    t: float = 0.0

    def __post_init__(self) -> None:
        if not (self.v > 0.0):
            raise CCMViolation(f"output voltage {self.v!r} V is not positive at t={self.t!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.i_L])


@dataclass(frozen=True)
class PhaseModel:
    """Affine generator dx/dt = A x + b of one switch state."""

    A: np.ndarray
    b: np.ndarray
    phase: int

    def __post_init__(self) -> None:
        A = np.array(self.A, dtype=float).reshape(2, 2)
        b = np.array(self.b, dtype=float).reshape(2)
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    def __hash__(self) -> int:
        return hash((self.A.tobytes(), self.b.tobytes(), self.phase))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PhaseModel):
            return NotImplemented
        return (
            self.phase == other.phase
            and np.array_equal(self.A, other.A)
            and np.array_equal(self.b, other.b)
        )


def phase_model(params: CircuitParams, phase: int) -> PhaseModel:
    """Affine dynamics of the converter with S1 in state ``phase`` (1 = on)."""
    if phase not in (0, 1):
        raise ParameterError(f"phase must be 0 or 1, got {phase!r}")
    R, L, C, vin = params.load_resistance, params.inductance, params.capacitance, params.v_in
    rs = params.series_resistance
    if params.topology is Topology.BOOST:
        if phase == 0:
            A = [[-1.0 / (R * C), 1.0 / C], [-1.0 / L, -rs / L]]
        else:
            A = [[-1.0 / (R * C), 0.0], [0.0, -rs / L]]
        b = [0.0, vin / L]
    else:
        A = [[-1.0 / (R * C), 1.0 / C], [-1.0 / L, -rs / L]]
        b = [0.0, vin / L] if phase == 1 else [0.0, 0.0]
    return PhaseModel(A, b, phase)


def _phi1(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with the removable singularity filled in."""
    z = np.asarray(z, dtype=float)
    out = np.ones_like(z)
    nz = z != 0.0
    out[nz] = np.expm1(z[nz]) / z[nz]
    return out


class _Flow:
    """Closed-form flow of a 2x2 affine system, vectorised over time."""

    # Below this eigenvalue separation times dt the trigonometric forms are
    # replaced by their Taylor series.
    SERIES_THRESHOLD = 1e-6

    def __init__(self, pm: PhaseModel):
        A, b = pm.A, pm.b
        self.A = A
        self.b = b
        self.diagonal = A[0, 1] == 0.0 and A[1, 0] == 0.0
        self.s = 0.5 * (A[0, 0] + A[1, 1])
        det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
        self.q2 = self.s * self.s - det
        self.shifted = A - self.s * np.eye(2)
        if not self.diagonal:
            self.x_eq = -np.linalg.solve(A, b)

    def _expm(self, dt: np.ndarray) -> np.ndarray:
        q2 = self.q2
        q = math.sqrt(abs(q2))
        small = 2.0 * q * dt < self.SERIES_THRESHOLD
        y2 = q2 * dt * dt
        if q2 > 0:
            c = np.cosh(q * dt)
            sh = np.where(dt > 0, np.sinh(q * dt) / (q if q > 0 else 1.0), 0.0)
        elif q2 < 0:
            c = np.cos(q * dt)
            sh = np.sin(q * dt) / q
        else:
            c = np.ones_like(dt)
            sh = dt.copy()
        c = np.where(small, 1.0 + y2 / 2.0 + y2 * y2 / 24.0, c)
        sh = np.where(small, dt * (1.0 + y2 / 6.0 + y2 * y2 / 120.0), sh)
        scale = np.exp(self.s * dt)
        E = c[:, None, None] * np.eye(2) + sh[:, None, None] * self.shifted
        return scale[:, None, None] * E

    def at(self, x0: np.ndarray, dts: np.ndarray) -> np.ndarray:
        """States at offsets ``dts`` (shape (n,)) from ``x0``; returns (n, 2)."""
        dts = np.asarray(dts, dtype=float)
        if self.diagonal:
            a = np.diag(self.A)
            z = dts[:, None] * a[None, :]
            return x0[None, :] * np.exp(z) + self.b[None, :] * dts[:, None] * _phi1(z)
        E = self._expm(dts)
        return self.x_eq[None, :] + E @ (x0 - self.x_eq)

    def at1(self, x0: np.ndarray, dt: float) -> np.ndarray:
        return self.at(x0, np.array([dt]))[0]

    def at_scalar(self, x0: np.ndarray, dt: float) -> tuple[float, float]:
        """Scalar version of :meth:`at` for use inside root finders."""
        v0, i0 = float(x0[0]), float(x0[1])
        if self.diagonal:
            a0, a1 = float(self.A[0, 0]), float(self.A[1, 1])
            b0, b1 = float(self.b[0]), float(self.b[1])
            z0, z1 = a0 * dt, a1 * dt
            p0 = math.expm1(z0) / z0 if z0 != 0.0 else 1.0
            p1 = math.expm1(z1) / z1 if z1 != 0.0 else 1.0
            return v0 * math.exp(z0) + b0 * dt * p0, i0 * math.exp(z1) + b1 * dt * p1
        q2 = self.q2
        q = math.sqrt(abs(q2))
        y2 = q2 * dt * dt
        if 2.0 * q * dt < self.SERIES_THRESHOLD:
            c = 1.0 + y2 / 2.0 + y2 * y2 / 24.0
            sh = dt * (1.0 + y2 / 6.0 + y2 * y2 / 120.0)
        elif q2 > 0:
            c = math.cosh(q * dt)
            sh = math.sinh(q * dt) / q
        else:
            c = math.cos(q * dt)
            sh = math.sin(q * dt) / q
        scale = math.exp(self.s * dt)
        m = self.shifted
        xe0, xe1 = float(self.x_eq[0]), float(self.x_eq[1])
        d0, d1 = v0 - xe0, i0 - xe1
        v = xe0 + scale * (c * d0 + sh * (m[0, 0] * d0 + m[0, 1] * d1))
        i = xe1 + scale * (c * d1 + sh * (m[1, 0] * d0 + m[1, 1] * d1))
        return v, i


@lru_cache(maxsize=256)
def _flow_for(pm: PhaseModel) -> _Flow:
    return _Flow(pm)


@lru_cache(maxsize=256)
def _phase_flow(params: CircuitParams, phase: int) -> _Flow:
    return _flow_for(phase_model(params, phase))


def propagate_exact(x: ContinuousState, pm: PhaseModel, dt: float) -> ContinuousState:
    """Exact affine flow of ``pm`` over ``dt`` seconds."""
    if not dt >= 0:
        raise ParameterError(f"dt must be >= 0, got {dt!r}")
    if dt == 0:
        return x
    v, i = _flow_for(pm).at1(x.as_array(), dt)
    return ContinuousState(float(v), float(i), x.t + dt)


def _taylor_phase_matrices(params: CircuitParams, phase: int, dt: float):
    pm = phase_model(params, phase)
    A, b = pm.A, pm.b
    Phi = np.eye(2) + A * dt + A @ A * (dt * dt / 2.0)
    Gamma = b * dt + A @ b * (dt * dt / 2.0)
    return Phi, Gamma


def transition_matrices(params: CircuitParams, phase: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Ripple-frozen transition pair (Phi, Gamma) with x(dt) ~= Phi x0 + Gamma.

    The inductor current is a straight ramp whose slope is frozen at the phase
    start, and the capacitor voltage is the exact response of the RC filter
    to that ramp truncated at second order (no RC decay of the charging term).
    With S1 on in the boost the capacitor simply discharges at first order.
    """
    R, L, C, vin = params.load_resistance, params.inductance, params.capacitance, params.v_in
    RC = R * C
    if params.topology is Topology.BOOST and phase == 1:
        Phi = np.array([[1.0 - dt / RC, 0.0], [0.0, 1.0]])
        Gamma = np.array([0.0, vin * dt / L])
        return Phi, Gamma
    # Phases where the inductor sees (v_src - v): boost off, buck on and buck off.
    v_src = 0.0 if (params.topology is Topology.BUCK and phase == 0) else vin
    Phi = np.array([[1.0 - dt / RC - dt * dt / (2.0 * L * C), dt / C], [-dt / L, 1.0]])
    Gamma = np.array([v_src * dt * dt / (2.0 * L * C), v_src * dt / L])
    return Phi, Gamma


def propagate_quadratic(
    x: ContinuousState,
    params: CircuitParams,
    phase: int,
    dt: float,
    *,
    frozen_ripple: bool = False,
) -> ContinuousState:
    """Second-order approximation of the phase flow.

    By default this is the full second-order Taylor expansion of the exact
    flow (local error O(dt^3)). With ``frozen_ripple=True`` it applies the
    ripple-frozen matrices of :func:`transition_matrices`, which drop the
    second-order RC and current-curvature terms and are O(dt^2) accurate.
    """
    if not dt >= 0:
        raise ParameterError(f"dt must be >= 0, got {dt!r}")
    if dt == 0:
        return x
    if frozen_ripple:
        Phi, Gamma = transition_matrices(params, phase, dt)
    else:
        Phi, Gamma = _taylor_phase_matrices(params, phase, dt)
    v, i = Phi @ x.as_array() + Gamma
    return ContinuousState(float(v), float(i), x.t + dt)


def _check_command(i_cmd: float) -> float:
    i_cmd = float(i_cmd)
    if not math.isfinite(i_cmd):
        raise ParameterError(f"current command must be finite, got {i_cmd!r}")
    return i_cmd


def solve_boost_on_time(x: ContinuousState, i_cmd: float, params: CircuitParams) -> tuple[float, bool]:
    """On-time that ramps the inductor current from ``x.i_L`` to ``i_cmd``.

    Returns ``(t_on, clamped)``; ``clamped`` is True when the actuator floor
    ``min_controlled_time`` binds.
    """
    i_cmd = _check_command(i_cmd)
    L, vin, rs = params.inductance, params.v_in, params.series_resistance
    di = i_cmd - x.i_L
    if di <= 0:
        return params.min_controlled_time, True
    if rs == 0.0:
        t = di * L / vin
    else:
        i_inf = vin / rs
        if i_cmd >= i_inf:
            raise ParameterError("peak command exceeds the series-resistance current limit")
        t = -L / rs * math.log((i_cmd - i_inf) / (x.i_L - i_inf))
    if t < params.min_controlled_time:
        return params.min_controlled_time, True
    return t, False


def solve_buck_off_time(
    x: ContinuousState,
    i_valley_cmd: float,
    params: CircuitParams,
    time_tol: float = 1e-13,
) -> tuple[float, bool]:
    """Off-time until the inductor current falls to ``i_valley_cmd``.

    The root is bracketed by doubling a slope-based guess and refined with
    safeguarded Newton iterations until successive iterates differ by at most
    ``time_tol``. Returns ``(t_off, clamped)``.
    """
    i_cmd = _check_command(i_valley_cmd)
    if i_cmd >= x.i_L:
        return params.min_controlled_time, True
    if i_cmd <= 0.0:
        raise CCMViolation(f"valley command {i_cmd!r} A would drive the inductor current to zero")
    flow = _phase_flow(params, 0)
    x0 = x.as_array()
    L, rs = params.inductance, params.series_resistance

    def state(t: float) -> tuple[float, float]:
        return flow.at_scalar(x0, t)

    lo = 0.0
    hi = 3.0 * L * (x.i_L - i_cmd) / x.v
    for _ in range(200):
        v_hi, i_hi = state(hi)
        if v_hi <= 0.0:
            raise CCMViolation("output voltage collapsed before the valley event")
        if i_hi <= i_cmd:
            break
        lo, hi = hi, 2.0 * hi
    else:  # pragma: no cover - requires a pathological parameter set
        raise CCMViolation("valley event not reached")
    # Safeguarded Newton: Newton steps that leave the bracket fall back to bisection.
    t = lo + (hi - lo) * (x.i_L - i_cmd) / (x.i_L - i_hi) if lo == 0.0 else 0.5 * (lo + hi)
    for _ in range(200):
        v, i = state(t)
        if i > i_cmd:
            lo = t
        else:
            hi = t
        slope = (-v - rs * i) / L
        t_new = t - (i - i_cmd) / slope if slope < 0 else 0.5 * (lo + hi)
        if not lo < t_new < hi:
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) <= time_tol or hi - lo <= time_tol:
            t = t_new
            break
        t = t_new
    if state(t)[0] <= 0.0:
        raise CCMViolation("output voltage collapsed before the valley event")
    if t < params.min_controlled_time:
        return params.min_controlled_time, True
    return float(t), False


@dataclass(frozen=True)
class Quantizer:
    """Uniform mid-tread quantiser over [0, full_scale]."""

    bits: int
    full_scale: float

    def __post_init__(self) -> None:
        if self.bits < 1 or not self.full_scale > 0:
            raise ParameterError("quantizer needs bits >= 1 and full_scale > 0")

    def __call__(self, value: float) -> float:
        lsb = self.full_scale / (2**self.bits - 1)
        return float(np.clip(round(value / lsb) * lsb, 0.0, self.full_scale))


@dataclass(frozen=True)
class CycleRecord:
    """One switching cycle.

    The cycle starts at the previous current extreme (``t_start``), samples
    the output voltage at ``t_sample`` and ends at the next extreme
    ``t_event`` with inductor current ``i_extreme``.
    """

    n: int
    t_start: float
    t_sample: float
    v_sample: float
    t_event: float
    i_extreme: float
    command: float
    controlled_duration: float
    clamped: bool
    v_max: float
    v_min: float
    load_resistance: float

    @property
    def period(self) -> float:
        return self.t_event - self.t_start


class Termination(str, enum.Enum):
    COMPLETED = "completed"
    CCM_VIOLATION = "ccm_violation"
    MAX_CYCLES = "max_cycles"


@dataclass(frozen=True)
class Trace:
    """Dense waveform plus per-cycle records of a simulation run."""

    t: np.ndarray
    v: np.ndarray
    i_L: np.ndarray
    switch_state: np.ndarray
    cycle: np.ndarray
    records: tuple[CycleRecord, ...]
    termination: Termination
    initial_state: ContinuousState
    final_state: Optional[ContinuousState] = None
    message: str = ""

    @property
    def v_samples(self) -> np.ndarray:
        return np.array([r.v_sample for r in self.records])

    @property
    def t_samples(self) -> np.ndarray:
        return np.array([r.t_sample for r in self.records])

    @property
    def i_extremes(self) -> np.ndarray:
        return np.array([r.i_extreme for r in self.records])

    @property
    def periods(self) -> np.ndarray:
        return np.array([r.period for r in self.records])


CommandSource = Callable[[float, Sequence[CycleRecord]], float]


def constant_command(value: float) -> CommandSource:
    """Open-loop command source returning ``value`` every cycle."""

    def source(v_sample: float, history: Sequence[CycleRecord]) -> float:
        return value

    return source


def _ccm_guard(x: np.ndarray, t: float, what: str) -> None:
    if not x[0] > 0.0:
        raise CCMViolation(f"output voltage {x[0]!r} V not positive {what} at t={t!r}")
    if not x[1] > 0.0:
        raise CCMViolation(f"inductor current {x[1]!r} A reached zero {what} at t={t!r}")


def _phase_voltage_extremes(
    flow: _Flow, x0: np.ndarray, dur: float, params: CircuitParams, probes: np.ndarray
) -> tuple[float, float]:
    """Exact max and min of v(t) over one phase.

    Interior extremes sit where the capacitor current i - v/R vanishes; those
    roots are bracketed on the probe grid and refined with Brent's method.
    """
    R = params.load_resistance
    vs = probes[:, 0]
    ic = probes[:, 1] - vs / R
    vmax, vmin = float(vs.max()), float(vs.min())
    if dur <= 0:
        return vmax, vmin
    n = len(probes)
    ts = np.linspace(0.0, dur, n)
    for k in range(n - 1):
        if ic[k] == 0.0:
            continue
        if ic[k] * ic[k + 1] < 0.0:
            def f(t: float) -> float:
                v, i = flow.at_scalar(x0, t)
                return i - v / R

            root = optimize.brentq(f, ts[k], ts[k + 1], xtol=1e-16, rtol=1e-14)
            v_root = flow.at_scalar(x0, root)[0]
            vmax = max(vmax, v_root)
            vmin = min(vmin, v_root)
    return vmax, vmin


_EXTREME_PROBES = 7


class _CycleRunner:
    """Advances one cycle, optionally emitting dense output."""

    def __init__(self, params: CircuitParams, resolution: Optional[int]):
        self.params = params
        self.resolution = resolution

    def run(
        self,
        x: ContinuousState,
        command: Union[float, Callable[[float], float]],
        n: int,
        adc: Optional[Quantizer] = None,
        dac: Optional[Quantizer] = None,
        dense: Optional[list] = None,
    ) -> tuple[ContinuousState, CycleRecord]:
        p = self.params
        topo = p.topology
        fixed_phase, ctrl_phase = topo.fixed_phase, topo.controlled_phase
        T = p.fixed_time
        t_sample_off = p.lam * T
        x0 = x.as_array()

        # Fixed interval: one vectorised evaluation covering the sample, the
        # extreme-search probes, the dense points and the end of the phase.
        flow_f = _phase_flow(p, fixed_phase)
        probe_t = np.linspace(0.0, T, _EXTREME_PROBES)
        dense_t = self._dense_offsets(T, with_sample=t_sample_off)
        all_t = np.concatenate(([t_sample_off, T], probe_t, dense_t))
        states = flow_f.at(x0, all_t)
        x_sample, x_mid = states[0], states[1]
        probes_f = states[2 : 2 + _EXTREME_PROBES]
        _ccm_guard(x_sample, x.t + t_sample_off, "at the sampling instant")
        _ccm_guard(x_mid, x.t + T, "at the end of the fixed interval")
        v_sample = float(x_sample[0])
        if dense is not None:
            dense.append((x.t + dense_t, states[2 + _EXTREME_PROBES :], fixed_phase, n))

        seen = adc(v_sample) if adc is not None else v_sample
        cmd = command(seen) if callable(command) else command
        cmd = _check_command(cmd)
        if dac is not None:
            cmd = dac(cmd)

        xm = ContinuousState(float(x_mid[0]), float(x_mid[1]), x.t + T)
        if topo is Topology.BOOST:
            dur, clamped = solve_boost_on_time(xm, cmd, p)
        else:
            dur, clamped = solve_buck_off_time(xm, cmd, p)

        flow_c = _phase_flow(p, ctrl_phase)
        probe_c = np.linspace(0.0, dur, _EXTREME_PROBES)
        dense_c = self._dense_offsets(dur, with_sample=None)
        states_c = flow_c.at(x_mid, np.concatenate(([dur], probe_c, dense_c)))
        x_end = states_c[0]
        if topo is Topology.BOOST and not clamped:
            x_end[1] = cmd  # the comparator fires exactly at the command
        _ccm_guard(x_end, x.t + T + dur, "at the end of the cycle")
        if dense is not None:
            dense.append((xm.t + dense_c, states_c[1 + _EXTREME_PROBES :], ctrl_phase, n))

        vmax_f, vmin_f = _phase_voltage_extremes(flow_f, x0, T, p, probes_f)
        vmax_c, vmin_c = _phase_voltage_extremes(
            flow_c, x_mid, dur, p, states_c[1 : 1 + _EXTREME_PROBES]
        )
        t_event = x.t + T + dur
        x_next = ContinuousState(float(x_end[0]), float(x_end[1]), t_event)
        record = CycleRecord(
            n=n,
            t_start=x.t,
            t_sample=x.t + t_sample_off,
            v_sample=v_sample,
            t_event=t_event,
            i_extreme=float(x_end[1]),
            command=cmd,
            controlled_duration=float(dur),
            clamped=clamped,
            v_max=max(vmax_f, vmax_c),
            v_min=min(vmin_f, vmin_c),
            load_resistance=p.load_resistance,
        )
        return x_next, record

    def _dense_offsets(self, dur: float, with_sample: Optional[float]) -> np.ndarray:
        if self.resolution is None:
            return np.empty(0)
        T = self.params.fixed_time
        if with_sample is not None:
            k = self.resolution
            pts = np.arange(k) * (dur / k)
            pts = np.union1d(pts, [with_sample])
            return pts
        k = int(min(max(1, math.ceil(self.resolution * dur / T)), 8 * self.resolution))
        return np.arange(k) * (dur / k)


def run_cycle(
    x: ContinuousState,
    command: Union[float, Callable[[float], float]],
    params: CircuitParams,
    n: int = 0,
) -> tuple[ContinuousState, CycleRecord]:
    """Advance exactly one switching cycle from a current extreme.

    ``command`` is either the current command in amperes or a callable that
    maps the voltage sample of this cycle to the command.
    """
    return _CycleRunner(params, None).run(x, command, n)


def simulate(
    params: CircuitParams,
    x0: ContinuousState,
    command_source: CommandSource,
    max_cycles: int,
    *,
    resolution: Optional[int] = 16,
    load_schedule: Sequence[tuple[float, float]] = (),
    adc: Optional[Quantizer] = None,
    dac: Optional[Quantizer] = None,
    stop: Optional[Callable[[Sequence[CycleRecord]], bool]] = None,
) -> Trace:
    """Run the converter for up to ``max_cycles`` cycles.

    ``command_source(v_sample, history)`` is called once per cycle after the
    voltage sample. ``load_schedule`` lists ``(time, resistance)`` pairs; a
    change takes effect at the first cycle boundary at or after its time.
    ``resolution`` is the number of dense points per fixed interval, or None
    to keep only the cycle records. CCM violations end the run and are
    recorded in the trace rather than raised.
    """
    if max_cycles < 0:
        raise ParameterError("max_cycles must be >= 0")
    schedule = sorted((float(t), float(r)) for t, r in load_schedule)
    runners: dict[float, _CycleRunner] = {}
    current = params
    history: list[CycleRecord] = []
    dense: Optional[list] = [] if resolution is not None else None
    x = x0
    termination = Termination.MAX_CYCLES
    message = ""
    next_load = 0

    for n in range(max_cycles):
        while next_load < len(schedule) and schedule[next_load][0] <= x.t:
            current = current.with_load(schedule[next_load][1])
            next_load += 1
        runner = runners.get(current.load_resistance)
        if runner is None:
            runner = runners[current.load_resistance] = _CycleRunner(current, resolution)

        def cmd(v: float) -> float:
            return command_source(v, history)

        try:
            x, record = runner.run(x, cmd, n, adc, dac, dense)
        except CCMViolation as exc:
            termination = Termination.CCM_VIOLATION
            message = str(exc)
            break
        history.append(record)
        if stop is not None and stop(history):
            termination = Termination.COMPLETED
            break

    if dense is not None:
        ts = [d[0] for d in dense]
        xs = [d[1] for d in dense]
        ss = [np.full(len(d[0]), d[2], dtype=np.int8) for d in dense]
        cs = [np.full(len(d[0]), d[3], dtype=np.int64) for d in dense]
        if termination is not Termination.CCM_VIOLATION or not dense:
            ts.append(np.array([x.t]))
            xs.append(np.array([[x.v, x.i_L]]))
            ss.append(np.array([params.topology.fixed_phase], dtype=np.int8))
            cs.append(np.array([len(history)], dtype=np.int64))
        t_arr = np.concatenate(ts) if ts else np.empty(0)
        x_arr = np.concatenate(xs) if xs else np.empty((0, 2))
        s_arr = np.concatenate(ss) if ss else np.empty(0, dtype=np.int8)
        c_arr = np.concatenate(cs) if cs else np.empty(0, dtype=np.int64)
    else:
        t_arr = np.empty(0)
        x_arr = np.empty((0, 2))
        s_arr = np.empty(0, dtype=np.int8)
        c_arr = np.empty(0, dtype=np.int64)

    return Trace(
        t=t_arr,
        v=x_arr[:, 0].copy(),
        i_L=x_arr[:, 1].copy(),
        switch_state=s_arr,
        cycle=c_arr,
        records=tuple(history),
        termination=termination,
        initial_state=x0,
        final_state=x if termination is not Termination.CCM_VIOLATION else None,
        message=message,
    )


@dataclass(frozen=True)
class Equilibrium:
    """Periodic orbit of the converter with a constant current command."""

    state: ContinuousState  # at the cycle boundary (current extreme), t = 0
    command: float
    controlled_duration: float
    period: float
    v_sample: float
    v_max: float
    v_min: float


def find_equilibrium(params: CircuitParams, v_out: float) -> Equilibrium:
    """Periodic orbit whose sampled output voltage equals ``v_out``.

    Solves for the boundary voltage and the current command such that one
    cycle returns to its starting state while sampling exactly ``v_out``.
    """
    vin, L, R, T = params.v_in, params.inductance, params.load_resistance, params.fixed_time
    if params.topology is Topology.BOOST:
        if not v_out > vin:
            from .errors import TopologyError

            raise TopologyError("boost equilibrium requires v_out > v_in")
        ripple = (v_out - vin) / L * T
        i_guess = v_out * v_out / (R * vin) + ripple / 2.0
    else:
        if not 0 < v_out < vin:
            from .errors import TopologyError

            raise TopologyError("buck equilibrium requires 0 < v_out < v_in")
        ripple = (vin - v_out) / L * T
        i_guess = v_out / R - ripple / 2.0

    runner = _CycleRunner(params, None)

    def cycle(z: np.ndarray) -> tuple[ContinuousState, CycleRecord]:
        v0 = z[0] * v_out
        cmd = i_guess + z[1] * ripple
        return runner.run(ContinuousState(v0, cmd), cmd, 0)

    def residual(z: np.ndarray) -> np.ndarray:
        x1, rec = cycle(z)
        return np.array([(rec.v_sample - v_out) / v_out, (x1.v - z[0] * v_out) / v_out])

    sol = optimize.root(residual, np.array([1.0, 0.0]), method="hybr", options={"xtol": 1e-14})
    # hybr may report a stalled step once the residual is already at rounding level.
    if not np.all(np.isfinite(sol.x)) or np.max(np.abs(residual(sol.x))) > 1e-11:
        raise CCMViolation(f"no CCM equilibrium found at v_out={v_out!r}: {sol.message}")
    x1, rec = cycle(sol.x)
    state = ContinuousState(float(sol.x[0] * v_out), rec.command, 0.0)
    return Equilibrium(
        state=state,
        command=rec.command,
        controlled_duration=float(rec.controlled_duration),
        period=float(rec.period),
        v_sample=rec.v_sample,
        v_max=rec.v_max,
        v_min=rec.v_min,
    )
