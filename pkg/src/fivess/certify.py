"""Certificates and trace measurements for closed-loop converters.

Covers the discrete stability premise, step metrics measured on simulated
traces, the settling-time and overshoot bounds for the constant off-time
boost, large-signal small-gain conditions for both topologies, interference
sector bounds and the current-sensor monotonicity check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .controller import S2PiController, closed_loop_poles
from .converter import CircuitParams, Topology, Trace
from .errors import ParameterError, TopologyError, UnboundedSector
from .model import PlantCoefficients

STABILITY_MARGIN = 1e-9


@dataclass(frozen=True)
class StabilityReport:
    stable: bool
    radii: np.ndarray
    max_radius: float

    def __bool__(self) -> bool:
        return self.stable


def check_discrete_stability(
    plant: PlantCoefficients, ctrl: S2PiController, margin: float = STABILITY_MARGIN
) -> StabilityReport:
    """Closed-loop poles strictly inside the unit disk, with a safety margin."""
    radii = np.sort(np.abs(closed_loop_poles(plant, ctrl)))[::-1]
    r = float(radii[0])
    return StabilityReport(stable=r < 1.0 - margin, radii=radii, max_radius=r)


@dataclass(frozen=True)
class StepMetrics:
    """Transient metrics of one reference transition.

    Overshoots are fractions of the step, measured in the direction of the
    step and clipped at zero. ``sigma_t_v`` is the continuous overshoot net
    of the steady-state ripple allowance (never below ``sigma_d_v``, since
    the samples lie on the continuous trajectory); ``sigma_t_v_raw`` keeps
    the ripple. ``N_t`` counts turn-on events until the sampled voltage
    stays in the band; when ``settled`` is false, ``N_t`` and ``T_t`` are
    censored at the end of the trace.
    """

    rise_time_10_90: float
    sigma_t_v: float
    sigma_d_v: float
    sigma_d_i: float
    N_t: int
    T_t: float
    settled: bool
    sigma_t_v_raw: float = 0.0
    max_deviation: float = 0.0


def _overshoot(extreme: float, final: float, initial: float) -> float:
    return max((extreme - final) / (final - initial), 0.0)


def _crossing_time(t: np.ndarray, y: np.ndarray, level: float, rising: bool) -> float:
    s = y - level if rising else level - y
    idx = np.nonzero(s >= 0)[0]
    if len(idx) == 0:
        return math.nan
    j = int(idx[0])
    if j == 0:
        return float(t[0])
    # Linear interpolation between the bracketing points.
    y0, y1 = s[j - 1], s[j]
    return float(t[j - 1] + (t[j] - t[j - 1]) * (-y0) / (y1 - y0))


def measure_step_metrics(
    trace: Trace,
    V_e1: float,
    V_e2: float,
    I_e1: float,
    I_e2: float,
    band: float = 0.02,
    *,
    t_step: Optional[float] = None,
    t_end: Optional[float] = None,
    ripple: float = 0.0,
) -> StepMetrics:
    """Measure one transition on a simulated trace.

    The transition starts at the first cycle that begins at or after
    ``t_step`` (default: the start of the trace) and ends at ``t_end``.
    ``ripple`` is the steady excursion of the continuous voltage above its
    sample at the final operating point, in volts.
    """
    recs = trace.records
    t0 = recs[0].t_start if t_step is None else t_step
    sel = [r for r in recs if r.t_start >= t0 - 1e-15 and (t_end is None or r.t_start < t_end)]
    dv = V_e2 - V_e1
    if not sel or dv == 0:
        return StepMetrics(0.0, 0.0, 0.0, 0.0, 0, 0.0, True)
    up = dv > 0
    pick = max if up else min
    v_s = np.array([r.v_sample for r in sel])
    i_x = np.array([r.i_extreme for r in sel])
    sigma_d_v = _overshoot(pick(v_s), V_e2, V_e1)
    sigma_d_i = _overshoot(pick(i_x), I_e2, I_e1) if I_e2 != I_e1 else 0.0

    v_cont = pick(r.v_max if up else r.v_min for r in sel)
    sigma_raw = _overshoot(v_cont, V_e2, V_e1)
    sigma_net = _overshoot(v_cont - (ripple if up else -ripple), V_e2, V_e1)
    sigma_t_v = max(sigma_net, sigma_d_v)
    max_dev = max(max(abs(r.v_max - V_e2), abs(r.v_min - V_e2)) for r in sel)

    outside = np.abs(v_s - V_e2) > band * abs(dv)
    if not outside.any():
        n_t = 0
    else:
        n_t = int(np.nonzero(outside)[0][-1]) + 1
    settled = n_t < len(sel)
    if settled:
        T_t = sel[n_t].t_start - sel[0].t_start
    else:
        n_t = len(sel)
        T_t = sel[-1].t_event - sel[0].t_start

    if trace.t.size > 1:
        m = (trace.t >= sel[0].t_start) & (trace.t <= sel[-1].t_event)
        tt, vv = trace.t[m], trace.v[m]
    else:
        tt = np.array([r.t_sample for r in sel])
        vv = v_s
    t10 = _crossing_time(tt, vv, V_e1 + 0.1 * dv, up)
    t90 = _crossing_time(tt, vv, V_e1 + 0.9 * dv, up)
    return StepMetrics(
        rise_time_10_90=float(t90 - t10),
        sigma_t_v=float(sigma_t_v),
        sigma_d_v=float(sigma_d_v),
        sigma_d_i=float(sigma_d_i),
        N_t=n_t,
        T_t=float(T_t),
        settled=bool(settled),
        sigma_t_v_raw=float(sigma_raw),
        max_deviation=float(max_dev),
    )


def _require_boost(params: CircuitParams) -> None:
    if params.topology is not Topology.BOOST:
        raise TopologyError("this bound is stated for the constant off-time boost converter")


def settling_time_bound(
    metrics: StepMetrics,
    params: CircuitParams,
    V_e1: float,
    V_e2: float,
    I_e1: float,
    I_e2: float,
    *,
    period_reference: str = "final",
) -> tuple[float, bool]:
    """Bound T_t <= rho N_t + gamma on the settling time of a boost step.

    rho = T1 + (V_e2 - V_e1)/V_in T_off sigma_d_v and gamma = L/V_in (I_e2 - I_e1).
    ``period_reference`` selects the operating point that sets
    T1 = V_ref/V_in T_off: ``"final"`` (V_e2, which bounds the summed sampled
    voltages for steps up) or ``"initial"`` (V_e1).
    """
    _require_boost(params)
    if period_reference == "final":
        v_ref = V_e2
    elif period_reference == "initial":
        v_ref = V_e1
    else:
        raise ParameterError(f"unknown period_reference {period_reference!r}")
    t_off = params.fixed_time
    t1 = v_ref / params.v_in * t_off
    rho = t1 + (V_e2 - V_e1) / params.v_in * t_off * metrics.sigma_d_v
    gamma = params.inductance / params.v_in * (I_e2 - I_e1)
    bound = rho * metrics.N_t + gamma
    return bound, bool(metrics.T_t <= bound)


def overshoot_bound(metrics: StepMetrics, params: CircuitParams, tol: float = 1e-12) -> tuple[float, bool]:
    """Continuous overshoot bound from the sampled voltage and current overshoots."""
    _require_boost(params)
    ac = (1.0 - params.lam) * params.fixed_time / params.rc
    bound = (1.0 - ac) * metrics.sigma_d_v + ac * metrics.sigma_d_i
    return bound, bool(metrics.sigma_t_v <= bound + tol)


@dataclass(frozen=True)
class GasCertificate:
    """Small-gain certificate for the current loop in large signal.

    ``margins`` maps each checked inequality to its slack (positive = holds).
    """

    gamma_v_to_i: float
    gamma_i_to_v: float
    case_branch: Optional[str]
    stable: bool
    margins: dict = field(default_factory=dict)
    periods: dict = field(default_factory=dict)

    @property
    def loop_gain(self) -> float:
        return self.gamma_v_to_i * self.gamma_i_to_v


def buck_gas_certificate(
    params: CircuitParams, g_ab: float, T_off_min: float, T_off_max: float, v_out: float
) -> GasCertificate:
    """Large-signal certificate for the constant on-time buck.

    ``g_ab`` is the gain of the current block for its sector bounds and is
    supplied by the caller.
    """
    if params.topology is not Topology.BUCK:
        raise TopologyError("buck certificate requires the buck topology")
    if not (g_ab >= 0 and 0 < T_off_min <= T_off_max):
        raise ParameterError("need g_ab >= 0 and 0 < T_off_min <= T_off_max")
    t_on = params.fixed_time
    r, l = params.load_resistance, params.inductance
    tau1, tau2 = params.rc, l / r
    t_ss = params.ideal_period(v_out)
    t_max, t_min = t_on + T_off_max, t_on + T_off_min
    g_vi = t_ss / l * g_ab
    g_iv = r / (1.0 + t_on / (2.0 * tau2)) * t_max / t_min
    g_limit = (tau2 + t_on / 2.0) * t_min / t_max / t_ss
    margins = {
        "g_threshold": g_limit - g_ab,
        "rc_period": tau1 - t_max * (1.0 + t_on / (2.0 * tau2)),
    }
    stable = all(m > 0 for m in margins.values())
    return GasCertificate(
        g_vi, g_iv, None, stable, margins, {"T_s_ss": t_ss, "T_s_max": t_max, "T_s_min": t_min}
    )


def boost_case_selector(params: CircuitParams, lam: float, T_on_max: float, v_out: float) -> float:
    """Sign of this expression picks the branch of the boost certificate."""
    t_off = params.fixed_time
    r, l, c = params.load_resistance, params.inductance, params.capacitance
    t_ss = params.ideal_period(v_out)
    t_max = t_off + T_on_max
    q = v_out * l / (params.v_in * r)
    return ((1 - lam) * t_off + q) * (1 - t_ss / (r * c) - t_max / (r * c) - t_off**2 / (2 * l * c)) + (
        lam * t_off - q
    )


def boost_gas_certificate(
    params: CircuitParams,
    g_ab: float,
    lam: float,
    T_on_min: float,
    T_on_max: float,
    v_out: float,
) -> GasCertificate:
    """Large-signal certificate for the constant off-time boost.

    Branch i applies its gain threshold as published. Branch ii uses the
    threshold divided by T_off, which makes it dimensionless and equal to
    the small-gain product condition of the two branch-ii gain bounds.
    """
    if params.topology is not Topology.BOOST:
        raise TopologyError("boost certificate requires the boost topology")
    if not (g_ab >= 0 and 0 < T_on_min <= T_on_max and 0 <= lam <= 1):
        raise ParameterError("need g_ab >= 0, 0 < T_on_min <= T_on_max and 0 <= lam <= 1")
    t_off = params.fixed_time
    r, l = params.load_resistance, params.inductance
    tau1, tau2 = params.rc, l / r
    ratio = v_out / params.v_in
    t_ss = params.ideal_period(v_out)
    t_max, t_min = t_off + T_on_max, t_off + T_on_min
    g_vi = t_off / l * g_ab
    sel = boost_case_selector(params, lam, T_on_max, v_out)
    margins = {"case_selector": sel}
    if sel >= 0:
        branch = "i"
        g_iv = r / ((t_ss + t_min) / t_off + t_off / (2 * tau2))
        g_limit = 0.5 + tau2 * (t_ss + t_min) / (t_ss * t_off)
    else:
        branch = "ii"
        den = 2 * tau1 - t_ss - t_max - t_off**2 / (2 * tau2)
        a_max = 2 * tau2 * (t_max + t_ss) + t_off**2
        a_min = 2 * tau2 * (t_min + t_ss) + t_off**2
        num = 2 * tau2 * ratio + (1 - 2 * lam) * t_off
        margins["rc_period"] = den
        g_iv = a_max / a_min * num / den * r if den > 0 else math.inf
        g_limit = a_min / a_max * den / (2 * ratio + (1 - 2 * lam) * t_off / tau2) / t_off
    margins["g_threshold"] = g_limit - g_ab
    stable = margins["g_threshold"] >= 0 and margins.get("rc_period", 1.0) > 0
    return GasCertificate(
        g_vi, g_iv, branch, bool(stable), margins, {"T_s_ss": t_ss, "T_s_max": t_max, "T_s_min": t_min}
    )


@dataclass(frozen=True)
class SectorBound:
    lambda_ub: float
    K_lb: float
    K_ub: float


def sector_bounds(f_ub: float, A_ub: float, G0: float) -> SectorBound:
    """Sector bounds on the command-to-peak mapping under bandlimited interference.

    The interference slope is bounded by 4 pi f_ub A_ub.
    """
    if f_ub < 0 or A_ub < 0 or G0 < 0:
        raise ParameterError("f_ub, A_ub and G0 must be non-negative")
    lam = 4.0 * math.pi * f_ub * A_ub
    x = lam * G0
    if x >= 1.0:
        raise UnboundedSector(f"interference slope times G0 = {x:.4g} >= 1")
    return SectorBound(lam, 1.0 / (1.0 + x), 1.0 / (1.0 - x))


@dataclass(frozen=True)
class MonotonicityResult:
    monotonic: bool
    interval: Optional[tuple[float, float]] = None

    def __bool__(self) -> bool:
        return self.monotonic


def sensor_monotonicity(samples: Sequence[tuple[float, float]]) -> MonotonicityResult:
    """Strict increase of a sampled current-sensor waveform.

    Returns the first offending (t_i, t_{i+1}) interval when the values fail
    to increase.
    """
    arr = np.asarray(samples, dtype=float).reshape(-1, 2)
    if len(arr) < 2:
        return MonotonicityResult(True)
    dt = np.diff(arr[:, 0])
    if np.any(dt == 0):
        raise ParameterError("duplicate timestamps in sensor samples")
    if np.any(dt < 0):
        raise ParameterError("sensor samples must be sorted by time")
    bad = np.nonzero(np.diff(arr[:, 1]) <= 0)[0]
    if len(bad) == 0:
        return MonotonicityResult(True)
    j = int(bad[0])
    return MonotonicityResult(False, (float(arr[j, 0]), float(arr[j + 1, 0])))
