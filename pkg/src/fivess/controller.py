"""Cycle-synchronous PI compensation and current-loop design equations.

The compensator K(z) = k (1 - z_k z^-1) / (1 - p_k z^-1) runs once per
switching cycle on the voltage error and outputs the absolute current
command. Closed-loop poles of the compensator in series with a
:class:`~fivess.model.PlantCoefficients` plant are the roots of a cubic.
"""

from __future__ import annotations

import cmath
import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .converter import CycleRecord
from .errors import InfeasibleDesign, ParameterError
from .model import PlantCoefficients


@dataclass
class S2PiController:
    """Compensator u[n] = p_k u[n-1] + k (e[n] - z_k e[n-1]) with output clamping.

    The instance carries its one-sample memory (``u_prev``, ``e_prev``) and
    is therefore owned by a single control loop.
    """

    k: float
    z_k: float
    p_k: float = 1.0
    u_prev: float = 0.0
    e_prev: float = 0.0
    command_limits: tuple[float, float] = (-math.inf, math.inf)
    saturated: bool = False
    saturation_count: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.command_limits
        if not lo <= hi:
            raise ParameterError("command_limits must satisfy min <= max")

    def step(self, error: float) -> float:
        """One update; returns the (clamped) command."""
        lo, hi = self.command_limits
        u_raw = self.p_k * self.u_prev + self.k * (error - self.z_k * self.e_prev)
        u = min(max(u_raw, lo), hi)
        self.saturated = u != u_raw
        if self.saturated:
            self.saturation_count += 1
            # Conditional integration: keep the stored state at the limit so
            # the integrator cannot wind up beyond it.
        self.u_prev = u
        self.e_prev = error
        return u

    def reset(self, u_prev: float, e_prev: float = 0.0) -> None:
        """Seed the one-sample memory, e.g. for bumpless start-up."""
        self.u_prev = float(u_prev)
        self.e_prev = float(e_prev)
        self.saturated = False

    def copy(self) -> "S2PiController":
        return S2PiController(
            self.k, self.z_k, self.p_k, self.u_prev, self.e_prev, self.command_limits
        )


def s2pi_step(ctrl: S2PiController, error: float) -> float:
    """Functional alias of :meth:`S2PiController.step`."""
    return ctrl.step(error)


class VoltageLoop:
    """Command source that regulates the sampled voltage to a reference.

    ``reference`` is either a constant or a callable of the cycle index.
    """

    def __init__(self, ctrl: S2PiController, reference):
        self.ctrl = ctrl
        self.reference = reference
        self.commands: list[float] = []

    def target(self, n: int) -> float:
        return self.reference(n) if callable(self.reference) else float(self.reference)

    def __call__(self, v_sample: float, history: Sequence[CycleRecord]) -> float:
        u = self.ctrl.step(self.target(len(history)) - v_sample)
        self.commands.append(u)
        return u


def characteristic_polynomial(plant: PlantCoefficients, ctrl: S2PiController) -> np.ndarray:
    """Coefficients (highest power first) of the closed-loop cubic in z.

    z (z - a1)(z - p_k) + k g1 (z - b1)(z - z_k), written through the raw
    recursion coefficients so that plants with an infinite zero still work.
    """
    a1, p = plant.gamma_v, ctrl.p_k
    kg = ctrl.k * plant.gamma_i
    kh = ctrl.k * plant.gamma_im1  # equals -k g1 b1
    zk = ctrl.z_k
    return np.array(
        [
            1.0,
            -(a1 + p) + kg,
            a1 * p - kg * zk + kh,
            -kh * zk,
        ]
    )


def _cubic_roots(c: np.ndarray) -> np.ndarray:
    """Roots of a monic cubic by Cardano's formula, polished by Newton steps."""
    _, a, b, d = (float(x) for x in c)
    if d == 0.0:
        disc = a * a - 4.0 * b
        sq = cmath.sqrt(disc)
        # Numerically stable quadratic roots.
        q = -0.5 * (a + (sq if a.real >= 0 else -sq))
        r1 = q if q != 0 else 0.0
        r2 = b / q if q != 0 else 0.0
        roots = np.array([0.0, r1, r2], dtype=complex)
    else:
        shift = a / 3.0
        p = b - a * a / 3.0
        q = 2.0 * a**3 / 27.0 - a * b / 3.0 + d
        disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
        sq = cmath.sqrt(disc)
        w = -q / 2.0 + sq if abs(-q / 2.0 + sq) >= abs(-q / 2.0 - sq) else -q / 2.0 - sq
        if w == 0:
            roots = np.full(3, -shift, dtype=complex)
        else:
            u = w ** (1.0 / 3.0)
            omega = complex(-0.5, math.sqrt(3.0) / 2.0)
            roots = []
            for m in range(3):
                um = u * omega**m
                roots.append(um - p / (3.0 * um) - shift)
            roots = np.array(roots, dtype=complex)

    def poly(z):
        return ((z + a) * z + b) * z + d

    def dpoly(z):
        return (3.0 * z + 2.0 * a) * z + b

    for idx in range(3):
        z = roots[idx]
        for _ in range(3):
            dz = dpoly(z)
            if dz == 0:
                break
            with np.errstate(all="ignore"):
                z_new = z - poly(z) / dz
            if not cmath.isfinite(z_new) or not abs(poly(z_new)) < abs(poly(z)):
                break
            z = z_new
        roots[idx] = z
    # Real polynomial: snap roots whose imaginary part is rounding noise.
    scale = max(1.0, float(np.max(np.abs(roots))))
    roots = np.where(np.abs(roots.imag) < 1e-13 * scale, roots.real + 0j, roots)
    return roots


def closed_loop_poles(plant: PlantCoefficients, ctrl: S2PiController) -> np.ndarray:
    """The three closed-loop poles of compensator and plant."""
    return _cubic_roots(characteristic_polynomial(plant, ctrl))


def dominant_radius(plant: PlantCoefficients, ctrl: S2PiController) -> float:
    return float(np.max(np.abs(closed_loop_poles(plant, ctrl))))


def closed_loop_step(
    plant: PlantCoefficients, k: float, z_k: float, p_k: float, n_cycles: int
) -> np.ndarray:
    """Sampled-voltage response of the linear loop to a unit reference step.

    The reference steps at cycle 0; element n is the sample of cycle n.
    """
    return _closed_loop_step_batch(plant, np.array([k]), z_k, p_k, n_cycles)[:, 0]


def _closed_loop_step_batch(
    plant: PlantCoefficients, ks: np.ndarray, z_k: float, p_k: float, n_cycles: int
) -> np.ndarray:
    gv, gi, gim1 = plant.gamma_v, plant.gamma_i, plant.gamma_im1
    m = len(ks)
    y = np.zeros((n_cycles, m))
    v = np.zeros(m)
    u_prev = np.zeros(m)
    u_prev2 = np.zeros(m)
    e_prev = np.zeros(m)
    for n in range(n_cycles):
        y[n] = v
        e = 1.0 - v
        u = p_k * u_prev + ks * (e - z_k * e_prev)
        v = gv * v + gi * u + gim1 * u_prev
        u_prev, e_prev = u, e
    return y


def step_overshoot(response: np.ndarray, final: float = 1.0) -> float:
    """Relative excess of the response peak over its final value."""
    return float(np.max(response) / final - 1.0)


@dataclass(frozen=True)
class DesignSpec:
    """Search settings for :func:`design_s2pi`.

    ``gain_grid`` holds (min, max, points) of the logarithmic gain grid in
    units of 1/|g1|; ``zk_points`` sets the linear grid of the compensator
    zero over [a1 - zk_span, a1].

    ``objective`` selects what is minimised: ``"radius"`` ranks designs by
    their dominant closed-loop pole radius, ``"settling"`` by the number of
    cycles the discrete step response needs to stay inside ``settle_band``
    (dominant radius breaks ties). The second favours designs whose slow
    pole is nearly cancelled by the compensator zero.
    """

    max_overshoot: float = 0.0
    target_settling_cycles: Optional[float] = None
    gain_grid: tuple[float, float, int] = (1e-2, 1e4, 200)
    zk_points: int = 50
    zk_span: float = 0.1
    response_cycles: int = 200
    overshoot_tol: float = 1e-9
    objective: str = "radius"
    settle_band: float = 0.02

    def __post_init__(self) -> None:
        if self.objective not in ("radius", "settling"):
            raise ParameterError(f"unknown design objective {self.objective!r}")
        if not self.max_overshoot >= 0:
            raise ParameterError("max_overshoot must be >= 0")


@dataclass(frozen=True)
class DesignCandidate:
    k: float
    z_k: float
    radius: float
    overshoot: float
    settling_cycles: int = 0


def _settling_index(resp: np.ndarray, band: float) -> np.ndarray:
    """First index after which each column stays within +/- band of 1."""
    outside = np.abs(resp - 1.0) > band
    n = resp.shape[0]
    # Last outside index per column; settled right after it.
    rev = outside[::-1]
    any_out = rev.any(axis=0)
    last = n - 1 - np.argmax(rev, axis=0)
    return np.where(any_out, last + 1, 0)


def _response_length(radius: float, minimum: int) -> int:
    if radius <= 0:
        return minimum
    # Long enough for the slowest mode to decay by e^-12.
    return int(min(20000, max(minimum, math.ceil(12.0 / -math.log(radius)))))


def _grid_candidates(plant: PlantCoefficients, spec: DesignSpec) -> list[DesignCandidate]:
    """Every stable grid point with its discrete step metrics."""
    if not abs(plant.a1) < 1:
        raise ParameterError("design needs an open-loop stable plant (|a1| < 1)")
    if plant.gamma_i == 0 and plant.gamma_im1 == 0:
        raise ParameterError("plant has zero gain")
    # Loop sign: the integral action must oppose the error through the DC gain.
    sign = 1.0 if plant.dc_gain > 0 else -1.0
    g_scale = abs(plant.g1) if plant.g1 != 0 else abs(plant.gamma_im1)
    lo, hi, npts = spec.gain_grid
    ks = sign * np.logspace(math.log10(lo), math.log10(hi), int(npts)) / g_scale
    # The endpoint z_k = a1 (exact cancellation) is the only overshoot-free choice for
    # some plants, so the grid is closed on the right.
    zks = plant.a1 - spec.zk_span + spec.zk_span * np.arange(spec.zk_points + 1) / spec.zk_points

    out: list[DesignCandidate] = []
    for z_k in zks:
        radii = np.empty(len(ks))
        for j, k in enumerate(ks):
            radii[j] = np.max(np.abs(closed_loop_poles(plant, S2PiController(k, z_k))))
        idx = np.nonzero(radii < 1.0)[0]
        if len(idx) == 0:
            continue
        n_resp = _response_length(float(np.max(radii[idx])), spec.response_cycles)
        resp = _closed_loop_step_batch(plant, ks[idx], z_k, 1.0, n_resp)
        overshoots = resp.max(axis=0) - 1.0
        settle = _settling_index(resp, spec.settle_band)
        for j, os_, ns in zip(idx, overshoots, settle):
            out.append(DesignCandidate(float(ks[j]), float(z_k), float(radii[j]), float(os_), int(ns)))
    return out


def _sort_key(c: DesignCandidate, objective: str) -> tuple:
    key = (round(c.radius, 12), abs(c.k), -c.z_k)
    return ((c.settling_cycles,) + key) if objective == "settling" else key


def design_candidates(plant: PlantCoefficients, spec: DesignSpec = DesignSpec()) -> list[DesignCandidate]:
    """Grid designs meeting the overshoot constraint, best first.

    The ordering is the one :func:`design_s2pi` uses to pick its result.
    """
    cands = [
        c for c in _grid_candidates(plant, spec) if c.overshoot <= spec.max_overshoot + spec.overshoot_tol
    ]
    cands.sort(key=lambda c: _sort_key(c, spec.objective))
    return cands


def design_s2pi(plant: PlantCoefficients, spec: DesignSpec = DesignSpec()) -> S2PiController:
    """Exhaustive grid search for the compensator zero and gain.

    The compensator pole is fixed at 1. Among grid points whose closed-loop
    poles lie inside the unit disk and whose discrete step overshoot stays
    within ``spec.max_overshoot``, the one with the smallest dominant pole
    radius wins; ties go to the smaller gain, then to the larger zero.
    """
    every = _grid_candidates(plant, spec)
    ok = [c for c in every if c.overshoot <= spec.max_overshoot + spec.overshoot_tol]
    if not ok:
        best_any = min(every, key=lambda c: _sort_key(c, spec.objective)) if every else None
        raise InfeasibleDesign("no grid point meets the overshoot constraint", best=best_any)
    best = min(ok, key=lambda c: _sort_key(c, spec.objective))
    if spec.target_settling_cycles is not None:
        cycles = 4.0 / -math.log(best.radius) if best.radius > 0 else 0.0
        if cycles > spec.target_settling_cycles:
            raise InfeasibleDesign(
                f"best design needs {cycles:.1f} cycles, above the target {spec.target_settling_cycles}",
                best=best,
            )
    return S2PiController(k=best.k, z_k=best.z_k, p_k=1.0)


class ConverterType(str, enum.Enum):
    CONST_OFF_TIME = "const_off_time"
    CONST_ON_TIME = "const_on_time"
    FIXED_FREQ_PEAK = "fixed_freq_peak"
    FIXED_FREQ_VALLEY = "fixed_freq_valley"


@dataclass(frozen=True)
class CurrentLoopDesign:
    converter_type: ConverterType
    stable: bool
    a_min: float
    a_max: float
    b: float
    N_w: float
    O_w: float
    deadbeat: bool


def settling_cycles_Nw(a_min: float, a_max: float) -> float:
    """Worst-case settling cycles max(|4/ln|a_min||, |4/ln|a_max||).

    A pole at zero contributes nothing; both poles at zero is the deadbeat
    case and counts as one cycle. Any |a| >= 1 gives infinity.
    """
    mags = [abs(a_min), abs(a_max)]
    if any(m >= 1.0 or math.isnan(m) for m in mags):
        return math.inf
    if all(m == 0.0 for m in mags):
        return 1.0
    return max(abs(4.0 / math.log(m)) if m > 0 else 0.0 for m in mags)


def worst_overshoot_Ow(a_min: float, b: float) -> float:
    """Worst-case overshoot max((b - a_min)/(1 - b), 0) of a one-pole-one-zero loop."""
    if not b < 1.0:
        raise ParameterError(f"zero b must be < 1, got {b!r}")
    return max((b - a_min) / (1.0 - b), 0.0)


def _safe_div(num: float, den: float) -> float:
    if den == 0.0:
        return math.nan if num == 0.0 else math.copysign(math.inf, num)
    return num / den


def current_loop_design(
    converter_type: ConverterType, m1: float, m2: float, lambda_ub: float
) -> CurrentLoopDesign:
    """Stability criterion and worst-case metrics of an inner current loop.

    ``m1`` and ``m2`` are the rising and falling current slopes (A/s) and
    ``lambda_ub`` bounds the slope of the sensor interference.
    """
    converter_type = ConverterType(converter_type)
    if not (m1 > 0 and m2 > 0):
        raise ParameterError("slopes m1 and m2 must be positive")
    if not lambda_ub >= 0:
        raise ParameterError("lambda_ub must be >= 0")
    lam = lambda_ub
    if converter_type in (ConverterType.CONST_OFF_TIME, ConverterType.CONST_ON_TIME):
        m = m1 if converter_type is ConverterType.CONST_OFF_TIME else m2
        stable = lam <= m / 2.0
        a_min = 1.0 - _safe_div(m, m - lam)
        a_max = 1.0 - _safe_div(m, m + lam)
        b = 0.0
    else:
        if converter_type is ConverterType.FIXED_FREQ_VALLEY:
            m1, m2 = m2, m1
        stable = lam <= (m1 - m2) / 2.0
        a_min = _safe_div(-lam - m2, m1 - lam)
        a_max = _safe_div(lam - m2, m1 + lam)
        b = -m2 / m1
    N_w = settling_cycles_Nw(a_min, a_max)
    O_w = worst_overshoot_Ow(a_min, b) if not math.isnan(a_min) else math.nan
    return CurrentLoopDesign(
        converter_type=converter_type,
        stable=bool(stable),
        a_min=a_min,
        a_max=a_max,
        b=b,
        N_w=N_w,
        O_w=O_w,
        deadbeat=a_min == 0.0 and a_max == 0.0,
    )
