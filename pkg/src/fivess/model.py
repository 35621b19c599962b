"""Linearized cycle-synchronous plant models.

The small-signal plant relates the per-cycle voltage sample v[n] to the
current command (peak for the boost, valley for the buck) through

    v[n+1] = gamma_v v[n] + gamma_i i[n] + gamma_im1 i[n-1],

or equivalently g1 (1 - b1 z^-1) z^-1 / (1 - a1 z^-1). This module provides
the closed-form coefficients, a simulator-based linearization used to check
them, the difference-equation step response, the model error metric and the
reconstruction of a continuous trajectory from a sampled sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .converter import (
    CircuitParams,
    ContinuousState,
    CycleRecord,
    Termination,
    Topology,
    Trace,
    find_equilibrium,
    simulate,
    transition_matrices,
)
from .errors import DegenerateParameters, NonlinearityError, ParameterError, TopologyError


@dataclass(frozen=True)
class OperatingPoint:
    """Steady state of a converter at output voltage ``V_out``."""

    V_out: float
    I_extreme: float
    t_controlled_ss: float
    T_s_ss: float

    @classmethod
    def ideal(cls, params: CircuitParams, v_out: float) -> "OperatingPoint":
        """Lossless operating point with the current extreme from power balance."""
        _check_ccm(params, v_out)
        t_ctrl = params.ideal_controlled_time(v_out)
        vin, L, R = params.v_in, params.inductance, params.load_resistance
        if params.topology is Topology.BOOST:
            ripple = (v_out - vin) / L * params.fixed_time
            i_ext = v_out * v_out / (R * vin) + ripple / 2.0
        else:
            ripple = (vin - v_out) / L * params.fixed_time
            i_ext = v_out / R - ripple / 2.0
        return cls(v_out, i_ext, t_ctrl, params.fixed_time + t_ctrl)

    @classmethod
    def simulated(cls, params: CircuitParams, v_out: float) -> "OperatingPoint":
        """Operating point read from the simulator's periodic orbit."""
        _check_ccm(params, v_out)
        eq = find_equilibrium(params, v_out)
        return cls(v_out, eq.command, eq.controlled_duration, eq.period)


def _check_ccm(params: CircuitParams, v_out: float) -> None:
    if params.topology is Topology.BOOST and not v_out > params.v_in:
        raise TopologyError(f"boost operating point needs V_out > V_in, got {v_out!r} V")
    if params.topology is Topology.BUCK and not 0.0 < v_out < params.v_in:
        raise TopologyError(f"buck operating point needs 0 < V_out < V_in, got {v_out!r} V")


@dataclass(frozen=True)
class PlantCoefficients:
    """Small-signal plant g1 (1 - b1 z^-1) z^-1 / (1 - a1 z^-1)."""

    a1: float
    b1: float
    g1: float
    gamma_v: float
    gamma_i: float
    gamma_im1: float
    tau1_hat: Optional[float] = None
    tau2_hat: Optional[float] = None
    tau3_hat: Optional[float] = None
    M_r: Optional[float] = None
    d1: Optional[float] = None
    d2: Optional[float] = None
    singular_zero: bool = False

    @classmethod
    def from_gammas(cls, gamma_v: float, gamma_i: float, gamma_im1: float, **extra) -> "PlantCoefficients":
        singular = gamma_i == 0.0
        b1 = math.inf if singular else -gamma_im1 / gamma_i
        return cls(gamma_v, b1, gamma_i, gamma_v, gamma_i, gamma_im1, singular_zero=singular, **extra)

    @classmethod
    def from_transfer(cls, g1: float, b1: float, a1: float) -> "PlantCoefficients":
        return cls(a1, b1, g1, a1, g1, -g1 * b1)

    @property
    def dc_gain(self) -> float:
        """Steady voltage change per ampere of command change."""
        return (self.gamma_i + self.gamma_im1) / (1.0 - self.gamma_v)


# Plant fixture of the buck design example (gain 0.0023, zero -1.4390, pole 0.9739).
BUCK_DESIGN_EXAMPLE = PlantCoefficients.from_transfer(g1=0.0023, b1=-1.4390, a1=0.9739)


def buck_plant(params: CircuitParams, op: Union[OperatingPoint, float]) -> PlantCoefficients:
    """Closed-form plant of the constant on-time valley-controlled buck."""
    if params.topology is not Topology.BUCK:
        raise TopologyError("buck_plant needs buck parameters")
    v_out = op.V_out if isinstance(op, OperatingPoint) else float(op)
    _check_ccm(params, v_out)
    R, L, C, lam = params.load_resistance, params.inductance, params.capacitance, params.lam
    t_on = params.fixed_time
    M_r = (params.v_in - v_out) / v_out
    tau1 = R * C / t_on
    tau2 = (L / R) / t_on
    a1 = 1.0 - (1.0 + M_r) / tau1 - ((1.0 + M_r) / 2.0) / (tau1 * tau2)
    gamma_i = R * (lam + M_r / 2.0) / tau1
    gamma_im1 = R * (1.0 - lam + M_r / 2.0) / tau1
    b1 = -(1.0 - lam + M_r / 2.0) / (lam + M_r / 2.0)
    return PlantCoefficients(
        a1=a1,
        b1=b1,
        g1=gamma_i,
        gamma_v=a1,
        gamma_i=gamma_i,
        gamma_im1=gamma_im1,
        tau1_hat=tau1,
        tau2_hat=tau2,
        M_r=M_r,
    )


def boost_plant(params: CircuitParams, op: Union[OperatingPoint, float]) -> PlantCoefficients:
    """Closed-form plant of the constant off-time peak-controlled boost."""
    if params.topology is not Topology.BOOST:
        raise TopologyError("boost_plant needs boost parameters")
    v_out = op.V_out if isinstance(op, OperatingPoint) else float(op)
    _check_ccm(params, v_out)
    R, L, C, lam = params.load_resistance, params.inductance, params.capacitance, params.lam
    t_off = params.fixed_time
    t_on = params.ideal_controlled_time(v_out)
    tau1 = R * C / t_off
    tau2 = (L / R) / t_off
    tau3 = R * C / t_on
    i1, i2, i3 = 1.0 / tau1, 1.0 / tau2, 1.0 / tau3
    a1 = 1.0 - 2.0 * (i1 + i3) - (lam**2 + (1.0 - lam) ** 2) / 2.0 * i1 * i2
    common = lam * i1 + lam**2 / 2.0 * i1 * i2 - 1.0
    d1 = common * (i1 + i3) - (
        1.0 + (1.0 - lam) * i1 - 2.0 * (i1 + i3) - lam**2 / 2.0 * i1 * i2
    ) * (1.0 - lam) * i1 * i2
    d2 = common * (i1 + i3) + lam * i1 * i2
    g1 = (lam * i1 - (1.0 - lam * i1 - lam**2 / 2.0 * i1 * i2) * (i1 + i3) / i2) * R
    singular = abs(d2) < 1e-12 * abs(d1)
    b1 = math.copysign(math.inf, d1 * d2) if singular else d1 / d2
    return PlantCoefficients(
        a1=a1,
        b1=b1,
        g1=g1,
        gamma_v=a1,
        gamma_i=g1,
        gamma_im1=-g1 * b1,
        tau1_hat=tau1,
        tau2_hat=tau2,
        tau3_hat=tau3,
        d1=d1,
        d2=d2,
        singular_zero=singular,
    )


def plant_for(params: CircuitParams, op: Union[OperatingPoint, float]) -> PlantCoefficients:
    """Closed-form plant for whichever topology ``params`` describes."""
    if params.topology is Topology.BOOST:
        return boost_plant(params, op)
    return buck_plant(params, op)


def fit_difference_equation(
    v: np.ndarray, i: np.ndarray, i_initial: float = 0.0, discard: int = 0
) -> tuple[np.ndarray, float]:
    """Least-squares fit of v[k+1] = gv v[k] + gi i[k] + gim1 i[k-1].

    ``v[k]`` is the sample of cycle k and ``i[k]`` the command (deviation)
    applied at the end of that cycle; ``i[-1]`` is ``i_initial``. Returns the
    coefficient vector and the residual 2-norm.
    """
    v = np.asarray(v, dtype=float)
    i = np.asarray(i, dtype=float)
    if v.shape != i.shape or v.ndim != 1:
        raise ParameterError("v and i must be 1-D arrays of equal length")
    i_prev = np.concatenate(([i_initial], i[:-1]))
    rows = np.arange(discard, len(v) - 1)
    if len(rows) < 3:
        raise ParameterError("need at least three usable cycles to fit")
    X = np.column_stack([v[rows], i[rows], i_prev[rows]])
    y = v[rows + 1]
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    residual = float(np.linalg.norm(X @ coef - y))
    return coef, residual


def numerical_linearization_oracle(
    params: CircuitParams,
    op: Union[OperatingPoint, float],
    delta: Optional[float] = None,
    n_cycles: int = 30,
    discard: int = 2,
    seed: int = 0,
) -> PlantCoefficients:
    """Plant coefficients identified from the exact simulator.

    The converter starts on its periodic orbit and the current command is
    perturbed by a seeded random sequence of +/- ``delta`` steps; the
    recursion is then fitted by least squares over ``n_cycles`` cycles after
    discarding the first ``discard``.
    """
    v_out = op.V_out if isinstance(op, OperatingPoint) else float(op)
    _check_ccm(params, v_out)
    if n_cycles - discard < 20:
        raise ParameterError("the fit window must cover at least 20 cycles")
    eq = find_equilibrium(params, v_out)
    i_e = eq.command
    if delta is None:
        delta = 1e-4 * abs(i_e)
    rng = np.random.default_rng(seed)
    pattern = rng.choice([-1.0, 1.0], size=n_cycles)
    commands = i_e + delta * pattern

    def source(v_sample: float, history: Sequence[CycleRecord]) -> float:
        return float(commands[len(history)])

    trace = simulate(params, eq.state, source, n_cycles, resolution=None)
    if trace.termination is Termination.CCM_VIOLATION:
        raise NonlinearityError(f"perturbation left CCM: {trace.message}")
    v_dev = trace.v_samples - eq.v_sample
    i_dev = trace.i_extremes - i_e
    coef, residual = fit_difference_equation(v_dev, i_dev, 0.0, discard)
    scale = float(np.linalg.norm(v_dev[discard + 1 :]))
    if residual > 1e-3 * scale:
        raise NonlinearityError(
            f"linear fit residual {residual:.3e} exceeds 1e-3 of the response norm {scale:.3e}"
        )
    return PlantCoefficients.from_gammas(*map(float, coef))


def model_step_response(coeffs: PlantCoefficients, command_sequence: Sequence[float]) -> np.ndarray:
    """Voltage deviations predicted by the recursion from rest.

    Element n is the sample of cycle n; ``command_sequence[n]`` is applied at
    the end of cycle n, so the first element is always zero.
    """
    u = np.asarray(command_sequence, dtype=float)
    v = np.zeros(len(u))
    u_prev = 0.0
    for n in range(len(u) - 1):
        v[n + 1] = coeffs.gamma_v * v[n] + coeffs.gamma_i * u[n] + coeffs.gamma_im1 * u_prev
        u_prev = u[n]
    return v


@dataclass(frozen=True)
class ModelErrorReport:
    e: np.ndarray  # percent of the step size, per cycle
    e_w: float  # worst-case |e| in percent


def model_error(
    model_seq: Sequence[float], sim_seq: Union[Trace, Sequence[float]], step_size: float
) -> ModelErrorReport:
    """Per-cycle model error as a percentage of the step size."""
    if step_size == 0:
        raise ParameterError("step_size must be non-zero")
    sim = sim_seq.v_samples if isinstance(sim_seq, Trace) else np.asarray(sim_seq, dtype=float)
    model = np.asarray(model_seq, dtype=float)
    if model.shape != sim.shape:
        raise ParameterError(f"sequences not aligned: {model.shape} vs {sim.shape}")
    e = (sim - model) / abs(step_size) * 100.0
    return ModelErrorReport(e=e, e_w=float(np.max(np.abs(e))) if len(e) else 0.0)


@dataclass(frozen=True)
class DiscreteStateSeq:
    """Sampled sequence u[n] = (v[n], i_extreme[n-1]).

    ``v[n]`` is sampled in cycle n and ``i_prev[n]`` is the current extreme
    that started that cycle. ``t0`` is the time of the first extreme.
    """

    v: np.ndarray
    i_prev: np.ndarray
    t0: float = 0.0

    def __post_init__(self) -> None:
        v = np.asarray(self.v, dtype=float)
        i = np.asarray(self.i_prev, dtype=float)
        if v.shape != i.shape or v.ndim != 1:
            raise ParameterError("v and i_prev must be 1-D arrays of equal length")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "i_prev", i)

    def __len__(self) -> int:
        return len(self.v)

    @classmethod
    def from_trace(cls, trace: Trace) -> "DiscreteStateSeq":
        recs = trace.records
        i_prev = [trace.initial_state.i_L] + [r.i_extreme for r in recs[:-1]]
        t0 = recs[0].t_start if recs else trace.initial_state.t
        return cls(np.array([r.v_sample for r in recs]), np.array(i_prev), t0)


def sampling_inverse(params: CircuitParams) -> tuple[np.ndarray, np.ndarray]:
    """Matrices (B, C) with x(extreme) = B u + C under the ripple-frozen model."""
    Phi, Gamma = transition_matrices(params, params.topology.fixed_phase, params.lam * params.fixed_time)
    phi_vv, phi_vi = Phi[0, 0], Phi[0, 1]
    if phi_vv == 0.0:
        raise DegenerateParameters("the voltage sampling map is not invertible (phi_vv = 0)")
    B = np.array([[1.0 / phi_vv, -phi_vi / phi_vv], [0.0, 1.0]])
    Cv = np.array([-Gamma[0] / phi_vv, 0.0])
    return B, Cv


def reconstruct_continuous(
    seq: DiscreteStateSeq, params: CircuitParams, resolution: int = 16
) -> Trace:
    """Continuous trajectory implied by a sampled sequence.

    Each cycle starts from the state recovered by inverting the sampling map,
    runs the fixed interval and then the controlled interval whose length
    takes the current to the next extreme, all under the ripple-frozen
    transition matrices. ``len(seq) - 1`` cycles are produced.
    """
    if len(seq) < 2:
        raise ParameterError("need at least two samples to reconstruct a cycle")
    topo = params.topology
    fixed, ctrl = topo.fixed_phase, topo.controlled_phase
    T = params.fixed_time
    lam_t = params.lam * T
    B, Cv = sampling_inverse(params)
    Phi_T, Gamma_T = transition_matrices(params, fixed, T)
    vin, L = params.v_in, params.inductance

    ts, xs, ss, cs = [], [], [], []
    records = []
    t = seq.t0
    x_first = None
    for n in range(len(seq) - 1):
        u = np.array([seq.v[n], seq.i_prev[n]])
        x0 = B @ u + Cv
        if x_first is None:
            x_first = x0
        x_mid = Phi_T @ x0 + Gamma_T
        i_next = seq.i_prev[n + 1]
        if topo is Topology.BOOST:
            dur = (i_next - x_mid[1]) * L / vin
        else:
            dur = (x_mid[1] - i_next) * L / x_mid[0]
        if not dur > 0:
            raise DegenerateParameters(f"cycle {n}: reconstructed controlled interval {dur!r} s is not positive")
        Phi_c, Gamma_c = transition_matrices(params, ctrl, dur)
        x_end = Phi_c @ x_mid + Gamma_c
        x_end[1] = i_next

        k_f = max(1, resolution)
        offs_f = np.union1d(np.arange(k_f) * (T / k_f), [lam_t])
        k_c = max(1, math.ceil(k_f * dur / T))
        offs_c = np.arange(k_c) * (dur / k_c)
        for off in offs_f:
            P, G = transition_matrices(params, fixed, off)
            xs.append(P @ x0 + G)
        for off in offs_c:
            P, G = transition_matrices(params, ctrl, off)
            xs.append(P @ x_mid + G)
        ts.extend(t + offs_f)
        ts.extend(t + T + offs_c)
        ss.extend([fixed] * len(offs_f) + [ctrl] * len(offs_c))
        cs.extend([n] * (len(offs_f) + len(offs_c)))

        P, G = transition_matrices(params, fixed, lam_t)
        v_s = float((P @ x0 + G)[0])
        seg = np.array(xs[-(len(offs_f) + len(offs_c)) :])
        records.append(
            CycleRecord(
                n=n,
                t_start=t,
                t_sample=t + lam_t,
                v_sample=v_s,
                t_event=t + T + dur,
                i_extreme=float(i_next),
                command=float(i_next),
                controlled_duration=float(dur),
                clamped=False,
                v_max=float(seg[:, 0].max()),
                v_min=float(seg[:, 0].min()),
                load_resistance=params.load_resistance,
            )
        )
        t = t + T + dur
        last = x_end

    ts.append(t)
    xs.append(last)
    ss.append(fixed)
    cs.append(len(seq) - 1)
    arr = np.array(xs)
    initial = ContinuousState(float(x_first[0]), float(x_first[1]), seq.t0)
    return Trace(
        t=np.array(ts),
        v=arr[:, 0].copy(),
        i_L=arr[:, 1].copy(),
        switch_state=np.array(ss, dtype=np.int8),
        cycle=np.array(cs, dtype=np.int64),
        records=tuple(records),
        termination=Termination.COMPLETED,
        initial_state=initial,
        final_state=ContinuousState(float(last[0]), float(last[1]), t),
    )
