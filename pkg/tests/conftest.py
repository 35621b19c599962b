import math

import numpy as np
import pytest

from fivess.converter import CircuitParams


def table2_boost(**kw) -> CircuitParams:
    base = dict(topology="boost", v_in=12.0, inductance=6.8e-6, capacitance=1e-6,
                load_resistance=40.0**2 / 16.0, fixed_time=200e-9)
    base.update(kw)
    return CircuitParams(**base)


def table1_buck(**kw) -> CircuitParams:
    base = dict(topology="buck", v_in=8.0, inductance=200e-9, capacitance=200e-6,
                load_resistance=1.8**2 / 20.0, fixed_time=100e-9)
    base.update(kw)
    return CircuitParams(**base)


def _ccm_margin(params: CircuitParams, v_out: float) -> float:
    """Ratio of the current extreme's distance from zero to the ripple."""
    vin, L, R, T = params.v_in, params.inductance, params.load_resistance, params.fixed_time
    if params.topology.value == "boost":
        ripple = (v_out - vin) / L * T
        i_avg = v_out * v_out / (R * vin)
    else:
        ripple = (vin - v_out) / L * T
        i_avg = v_out / R
    return (i_avg - ripple / 2.0) / ripple


def random_ccm_boost(rng: np.random.Generator) -> tuple[CircuitParams, float]:
    while True:
        vin = rng.uniform(5.0, 24.0)
        v_out = vin * rng.uniform(1.3, 3.5)
        T = rng.uniform(100e-9, 400e-9)
        C = rng.uniform(1e-6, 20e-6)
        p = CircuitParams("boost", vin, rng.uniform(2e-6, 20e-6), C, rng.uniform(max(40 * T / C, 20.0), 400.0), T,
                          lam=rng.uniform(0.2, 0.8))
        if _ccm_margin(p, v_out) > 0.5:
            return p, v_out


def random_ccm_buck(rng: np.random.Generator) -> tuple[CircuitParams, float]:
    while True:
        vin = rng.uniform(5.0, 24.0)
        v_out = vin * rng.uniform(0.15, 0.8)
        T = rng.uniform(50e-9, 400e-9)
        C = rng.uniform(20e-6, 500e-6)
        p = CircuitParams("buck", vin, rng.uniform(0.2e-6, 5e-6), C, rng.uniform(max(40 * T / C, 0.1), 5.0), T,
                          lam=rng.uniform(0.2, 0.8))
        if _ccm_margin(p, v_out) > 0.5:
            return p, v_out


@pytest.fixture
def boost():
    return table2_boost()


@pytest.fixture
def buck():
    return table1_buck()


# Hand evaluation of the four design rows at ten fixed slope/interference triples.
TABLE_FIXTURES = [
    ("const_off_time", 2e6, 1e6, 5e5, 4.0 / math.log(3.0), 1 / 3),
    ("const_off_time", 4e6, 1e6, 1e6, 4.0 / math.log(3.0), 1 / 3),
    ("const_on_time", 1e6, 3e6, 6e5, 4.0 / math.log(4.0), 0.25),
    ("const_on_time", 1e6, 2e6, 0.0, 1.0, 0.0),
    ("fixed_freq_peak", 3e6, 1e6, 0.0, 4.0 / math.log(3.0), 0.0),
    ("fixed_freq_peak", 3e6, 1e6, 5e5, 4.0 / abs(math.log(0.6)), (-1 / 3 + 0.6) / (1 + 1 / 3)),
    ("fixed_freq_peak", 5e6, 1e6, 1e6, 4.0 / abs(math.log(0.5)), (-0.2 + 0.5) / 1.2),
    ("fixed_freq_valley", 1e6, 3e6, 5e5, 4.0 / abs(math.log(0.6)), (-1 / 3 + 0.6) / (1 + 1 / 3)),
    ("fixed_freq_valley", 1e6, 4e6, 0.0, 4.0 / math.log(4.0), 0.0),
    ("const_off_time", 1e6, 5e6, 2.5e5, 4.0 / math.log(3.0), 1 / 3),
]
