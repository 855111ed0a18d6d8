import math

import numpy as np
import pytest

from simulator.core_model import K_B, AxisParams, NoiseSpec, ProtocolSpec, thermal_like_state
from utils import DEFAULT_CONFIG

MASS = 1.95e-18
TWO_PI = 2 * math.pi

# z axis: inverted electrostatic potential
OMEGA_Z = TWO_PI * 43.5e3
DARK_Z = TWO_PI * 1.4e3
SIGMA0_Z = 45.6e-12
HEATING_Z = 5.91 * K_B

# u axis: frequency jump into the Paul trap
OMEGA_U = TWO_PI * 185e3
DARK_U = TWO_PI * 2.7e3
SIGMA0_U = 183e-12
HEATING_U = 8.47 * K_B

RF_FREQUENCY = TWO_PI * 25e3


@pytest.fixture
def z_axis() -> AxisParams:
    return AxisParams(axis_label="z", trap_frequency=OMEGA_Z, dark_frequency=DARK_Z, potential_kind="inverted")


@pytest.fixture
def z_noise() -> NoiseSpec:
    return NoiseSpec.from_heating_rate(HEATING_Z, OMEGA_Z)


@pytest.fixture
def z_initial():
    return thermal_like_state(SIGMA0_Z, OMEGA_Z, MASS)


@pytest.fixture
def u_axis() -> AxisParams:
    return AxisParams(axis_label="u", trap_frequency=OMEGA_U, dark_frequency=DARK_U, potential_kind="harmonic_jump")


@pytest.fixture
def u_noise() -> NoiseSpec:
    return NoiseSpec.from_heating_rate(HEATING_U, OMEGA_U)


@pytest.fixture
def u_initial():
    return thermal_like_state(SIGMA0_U, OMEGA_U, MASS)


@pytest.fixture
def ideal_protocol() -> ProtocolSpec:
    """Readout of the true phase-space point (no retrap record, no broadening)."""
    return ProtocolSpec(measure_window=0.0, shots_per_release=400)


@pytest.fixture
def nominal_config_path() -> str:
    return DEFAULT_CONFIG


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)
