"""
Shared physical quantities, state types and exceptions.

Everything in here is expressed in strict SI units (m, kg, s, rad/s, J). Unit
conversion from the convenience units used in configuration files (kHz, pm, fg,
K/s, mbar) happens once, at the boundary, in ``utils.helpers``.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import constants

_logger = logging.getLogger(__name__)

HBAR = constants.hbar
K_B = constants.k

# Relative slack below (hbar/2)^2 that is clamped instead of rejected.
CLAMP_TOLERANCE = 1e-9

AxisLabel = Literal["u", "v", "z", "x", "y"]
PotentialKind = Literal["inverted", "harmonic_jump", "free"]


# --- Exceptions ---

class ExpansionError(Exception):
    """Base class of every error raised by the simulator package."""


class DomainError(ExpansionError, ValueError):
    """An argument lies outside the domain of the operation."""


class InvalidStateError(ExpansionError):
    """A covariance violates the uncertainty bound beyond the clamp tolerance."""


class ConfigurationError(ExpansionError):
    """
    Invalid configuration or schedule.

    Args:
        message (str): Human readable description.
        key (str, optional): The configuration key (or flag) at fault.
    """

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


# --- Configuration-side value objects ---

class PhysicalParams(BaseModel):
    """Particle properties. hbar and k_B are CODATA constants, never configurable."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mass: float = Field(gt=0, description="kg")
    radius: Optional[float] = Field(default=None, ge=0, description="m, informational")
    charge_count: int = Field(default=0, description="signed number of elementary charges")

    @property
    def hbar(self) -> float:
        return HBAR

    @property
    def k_B(self) -> float:
        return K_B


class AxisParams(BaseModel):
    """One motional axis: optical trap frequency, dark frequency and potential kind."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    axis_label: AxisLabel
    trap_frequency: float = Field(gt=0, description="Omega, rad/s")
    dark_frequency: float = Field(ge=0, description="omega, rad/s")
    potential_kind: PotentialKind
    release_phase: float = Field(default=0.0, description="RF phase at release, rad")

    @model_validator(mode="after")
    def _check_free_frequency(self) -> "AxisParams":
        if self.dark_frequency == 0 and self.potential_kind != "free":
            raise ValueError("dark_frequency = 0 is only legal with potential_kind = 'free'")
        return self

    @property
    def regime(self) -> str:
        """Name of the closed-form regime that governs this axis."""
        return {"inverted": "inverted", "harmonic_jump": "jump", "free": "free"}[self.potential_kind]


class NoiseSpec(BaseModel):
    """
    Effective incoherent dynamics of one axis.

    ``heating_rate`` and ``gamma1`` are two views on the same quantity,
    linked through E_dot = hbar * Omega * gamma1 where Omega is the optical trap
    frequency stored in ``reference_frequency``.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    gamma1: float = Field(default=0.0, ge=0, description="1/s")
    heating_rate: float = Field(default=0.0, ge=0, description="J/s")
    gas_damping: float = Field(default=0.0, ge=0, description="1/s")
    pressure: Optional[float] = Field(default=None, ge=0, description="Pa, informational")
    reference_frequency: Optional[float] = Field(default=None, gt=0, description="Omega, rad/s")

    @model_validator(mode="after")
    def _check_heating_link(self) -> "NoiseSpec":
        if self.reference_frequency is None or self.gamma1 == 0 or self.heating_rate == 0:
            return self
        expected = HBAR * self.reference_frequency * self.gamma1
        if not math.isclose(expected, self.heating_rate, rel_tol=1e-6):
            raise ValueError(
                f"heating_rate {self.heating_rate:.6e} J/s does not match "
                f"hbar*Omega*gamma1 = {expected:.6e} J/s"
            )
        return self

    @classmethod
    def from_heating_rate(cls, heating_rate: float, trap_frequency: float, **kwargs) -> "NoiseSpec":
        """Builds a noise spec from E_dot, deriving gamma1 through the optical frequency."""
        return cls(
            heating_rate=heating_rate,
            gamma1=gamma1_from_heating_rate(heating_rate, trap_frequency),
            reference_frequency=trap_frequency,
            **kwargs,
        )

    @classmethod
    def from_gamma1(cls, gamma1: float, trap_frequency: float, **kwargs) -> "NoiseSpec":
        return cls(
            gamma1=gamma1,
            heating_rate=heating_rate_from_gamma1(gamma1, trap_frequency),
            reference_frequency=trap_frequency,
            **kwargs,
        )

    @classmethod
    def silent(cls) -> "NoiseSpec":
        return cls()

    def effective_heating_rate(self) -> float:
        """E_dot in J/s, falling back on gamma1 when only the rate is set."""
        if self.heating_rate > 0 or self.gamma1 == 0:
            return self.heating_rate
        if self.reference_frequency is None:
            raise ConfigurationError("gamma1 given without reference_frequency", key="gamma1")
        return heating_rate_from_gamma1(self.gamma1, self.reference_frequency)

    def momentum_diffusion(self, mass: float) -> float:
        """D_pp = 2 m E_dot, so that <p^2> grows as 2 m E_dot t in free flight."""
        return 2.0 * mass * self.effective_heating_rate()

    def scaled(self, factor: float) -> "NoiseSpec":
        """Returns a copy with the heating (and gamma1) multiplied by ``factor``."""
        if factor < 0:
            raise DomainError(f"heating scale must be >= 0, got {factor}")
        return self.model_copy(update={
            "gamma1": self.gamma1 * factor,
            "heating_rate": self.effective_heating_rate() * factor,
        })


class PaulTrapSpec(BaseModel):
    """
    RF quadrupole confinement in the transverse plane.

    ``mathieu_q`` may be left unset: it is then calibrated per axis from the
    measured secular frequency (see ``moment_propagator.calibrate_mathieu_from_secular``).
    The stability of (a, q) is checked numerically by ``moment_propagator.validate_paul_trap``.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    rf_frequency: float = Field(gt=0, description="Omega_RF, rad/s")
    mathieu_q: Optional[float] = None
    mathieu_a: float = 0.0
    plane_rotation: float = Field(default=0.0, description="theta_t, rad")
    rf_voltage: Optional[float] = Field(default=None, description="V, informational")


class ProtocolSpec(BaseModel):
    """Experiment timeline: feedback-off lead, release times, retrap window, shots."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    feedback_off_lead: float = Field(default=0.0, ge=0, description="t_FB, s")
    release_times: List[float] = Field(default_factory=list, description="s")
    measure_window: float = Field(default=500e-6, ge=0, description="t_m, s")
    shots_per_release: int = Field(default=400, ge=1)
    measurement_broadening: Dict[str, float] = Field(default_factory=dict, description="delta sigma per axis, m")
    samples_per_period: int = Field(default=20, ge=11)
    detector_noise: Dict[str, float] = Field(default_factory=dict, description="one-sided PSD per axis, m^2/Hz")

    @field_validator("release_times")
    @classmethod
    def _check_release_times(cls, values: List[float]) -> List[float]:
        if any(t < 0 for t in values):
            raise ValueError("release times must be >= 0")
        return values

    @field_validator("measurement_broadening", "detector_noise")
    @classmethod
    def _check_non_negative(cls, values: Dict[str, float]) -> Dict[str, float]:
        for axis, value in values.items():
            if value < 0:
                raise ValueError(f"value for axis '{axis}' must be >= 0")
        return values

    def broadening_for(self, axis_label: str) -> float:
        return self.measurement_broadening.get(axis_label, 0.0)


# --- Phase-space state ---

@dataclass(frozen=True)
class GaussianState:
    """
    Mean and covariance of one motional axis in phase space.

    ``covar`` is the signed position-momentum covariance; the determinant of the
    covariance matrix is var_position * var_momentum - covar**2.
    """

    mean_position: float
    mean_momentum: float
    var_position: float
    var_momentum: float
    covar: float = 0.0

    def __post_init__(self):
        values = (self.mean_position, self.mean_momentum, self.var_position, self.var_momentum, self.covar)
        if not all(math.isfinite(v) for v in values):
            raise InvalidStateError(f"non-finite moments: {values}")
        if self.var_position < 0 or self.var_momentum < 0:
            raise InvalidStateError(
                f"negative variance (var_position={self.var_position}, var_momentum={self.var_momentum})"
            )

    @classmethod
    def from_arrays(cls, mean: np.ndarray, covariance: np.ndarray) -> "GaussianState":
        """Builds a state from a length-2 mean and a 2x2 covariance (symmetrized)."""
        off_diagonal = 0.5 * (covariance[0, 1] + covariance[1, 0])
        return cls(
            mean_position=float(mean[0]),
            mean_momentum=float(mean[1]),
            var_position=float(covariance[0, 0]),
            var_momentum=float(covariance[1, 1]),
            covar=float(off_diagonal),
        )

    @property
    def mean(self) -> np.ndarray:
        return np.array([self.mean_position, self.mean_momentum])

    @property
    def covariance(self) -> np.ndarray:
        return np.array([[self.var_position, self.covar], [self.covar, self.var_momentum]])

    @property
    def sigma(self) -> float:
        """Position standard deviation."""
        return math.sqrt(self.var_position)

    @property
    def determinant(self) -> float:
        return self.var_position * self.var_momentum - self.covar ** 2

    def uncertainty_excess(self) -> float:
        """Relative margin of det(Sigma) above (hbar/2)^2; negative below the bound."""
        bound = (HBAR / 2) ** 2
        return (self.determinant - bound) / bound

    def enforce_uncertainty(self) -> "GaussianState":
        """
        Clamps a state that grazes the uncertainty bound.

        States below the bound by less than ``CLAMP_TOLERANCE`` (relative) get their
        momentum variance raised onto the bound; larger violations raise.

        Raises:
            InvalidStateError: det(Sigma) is below (hbar/2)^2 beyond tolerance.
        """
        excess = self.uncertainty_excess()
        if excess >= 0:
            return self
        if excess < -CLAMP_TOLERANCE:
            raise InvalidStateError(
                f"det(Sigma) = {self.determinant:.6e} is below (hbar/2)^2 by {-excess:.3e} (relative)"
            )
        if self.var_position == 0:
            raise InvalidStateError("cannot clamp a state with zero position variance")
        _logger.warning("Clamping state onto the uncertainty bound (relative deficit %.2e)", -excess)
        var_momentum = ((HBAR / 2) ** 2 + self.covar ** 2) / self.var_position
        return GaussianState(self.mean_position, self.mean_momentum, self.var_position, var_momentum, self.covar)


@dataclass(frozen=True)
class ConsistencyReport:
    """Outcome of comparing sigma(0) with the thermal value implied by n_bar."""

    sigma0: float
    sigma_thermal: float
    occupation: float
    occupation_implied: float
    relative_mismatch: float

    @property
    def consistent(self) -> bool:
        return self.relative_mismatch <= 0.05


# --- Operations ---

def _require_positive(**values: float) -> None:
    for name, value in values.items():
        if not value > 0:
            raise DomainError(f"{name} must be > 0, got {value}")


def zero_point_sigma(trap_frequency: float, mass: float) -> float:
    """Ground-state position spread sqrt(hbar / (2 m Omega))."""
    _require_positive(trap_frequency=trap_frequency, mass=mass)
    return math.sqrt(HBAR / (2 * mass * trap_frequency))


def thermal_state(occupation: float, trap_frequency: float, mass: float) -> GaussianState:
    """
    Zero-mean thermal state of the optical trap.

    Args:
        occupation (float): Mean phonon number n_bar >= 0.
        trap_frequency (float): Omega in rad/s.
        mass (float): Particle mass in kg.

    Returns:
        GaussianState: sigma^2 = hbar (2 n_bar + 1) / (2 m Omega),
        sigma_p^2 = hbar m Omega (2 n_bar + 1) / 2, no covariance.
    """
    _require_positive(trap_frequency=trap_frequency, mass=mass)
    if occupation < 0:
        raise DomainError(f"occupation must be >= 0, got {occupation}")
    factor = 2 * occupation + 1
    return GaussianState(
        mean_position=0.0,
        mean_momentum=0.0,
        var_position=HBAR / (2 * mass * trap_frequency) * factor,
        var_momentum=HBAR * mass * trap_frequency / 2 * factor,
        covar=0.0,
    )


def thermal_like_state(sigma0: float, trap_frequency: float, mass: float) -> GaussianState:
    """State with sigma^2 = sigma0^2 and sigma_p^2 = (m Omega sigma0)^2, the release state of the closed forms."""
    _require_positive(trap_frequency=trap_frequency, mass=mass)
    if sigma0 < 0:
        raise DomainError(f"sigma0 must be >= 0, got {sigma0}")
    return GaussianState(0.0, 0.0, sigma0 ** 2, (mass * trap_frequency * sigma0) ** 2, 0.0)


def occupation_from_temperature(temperature: float, trap_frequency: float) -> float:
    """Bose occupation n_bar = 1 / (exp(hbar Omega / (k_B T)) - 1)."""
    _require_positive(temperature=temperature, trap_frequency=trap_frequency)
    return 1.0 / math.expm1(HBAR * trap_frequency / (K_B * temperature))


def temperature_from_occupation(occupation: float, trap_frequency: float) -> float:
    """Inverse of ``occupation_from_temperature``."""
    _require_positive(occupation=occupation, trap_frequency=trap_frequency)
    return HBAR * trap_frequency / (K_B * math.log1p(1.0 / occupation))


def occupation_from_sigma(sigma: float, trap_frequency: float, mass: float) -> float:
    """n_bar implied by a thermal position spread; negative below zero-point motion."""
    ratio = (sigma / zero_point_sigma(trap_frequency, mass)) ** 2
    return 0.5 * (ratio - 1.0)


def broadening_phonons(delta_sigma: float, trap_frequency: float, mass: float) -> float:
    """Phonon equivalent of a measurement broadening: delta_sigma^2 / (2 sigma_zpm^2)."""
    if delta_sigma < 0:
        raise DomainError(f"delta_sigma must be >= 0, got {delta_sigma}")
    return delta_sigma ** 2 / (2 * zero_point_sigma(trap_frequency, mass) ** 2)


def gamma1_from_heating_rate(heating_rate: float, trap_frequency: float) -> float:
    _require_positive(trap_frequency=trap_frequency)
    return heating_rate / (HBAR * trap_frequency)


def heating_rate_from_gamma1(gamma1: float, trap_frequency: float) -> float:
    _require_positive(trap_frequency=trap_frequency)
    return HBAR * trap_frequency * gamma1


def check_initial_consistency(sigma0: float, occupation: float, trap_frequency: float,
                              mass: float) -> ConsistencyReport:
    """
    Compares an independently measured sigma(0) with the thermal value of n_bar.

    The mismatch is reported (and logged above 5 %) but never raised: both inputs
    are treated as independent ground truth.
    """
    sigma_thermal = thermal_state(occupation, trap_frequency, mass).sigma
    report = ConsistencyReport(
        sigma0=sigma0,
        sigma_thermal=sigma_thermal,
        occupation=occupation,
        occupation_implied=occupation_from_sigma(sigma0, trap_frequency, mass),
        relative_mismatch=abs(sigma0 - sigma_thermal) / sigma_thermal,
    )
    if not report.consistent:
        _logger.warning(
            "sigma(0) = %.4g m differs from the thermal value %.4g m of n_bar = %.4g by %.1f %%",
            sigma0, sigma_thermal, occupation, 100 * report.relative_mismatch,
        )
    return report


def purity(state: GaussianState) -> float:
    """
    Purity tr(rho^2) = hbar / (2 sqrt(det Sigma)) of a Gaussian state.

    Raises:
        InvalidStateError: The covariance is below the uncertainty bound beyond tolerance.
    """
    determinant = state.enforce_uncertainty().determinant
    return min(1.0, HBAR / (2 * math.sqrt(determinant)))


def coherence_length(state: GaussianState) -> float:
    """xi = sqrt(8) * purity * sigma."""
    return math.sqrt(8) * purity(state) * state.sigma


def ground_state_coherence_length(trap_frequency: float, mass: float) -> float:
    """Coherence length of the optical-trap ground state, sqrt(8) sigma_zpm."""
    return math.sqrt(8) * zero_point_sigma(trap_frequency, mass)


def squeezing_db(expansion: float) -> float:
    """Squeezing level -10 log10(eta^-2) = 20 log10(eta), in dB."""
    _require_positive(expansion=expansion)
    return 20.0 * math.log10(expansion)


def state_moments(state: GaussianState) -> Tuple[float, float, float]:
    """(var_position, covar, var_momentum) triple, the storage order used in CSV traces."""
    return state.var_position, state.covar, state.var_momentum
