"""
Closed-form variance propagation for the three textbook regimes.

- inverted: U(z) = -m omega^2 z^2 / 2, hyperbolic flow
- jump: sudden change Omega -> omega of a harmonic trap, secular approximation
- free: no potential, ballistic expansion with heating

Noise enters as white momentum diffusion D_pp = 2 m E_dot with E_dot = hbar Omega
gamma1 referenced to the optical trap frequency. Gas damping is neglected here; it
only exists in the numerical propagator.

The scalar ``variance_*`` functions accept numpy arrays for ``t``; ``variance_inverted``
and ``variance_jump`` also accept a complex dark frequency (analytic continuation
omega -> i omega maps one onto the other).
"""
import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence, Tuple, Union

import numpy as np

from simulator.core_model import (
    HBAR,
    AxisParams,
    DomainError,
    GaussianState,
    NoiseSpec,
)

_logger = logging.getLogger(__name__)

Regime = Literal["inverted", "jump", "free"]
ArrayLike = Union[float, np.ndarray]

# Below this |x| the shifted sinh(x)/x - 1 is summed as a series to avoid cancellation.
_SERIES_THRESHOLD = 0.1


@dataclass(frozen=True)
class ExpansionCurve:
    """Position standard deviation sampled on a strictly increasing time grid."""

    times: np.ndarray
    sigma: np.ndarray
    regime: str
    axis: Optional[AxisParams] = None
    sigma_err: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "sigma", sigma)
        if self.sigma_err is not None:
            object.__setattr__(self, "sigma_err", np.asarray(self.sigma_err, dtype=float))
        if times.shape != sigma.shape or times.ndim != 1:
            raise DomainError("times and sigma must be 1D arrays of equal length")
        if np.any(np.diff(times) <= 0):
            raise DomainError("times must be strictly increasing")
        if np.any(sigma < 0):
            raise DomainError("sigma entries must be >= 0")

    def __len__(self) -> int:
        return len(self.times)


# --- Numerically stable brackets ---

def _shifted_sinhc(x: ArrayLike) -> ArrayLike:
    """sinh(x)/x - 1, complex-safe and accurate near x = 0."""
    x = np.asarray(x)
    x2 = x * x
    series = x2 / 6 * (1 + x2 / 20 * (1 + x2 / 42 * (1 + x2 / 72)))
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = np.sinh(x) / x - 1
    return np.where(np.abs(x) < _SERIES_THRESHOLD, series, direct)


def _shifted_sinc(x: ArrayLike) -> ArrayLike:
    """1 - sin(x)/x, accurate near x = 0."""
    x = np.asarray(x)
    x2 = x * x
    series = x2 / 6 * (1 - x2 / 20 * (1 - x2 / 42 * (1 - x2 / 72)))
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = 1 - np.sin(x) / x
    return np.where(np.abs(x) < _SERIES_THRESHOLD, series, direct)


def _unwrap(value: np.ndarray) -> ArrayLike:
    """Plain Python scalar for 0-d results, the array otherwise."""
    value = np.asarray(value)
    return value.item() if value.ndim == 0 else value


def _check_common(t: ArrayLike, trap_frequency: float, gamma1: float, mass: float) -> None:
    if np.any(np.asarray(t) < 0):
        raise DomainError("t must be >= 0")
    if not trap_frequency > 0:
        raise DomainError(f"trap frequency must be > 0, got {trap_frequency}")
    if not mass > 0:
        raise DomainError(f"mass must be > 0, got {mass}")
    if gamma1 < 0:
        raise DomainError(f"gamma1 must be >= 0, got {gamma1}")


def _check_dark_frequency(dark_frequency: complex, regime: str) -> None:
    if np.iscomplexobj(dark_frequency):
        if dark_frequency == 0:
            raise DomainError(f"{regime}: dark frequency must be non-zero")
        return
    if dark_frequency == 0:
        raise DomainError(f"{regime}: omega = 0 is the free regime, use variance_free")
    if dark_frequency < 0:
        raise DomainError(f"{regime}: omega must be > 0, got {dark_frequency}")


# --- Position variance laws ---

def variance_inverted(t: ArrayLike, sigma0_sq: float, trap_frequency: float, dark_frequency: complex,
                      gamma1: float, mass: float) -> ArrayLike:
    """
    Position variance after time t in the inverted potential.

    sigma0^2 [cosh^2(wt) + (W/w)^2 sinh^2(wt)] - (hbar W gamma1 / (m w^2)) [t - sinh(2wt)/(2w)]

    Args:
        t: Time(s) since release, s.
        sigma0_sq (float): Initial position variance, m^2.
        trap_frequency (float): Optical trap frequency Omega, rad/s.
        dark_frequency: Inverted-potential frequency omega, rad/s (complex allowed).
        gamma1 (float): Displacement-noise rate, 1/s.
        mass (float): kg.

    Returns:
        Position variance in m^2 (same shape as ``t``).
    """
    _check_common(t, trap_frequency, gamma1, mass)
    _check_dark_frequency(dark_frequency, "variance_inverted")
    t = np.asarray(t, dtype=float)
    wt = dark_frequency * t
    ratio_sq = (trap_frequency / dark_frequency) ** 2
    coherent = sigma0_sq * (np.cosh(wt) ** 2 + ratio_sq * np.sinh(wt) ** 2)
    # t - sinh(2wt)/(2w) = -t * (sinh(2wt)/(2wt) - 1) is <= 0, so the noise term adds
    incoherent = HBAR * trap_frequency * gamma1 / (mass * dark_frequency ** 2) * t * _shifted_sinhc(2 * wt)
    return _unwrap(coherent + incoherent)


def variance_jump(t: ArrayLike, sigma0_sq: float, trap_frequency: float, dark_frequency: float,
                  gamma1: float, mass: float) -> ArrayLike:
    """
    Position variance after a frequency jump Omega -> omega (secular approximation).

    sigma0^2 [cos^2(wt) + (W/w)^2 sin^2(wt)] + (hbar W gamma1 / (m w^2)) [t - sin(2wt)/(2w)]
    """
    _check_common(t, trap_frequency, gamma1, mass)
    _check_dark_frequency(dark_frequency, "variance_jump")
    t = np.asarray(t, dtype=float)
    wt = dark_frequency * t
    ratio_sq = (trap_frequency / dark_frequency) ** 2
    coherent = sigma0_sq * (np.cos(wt) ** 2 + ratio_sq * np.sin(wt) ** 2)
    incoherent = HBAR * trap_frequency * gamma1 / (mass * dark_frequency ** 2) * t * _shifted_sinc(2 * wt)
    return _unwrap(coherent + incoherent)


def variance_free(t: ArrayLike, sigma0_sq: float, trap_frequency: float, heating_rate: float,
                  mass: float) -> ArrayLike:
    """Free expansion with heating: sigma0^2 (1 + W^2 t^2) + (2/3) (E_dot / m) t^3."""
    _check_common(t, trap_frequency, 0.0, mass)
    if heating_rate < 0:
        raise DomainError(f"heating rate must be >= 0, got {heating_rate}")
    t = np.asarray(t, dtype=float)
    return _unwrap(sigma0_sq * (1 + (trap_frequency * t) ** 2) + 2.0 / 3.0 * heating_rate / mass * t ** 3)


# --- Full second moments ---

def flow_matrix(regime: Regime, dark_frequency: float, mass: float, t: float) -> np.ndarray:
    """Deterministic 2x2 map (z, p)(0) -> (z, p)(t) of the regime's linear flow."""
    if regime == "free":
        return np.array([[1.0, t / mass], [0.0, 1.0]])
    wt = dark_frequency * t
    mw = mass * dark_frequency
    if regime == "inverted":
        return np.array([[np.cosh(wt), np.sinh(wt) / mw], [mw * np.sinh(wt), np.cosh(wt)]])
    if regime == "jump":
        return np.array([[np.cos(wt), np.sin(wt) / mw], [-mw * np.sin(wt), np.cos(wt)]])
    raise DomainError(f"unknown regime '{regime}'")


def noise_covariance(regime: Regime, dark_frequency: float, mass: float, diffusion: float,
                     t: float) -> Tuple[float, float, float]:
    """
    Covariance (Q_zz, Q_zp, Q_pp) accumulated by white momentum diffusion over [0, t].

    Q = D * integral_0^t phi(u) phi(u)^T du, with phi the second column of the flow matrix.
    """
    if regime == "free":
        return diffusion * t ** 3 / (3 * mass ** 2), diffusion * t ** 2 / (2 * mass), diffusion * t
    w = dark_frequency
    x = 2 * w * t
    if regime == "inverted":
        q_zz = diffusion / (mass * w) ** 2 * (t / 2) * _shifted_sinhc(x)
        q_zp = diffusion * np.sinh(w * t) ** 2 / (2 * mass * w ** 2)
        q_pp = diffusion * (t / 2) * (2 + _shifted_sinhc(x))
    elif regime == "jump":
        q_zz = diffusion / (mass * w) ** 2 * (t / 2) * _shifted_sinc(x)
        q_zp = diffusion * np.sin(w * t) ** 2 / (2 * mass * w ** 2)
        q_pp = diffusion * (t / 2) * (2 - _shifted_sinc(x))
    else:
        raise DomainError(f"unknown regime '{regime}'")
    return float(q_zz), float(q_zp), float(q_pp)


def _propagate_closed_form(regime: Regime, t: float, initial: GaussianState, dark_frequency: float,
                           noise: NoiseSpec, mass: float) -> GaussianState:
    if t < 0:
        raise DomainError("t must be >= 0")
    if not mass > 0:
        raise DomainError(f"mass must be > 0, got {mass}")
    if regime != "free":
        _check_dark_frequency(dark_frequency, f"second_moments_{regime}")
    flow = flow_matrix(regime, dark_frequency, mass, t)
    q_zz, q_zp, q_pp = noise_covariance(regime, dark_frequency, mass, noise.momentum_diffusion(mass), t)
    covariance = flow @ initial.covariance @ flow.T + np.array([[q_zz, q_zp], [q_zp, q_pp]])
    return GaussianState.from_arrays(flow @ initial.mean, covariance)


def _require_kind(axis: AxisParams, kind: str, operation: str) -> None:
    if axis.potential_kind != kind:
        raise DomainError(f"{operation} needs a '{kind}' axis, got '{axis.potential_kind}'")


def second_moments_inverted(t: float, initial: GaussianState, axis: AxisParams, noise: NoiseSpec,
                            mass: float) -> GaussianState:
    """
    Full Gaussian state after time t in the inverted potential.

    For a thermal-like initial state (sigma_p = m Omega sigma) and noise built from
    gamma1 at Omega, the position component equals ``variance_inverted``.
    """
    _require_kind(axis, "inverted", "second_moments_inverted")
    return _propagate_closed_form("inverted", t, initial, axis.dark_frequency, noise, mass)


def second_moments_jump(t: float, initial: GaussianState, axis: AxisParams, noise: NoiseSpec,
                        mass: float) -> GaussianState:
    """Full Gaussian state after time t in the secular harmonic trap of frequency omega."""
    _require_kind(axis, "harmonic_jump", "second_moments_jump")
    return _propagate_closed_form("jump", t, initial, axis.dark_frequency, noise, mass)


def second_moments_free(t: float, initial: GaussianState, noise: NoiseSpec, mass: float) -> GaussianState:
    """Full Gaussian state after time t of free flight."""
    return _propagate_closed_form("free", t, initial, 0.0, noise, mass)


def second_moments(t: float, initial: GaussianState, axis: AxisParams, noise: NoiseSpec,
                   mass: float) -> GaussianState:
    """Dispatches on the axis potential kind."""
    if axis.potential_kind == "free":
        return second_moments_free(t, initial, noise, mass)
    return _propagate_closed_form(axis.regime, t, initial, axis.dark_frequency, noise, mass)


def expansion_curve(times: Sequence[float], initial: GaussianState, axis: AxisParams, noise: NoiseSpec,
                    mass: float, regime: Optional[Regime] = None) -> ExpansionCurve:
    """
    sigma(t) on a time grid from the closed forms.

    Args:
        times: Strictly increasing times, s.
        initial (GaussianState): State at release.
        axis (AxisParams): Axis whose dark frequency is used.
        noise (NoiseSpec): Incoherent dynamics.
        mass (float): kg.
        regime: Overrides the axis regime (``"free"`` gives the free-expansion comparator).

    Returns:
        ExpansionCurve: The position standard deviation at each time.
    """
    regime = regime or axis.regime
    sigma = [
        np.sqrt(_propagate_closed_form(regime, float(t), initial, axis.dark_frequency, noise, mass).var_position)
        for t in times
    ]
    _logger.debug("Closed-form %s curve on %d points", regime, len(sigma))
    return ExpansionCurve(times=np.asarray(times, dtype=float), sigma=np.asarray(sigma), regime=regime, axis=axis)
