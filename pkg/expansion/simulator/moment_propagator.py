"""
Numerical propagation of Gaussian first and second moments.

The moments obey the linear equations

    d(mean)/dt  = A(t) mean
    d(Sigma)/dt = A(t) Sigma + Sigma A(t)^T + diag(0, D_pp)

with A(t) = [[0, 1/m], [-k(t), -gamma]]. k(t) is piecewise: constant segments
(harmonic k > 0, inverted k < 0, free k = 0) or Mathieu segments
k(t)/m = (Omega_RF/2)^2 [a - 2 q cos(Omega_RF t + phi)], which carry the RF
micromotion. Integration uses the classical fourth-order Runge-Kutta scheme on a
fixed grid; every step is repeated as two half steps and Richardson-extrapolated,
and the difference between the two is the error monitor. When the monitor exceeds
the tolerance the whole propagation restarts on a grid twice as fine, so results
are deterministic for given inputs.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache, partial
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from simulator.core_model import (
    AxisParams,
    ConfigurationError,
    DomainError,
    ExpansionError,
    GaussianState,
    NoiseSpec,
    PaulTrapSpec,
)

_logger = logging.getLogger(__name__)

SegmentKind = Literal["constant_k", "mathieu"]

STEPS_PER_RF_PERIOD = 200
STEPS_PER_OSCILLATION = 50
FLOQUET_STEPS = 256
STABILITY_TOLERANCE = 1e-9
MAX_REFINEMENTS = 6


class IntegrationError(ExpansionError):
    """
    The fixed-step integration could not reach the requested accuracy.

    Args:
        message (str): Description of the failure.
        diagnostic (dict): Step size, time reached and error estimate at failure.
    """

    def __init__(self, message: str, diagnostic: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class CalibrationError(ExpansionError):
    """No Mathieu q inside the first stability region reproduces the requested secular frequency."""


# --- Stiffness schedule ---

@dataclass(frozen=True)
class StiffnessSegment:
    """
    One piece of k(t) on [t_start, t_end].

    constant_k segments use ``k`` (N/m, signed). mathieu segments use
    ``a``, ``q``, ``rf_frequency`` (rad/s) and ``rf_phase`` (rad) and scale with the mass.
    """

    t_start: float
    t_end: float
    kind: SegmentKind
    k: float = 0.0
    a: float = 0.0
    q: float = 0.0
    rf_frequency: float = 0.0
    rf_phase: float = 0.0

    def __post_init__(self):
        if self.t_end < self.t_start:
            raise ConfigurationError(f"segment ends before it starts ({self.t_start} > {self.t_end})")
        if self.kind == "mathieu" and not self.rf_frequency > 0:
            raise ConfigurationError("mathieu segment needs rf_frequency > 0", key="rf_frequency")

    def stiffness(self, t: float, mass: float) -> float:
        """k(t) in N/m."""
        if self.kind == "constant_k":
            return self.k
        half = 0.5 * self.rf_frequency
        return mass * half * half * (self.a - 2.0 * self.q * math.cos(self.rf_frequency * t + self.rf_phase))

    def max_rate(self, mass: float) -> float:
        """Upper bound of sqrt(|k/m|) over the segment."""
        if self.kind == "constant_k":
            return math.sqrt(abs(self.k) / mass)
        return 0.5 * self.rf_frequency * math.sqrt(abs(self.a) + 2.0 * abs(self.q))

    def shifted(self, offset: float) -> "StiffnessSegment":
        """
        Copy moved by ``offset`` in time.

        The RF waveform moves with the segment: the phase is rewritten so that the
        shifted copy sees the same RF phase at its start as the original did.
        """
        return StiffnessSegment(self.t_start + offset, self.t_end + offset, self.kind, self.k, self.a, self.q,
                                self.rf_frequency, self.rf_phase - self.rf_frequency * offset)


@dataclass(frozen=True)
class StiffnessSchedule:
    """Ordered, contiguous, non-overlapping segments of k(t)."""

    segments: Tuple[StiffnessSegment, ...]

    def __post_init__(self):
        segments = tuple(self.segments)
        object.__setattr__(self, "segments", segments)
        if not segments:
            raise ConfigurationError("schedule has no segments")
        for previous, current in zip(segments, segments[1:]):
            gap = current.t_start - previous.t_end
            if abs(gap) > 1e-12 * max(1.0, abs(previous.t_end)) + 1e-18:
                kind = "gap" if gap > 0 else "overlap"
                raise ConfigurationError(
                    f"schedule {kind} between {previous.t_end:.6e} s and {current.t_start:.6e} s"
                )

    # Builders
    @classmethod
    def constant(cls, k: float, t_end: float, t_start: float = 0.0) -> "StiffnessSchedule":
        return cls((StiffnessSegment(t_start, t_end, "constant_k", k=k),))

    @classmethod
    def harmonic(cls, frequency: float, mass: float, t_end: float, t_start: float = 0.0) -> "StiffnessSchedule":
        return cls.constant(mass * frequency ** 2, t_end, t_start)

    @classmethod
    def inverted(cls, frequency: float, mass: float, t_end: float, t_start: float = 0.0) -> "StiffnessSchedule":
        return cls.constant(-mass * frequency ** 2, t_end, t_start)

    @classmethod
    def free(cls, t_end: float, t_start: float = 0.0) -> "StiffnessSchedule":
        return cls.constant(0.0, t_end, t_start)

    @classmethod
    def mathieu(cls, a: float, q: float, rf_frequency: float, rf_phase: float, t_end: float,
                t_start: float = 0.0) -> "StiffnessSchedule":
        return cls((StiffnessSegment(t_start, t_end, "mathieu", a=a, q=q, rf_frequency=rf_frequency,
                                     rf_phase=rf_phase),))

    def then(self, other: "StiffnessSchedule") -> "StiffnessSchedule":
        """Appends ``other`` (given from t = 0) after the end of this schedule."""
        offset = self.t_end - other.t_start
        return StiffnessSchedule(self.segments + tuple(s.shifted(offset) for s in other.segments))

    @classmethod
    def concat(cls, *schedules: "StiffnessSchedule") -> "StiffnessSchedule":
        """Chains schedules end to end, each given from its own t = 0."""
        if not schedules:
            raise ConfigurationError("nothing to concatenate")
        combined = schedules[0]
        for schedule in schedules[1:]:
            combined = combined.then(schedule)
        return combined

    @property
    def t_start(self) -> float:
        return self.segments[0].t_start

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    def covers(self, t0: float, t1: float) -> bool:
        return self.t_start <= t0 + 1e-15 and self.t_end >= t1 - 1e-12 * max(1.0, abs(t1))

    def segment_at(self, t: float) -> StiffnessSegment:
        for segment in self.segments:
            if segment.t_start <= t <= segment.t_end:
                return segment
        raise ConfigurationError(f"no segment covers t = {t:.6e} s")

    def stiffness(self, t: float, mass: float) -> float:
        return self.segment_at(t).stiffness(t, mass)

    def step_limit(self, mass: float, dt_max: float) -> float:
        """dt <= min(dt_max, T_RF/200, 1/(50 max sqrt|k/m|))."""
        dt = dt_max
        for segment in self.segments:
            rate = segment.max_rate(mass)
            if rate > 0:
                dt = min(dt, 1.0 / (STEPS_PER_OSCILLATION * rate))
            if segment.kind == "mathieu":
                dt = min(dt, 2 * math.pi / segment.rf_frequency / STEPS_PER_RF_PERIOD)
        return dt


# --- Fixed-step Runge-Kutta with Richardson monitoring ---

Rhs = Callable[[float, np.ndarray], np.ndarray]


def _rk4_step(rhs: Rhs, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _richardson_step(rhs: Rhs, t: float, y: np.ndarray, h: float) -> Tuple[np.ndarray, np.ndarray]:
    """One step of size h: extrapolated value and the error estimate of the half-step result."""
    coarse = _rk4_step(rhs, t, y, h)
    fine = _rk4_step(rhs, t + 0.5 * h, _rk4_step(rhs, t, y, 0.5 * h), 0.5 * h)
    difference = (fine - coarse) / 15.0
    return fine + difference, difference


def _moment_scale(y: np.ndarray) -> np.ndarray:
    """Natural magnitude of each of (mean_z, mean_p, var_z, covar, var_p)."""
    sz = math.sqrt(max(y[2], 0.0))
    sp = math.sqrt(max(y[4], 0.0))
    return np.array([max(sz, abs(y[0])), max(sp, abs(y[1])), max(y[2], 0.0), max(sz * sp, abs(y[3])),
                     max(y[4], 0.0)])


def _integrate(rhs_for: Callable[[float], Rhs], y0: np.ndarray, breakpoints: Sequence[float], dt: float, rtol: float,
               scale: Callable[[np.ndarray], np.ndarray]) -> Tuple[List[np.ndarray], float]:
    """
    Integrates through consecutive breakpoints on uniform sub-grids no coarser than dt.

    ``rhs_for(t_mid)`` gives the right-hand side used on the interval around t_mid, so a
    stiffness jump placed on a breakpoint is never sampled from the wrong side.

    Returns:
        The state at every breakpoint and the largest relative error estimate seen.
    """
    y = np.array(y0, dtype=float)
    states = [y.copy()]
    running_scale = np.maximum(scale(y), 1e-300)
    worst = 0.0
    for t0, t1 in zip(breakpoints, breakpoints[1:]):
        span = t1 - t0
        n_steps = max(1, math.ceil(span / dt * (1 - 1e-12)))
        h = span / n_steps
        rhs = rhs_for(0.5 * (t0 + t1))
        for i in range(n_steps):
            t = t0 + i * h
            y, error = _richardson_step(rhs, t, y, h)
            if not np.all(np.isfinite(y)):
                raise IntegrationError("non-finite moments during integration", {"t": t, "dt": h})
            running_scale = np.maximum(running_scale, scale(y))
            worst = max(worst, float(np.max(np.abs(error) / running_scale)))
            if worst > rtol:
                return states, worst
        states.append(y.copy())
    return states, worst


def _moment_rhs(segment: StiffnessSegment, mass: float, damping: float, diffusion: float) -> Rhs:
    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        k = segment.stiffness(t, mass)
        mean_z, mean_p, var_z, covar, var_p = y
        return np.array([
            mean_p / mass,
            -k * mean_z - damping * mean_p,
            2.0 * covar / mass,
            var_p / mass - k * var_z - damping * covar,
            -2.0 * k * covar - 2.0 * damping * var_p + diffusion,
        ])

    return rhs


def _state_vector(state: GaussianState) -> np.ndarray:
    return np.array([state.mean_position, state.mean_momentum, state.var_position, state.covar,
                     state.var_momentum])


def _vector_state(y: np.ndarray) -> GaussianState:
    return GaussianState(float(y[0]), float(y[1]), float(y[2]), float(y[4]), float(y[3]))


def propagate_trace(initial: GaussianState, schedule: StiffnessSchedule, noise: NoiseSpec, mass: float,
                    times: Sequence[float], dt_max: float = 1e-6, rtol: float = 1e-10
                    ) -> List[GaussianState]:
    """
    Moments at each of ``times`` (non-decreasing, measured on the schedule clock, >= 0).

    Args:
        initial (GaussianState): State at t = 0.
        schedule (StiffnessSchedule): k(t) covering [0, max(times)].
        noise (NoiseSpec): Diffusion (from the heating rate) and gas damping.
        mass (float): kg.
        times: Output times, s.
        dt_max (float): Upper bound of the step, s.
        rtol (float): Tolerance of the per-step Richardson error estimate.

    Returns:
        List[GaussianState]: One state per requested time, clamped onto the uncertainty
        bound when numerically grazing it.

    Raises:
        ConfigurationError: The schedule leaves part of [0, max(times)] uncovered.
        IntegrationError: The tolerance cannot be met before the step underflows.
    """
    if not dt_max > 0:
        raise DomainError(f"dt_max must be > 0, got {dt_max}")
    if not mass > 0:
        raise DomainError(f"mass must be > 0, got {mass}")
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return []
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise DomainError("output times must be >= 0 and non-decreasing")
    t_final = float(times[-1])
    if not schedule.covers(0.0, t_final):
        raise ConfigurationError(
            f"schedule [{schedule.t_start:.6e}, {schedule.t_end:.6e}] s does not cover [0, {t_final:.6e}] s"
        )

    # 1. Breakpoints: segment boundaries (where k jumps) and the requested times
    boundaries = [s.t_start for s in schedule.segments] + [schedule.t_end]
    grid = np.unique(np.concatenate([[0.0], times, [b for b in boundaries if 0.0 < b < t_final]]))
    diffusion = noise.momentum_diffusion(mass)

    def rhs_for(t_mid: float) -> Rhs:
        return _moment_rhs(schedule.segment_at(t_mid), mass, noise.gas_damping, diffusion)

    # 2. Integrate, refining the grid until the Richardson monitor is satisfied
    dt = schedule.step_limit(mass, dt_max)
    for _ in range(MAX_REFINEMENTS + 1):
        states, worst = _integrate(rhs_for, _state_vector(initial), grid, dt, rtol, _moment_scale)
        if len(states) == len(grid):
            break
        _logger.debug("Refining moment grid: dt %.3e s -> %.3e s (error estimate %.2e)", dt, dt / 2, worst)
        dt /= 2
    else:
        raise IntegrationError(
            "step size underflow while propagating moments",
            {"dt": dt, "error_estimate": worst, "rtol": rtol, "t_final": t_final},
        )

    # 3. Pick the requested times out of the breakpoint grid
    by_time = dict(zip(grid.tolist(), states))
    result = [_vector_state(by_time[float(t)]).enforce_uncertainty() for t in times]
    _logger.debug("Propagated moments to t = %.3e s on dt = %.3e s", t_final, dt)
    return result


def propagate_moments(initial: GaussianState, schedule: StiffnessSchedule, noise: NoiseSpec, mass: float,
                      t_final: float, dt_max: float = 1e-6) -> GaussianState:
    """Moments at ``t_final``; see ``propagate_trace``."""
    if t_final < 0:
        raise DomainError(f"t_final must be >= 0, got {t_final}")
    return propagate_trace(initial, schedule, noise, mass, [t_final], dt_max)[0]


# --- Floquet analysis of the Mathieu equation ---

@dataclass(frozen=True)
class FloquetResult:
    """Stability data of x'' + (a - 2q cos 2tau) x = 0 over one RF period."""

    characteristic_exponent: float
    secular_frequency: float
    stable: bool
    monodromy: np.ndarray = field(repr=False)

    @property
    def trace(self) -> float:
        return float(np.trace(self.monodromy))


def _mathieu_monodromy(a: float, q: float, n_steps: int = FLOQUET_STEPS) -> np.ndarray:
    """Fundamental matrix after tau = pi, in the dimensionless time tau = Omega_RF t / 2."""

    def rhs(tau: float, y: np.ndarray) -> np.ndarray:
        # y holds the 2x2 fundamental matrix row-major: (x1, x2, x1', x2')
        curvature = a - 2.0 * q * math.cos(2.0 * tau)
        return np.array([y[2], y[3], -curvature * y[0], -curvature * y[1]])

    y = np.array([1.0, 0.0, 0.0, 1.0])
    h = math.pi / n_steps
    for i in range(n_steps):
        y, _ = _richardson_step(rhs, i * h, y, h)
    return y.reshape(2, 2)


def floquet_analyze(a: float, q: float, rf_frequency: float) -> FloquetResult:
    """
    Monodromy matrix and secular frequency of the Mathieu equation.

    beta = arccos(trace / 2) / pi on the principal branch, secular frequency
    beta * Omega_RF / 2. Outside the stability region (|trace| > 2) the
    exponent and frequency are NaN and ``stable`` is False.
    """
    if not (math.isfinite(a) and math.isfinite(q)):
        raise DomainError(f"a and q must be finite, got a={a}, q={q}")
    if not rf_frequency > 0:
        raise DomainError(f"rf_frequency must be > 0, got {rf_frequency}")
    monodromy = _mathieu_monodromy(a, q)
    half_trace = 0.5 * float(np.trace(monodromy))
    if abs(half_trace) > 1.0 + STABILITY_TOLERANCE:
        return FloquetResult(float("nan"), float("nan"), False, monodromy)
    beta = math.acos(max(-1.0, min(1.0, half_trace))) / math.pi
    return FloquetResult(beta, beta * rf_frequency / 2, True, monodromy)


def pseudopotential_secular_frequency(a: float, q: float, rf_frequency: float) -> float:
    """Lowest-order secular frequency (Omega_RF / 2) sqrt(a + q^2 / 2)."""
    return 0.5 * rf_frequency * math.sqrt(a + 0.5 * q * q)


@lru_cache(maxsize=32)
def mathieu_stability_edge(a: float = 0.0, q_step: float = 0.05, q_max: float = 5.0) -> float:
    """Largest q >= 0 of the first stability region at the given a (where trace = -2)."""
    previous = None
    q = 0.0
    while q <= q_max:
        stable = abs(0.5 * np.trace(_mathieu_monodromy(a, q))) <= 1.0
        if previous and not stable:
            return brentq(lambda x: 0.5 * np.trace(_mathieu_monodromy(a, x)) + 1.0, q - q_step, q, xtol=1e-12)
        previous = stable
        q += q_step
    raise CalibrationError(f"no end of the first stability region found below q = {q_max} at a = {a}")


def _beta_gap(q: float, a: float, beta_target: float) -> float:
    half_trace = 0.5 * float(np.trace(_mathieu_monodromy(a, q)))
    if abs(half_trace) > 1.0:
        # below the region (a < 0) beta counts as 0, above it as 1
        return (0.0 if half_trace > 0 else 1.0) - beta_target
    return math.acos(half_trace) / math.pi - beta_target


def calibrate_mathieu_from_secular(secular_target: float, rf_frequency: float, a: float = 0.0) -> float:
    """
    Mathieu q >= 0 whose Floquet secular frequency equals ``secular_target``.

    The pseudopotential estimate seeds a bracket inside the first stability region
    that is then solved with Brent's method.

    Raises:
        CalibrationError: The target is unreachable in the first stability region.
    """
    if secular_target == 0 and a == 0:
        return 0.0
    if not 0 < secular_target < rf_frequency / 2:
        raise CalibrationError(
            f"secular frequency {secular_target:.6e} rad/s outside (0, Omega_RF/2 = {rf_frequency / 2:.6e})"
        )
    beta_target = 2.0 * secular_target / rf_frequency
    edge = mathieu_stability_edge(a)
    gap = partial(_beta_gap, a=a, beta_target=beta_target)

    # 1. Bracket around the pseudopotential estimate, widened towards 0 and the edge
    seed = math.sqrt(max(2.0 * (beta_target ** 2 - a), 0.0))
    q_lo, q_hi = min(0.8 * seed, 0.95 * edge), min(1.25 * seed + 1e-3, edge)
    for _ in range(20):
        if gap(q_lo) <= 0 <= gap(q_hi):
            break
        if gap(q_lo) > 0:
            q_lo = 0.5 * q_lo
        if gap(q_hi) < 0:
            q_hi = min(edge, q_hi + 0.5 * (edge - q_hi) + 1e-3)
    else:
        raise CalibrationError(
            f"secular frequency {secular_target:.6e} rad/s not reachable in the first stability region at a = {a}"
        )

    # 2. Solve
    if gap(q_hi) == 0:
        return float(q_hi)
    q = brentq(gap, q_lo, q_hi, xtol=1e-14, rtol=1e-13)
    _logger.debug("Calibrated q = %.8f for secular %.6e rad/s (a = %.4g)", q, secular_target, a)
    return float(q)


def validate_paul_trap(spec: PaulTrapSpec) -> Optional[FloquetResult]:
    """
    Checks a configured (a, q) pair for stability and small-q consistency.

    Returns:
        The Floquet result, or None when q is left to per-axis calibration.

    Raises:
        ConfigurationError: (a, q) lies outside the first stability region.
    """
    if spec.mathieu_q is None:
        return None
    result = floquet_analyze(spec.mathieu_a, spec.mathieu_q, spec.rf_frequency)
    if not result.stable:
        raise ConfigurationError(
            f"(a, q) = ({spec.mathieu_a}, {spec.mathieu_q}) is outside the Mathieu stability region",
            key="mathieu_q",
        )
    if abs(spec.mathieu_q) < 0.4 and spec.mathieu_a + spec.mathieu_q ** 2 / 2 > 0:
        estimate = pseudopotential_secular_frequency(spec.mathieu_a, spec.mathieu_q, spec.rf_frequency)
        if abs(estimate - result.secular_frequency) > 0.01 * result.secular_frequency:
            _logger.warning("Pseudopotential and Floquet secular frequencies differ by more than 1 %%")
    return result


# --- Schedules for an axis and plane rotation ---

def dark_schedule(axis: AxisParams, mass: float, t_end: float,
                  paul_trap: Optional[PaulTrapSpec] = None) -> StiffnessSchedule:
    """
    k(t) of the dark evolution of one axis, from release (t = 0) to ``t_end``.

    A harmonic-jump axis uses the Mathieu stiffness when a Paul trap is configured
    (q calibrated from the axis' secular frequency unless given), and the secular
    constant stiffness m omega^2 otherwise.
    """
    if axis.potential_kind == "inverted":
        return StiffnessSchedule.inverted(axis.dark_frequency, mass, t_end)
    if axis.potential_kind == "free":
        return StiffnessSchedule.free(t_end)
    if paul_trap is None:
        return StiffnessSchedule.harmonic(axis.dark_frequency, mass, t_end)
    q = paul_trap.mathieu_q
    if q is None:
        q = calibrate_mathieu_from_secular(axis.dark_frequency, paul_trap.rf_frequency, paul_trap.mathieu_a)
    return StiffnessSchedule.mathieu(paul_trap.mathieu_a, q, paul_trap.rf_frequency, axis.release_phase, t_end)


def rotate_plane(state_x: GaussianState, state_y: GaussianState,
                 angle: float) -> Tuple[GaussianState, GaussianState]:
    """
    Passive rotation of the (x, y) phase-space pair into the (u, v) axes.

    u = x cos(angle) + y sin(angle), v = -x sin(angle) + y cos(angle), applied to
    positions and momenta alike. Cross-axis correlations are taken as zero.
    """
    c, s = math.cos(angle), math.sin(angle)

    def combine(wx: float, wy: float) -> GaussianState:
        return GaussianState(
            mean_position=wx * state_x.mean_position + wy * state_y.mean_position,
            mean_momentum=wx * state_x.mean_momentum + wy * state_y.mean_momentum,
            var_position=wx * wx * state_x.var_position + wy * wy * state_y.var_position,
            var_momentum=wx * wx * state_x.var_momentum + wy * wy * state_y.var_momentum,
            covar=wx * wx * state_x.covar + wy * wy * state_y.covar,
        )

    return combine(c, s), combine(-s, c)
