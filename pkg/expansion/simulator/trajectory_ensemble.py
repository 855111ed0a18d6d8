"""
Single-shot Monte-Carlo of the release-and-retrap protocol.

Every shot goes through the same sequence:

    1. draw (z, p) from the optical-trap state
    2. feedback off: optical trap for t_FB
    3. dark evolution on the stiffness schedule up to t_r
    4. retrap: optical trap for t_m, recording z on an integer number of periods
    5. lock-in demodulation of the record back to (z(t_r), p(t_r))

The Langevin equation dz = p/m dt, dp = -k z dt - gamma p dt + sqrt(D_pp) dW is
integrated by splitting: on each substep the stiffness is frozen (at the midpoint
for Mathieu segments) and the linear flow and its Ornstein-Uhlenbeck noise
covariance are computed exactly with a matrix exponential.

Each shot owns a Philox stream keyed by (seed, substream) with seed = seed_base +
shot index. Shots are evolved in fixed-size chunks with elementwise numpy operations,
so results are bit-identical whatever the number of worker threads.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, stats

from simulator.analytic_dynamics import ExpansionCurve
from simulator.core_model import (
    AxisParams,
    ConfigurationError,
    DomainError,
    ExpansionError,
    GaussianState,
    NoiseSpec,
    ProtocolSpec,
)
from simulator.moment_propagator import StiffnessSchedule

_logger = logging.getLogger(__name__)

CHUNK_SIZE = 256
BOOTSTRAP_RESAMPLES = 1000
BOOTSTRAP_SUBSTREAM = 0xB0075
INVALID_SHOT_LIMIT = 0.01
NON_GAUSSIAN_PVALUE = 0.01


class ReconstructionError(ExpansionError):
    """The retrap record is too short or too coarsely sampled for lock-in demodulation."""


class EnsembleError(ExpansionError):
    """More than 1 % of the shots of an ensemble are invalid."""


# --- Data types ---

@dataclass(frozen=True)
class Shot:
    """
    One repetition of the protocol.

    ``true_position``/``true_momentum`` are the phase-space point at t_r before
    retrapping; the ``reconstructed_*`` values come out of the lock-in. Invalid
    shots keep NaN values and ``valid = False``; they are reported, never dropped.
    """

    axis: str
    release_time: float
    reconstructed_position: float
    reconstructed_momentum: float
    seed: int
    true_position: float = float("nan")
    true_momentum: float = float("nan")
    valid: bool = True

    def as_row(self) -> Dict[str, object]:
        """Row of the shot CSV (``axis,t_r_s,z_m,p_kgms,seed,valid``)."""
        return {
            "axis": self.axis,
            "t_r_s": self.release_time,
            "z_m": self.reconstructed_position,
            "p_kgms": self.reconstructed_momentum,
            "seed": self.seed,
            "valid": self.valid,
        }


@dataclass(frozen=True)
class Histogram2D:
    """Counts of (z, p) on Freedman-Diaconis bin edges."""

    position_edges: np.ndarray
    momentum_edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class EnsembleResult:
    """
    Statistics of the valid shots of one release time.

    ``sample_sigma`` is the major-axis sigma of the cloud in (z, p / (m Omega)) after
    the principal-axis rotation; ``position_sigma`` is the plain standard deviation
    of the reconstructed z. Only the major axis is resolved reliably, so the minor
    axis is flagged low-confidence.
    """

    shots: List[Shot]
    sample_sigma: float
    sample_sigma_err: float
    histogram2d: Histogram2D
    gaussianity_pvalue: float
    covariance: np.ndarray
    true_covariance: np.ndarray
    rotation_angle: float
    minor_sigma: float
    position_sigma: float
    n_invalid: int
    minor_axis_low_confidence: bool = True
    marginal_pvalues: Tuple[float, float] = (float("nan"), float("nan"))

    @property
    def major_sigma(self) -> float:
        return self.sample_sigma

    @property
    def release_time(self) -> float:
        return self.shots[0].release_time

    @property
    def n_valid(self) -> int:
        return len(self.shots) - self.n_invalid

    @property
    def non_gaussian(self) -> bool:
        return bool(self.gaussianity_pvalue < NON_GAUSSIAN_PVALUE)


@dataclass(frozen=True)
class EnsembleScan:
    """sigma(t_r) from ensembles, with the per-release results kept for histograms."""

    curve: ExpansionCurve
    results: List[EnsembleResult] = field(repr=False)

    @property
    def non_gaussian_times(self) -> List[float]:
        return [r.release_time for r in self.results if r.non_gaussian]


# --- Exact transitions ---

@dataclass(frozen=True)
class _Transition:
    """(z, p) -> flow @ (z, p) + chol @ (xi1, xi2) over one substep."""

    flow: np.ndarray
    chol: np.ndarray


def _cholesky_2x2(covariance: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor tolerant of (numerically) singular covariances."""
    c11 = max(covariance[0, 0], 0.0)
    l11 = math.sqrt(c11)
    l21 = covariance[1, 0] / l11 if l11 > 0 else 0.0
    l22 = math.sqrt(max(covariance[1, 1] - l21 * l21, 0.0))
    return np.array([[l11, 0.0], [l21, l22]])


def exact_transition(k: float, mass: float, damping: float, diffusion: float,
                     h: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Flow matrix and noise covariance of the frozen-stiffness Langevin equation over h.

    Uses the block matrix exponential of [[-A, G], [0, A^T]] h with momentum rescaled
    by h/m so that every entry is of order one.

    Returns:
        (flow, noise_covariance), both 2x2 in SI units.
    """
    if h == 0:
        return np.eye(2), np.zeros((2, 2))
    # p_scaled = p h / m
    drift = np.array([[0.0, 1.0], [-k * h * h / mass, -damping * h]])
    kick = np.array([[0.0, 0.0], [0.0, diffusion * h * (h / mass) ** 2]])
    block = np.zeros((4, 4))
    block[:2, :2] = -drift
    block[:2, 2:] = kick
    block[2:, 2:] = drift.T
    exponential = linalg.expm(block)
    flow_scaled = exponential[2:, 2:].T
    noise_scaled = flow_scaled @ exponential[:2, 2:]
    scale = np.diag([1.0, mass / h])
    flow = scale @ flow_scaled @ np.linalg.inv(scale)
    noise = scale @ (0.5 * (noise_scaled + noise_scaled.T)) @ scale
    return flow, noise


def _transition(k: float, mass: float, noise: NoiseSpec, h: float) -> _Transition:
    flow, covariance = exact_transition(k, mass, noise.gas_damping, noise.momentum_diffusion(mass), h)
    return _Transition(flow, _cholesky_2x2(covariance))


def _dark_transitions(schedule: StiffnessSchedule, mass: float, noise: NoiseSpec, t_r: float,
                      dt_max: float) -> List[_Transition]:
    """Substeps of [0, t_r]: one per constant segment, Mathieu segments cut at the propagator's step."""
    transitions = []
    for segment in schedule.segments:
        t0, t1 = max(segment.t_start, 0.0), min(segment.t_end, t_r)
        if t1 <= t0:
            continue
        if segment.kind == "constant_k":
            transitions.append(_transition(segment.k, mass, noise, t1 - t0))
            continue
        n_steps = max(1, math.ceil((t1 - t0) / schedule.step_limit(mass, dt_max) * (1 - 1e-12)))
        h = (t1 - t0) / n_steps
        for i in range(n_steps):
            t_mid = t0 + (i + 0.5) * h
            transitions.append(_transition(segment.stiffness(t_mid, mass), mass, noise, h))
    return transitions


# --- Shot plan: everything shared by the shots of one release time ---

@dataclass(frozen=True)
class _ShotPlan:
    axis: AxisParams
    release_time: float
    mass: float
    initial_mean: np.ndarray
    initial_chol: np.ndarray
    feedback: _Transition
    dark: List[_Transition]
    retrap: _Transition
    n_samples: int
    sample_rate: float
    detector_std: float
    broadening: float
    ideal_readout: bool

    @property
    def n_draws(self) -> int:
        # initial, feedback-off, dark steps, retrap steps, detector, broadening
        return 2 + 2 + 2 * len(self.dark) + 2 * max(self.n_samples - 1, 0) + self.n_samples + 1


def retrap_sampling(trap_frequency: float, measure_window: float, samples_per_period: int) -> Tuple[int, float]:
    """
    Number of samples and sample rate of the retrap record.

    The record spans the largest integer number of optical periods inside the window.

    Raises:
        ReconstructionError: The window is shorter than one period.
    """
    period = 2 * math.pi / trap_frequency
    n_periods = math.floor(measure_window / period + 1e-9)
    if n_periods < 1:
        raise ReconstructionError(
            f"measure window {measure_window:.3e} s is shorter than one trap period ({period:.3e} s)"
        )
    if n_periods < 3:
        _logger.warning("Lock-in record spans only %d trap period(s)", n_periods)
    return n_periods * samples_per_period, samples_per_period / period


def _build_plan(axis: AxisParams, schedule: StiffnessSchedule, noise: NoiseSpec, protocol: ProtocolSpec,
                t_r: float, initial: GaussianState, mass: float, dt_max: float) -> _ShotPlan:
    if t_r < 0:
        raise DomainError(f"release time must be >= 0, got {t_r}")
    if not schedule.covers(0.0, t_r):
        raise ConfigurationError(f"dark schedule ends at {schedule.t_end:.6e} s, before t_r = {t_r:.6e} s")
    optical_k = mass * axis.trap_frequency ** 2
    ideal = protocol.measure_window == 0
    if ideal:
        n_samples, sample_rate = 0, 0.0
    else:
        n_samples, sample_rate = retrap_sampling(axis.trap_frequency, protocol.measure_window,
                                                 protocol.samples_per_period)
    psd = protocol.detector_noise.get(axis.axis_label, 0.0)
    return _ShotPlan(
        axis=axis,
        release_time=t_r,
        mass=mass,
        initial_mean=initial.mean,
        initial_chol=_cholesky_2x2(initial.covariance),
        feedback=_transition(optical_k, mass, noise, protocol.feedback_off_lead),
        dark=_dark_transitions(schedule, mass, noise, t_r, dt_max),
        retrap=_transition(optical_k, mass, noise, 1.0 / sample_rate if sample_rate else 0.0),
        n_samples=n_samples,
        sample_rate=sample_rate,
        detector_std=math.sqrt(psd * sample_rate / 2),
        broadening=protocol.broadening_for(axis.axis_label),
        ideal_readout=ideal,
    )


def shot_generator(seed: int, substream: int = 0) -> np.random.Generator:
    """Counter-based generator of one shot: Philox keyed by (seed, substream)."""
    if seed < 0 or substream < 0:
        raise DomainError(f"seeds must be >= 0, got ({seed}, {substream})")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, substream])))


def _apply(transition: _Transition, z: np.ndarray, p: np.ndarray, xi1: np.ndarray,
           xi2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    f, l = transition.flow, transition.chol
    return (f[0, 0] * z + f[0, 1] * p + l[0, 0] * xi1,
            f[1, 0] * z + f[1, 1] * p + l[1, 0] * xi1 + l[1, 1] * xi2)


def _run_chunk(plan: _ShotPlan, seeds: Sequence[int], substream: int) -> List[Shot]:
    # 1. Per-shot random numbers, fixed layout
    normals = np.empty((len(seeds), plan.n_draws))
    for row, seed in enumerate(seeds):
        normals[row] = shot_generator(seed, substream).standard_normal(plan.n_draws)
    column = iter(range(plan.n_draws))

    def draw() -> np.ndarray:
        return normals[:, next(column)]

    # 2. Initial point and feedback-off interval
    l = plan.initial_chol
    xi1, xi2 = draw(), draw()
    z = plan.initial_mean[0] + l[0, 0] * xi1
    p = plan.initial_mean[1] + l[1, 0] * xi1 + l[1, 1] * xi2
    with np.errstate(over="ignore", invalid="ignore"):
        z, p = _apply(plan.feedback, z, p, draw(), draw())

        # 3. Dark evolution
        for transition in plan.dark:
            z, p = _apply(transition, z, p, draw(), draw())
        true_z, true_p = z.copy(), p.copy()

        # 4. Retrap record
        if plan.ideal_readout:
            rec_z, rec_p = true_z.copy(), true_p.copy()
        else:
            record = np.empty((len(seeds), plan.n_samples))
            record[:, 0] = z
            for j in range(1, plan.n_samples):
                z, p = _apply(plan.retrap, z, p, draw(), draw())
                record[:, j] = z
            for j in range(plan.n_samples):
                record[:, j] += plan.detector_std * draw()
            rec_z, rec_p = np.empty(len(seeds)), np.empty(len(seeds))
            omega = plan.axis.trap_frequency
            for row in range(len(seeds)):
                if not np.all(np.isfinite(record[row])):
                    rec_z[row] = rec_p[row] = np.nan
                    continue
                amplitude, phase = lockin_reconstruct(record[row], omega, plan.n_samples / plan.sample_rate,
                                                      plan.sample_rate)
                rec_z[row] = amplitude * math.cos(phase)
                rec_p[row] = -plan.mass * omega * amplitude * math.sin(phase)

    # 5. Measurement broadening, drawn last
    rec_z = rec_z + plan.broadening * draw()

    shots = []
    for row, seed in enumerate(seeds):
        valid = bool(np.isfinite(rec_z[row]) and np.isfinite(rec_p[row]))
        shots.append(Shot(
            axis=plan.axis.axis_label,
            release_time=plan.release_time,
            reconstructed_position=float(rec_z[row]) if valid else float("nan"),
            reconstructed_momentum=float(rec_p[row]) if valid else float("nan"),
            seed=int(seed),
            true_position=float(true_z[row]),
            true_momentum=float(true_p[row]),
            valid=valid,
        ))
    return shots


# --- Operations ---

def lockin_reconstruct(trace: Sequence[float], trap_frequency: float, measure_window: float,
                       sample_rate: float) -> Tuple[float, float]:
    """
    Demodulates a retrap record at the trap frequency.

    The in-phase and quadrature sums I = (2/N) sum z cos(Omega t) and
    Q = (2/N) sum z sin(Omega t) run over the largest integer number of periods
    contained in both the window and the record, with t = 0 at the first sample.

    Args:
        trace: Position samples, m.
        trap_frequency (float): Omega, rad/s.
        measure_window (float): t_m, s.
        sample_rate (float): Hz, must exceed 10 Omega / (2 pi).

    Returns:
        (amplitude, phase) with z(t) ~ amplitude * cos(Omega t + phase).

    Raises:
        ReconstructionError: Less than one full period is available.
    """
    trace = np.asarray(trace, dtype=float)
    if not trap_frequency > 0:
        raise DomainError(f"trap frequency must be > 0, got {trap_frequency}")
    if not sample_rate > 10 * trap_frequency / (2 * math.pi):
        raise DomainError(f"sample rate {sample_rate:.4g} Hz is below 10 samples per trap period")
    period = 2 * math.pi / trap_frequency
    window = min(measure_window, trace.size / sample_rate)
    n_periods = math.floor(window / period + 1e-9)
    if n_periods < 1:
        raise ReconstructionError(f"record of {window:.3e} s is shorter than one period ({period:.3e} s)")
    n = min(trace.size, int(round(n_periods * period * sample_rate)))
    phase_ref = trap_frequency * np.arange(n) / sample_rate
    in_phase = 2.0 / n * np.dot(trace[:n], np.cos(phase_ref))
    quadrature = 2.0 / n * np.dot(trace[:n], np.sin(phase_ref))
    return math.hypot(in_phase, quadrature), math.atan2(-quadrature, in_phase)


def apply_measurement_broadening(sigma_true: float, delta_sigma: float) -> float:
    """Quadrature sum sqrt(sigma_true^2 + delta_sigma^2)."""
    if sigma_true < 0 or delta_sigma < 0:
        raise DomainError(f"sigma values must be >= 0, got ({sigma_true}, {delta_sigma})")
    return math.hypot(sigma_true, delta_sigma)


def simulate_shots(axis: AxisParams, schedule: StiffnessSchedule, noise: NoiseSpec, protocol: ProtocolSpec,
                   t_r: float, seeds: Sequence[int], initial: GaussianState, mass: float, substream: int = 0,
                   workers: Optional[int] = None, dt_max: float = 1e-6) -> List[Shot]:
    """
    Runs the protocol for every seed; the shot order follows ``seeds``.

    Args:
        workers (int, optional): Thread count; None lets the executor decide, 1 runs inline.
    """
    plan = _build_plan(axis, schedule, noise, protocol, t_r, initial, mass, dt_max)
    seeds = [int(s) for s in seeds]
    chunks = [seeds[i:i + CHUNK_SIZE] for i in range(0, len(seeds), CHUNK_SIZE)]
    if workers == 1 or len(chunks) <= 1:
        results = [_run_chunk(plan, chunk, substream) for chunk in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(lambda chunk: _run_chunk(plan, chunk, substream), chunks))
    return [shot for chunk in results for shot in chunk]


def simulate_shot(axis: AxisParams, schedule: StiffnessSchedule, noise: NoiseSpec, protocol: ProtocolSpec,
                  t_r: float, seed: int, initial: GaussianState, mass: float, substream: int = 0) -> Shot:
    """
    One repetition of the protocol.

    Args:
        axis (AxisParams): Optical frequency Omega (feedback-off and retrap) and label.
        schedule (StiffnessSchedule): Dark stiffness from release (t = 0) to at least t_r.
        noise (NoiseSpec): Diffusion and damping, applied in every stage.
        protocol (ProtocolSpec): t_FB, t_m, sampling, detector noise and broadening.
        t_r (float): Release time, s.
        seed (int): Shot seed; together with ``substream`` it fixes every random draw.
        initial (GaussianState): Optical-trap state the initial point is drawn from.
        mass (float): kg.

    Returns:
        Shot: Reconstructed and true phase-space point at t_r.
    """
    return simulate_shots(axis, schedule, noise, protocol, t_r, [seed], initial, mass, substream, workers=1)[0]


def principal_axes(positions: np.ndarray, momenta: np.ndarray, mass: float,
                   trap_frequency: float) -> Tuple[float, float, float]:
    """
    Principal-component rotation of the shot cloud in (z, p / (m Omega)).

    Returns:
        (angle, major_sigma, minor_sigma): angle of the major axis in (-pi/2, pi/2], m, m.
    """
    scaled = np.vstack([positions, momenta / (mass * trap_frequency)])
    eigenvalues, eigenvectors = np.linalg.eigh(np.cov(scaled))
    major = eigenvectors[:, 1]
    angle = math.atan2(major[1], major[0])
    if angle <= -math.pi / 2:
        angle += math.pi
    elif angle > math.pi / 2:
        angle -= math.pi
    return angle, math.sqrt(max(eigenvalues[1], 0.0)), math.sqrt(max(eigenvalues[0], 0.0))


def _major_sigma(var_z: np.ndarray, var_p: np.ndarray, covar: np.ndarray) -> np.ndarray:
    """Square root of the larger eigenvalue of [[var_z, covar], [covar, var_p]]."""
    half_sum = 0.5 * (var_z + var_p)
    radius = np.hypot(0.5 * (var_z - var_p), covar)
    return np.sqrt(np.maximum(half_sum + radius, 0.0))


def _bootstrap_sigma_err(positions: np.ndarray, scaled_momenta: np.ndarray, seed_base: int) -> float:
    """Bootstrap standard error of the major-axis sigma."""
    rng = shot_generator(seed_base, BOOTSTRAP_SUBSTREAM)
    indices = rng.integers(0, positions.size, size=(BOOTSTRAP_RESAMPLES, positions.size))
    z, p = positions[indices], scaled_momenta[indices]
    z = z - z.mean(axis=1, keepdims=True)
    p = p - p.mean(axis=1, keepdims=True)
    dof = positions.size - 1
    majors = _major_sigma((z * z).sum(axis=1) / dof, (p * p).sum(axis=1) / dof, (z * p).sum(axis=1) / dof)
    return float(np.std(majors, ddof=1))


def _normality_pvalue(values: np.ndarray) -> float:
    # skewness test needs at least 8 samples
    if values.size < 8 or np.ptp(values) == 0:
        return float("nan")
    return float(stats.normaltest(values).pvalue)


def summarize_shots(shots: List[Shot], mass: float, trap_frequency: float, seed_base: int = 0) -> EnsembleResult:
    """
    Ensemble statistics of the valid shots.

    The headline sigma and its bootstrap error refer to the major axis of the
    cloud in (z, p / (m Omega)), which absorbs any phase-space rotation picked up
    between release and readout.

    Raises:
        EnsembleError: More than 1 % of the shots are invalid, or fewer than two are valid.
    """
    n_invalid = sum(not s.valid for s in shots)
    if n_invalid > INVALID_SHOT_LIMIT * len(shots):
        raise EnsembleError(f"{n_invalid} of {len(shots)} shots are invalid")
    if n_invalid:
        _logger.warning("%d of %d shots invalid (kept in the shot list)", n_invalid, len(shots))
    valid = [s for s in shots if s.valid]
    if len(valid) < 2:
        raise EnsembleError("an ensemble needs at least two valid shots")
    z = np.array([s.reconstructed_position for s in valid])
    p = np.array([s.reconstructed_momentum for s in valid])
    true_points = np.vstack([[s.true_position for s in valid], [s.true_momentum for s in valid]])

    z_edges = np.histogram_bin_edges(z, bins="fd")
    p_edges = np.histogram_bin_edges(p, bins="fd")
    counts, _, _ = np.histogram2d(z, p, bins=[z_edges, p_edges])
    angle, major, minor = principal_axes(z, p, mass, trap_frequency)
    pvalues = (_normality_pvalue(z), _normality_pvalue(p))

    return EnsembleResult(
        shots=shots,
        sample_sigma=major,
        sample_sigma_err=_bootstrap_sigma_err(z, p / (mass * trap_frequency), seed_base),
        histogram2d=Histogram2D(z_edges, p_edges, counts.astype(int)),
        gaussianity_pvalue=float(np.nanmin(pvalues)) if not np.all(np.isnan(pvalues)) else float("nan"),
        covariance=np.cov(np.vstack([z, p])),
        true_covariance=np.cov(true_points),
        rotation_angle=angle,
        minor_sigma=minor,
        position_sigma=float(np.std(z, ddof=1)),
        n_invalid=n_invalid,
        marginal_pvalues=pvalues,
    )


def run_ensemble(axis: AxisParams, schedule: StiffnessSchedule, noise: NoiseSpec, protocol: ProtocolSpec,
                 t_r: float, initial: GaussianState, mass: float, seed_base: int = 0,
                 workers: Optional[int] = None) -> EnsembleResult:
    """
    ``protocol.shots_per_release`` shots with seeds seed_base + index, and their statistics.

    Raises:
        DomainError: Fewer than two shots requested.
        EnsembleError: Too many invalid shots.
    """
    if protocol.shots_per_release < 2:
        raise DomainError(f"an ensemble needs at least 2 shots, got {protocol.shots_per_release}")
    seeds = range(seed_base, seed_base + protocol.shots_per_release)
    shots = simulate_shots(axis, schedule, noise, protocol, t_r, seeds, initial, mass, workers=workers)
    result = summarize_shots(shots, mass, axis.trap_frequency, seed_base)
    _logger.info(
        "Axis %s, t_r = %.3e s: sigma = %.4e +- %.1e m over %d shots",
        axis.axis_label, t_r, result.sample_sigma, result.sample_sigma_err, result.n_valid,
    )
    return result


def scan_ensemble(axis: AxisParams, schedule: StiffnessSchedule, noise: NoiseSpec, protocol: ProtocolSpec,
                  initial: GaussianState, mass: float, seed_base: int = 0, workers: Optional[int] = None,
                  release_times: Optional[Sequence[float]] = None) -> EnsembleScan:
    """
    One ensemble per release time (``protocol.release_times`` unless given).

    Returns:
        EnsembleScan: The sigma(t_r) curve with bootstrap errors, plus the ensembles.
    """
    times = sorted(set(float(t) for t in (release_times if release_times is not None else protocol.release_times)))
    if not times:
        raise ConfigurationError("no release times to scan", key="release_times_us")
    results = [run_ensemble(axis, schedule, noise, protocol, t_r, initial, mass, seed_base, workers)
               for t_r in times]
    curve = ExpansionCurve(
        times=np.array(times),
        sigma=np.array([r.sample_sigma for r in results]),
        regime=axis.regime,
        axis=axis,
        sigma_err=np.array([r.sample_sigma_err for r in results]),
    )
    scan = EnsembleScan(curve, results)
    if scan.non_gaussian_times:
        _logger.warning("Non-Gaussian shot clouds at t_r = %s s", scan.non_gaussian_times)
    return scan
