"""
Fits of sigma(t_r) curves and the quantities derived from them.

Parameters are always handled in the fixed order of ``PARAMETER_NAMES``:

    gamma1          displacement-noise rate, 1/s
    trap_frequency  optical trap frequency Omega, rad/s
    dark_frequency  dark-potential frequency omega, rad/s
    sigma0_sq       initial position variance, m^2
    release_phase   RF phase at release phi, rad

The inverted model uses the closed form and keeps phi fixed at 0. The
jump_micromotion model integrates the Mathieu stiffness at release phase phi,
with q calibrated from omega by Floquet analysis.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from simulator.analytic_dynamics import second_moments, variance_inverted, variance_jump
from simulator.core_model import (
    HBAR,
    AxisParams,
    DomainError,
    ExpansionError,
    GaussianState,
    NoiseSpec,
    coherence_length,
    ground_state_coherence_length,
    squeezing_db,
    thermal_like_state,
    zero_point_sigma,
)
from simulator.moment_propagator import (
    StiffnessSchedule,
    calibrate_mathieu_from_secular,
    propagate_trace,
)

_logger = logging.getLogger(__name__)

FitModel = Literal["inverted", "jump_micromotion"]

PARAMETER_NAMES = ("gamma1", "trap_frequency", "dark_frequency", "sigma0_sq", "release_phase")
DEFAULT_RELATIVE_ERROR = 0.03
MIN_POINTS = 8
MAX_ITERATIONS = 500
STEP_TOLERANCE = 1e-8
CORRELATION_WARNING = 0.99
RANK_TOLERANCE = math.sqrt(np.finfo(float).eps)
IMPROVED_HEATING_SCALE = 1e-3


class FitError(ExpansionError):
    """
    The Levenberg-Marquardt iteration did not converge.

    Args:
        message (str): Reason.
        trace (list): Per-iteration records (objective, damping, relative step).
    """

    def __init__(self, message: str, trace: Optional[List[Dict[str, float]]] = None):
        super().__init__(message)
        self.trace = trace or []


class DegeneracyError(ExpansionError):
    """
    The data cannot pin down some parameters: a combination of them barely changes
    the model, or a single one has a relative standard error above 1.

    Args:
        message (str): Reason.
        parameters (list): Names of the parameters spanning the flat direction or left loose.
    """

    def __init__(self, message: str, parameters: Sequence[str] = ()):
        super().__init__(message)
        self.parameters = list(parameters)


# --- Data types ---

@dataclass(frozen=True)
class MeasuredCurve:
    """
    sigma(t_r) data as read from a CSV: times may repeat and need not be sorted.

    ``sigma_err`` is None when the file has no error column.
    """

    times: np.ndarray
    sigma: np.ndarray
    sigma_err: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        if self.sigma_err is not None:
            object.__setattr__(self, "sigma_err", np.asarray(self.sigma_err, dtype=float))
        if self.times.shape != self.sigma.shape or self.times.ndim != 1:
            raise DomainError("times and sigma must be 1D arrays of equal length")
        if self.sigma_err is not None and self.sigma_err.shape != self.sigma.shape:
            raise DomainError("sigma_err must match sigma")
        if np.any(self.times < 0) or np.any(self.sigma < 0):
            raise DomainError("times and sigma must be >= 0")

    @classmethod
    def from_curve(cls, curve) -> "MeasuredCurve":
        """Accepts anything with ``times``, ``sigma`` and optional ``sigma_err`` (e.g. an ExpansionCurve)."""
        return cls(curve.times, curve.sigma, getattr(curve, "sigma_err", None))

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class FitResult:
    """
    Fitted parameters with their covariance and the context to re-evaluate the model.

    ``covariance`` is 5x5 in PARAMETER_NAMES order; rows of fixed parameters are zero.
    ``unscaled_covariance`` is (J^T W J)^-1 before the SSR / (n - p) factor; the
    correlation comes from it, so a zero-residual fit still shows its couplings.
    """

    params: Dict[str, float]
    covariance: np.ndarray
    residual_rms: float
    n_points: int
    model: FitModel
    mass: float
    broadening: float = 0.0
    mathieu_a: float = 0.0
    rf_frequency: Optional[float] = None
    fixed: Tuple[str, ...] = ()
    iterations: int = 0
    objective_history: List[float] = field(default_factory=list, repr=False)
    unscaled_covariance: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "covariance", np.asarray(self.covariance, dtype=float))
        if self.unscaled_covariance is not None:
            object.__setattr__(self, "unscaled_covariance", np.asarray(self.unscaled_covariance, dtype=float))
        for name in ("gamma1", "trap_frequency", "dark_frequency", "sigma0_sq"):
            if self.params[name] < 0:
                raise DomainError(f"fitted {name} must be >= 0, got {self.params[name]}")
        if not np.allclose(self.covariance, self.covariance.T, rtol=1e-10, atol=0):
            raise DomainError("fit covariance must be symmetric")

    @property
    def errors(self) -> Dict[str, float]:
        return {name: math.sqrt(max(self.covariance[i, i], 0.0)) for i, name in enumerate(PARAMETER_NAMES)}

    @property
    def correlation(self) -> np.ndarray:
        source = self.covariance if self.unscaled_covariance is None else self.unscaled_covariance
        scale = np.sqrt(np.clip(np.diag(source), 0, None))
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = source / np.outer(scale, scale)
        corr[~np.isfinite(corr)] = 0.0
        np.fill_diagonal(corr, [1.0 if s > 0 else 0.0 for s in scale])
        return corr

    @property
    def free_parameters(self) -> List[str]:
        return [name for name in PARAMETER_NAMES if name not in self.fixed]

    def vector(self) -> np.ndarray:
        return np.array([self.params[name] for name in PARAMETER_NAMES])

    def to_dict(self) -> Dict[str, object]:
        return {
            "model": self.model,
            "params": dict(self.params),
            "errors": self.errors,
            "covariance": self.covariance.tolist(),
            "correlation": self.correlation.tolist(),
            "residual_rms": self.residual_rms,
            "n_points": self.n_points,
            "mass": self.mass,
            "broadening": self.broadening,
            "mathieu_a": self.mathieu_a,
            "rf_frequency": self.rf_frequency,
            "fixed": list(self.fixed),
            "iterations": self.iterations,
            "objective_history": list(self.objective_history),
            "unscaled_covariance": None if self.unscaled_covariance is None else self.unscaled_covariance.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "FitResult":
        """
        Rebuilds a result from ``to_dict`` output.

        Raises:
            DomainError: A required field is missing or malformed.
        """
        try:
            params = {name: float(data["params"][name]) for name in PARAMETER_NAMES}
            covariance = np.asarray(data["covariance"], dtype=float)
            if covariance.shape != (5, 5):
                raise ValueError(f"covariance must be 5x5, got {covariance.shape}")
            model = data["model"]
            if model not in ("inverted", "jump_micromotion"):
                raise ValueError(f"unknown model '{model}'")
            rf_frequency = data.get("rf_frequency")
            unscaled = data.get("unscaled_covariance")
            if unscaled is not None:
                unscaled = np.asarray(unscaled, dtype=float)
                if unscaled.shape != (5, 5):
                    raise ValueError(f"unscaled covariance must be 5x5, got {unscaled.shape}")
            return cls(
                params=params,
                covariance=covariance,
                residual_rms=float(data["residual_rms"]),
                n_points=int(data["n_points"]),
                model=model,
                mass=float(data["mass"]),
                broadening=float(data.get("broadening", 0.0)),
                mathieu_a=float(data.get("mathieu_a", 0.0)),
                rf_frequency=None if rf_frequency is None else float(rf_frequency),
                fixed=tuple(data.get("fixed", ())),
                iterations=int(data.get("iterations", 0)),
                objective_history=[float(v) for v in data.get("objective_history", [])],
                unscaled_covariance=unscaled,
            )
        except (KeyError, TypeError, ValueError) as error:
            raise DomainError(f"malformed fit result: {error}") from error

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as error:
            raise DomainError(f"fit file is not valid JSON: {error}") from error
        if not isinstance(data, dict):
            raise DomainError("fit file must hold a JSON object")
        return cls.from_dict(data)


@dataclass(frozen=True)
class CoherenceCurve:
    """xi(t) for the fitted heating and for a reduced heating, plus the ground-state threshold."""

    times: np.ndarray
    xi: np.ndarray
    xi_improved: np.ndarray
    xi_zpm_threshold: float
    heating_scale: float = IMPROVED_HEATING_SCALE


# --- Models ---

@lru_cache(maxsize=256)
def _calibrated_q(dark_frequency: float, rf_frequency: float, mathieu_a: float) -> float:
    return calibrate_mathieu_from_secular(dark_frequency, rf_frequency, mathieu_a)


def model_variance(params: Mapping[str, float], times: Sequence[float], model: FitModel, mass: float,
                   mathieu_a: float = 0.0, rf_frequency: Optional[float] = None) -> np.ndarray:
    """
    Model position variance sigma^2(t) (without measurement broadening).

    jump_micromotion without ``rf_frequency`` falls back on the secular closed form.
    """
    times = np.asarray(times, dtype=float)
    sigma0_sq = max(params["sigma0_sq"], 0.0)
    if model == "inverted":
        return np.atleast_1d(variance_inverted(times, sigma0_sq, params["trap_frequency"], params["dark_frequency"],
                                               params["gamma1"], mass))
    if model != "jump_micromotion":
        raise DomainError(f"unknown fit model '{model}'")
    if rf_frequency is None:
        return np.atleast_1d(variance_jump(times, sigma0_sq, params["trap_frequency"], params["dark_frequency"],
                                           params["gamma1"], mass))
    q = _calibrated_q(params["dark_frequency"], rf_frequency, mathieu_a)
    unique_times, inverse = np.unique(times, return_inverse=True)
    schedule = StiffnessSchedule.mathieu(mathieu_a, q, rf_frequency, params["release_phase"],
                                         t_end=float(unique_times[-1]))
    initial = thermal_like_state(math.sqrt(sigma0_sq), params["trap_frequency"], mass)
    noise = NoiseSpec.from_gamma1(params["gamma1"], params["trap_frequency"])
    states = propagate_trace(initial, schedule, noise, mass, unique_times)
    return np.array([s.var_position for s in states])[inverse]


def model_sigma(params: Mapping[str, float], times: Sequence[float], model: FitModel, mass: float,
                broadening: float = 0.0, mathieu_a: float = 0.0,
                rf_frequency: Optional[float] = None) -> np.ndarray:
    """Measured-sigma model sqrt(sigma_model^2 + delta_sigma^2)."""
    variance = model_variance(params, times, model, mass, mathieu_a, rf_frequency)
    return np.sqrt(variance + broadening ** 2)


def fitted_sigma(fit: FitResult, times: Sequence[float]) -> np.ndarray:
    return model_sigma(fit.params, times, fit.model, fit.mass, fit.broadening, fit.mathieu_a, fit.rf_frequency)


# --- Levenberg-Marquardt ---

def _jacobian(residuals, x: np.ndarray, r0: np.ndarray, free: np.ndarray, lower: np.ndarray,
              upper: np.ndarray) -> np.ndarray:
    """Forward differences in normalized coordinates, stepping inward at the bounds."""
    jac = np.zeros((r0.size, x.size))
    for j in np.flatnonzero(free):
        h = math.sqrt(np.finfo(float).eps) * max(abs(x[j]), 1.0)
        if x[j] + h > upper[j]:
            h = -h
        shifted = x.copy()
        shifted[j] += h
        jac[:, j] = (residuals(shifted) - r0) / h
    return jac


def _check_identifiable(jac: np.ndarray, free: np.ndarray, x: np.ndarray,
                        lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """
    Identifiability of the free parameters at the solution ``x`` (normalized coordinates).

    Two rules, both on the weighted Jacobian and independent of the residual size:
    the smallest singular value of the free columns must exceed sqrt(eps) times the
    largest, and every free parameter off its bounds must have a relative standard
    error of at most 1 under (J^T J)^-1. The phase is judged against pi instead of
    its own value.

    Returns:
        (J^T J)^-1 over the free columns, normalized coordinates.

    Raises:
        DegeneracyError: Either rule fails; ``parameters`` names the culprits.
    """
    columns = jac[:, free]
    free_index = np.flatnonzero(free)
    if free_index.size == 0:
        return np.zeros((0, 0))
    _, singular_values, vt = np.linalg.svd(columns, full_matrices=False)
    if singular_values[-1] <= RANK_TOLERANCE * singular_values[0]:
        direction = vt[-1]
        names = [PARAMETER_NAMES[j] for j, weight in zip(free_index, direction) if abs(weight) > 0.1]
        condition = singular_values[0] / max(singular_values[-1], 1e-300)
        raise DegeneracyError(
            f"unidentifiable parameter combination (condition {condition:.2e}) "
            f"spanned by {', '.join(names)}",
            parameters=names,
        )

    normal_inv = np.linalg.inv(columns.T @ columns)
    standard_error = np.sqrt(np.clip(np.diag(normal_inv), 0.0, None))
    reference = np.array([1.0 if PARAMETER_NAMES[j] == "release_phase" else abs(x[j]) for j in free_index])
    pinned = np.isclose(x, lower, rtol=1e-9, atol=1e-12) | np.isclose(x, upper, rtol=1e-9, atol=1e-12)
    loose = (standard_error > reference) & ~pinned[free_index]
    if loose.any():
        names = [PARAMETER_NAMES[j] for j in free_index[loose]]
        worst = float(np.max(standard_error[loose] / np.maximum(reference[loose], 1e-300)))
        raise DegeneracyError(
            f"relative standard error above 1 (worst {worst:.2f}) for {', '.join(names)}",
            parameters=names,
        )
    return normal_inv


def _levenberg_marquardt(residuals, x0: np.ndarray, free: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                         max_iterations: int = MAX_ITERATIONS,
                         xtol: float = STEP_TOLERANCE) -> Tuple[np.ndarray, np.ndarray, List[Dict[str, float]]]:
    """
    Bounded Levenberg-Marquardt with Marquardt's diagonal scaling.

    Returns:
        (x, jacobian at x, trace) with one trace record per accepted step.

    Raises:
        FitError: No convergence within ``max_iterations``.
    """
    x = np.clip(x0, lower, upper)
    r = residuals(x)
    cost = float(r @ r)
    damping = 1e-3
    trace: List[Dict[str, float]] = [{"iteration": 0, "objective": cost, "damping": damping, "step": float("nan")}]

    for iteration in range(1, max_iterations + 1):
        jac = _jacobian(residuals, x, r, free, lower, upper)
        gradient = jac.T @ r
        normal = jac.T @ jac
        diagonal = np.where(free, np.maximum(np.diag(normal), 1e-30), 1.0)

        # 1. Raise the damping until a step does not increase the objective
        while True:
            system = normal + damping * np.diag(diagonal)
            system[~free, :] = 0.0
            system[:, ~free] = 0.0
            system[~free, ~free] = 1.0
            rhs = np.where(free, -gradient, 0.0)
            try:
                step = np.linalg.solve(system, rhs)
            except np.linalg.LinAlgError:
                step = np.zeros_like(x)
            candidate = np.clip(x + step, lower, upper)
            try:
                r_new = residuals(candidate)
                cost_new = float(r_new @ r_new)
            except ExpansionError:
                # outside the model domain (e.g. a frequency clipped to 0)
                cost_new = math.inf
            if np.isfinite(cost_new) and cost_new <= cost:
                break
            damping *= 10.0
            if damping > 1e20:
                # no descent left at working precision
                _logger.debug("Damping exhausted at iteration %d, objective %.6e", iteration, cost)
                return x, jac, trace

        # 2. Accept
        relative_step = float(np.linalg.norm(candidate - x) / max(np.linalg.norm(x), 1e-12))
        assert cost_new <= cost, "objective increased on an accepted step"
        x, r, cost = candidate, r_new, cost_new
        damping = max(damping / 10.0, 1e-15)
        trace.append({"iteration": iteration, "objective": cost, "damping": damping, "step": relative_step})
        _logger.debug("LM iteration %d: objective %.6e, step %.2e", iteration, cost, relative_step)
        if relative_step < xtol:
            return x, _jacobian(residuals, x, r, free, lower, upper), trace

    raise FitError(f"no convergence within {max_iterations} iterations", trace)


# --- Operations ---

def _weights(data: MeasuredCurve, weights: Optional[Sequence[float]]) -> np.ndarray:
    if weights is not None:
        w = np.asarray(weights, dtype=float)
    elif data.sigma_err is not None:
        w = data.sigma_err
    else:
        w = DEFAULT_RELATIVE_ERROR * data.sigma
    if w.shape != data.sigma.shape or np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise DomainError("weights must be finite and > 0 for every data point")
    return w


def _default_bounds(model: FitModel) -> Tuple[Dict[str, float], Dict[str, float]]:
    lower = {"gamma1": 0.0, "trap_frequency": 0.0, "dark_frequency": 0.0, "sigma0_sq": 0.0,
             "release_phase": -2 * math.pi}
    upper = {"gamma1": math.inf, "trap_frequency": math.inf, "dark_frequency": math.inf, "sigma0_sq": math.inf,
             "release_phase": 2 * math.pi}
    return lower, upper


def initial_guess(data, model: FitModel, mass: float) -> Dict[str, float]:
    """
    Heuristic starting point.

    sigma(0)^2 from the earliest point, Omega from the early free-expansion growth
    sigma^2 = sigma0^2 (1 + Omega^2 t^2), omega from the late-time log-slope
    (inverted) or from the first maximum at a quarter period (jump), and gamma1
    such that heating carries a tenth of the last variance.
    """
    data = MeasuredCurve.from_curve(data)
    order = np.argsort(data.times, kind="stable")
    times, sigma = data.times[order], data.sigma[order]
    sigma0 = max(sigma[0], 1e-15)
    t_span = max(times[-1], 1e-12)

    ratio = sigma / sigma0
    growing = np.flatnonzero((ratio > 1.2) & (times > 0))
    if growing.size:
        first = growing[0]
        trap_frequency = math.sqrt(ratio[first] ** 2 - 1.0) / times[first]
    else:
        trap_frequency = 1.0 / t_span

    if model == "inverted":
        late = times >= times[0] + 2.0 * (times[-1] - times[0]) / 3.0
        slope = np.polyfit(times[late], np.log(np.maximum(sigma[late], 1e-300)), 1)[0] \
            if np.ptp(times[late]) > 0 else 0.0
        dark_frequency = slope if slope > 0 else 1.0 / t_span
    else:
        peak = int(np.argmax(sigma))
        dark_frequency = math.pi / (2 * times[peak]) if times[peak] > 0 else math.pi / (2 * t_span)

    unit_heating = variance_inverted(t_span, 0.0, trap_frequency, dark_frequency, 1.0, mass) if model == "inverted" \
        else variance_jump(t_span, 0.0, trap_frequency, dark_frequency, 1.0, mass)
    gamma1 = 0.1 * sigma[-1] ** 2 / unit_heating if unit_heating > 0 else 1.0
    return {"gamma1": gamma1, "trap_frequency": trap_frequency, "dark_frequency": dark_frequency,
            "sigma0_sq": sigma0 ** 2, "release_phase": 0.0}


def fit_expansion(data, model: FitModel, mass: float, init_guess: Optional[Mapping[str, float]] = None,
                  bounds: Optional[Tuple[Mapping[str, float], Mapping[str, float]]] = None,
                  broadening: float = 0.0, weights: Optional[Sequence[float]] = None,
                  mathieu_a: float = 0.0, rf_frequency: Optional[float] = None,
                  scales: Optional[Mapping[str, float]] = None, fixed: Sequence[str] = (),
                  max_iterations: int = MAX_ITERATIONS) -> FitResult:
    """
    Weighted least-squares fit of sigma(t) with Levenberg-Marquardt.

    Minimizes sum_i ((sigma_model(t_i) - sigma_i) / w_i)^2 with
    sigma_model = sqrt(variance + broadening^2). The iteration works on parameters
    divided by ``scales`` (default: the initial-guess magnitudes), so the result
    does not depend on the units the caller thinks in.

    Args:
        data: MeasuredCurve or ExpansionCurve (needs >= 8 points).
        model (str): ``inverted`` or ``jump_micromotion``.
        mass (float): kg, not fitted.
        init_guess: Starting parameters; ``initial_guess`` when omitted.
        bounds: (lower, upper) dictionaries, partial dictionaries allowed.
        broadening (float): Measurement broadening delta sigma, m.
        weights: Per-point w_i; defaults to the data errors, else 3 % of sigma.
        mathieu_a (float): Mathieu a for jump_micromotion.
        rf_frequency (float): Omega_RF for jump_micromotion; None uses the secular closed form.
        scales: Normalization per parameter.
        fixed: Parameter names held at their initial value (release_phase is always
            fixed for the inverted model).

    Returns:
        FitResult: Parameters, covariance (J^T W J)^-1 SSR / (n - p) and diagnostics.

    Raises:
        DomainError: Too few points or a starting point outside the bounds.
        FitError: No convergence within ``max_iterations``.
        DegeneracyError: The Jacobian at the solution is rank deficient, or a free parameter
            has a relative standard error above 1.
    """
    data = MeasuredCurve.from_curve(data)
    if len(data) < MIN_POINTS:
        raise DomainError(f"a fit needs at least {MIN_POINTS} points, got {len(data)}")
    w = _weights(data, weights)

    # 1. Starting point, bounds, normalization
    guess = dict(init_guess) if init_guess is not None else initial_guess(data, model, mass)
    missing = [name for name in PARAMETER_NAMES if name not in guess]
    if missing:
        raise DomainError(f"initial guess lacks {', '.join(missing)}")
    lower_d, upper_d = _default_bounds(model)
    if bounds is not None:
        lower_d.update(bounds[0])
        upper_d.update(bounds[1])
    fixed = set(fixed) | ({"release_phase"} if model == "inverted" else set())
    if model == "inverted":
        guess["release_phase"] = 0.0
    x_phys = np.array([guess[name] for name in PARAMETER_NAMES], dtype=float)
    lower_phys = np.array([lower_d[name] for name in PARAMETER_NAMES], dtype=float)
    upper_phys = np.array([upper_d[name] for name in PARAMETER_NAMES], dtype=float)
    if np.any(x_phys < lower_phys) or np.any(x_phys > upper_phys):
        raise DomainError("initial guess outside the bounds")
    default_scales = {"release_phase": math.pi}
    scale = np.array([
        (scales or {}).get(name) or default_scales.get(name) or (abs(value) if value != 0 else 1.0)
        for name, value in zip(PARAMETER_NAMES, x_phys)
    ], dtype=float)
    free = np.array([name not in fixed for name in PARAMETER_NAMES])
    n_free = int(free.sum())
    if len(data) <= n_free:
        raise DomainError(f"{len(data)} points cannot determine {n_free} parameters")

    def residuals(x: np.ndarray) -> np.ndarray:
        params = dict(zip(PARAMETER_NAMES, x * scale))
        predicted = model_sigma(params, data.times, model, mass, broadening, mathieu_a, rf_frequency)
        return (predicted - data.sigma) / w

    # 2. Iterate
    x, jac, trace = _levenberg_marquardt(residuals, x_phys / scale, free, lower_phys / scale, upper_phys / scale,
                                         max_iterations=max_iterations)
    normal_inv = _check_identifiable(jac, free, x, lower_phys / scale, upper_phys / scale)

    # 3. Covariance in physical units
    r = residuals(x)
    ssr = float(r @ r)
    dof = len(data) - n_free
    unscaled = np.zeros((5, 5))
    unscaled[np.ix_(free, free)] = normal_inv
    unscaled = np.outer(scale, scale) * unscaled
    unscaled = 0.5 * (unscaled + unscaled.T)
    covariance = unscaled * ssr / dof

    params = dict(zip(PARAMETER_NAMES, (x * scale).tolist()))
    predicted = model_sigma(params, data.times, model, mass, broadening, mathieu_a, rf_frequency)
    result = FitResult(
        params=params,
        covariance=covariance,
        unscaled_covariance=unscaled,
        residual_rms=float(np.sqrt(np.mean((predicted - data.sigma) ** 2))),
        n_points=len(data),
        model=model,
        mass=mass,
        broadening=broadening,
        mathieu_a=mathieu_a,
        rf_frequency=rf_frequency,
        fixed=tuple(name for name in PARAMETER_NAMES if name in fixed),
        iterations=len(trace) - 1,
        objective_history=[record["objective"] for record in trace],
    )
    for i, j in zip(*np.triu_indices(5, k=1)):
        if abs(result.correlation[i, j]) > CORRELATION_WARNING:
            _logger.warning("Fit parameters %s and %s are correlated (%.4f)",
                            PARAMETER_NAMES[i], PARAMETER_NAMES[j], result.correlation[i, j])
    _logger.info("Fitted %s model to %d points in %d iterations, rms residual %.3e m",
                 model, len(data), result.iterations, result.residual_rms)
    return result


def expansion_ratio(sigma_t: float, sigma_0: float) -> float:
    """eta = sigma(t_r) / sigma(0)."""
    if sigma_0 <= 0:
        raise DomainError(f"sigma_0 must be > 0, got {sigma_0}")
    return sigma_t / sigma_0


def inside_confidence_ellipse(fit: FitResult, truth: Mapping[str, float], level: float = 0.95) -> bool:
    """Whether ``truth`` lies inside the fit's joint confidence ellipsoid of the free parameters."""
    free = [PARAMETER_NAMES.index(name) for name in fit.free_parameters]
    delta = np.array([fit.params[PARAMETER_NAMES[i]] - truth[PARAMETER_NAMES[i]] for i in free])
    covariance = fit.covariance[np.ix_(free, free)]
    # normalize before solving: entries span ~40 orders of magnitude
    scale = np.sqrt(np.diag(covariance))
    if np.any(scale == 0):
        return bool(np.allclose(delta, 0))
    distance = (delta / scale) @ np.linalg.solve(covariance / np.outer(scale, scale), delta / scale)
    return bool(distance <= stats.chi2.ppf(level, len(free)))


def _initial_with_occupation(fit: FitResult, occupation: float) -> GaussianState:
    sigma0_sq = fit.params["sigma0_sq"]
    if not sigma0_sq > 0:
        raise DomainError("fitted sigma0_sq must be > 0 for coherence curves")
    var_momentum = (HBAR / 2) ** 2 * (2 * occupation + 1) ** 2 / sigma0_sq
    return GaussianState(0.0, 0.0, sigma0_sq, var_momentum, 0.0)


def _coherence_lengths(fit: FitResult, initial: GaussianState, times: np.ndarray, heating_scale: float) -> np.ndarray:
    omega_optical = fit.params["trap_frequency"]
    noise = NoiseSpec.from_gamma1(fit.params["gamma1"] * heating_scale, omega_optical)
    if fit.model == "jump_micromotion" and fit.rf_frequency is not None:
        q = _calibrated_q(fit.params["dark_frequency"], fit.rf_frequency, fit.mathieu_a)
        t_end = max(float(times[-1]), 1e-12)
        schedule = StiffnessSchedule.mathieu(fit.mathieu_a, q, fit.rf_frequency, fit.params["release_phase"], t_end)
        unique_times, inverse = np.unique(times, return_inverse=True)
        states = propagate_trace(initial, schedule, noise, fit.mass, unique_times)
        return np.array([coherence_length(s) for s in states])[inverse]
    kind = "inverted" if fit.model == "inverted" else "harmonic_jump"
    axis = AxisParams(axis_label="z", trap_frequency=omega_optical, dark_frequency=fit.params["dark_frequency"],
                      potential_kind=kind)
    return np.array([coherence_length(second_moments(float(t), initial, axis, noise, fit.mass)) for t in times])


def coherence_curve(fit: FitResult, mass: float, occupation: float, t_grid: Sequence[float],
                    heating_scale: float = IMPROVED_HEATING_SCALE) -> CoherenceCurve:
    """
    Coherence length xi(t) = sqrt(8) P(t) sigma(t) from fitted parameters.

    The release state has sigma^2 = sigma0^2 and the momentum spread that makes
    the purity 1 / (2 n_bar + 1). ``xi`` uses the fitted heating, ``xi_improved``
    the heating multiplied by ``heating_scale``.

    Args:
        fit (FitResult): Fitted parameters (the fit's own mass is used for the dynamics).
        mass (float): kg, for the ground-state threshold.
        occupation (float): n_bar at release.
        t_grid: Non-decreasing times >= 0, s.
        heating_scale (float): > 0.
    """
    if not heating_scale > 0:
        raise DomainError(f"heating_scale must be > 0, got {heating_scale}")
    if occupation < 0:
        raise DomainError(f"occupation must be >= 0, got {occupation}")
    times = np.asarray(t_grid, dtype=float)
    if times.size == 0 or np.any(times < 0) or np.any(np.diff(times) < 0):
        raise DomainError("t_grid must be non-empty, >= 0 and non-decreasing")
    if not math.isclose(mass, fit.mass, rel_tol=1e-9):
        _logger.warning("Coherence mass %.4g kg differs from the fit mass %.4g kg", mass, fit.mass)
    initial = _initial_with_occupation(fit, occupation)
    xi = _coherence_lengths(fit, initial, times, 1.0)
    xi_improved = _coherence_lengths(fit, initial, times, heating_scale)
    return CoherenceCurve(
        times=times,
        xi=xi,
        xi_improved=xi_improved,
        xi_zpm_threshold=ground_state_coherence_length(fit.params["trap_frequency"], mass),
        heating_scale=heating_scale,
    )


def fit_report(fit: FitResult, data=None) -> str:
    """
    Plain-text report: parameters with 1-sigma errors, expansion ratio and
    squeezing at the last data time, and the residuals.
    """
    lines = [f"Model: {fit.model}  ({fit.n_points} points, {fit.iterations} iterations)"]
    units = {"gamma1": "1/s", "trap_frequency": "rad/s", "dark_frequency": "rad/s", "sigma0_sq": "m^2",
             "release_phase": "rad"}
    errors = fit.errors
    for name in PARAMETER_NAMES:
        note = "  (fixed)" if name in fit.fixed else ""
        lines.append(f"  {name:<15} = {fit.params[name]: .6e} +- {errors[name]:.2e} {units[name]}{note}")
    lines.append(f"  Omega/2pi = {fit.params['trap_frequency'] / (2 * math.pi):.4f} Hz, "
                 f"omega/2pi = {fit.params['dark_frequency'] / (2 * math.pi):.4f} Hz, "
                 f"sigma(0) = {math.sqrt(fit.params['sigma0_sq']):.4e} m")
    lines.append(f"  residual rms = {fit.residual_rms:.4e} m")
    lines.append(f"  sigma_zpm = {zero_point_sigma(fit.params['trap_frequency'], fit.mass):.4e} m")
    if data is not None:
        data = MeasuredCurve.from_curve(data)
        t_max = float(np.max(data.times))
        sigma_t = float(fitted_sigma(fit, [t_max])[0])
        eta = expansion_ratio(sigma_t, math.sqrt(fit.params["sigma0_sq"]))
        lines.append(f"  eta(t_max = {t_max:.4e} s) = {eta:.4f}, squeezing = {squeezing_db(eta):.2f} dB")
        lines.append("  residuals (t_s, sigma_m, model_m, residual_m):")
        predicted = fitted_sigma(fit, data.times)
        for t, s, m in zip(data.times, data.sigma, predicted):
            lines.append(f"    {t:.6e} {s:.6e} {m:.6e} {s - m: .3e}")
    return "\n".join(lines)
