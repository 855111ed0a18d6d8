import math

import numpy as np
import pytest

from conftest import (
    DARK_U,
    DARK_Z,
    HEATING_U,
    HEATING_Z,
    MASS,
    OMEGA_U,
    OMEGA_Z,
    RF_FREQUENCY,
    SIGMA0_U,
    SIGMA0_Z,
    TWO_PI,
)
from simulator.analytic_dynamics import variance_jump
from simulator.core_model import (
    DomainError,
    gamma1_from_heating_rate,
    ground_state_coherence_length,
    occupation_from_sigma,
)
from simulator.estimation import (
    PARAMETER_NAMES,
    DegeneracyError,
    FitError,
    FitResult,
    MeasuredCurve,
    coherence_curve,
    expansion_ratio,
    fit_expansion,
    fit_report,
    initial_guess,
    inside_confidence_ellipse,
    model_sigma,
    model_variance,
)

TRUTH = {
    "gamma1": gamma1_from_heating_rate(HEATING_Z, OMEGA_Z),
    "trap_frequency": OMEGA_Z,
    "dark_frequency": DARK_Z,
    "sigma0_sq": SIGMA0_Z ** 2,
    "release_phase": 0.0,
}
TIMES = np.linspace(0, 260e-6, 30)
TRUTH_U = {
    "gamma1": gamma1_from_heating_rate(HEATING_U, OMEGA_U),
    "trap_frequency": OMEGA_U,
    "dark_frequency": DARK_U,
    "sigma0_sq": SIGMA0_U ** 2,
    "release_phase": 0.7,
}
# 20 points with omega * t <= 0.09
SHORT_TIMES = np.linspace(0, 0.09 / DARK_Z, 20)


def _truth_fit(model="inverted") -> FitResult:
    return FitResult(params=dict(TRUTH), covariance=np.zeros((5, 5)), residual_rms=0.0, n_points=len(TIMES),
                     model=model, mass=MASS)


def _perturbed(factor):
    return {name: value * factor for name, value in TRUTH.items()}


class TestModel:
    def test_broadening_adds_in_quadrature(self):
        plain = model_sigma(TRUTH, TIMES, "inverted", MASS)
        broadened = model_sigma(TRUTH, TIMES, "inverted", MASS, broadening=321e-12)
        np.testing.assert_allclose(broadened, np.hypot(plain, 321e-12), rtol=1e-12)

    def test_secular_fallback_without_rf(self):
        params = dict(TRUTH, trap_frequency=OMEGA_U, dark_frequency=TWO_PI * 2.7e3)
        variance = model_variance(params, TIMES, "jump_micromotion", MASS)
        expected = variance_jump(TIMES, SIGMA0_Z ** 2, OMEGA_U, TWO_PI * 2.7e3, TRUTH["gamma1"], MASS)
        np.testing.assert_allclose(variance, expected, rtol=1e-12)

    def test_repeated_and_unsorted_times(self):
        times = [200e-6, 0.0, 200e-6, 100e-6]
        variance = model_variance(TRUTH, times, "inverted", MASS)
        assert variance[0] == variance[2]
        assert variance[1] < variance[3] < variance[0]

    def test_unknown_model(self):
        with pytest.raises(DomainError):
            model_variance(TRUTH, TIMES, "parabolic", MASS)


class TestFit:
    def test_noiseless_round_trip(self):
        data = MeasuredCurve(TIMES, model_sigma(TRUTH, TIMES, "inverted", MASS))
        fit = fit_expansion(data, "inverted", MASS, init_guess=_perturbed(2.0))
        for name in ("gamma1", "trap_frequency", "dark_frequency", "sigma0_sq"):
            assert fit.params[name] == pytest.approx(TRUTH[name], rel=1e-6), name
        assert fit.residual_rms < 1e-6 * data.sigma.max()
        assert fit.fixed == ("release_phase",)

    def test_objective_never_increases(self):
        data = MeasuredCurve(TIMES, model_sigma(TRUTH, TIMES, "inverted", MASS))
        fit = fit_expansion(data, "inverted", MASS, init_guess=_perturbed(0.8))
        assert np.all(np.diff(fit.objective_history) <= 0)
        assert fit.iterations == len(fit.objective_history) - 1

    def test_default_starting_point(self):
        data = MeasuredCurve(TIMES, model_sigma(TRUTH, TIMES, "inverted", MASS))
        guess = initial_guess(data, "inverted", MASS)
        assert set(guess) == set(PARAMETER_NAMES)
        assert guess["sigma0_sq"] == pytest.approx(SIGMA0_Z ** 2, rel=1e-9)
        assert 0.5 * DARK_Z < guess["dark_frequency"] < 2 * DARK_Z
        assert all(value >= 0 for value in guess.values())

    def test_duplicate_times_are_kept(self):
        times = np.concatenate([TIMES, TIMES[::3]])
        data = MeasuredCurve(times, model_sigma(TRUTH, times, "inverted", MASS))
        fit = fit_expansion(data, "inverted", MASS, init_guess=_perturbed(1.05))
        assert fit.n_points == len(times)
        assert fit.params["dark_frequency"] == pytest.approx(DARK_Z, rel=1e-6)

    def test_fixed_parameter_stays_put(self):
        data = MeasuredCurve(TIMES, model_sigma(TRUTH, TIMES, "inverted", MASS))
        guess = dict(_perturbed(1.05), trap_frequency=OMEGA_Z)
        fit = fit_expansion(data, "inverted", MASS, init_guess=guess, fixed=["trap_frequency"])
        assert fit.params["trap_frequency"] == OMEGA_Z
        assert fit.errors["trap_frequency"] == 0.0

    def test_release_only_data_is_degenerate(self):
        times = np.zeros(10)
        data = MeasuredCurve(times, np.full(10, SIGMA0_Z))
        with pytest.raises(DegeneracyError) as info:
            fit_expansion(data, "inverted", MASS, init_guess=TRUTH)
        assert info.value.parameters
        assert set(info.value.parameters) <= {"gamma1", "trap_frequency", "dark_frequency"}

    def test_short_noiseless_expansion_is_degenerate(self):
        data = MeasuredCurve(SHORT_TIMES, model_sigma(TRUTH, SHORT_TIMES, "inverted", MASS))
        with pytest.raises(DegeneracyError) as info:
            fit_expansion(data, "inverted", MASS, init_guess=TRUTH)
        assert "dark_frequency" in info.value.parameters

    def test_short_noisy_expansion_is_degenerate(self, rng):
        clean = model_sigma(TRUTH, SHORT_TIMES, "inverted", MASS)
        data = MeasuredCurve(SHORT_TIMES, clean * (1 + 1e-3 * rng.standard_normal(SHORT_TIMES.size)))
        with pytest.raises(DegeneracyError) as info:
            fit_expansion(data, "inverted", MASS, init_guess=TRUTH)
        assert "dark_frequency" in info.value.parameters

    def test_iteration_cap(self):
        data = MeasuredCurve(TIMES, model_sigma(TRUTH, TIMES, "inverted", MASS))
        with pytest.raises(FitError) as info:
            fit_expansion(data, "inverted", MASS, init_guess=_perturbed(1.5), max_iterations=1)
        assert info.value.trace

    def test_too_few_points(self):
        data = MeasuredCurve(TIMES[:7], model_sigma(TRUTH, TIMES[:7], "inverted", MASS))
        with pytest.raises(DomainError):
            fit_expansion(data, "inverted", MASS)

    def test_non_positive_weights(self):
        data = MeasuredCurve(TIMES, model_sigma(TRUTH, TIMES, "inverted", MASS))
        with pytest.raises(DomainError):
            fit_expansion(data, "inverted", MASS, init_guess=TRUTH, weights=np.zeros(len(TIMES)))

    @pytest.mark.slow
    def test_confidence_region_coverage(self, rng):
        times = np.linspace(0, 260e-6, 40)
        clean = model_sigma(TRUTH, times, "inverted", MASS)
        weights = 0.03 * clean
        covered = 0
        for _ in range(50):
            noisy = clean * (1 + 0.03 * rng.standard_normal(times.size))
            fit = fit_expansion(MeasuredCurve(times, noisy), "inverted", MASS, init_guess=TRUTH, weights=weights)
            covered += inside_confidence_ellipse(fit, TRUTH)
        assert covered >= 45


@pytest.mark.slow
class TestMicromotionFit:
    def test_release_phase_is_recovered(self):
        data = MeasuredCurve(TIMES, model_sigma(TRUTH_U, TIMES, "jump_micromotion", MASS, rf_frequency=RF_FREQUENCY))
        guess = {name: value * 1.05 for name, value in TRUTH_U.items()}
        fit = fit_expansion(data, "jump_micromotion", MASS, init_guess=guess, rf_frequency=RF_FREQUENCY)
        assert fit.fixed == ()
        assert fit.rf_frequency == RF_FREQUENCY
        for name in PARAMETER_NAMES:
            assert fit.params[name] == pytest.approx(TRUTH_U[name], rel=1e-4), name

    def test_phase_changes_the_curve(self):
        shifted = dict(TRUTH_U, release_phase=TRUTH_U["release_phase"] + math.pi / 2)
        a = model_sigma(TRUTH_U, TIMES, "jump_micromotion", MASS, rf_frequency=RF_FREQUENCY)
        b = model_sigma(shifted, TIMES, "jump_micromotion", MASS, rf_frequency=RF_FREQUENCY)
        assert np.max(np.abs(a - b) / a) > 0.03


class TestFitResult:
    def test_json_round_trip(self):
        data = MeasuredCurve(TIMES, model_sigma(TRUTH, TIMES, "inverted", MASS))
        fit = fit_expansion(data, "inverted", MASS, init_guess=_perturbed(1.1), broadening=50e-12)
        restored = FitResult.from_json(fit.to_json())
        assert restored.params == fit.params
        np.testing.assert_array_equal(restored.covariance, fit.covariance)
        assert restored.broadening == 50e-12
        assert restored.fixed == fit.fixed

    def test_malformed_json(self):
        with pytest.raises(DomainError):
            FitResult.from_json("{not json")
        with pytest.raises(DomainError):
            FitResult.from_json('{"model": "inverted"}')

    def test_negative_frequency_is_rejected(self):
        with pytest.raises(DomainError):
            FitResult(params=dict(TRUTH, dark_frequency=-1.0), covariance=np.zeros((5, 5)), residual_rms=0.0,
                      n_points=10, model="inverted", mass=MASS)

    def test_correlation_has_unit_diagonal_for_free_parameters(self):
        data = MeasuredCurve(TIMES, model_sigma(TRUTH, TIMES, "inverted", MASS) * (1 + 0.01 * np.sin(TIMES * 1e5)))
        fit = fit_expansion(data, "inverted", MASS, init_guess=TRUTH)
        correlation = fit.correlation
        assert np.diag(correlation).tolist() == [1.0, 1.0, 1.0, 1.0, 0.0]
        assert np.all(np.abs(correlation) <= 1.0 + 1e-12)

    def test_zero_residual_fit_keeps_its_correlations(self):
        data = MeasuredCurve(TIMES, model_sigma(TRUTH, TIMES, "inverted", MASS))
        fit = fit_expansion(data, "inverted", MASS, init_guess=TRUTH)
        assert np.all(np.abs(fit.covariance) < 1e-6 * np.abs(fit.unscaled_covariance).max())
        free_block = fit.correlation[:4, :4]
        assert np.abs(free_block - np.eye(4)).max() > 0.1
        restored = FitResult.from_json(fit.to_json())
        np.testing.assert_allclose(restored.correlation, fit.correlation, rtol=1e-12)

    def test_truth_inside_its_own_ellipse(self):
        assert inside_confidence_ellipse(_truth_fit(), TRUTH)

    def test_report(self):
        data = MeasuredCurve(TIMES, model_sigma(TRUTH, TIMES, "inverted", MASS))
        report = fit_report(_truth_fit(), data)
        assert report.startswith("Model: inverted")
        assert "squeezing" in report
        assert "(fixed)" not in report


class TestCoherence:
    def test_release_value(self):
        curve = coherence_curve(_truth_fit(), MASS, 10.0, [0.0])
        assert curve.xi[0] == pytest.approx(math.sqrt(8) * SIGMA0_Z / 21, rel=1e-10)
        assert curve.xi_zpm_threshold == pytest.approx(ground_state_coherence_length(OMEGA_Z, MASS), rel=1e-14)

    def test_reduced_heating_dominates(self):
        curve = coherence_curve(_truth_fit(), MASS, 10.0, np.linspace(0, 500e-6, 51))
        assert np.all(curve.xi_improved >= curve.xi * (1 - 1e-12))
        assert curve.xi_improved[-1] > 2 * curve.xi[-1]

    def test_plateau_under_fitted_heating(self):
        curve = coherence_curve(_truth_fit(), MASS, 10.0, [600e-6, 700e-6])
        assert curve.xi[1] == pytest.approx(curve.xi[0], rel=0.01)
        # heating destroys coherence faster than the expansion stretches it
        assert curve.xi[0] < math.sqrt(8) * SIGMA0_Z / 21

    def test_partial_decay_by_the_last_release_time(self):
        curve = coherence_curve(_truth_fit(), MASS, 10.0, [0.0, 260e-6])
        assert 0.1 <= curve.xi[1] / curve.xi[0] <= 0.4

    def test_decay_flattens_out(self):
        h = 0.5e-6
        curve = coherence_curve(_truth_fit(), MASS, 10.0, [20e-6 - h, 20e-6 + h, 250e-6 - h, 250e-6 + h])
        early = (curve.xi[1] - curve.xi[0]) / (2 * h)
        late = (curve.xi[3] - curve.xi[2]) / (2 * h)
        assert early < 0
        assert abs(late) < 0.1 * abs(early)

    def test_frequency_jump_stretches_coherence(self):
        params = {"gamma1": gamma1_from_heating_rate(HEATING_U, OMEGA_U), "trap_frequency": OMEGA_U,
                  "dark_frequency": DARK_U, "sigma0_sq": SIGMA0_U ** 2, "release_phase": 0.0}
        fit = FitResult(params=params, covariance=np.zeros((5, 5)), residual_rms=0.0, n_points=len(TIMES),
                        model="jump_micromotion", mass=MASS)
        occupation = occupation_from_sigma(SIGMA0_U, OMEGA_U, MASS)
        curve = coherence_curve(fit, MASS, occupation, np.linspace(0, 260e-6, 521))
        assert curve.xi.max() / curve.xi[0] == pytest.approx(7.1, rel=0.5)

    @pytest.mark.parametrize("scale", [0.0, -1e-3])
    def test_heating_scale_must_be_positive(self, scale):
        with pytest.raises(DomainError):
            coherence_curve(_truth_fit(), MASS, 10.0, [0.0], heating_scale=scale)

    def test_time_grid_must_increase(self):
        with pytest.raises(DomainError):
            coherence_curve(_truth_fit(), MASS, 10.0, [100e-6, 50e-6])

    def test_negative_occupation(self):
        with pytest.raises(DomainError):
            coherence_curve(_truth_fit(), MASS, -1.0, [0.0])


class TestExpansionRatio:
    def test_ratio(self):
        assert expansion_ratio(43.4e-9, 45.6e-12) == pytest.approx(951.8, rel=1e-3)

    def test_zero_reference(self):
        with pytest.raises(DomainError):
            expansion_ratio(1.0, 0.0)
