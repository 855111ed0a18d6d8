import math

import numpy as np
import pytest

from conftest import DARK_Z, MASS, OMEGA_Z, RF_FREQUENCY, SIGMA0_Z, TWO_PI
from simulator.analytic_dynamics import flow_matrix, variance_inverted
from simulator.core_model import ConfigurationError, DomainError, NoiseSpec, PaulTrapSpec, ProtocolSpec
from simulator.moment_propagator import StiffnessSchedule, dark_schedule, propagate_moments
from simulator.trajectory_ensemble import (
    EnsembleError,
    ReconstructionError,
    Shot,
    apply_measurement_broadening,
    exact_transition,
    lockin_reconstruct,
    principal_axes,
    retrap_sampling,
    run_ensemble,
    scan_ensemble,
    shot_generator,
    simulate_shot,
    simulate_shots,
    summarize_shots,
)

T_R = 260e-6


def _fields(shots):
    return [(s.reconstructed_position, s.reconstructed_momentum, s.true_position, s.true_momentum, s.seed)
            for s in shots]


def _cloud_shots(positions, momenta):
    return [Shot("z", T_R, float(z), float(p), i, float(z), float(p))
            for i, (z, p) in enumerate(zip(positions, momenta))]


def _assert_covariance_close(sample, expected, n):
    """Entrywise agreement within 5 standard errors of a Gaussian sample covariance."""
    sample, expected = np.asarray(sample), np.asarray(expected)
    variances = np.diag(expected)
    standard_error = np.sqrt((expected ** 2 + np.outer(variances, variances)) / (n - 1))
    assert np.all(np.abs(sample - expected) < 5 * standard_error), (sample, expected)


class TestExactTransition:
    def test_free_flight_without_noise(self):
        flow, noise = exact_transition(0.0, MASS, 0.0, 0.0, 10e-6)
        np.testing.assert_allclose(flow, [[1.0, 10e-6 / MASS], [0.0, 1.0]], rtol=1e-12)
        np.testing.assert_allclose(noise, np.zeros((2, 2)), atol=1e-60)

    def test_free_flight_noise_covariance(self):
        diffusion, h = 2 * MASS * 1e-22, 10e-6
        _, noise = exact_transition(0.0, MASS, 0.0, diffusion, h)
        expected = [[diffusion * h ** 3 / (3 * MASS ** 2), diffusion * h ** 2 / (2 * MASS)],
                    [diffusion * h ** 2 / (2 * MASS), diffusion * h]]
        np.testing.assert_allclose(noise, expected, rtol=1e-8)

    def test_matches_closed_form_flow(self):
        flow, _ = exact_transition(-MASS * DARK_Z ** 2, MASS, 0.0, 0.0, T_R)
        np.testing.assert_allclose(flow, flow_matrix("inverted", DARK_Z, MASS, T_R), rtol=1e-10)

    def test_zero_step_is_identity(self):
        flow, noise = exact_transition(MASS * OMEGA_Z ** 2, MASS, 0.0, 1e-40, 0.0)
        assert np.array_equal(flow, np.eye(2))
        assert not noise.any()


class TestSingleShot:
    def test_matches_flow_of_the_drawn_point(self, z_axis, z_initial, ideal_protocol):
        schedule = dark_schedule(z_axis, MASS, T_R)
        shot = simulate_shot(z_axis, schedule, NoiseSpec.silent(), ideal_protocol, T_R, 17, z_initial, MASS)
        xi = shot_generator(17).standard_normal(2)
        start = np.array([math.sqrt(z_initial.var_position) * xi[0], math.sqrt(z_initial.var_momentum) * xi[1]])
        expected = flow_matrix("inverted", z_axis.dark_frequency, MASS, T_R) @ start
        assert shot.true_position == pytest.approx(expected[0], rel=1e-9)
        assert shot.true_momentum == pytest.approx(expected[1], rel=1e-9)
        assert shot.reconstructed_position == shot.true_position
        assert shot.valid

    def test_lockin_recovers_noiseless_point(self, z_axis, z_initial):
        protocol = ProtocolSpec(measure_window=500e-6, shots_per_release=50)
        schedule = dark_schedule(z_axis, MASS, T_R)
        shots = simulate_shots(z_axis, schedule, NoiseSpec.silent(), protocol, T_R, range(50), z_initial, MASS)
        spread_z = np.std([s.true_position for s in shots])
        spread_p = np.std([s.true_momentum for s in shots])
        for shot in shots:
            assert shot.reconstructed_position == pytest.approx(shot.true_position, abs=1e-8 * spread_z)
            assert shot.reconstructed_momentum == pytest.approx(shot.true_momentum, abs=1e-8 * spread_p)

    def test_same_seed_same_shot(self, z_axis, z_noise, z_initial):
        protocol = ProtocolSpec(measure_window=100e-6)
        schedule = dark_schedule(z_axis, MASS, T_R)
        a = simulate_shot(z_axis, schedule, z_noise, protocol, T_R, 5, z_initial, MASS)
        b = simulate_shot(z_axis, schedule, z_noise, protocol, T_R, 5, z_initial, MASS)
        c = simulate_shot(z_axis, schedule, z_noise, protocol, T_R, 5, z_initial, MASS, substream=1)
        assert a == b
        assert a.reconstructed_position != c.reconstructed_position

    def test_negative_seed_is_rejected(self):
        with pytest.raises(DomainError):
            shot_generator(-1)


class TestDeterminism:
    def test_worker_count_does_not_change_shots(self, z_axis, z_noise, z_initial):
        protocol = ProtocolSpec(measure_window=200e-6, shots_per_release=600,
                                detector_noise={"z": 1e-26}, measurement_broadening={"z": 321e-12})
        schedule = dark_schedule(z_axis, MASS, T_R)
        seeds = range(1000, 1600)
        inline = simulate_shots(z_axis, schedule, z_noise, protocol, T_R, seeds, z_initial, MASS, workers=1)
        threaded = simulate_shots(z_axis, schedule, z_noise, protocol, T_R, seeds, z_initial, MASS, workers=4)
        assert _fields(inline) == _fields(threaded)

    def test_shot_order_follows_seeds(self, z_axis, z_noise, z_initial, ideal_protocol):
        schedule = dark_schedule(z_axis, MASS, T_R)
        shots = simulate_shots(z_axis, schedule, z_noise, ideal_protocol, T_R, [9, 3, 7], z_initial, MASS)
        assert [s.seed for s in shots] == [9, 3, 7]
        single = simulate_shot(z_axis, schedule, z_noise, ideal_protocol, T_R, 3, z_initial, MASS)
        assert shots[1] == single


class TestEnsembleStatistics:
    @pytest.mark.parametrize("regime", ["inverted", "free"])
    def test_covariance_matches_moments(self, regime, z_axis, z_noise, z_initial):
        protocol = ProtocolSpec(measure_window=0.0, shots_per_release=4000)
        schedule = dark_schedule(z_axis, MASS, T_R) if regime == "inverted" else StiffnessSchedule.free(T_R)
        result = run_ensemble(z_axis, schedule, z_noise, protocol, T_R, z_initial, MASS, seed_base=11)
        expected = propagate_moments(z_initial, schedule, z_noise, MASS, T_R)
        _assert_covariance_close(result.true_covariance, expected.covariance, result.n_valid)
        np.testing.assert_array_equal(result.covariance, result.true_covariance)

    def test_inverted_position_variance_matches_closed_form(self, z_axis, z_noise, z_initial):
        protocol = ProtocolSpec(measure_window=0.0, shots_per_release=4000)
        schedule = dark_schedule(z_axis, MASS, T_R)
        result = run_ensemble(z_axis, schedule, z_noise, protocol, T_R, z_initial, MASS, seed_base=11)
        expected = variance_inverted(T_R, SIGMA0_Z ** 2, OMEGA_Z, DARK_Z, z_noise.gamma1, MASS)
        standard_error = expected * math.sqrt(2 / (result.n_valid - 1))
        assert abs(result.true_covariance[0, 0] - expected) < 5 * standard_error

    def test_lockin_covariance_matches_moments(self, z_axis, z_initial):
        protocol = ProtocolSpec(measure_window=200e-6, shots_per_release=2000)
        schedule = dark_schedule(z_axis, MASS, T_R)
        result = run_ensemble(z_axis, schedule, NoiseSpec.silent(), protocol, T_R, z_initial, MASS, seed_base=5)
        expected = propagate_moments(z_initial, schedule, NoiseSpec.silent(), MASS, T_R)
        _assert_covariance_close(result.covariance, expected.covariance, result.n_valid)

    @pytest.mark.slow
    def test_mathieu_covariance_matches_moments(self, u_axis, u_noise, u_initial):
        protocol = ProtocolSpec(measure_window=0.0, shots_per_release=2000)
        schedule = dark_schedule(u_axis, MASS, 200e-6, PaulTrapSpec(rf_frequency=RF_FREQUENCY))
        result = run_ensemble(u_axis, schedule, u_noise, protocol, 200e-6, u_initial, MASS)
        expected = propagate_moments(u_initial, schedule, u_noise, MASS, 200e-6)
        _assert_covariance_close(result.true_covariance, expected.covariance, result.n_valid)

    @pytest.mark.slow
    def test_sampling_error_scales_as_inverse_root(self, z_axis, z_noise, z_initial, ideal_protocol):
        schedule = dark_schedule(z_axis, MASS, T_R)
        expected = propagate_moments(z_initial, schedule, z_noise, MASS, T_R).var_position
        sizes = np.array([100, 400, 1600, 6400])
        rms = []
        for k, n in enumerate(sizes):
            errors = []
            for replicate in range(40):
                first = 100_000 * replicate + 10_000 * k
                shots = simulate_shots(z_axis, schedule, z_noise, ideal_protocol, T_R, range(first, first + n),
                                       z_initial, MASS)
                variance = np.var([s.true_position for s in shots], ddof=1)
                errors.append((variance - expected) / expected)
            rms.append(math.sqrt(np.mean(np.square(errors))))
        slope = np.polyfit(np.log(sizes), np.log(rms), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.1)

    def test_broadening_adds_in_quadrature(self, z_axis, z_noise, z_initial):
        broadening = 321e-12
        protocol = ProtocolSpec(measure_window=0.0, shots_per_release=3000,
                                measurement_broadening={"z": broadening})
        schedule = dark_schedule(z_axis, MASS, T_R)
        result = run_ensemble(z_axis, schedule, z_noise, protocol, 0.0, z_initial, MASS)
        expected = apply_measurement_broadening(SIGMA0_Z, broadening)
        assert result.position_sigma == pytest.approx(expected, rel=5 / math.sqrt(2 * 3000))
        assert result.sample_sigma >= result.position_sigma

    @pytest.mark.slow
    def test_bootstrap_error_shrinks_as_inverse_root(self, z_axis, z_noise, z_initial):
        schedule = dark_schedule(z_axis, MASS, T_R)
        errors = []
        for n in (100, 1600):
            protocol = ProtocolSpec(measure_window=0.0, shots_per_release=n)
            result = run_ensemble(z_axis, schedule, z_noise, protocol, T_R, z_initial, MASS)
            errors.append(result.sample_sigma_err / result.sample_sigma)
        assert errors[1] / errors[0] == pytest.approx(0.25, rel=0.3)

    def test_histogram_counts_every_valid_shot(self, z_axis, z_noise, z_initial, ideal_protocol):
        schedule = dark_schedule(z_axis, MASS, T_R)
        result = run_ensemble(z_axis, schedule, z_noise, ideal_protocol, T_R, z_initial, MASS)
        assert result.histogram2d.total == result.n_valid == 400
        assert result.histogram2d.counts.shape == (len(result.histogram2d.position_edges) - 1,
                                                   len(result.histogram2d.momentum_edges) - 1)
        assert result.major_sigma >= result.minor_sigma > 0

    def test_single_shot_ensemble_is_rejected(self, z_axis, z_noise, z_initial):
        protocol = ProtocolSpec(measure_window=0.0, shots_per_release=1)
        with pytest.raises(DomainError):
            run_ensemble(z_axis, StiffnessSchedule.free(T_R), z_noise, protocol, T_R, z_initial, MASS)


class TestScan:
    def test_scan_sorts_and_deduplicates(self, z_axis, z_noise, z_initial):
        protocol = ProtocolSpec(measure_window=0.0, shots_per_release=200)
        schedule = dark_schedule(z_axis, MASS, T_R)
        scan = scan_ensemble(z_axis, schedule, z_noise, protocol, z_initial, MASS,
                             release_times=[200e-6, 0.0, 100e-6, 100e-6])
        assert list(scan.curve.times) == [0.0, 100e-6, 200e-6]
        assert len(scan.results) == 3
        assert scan.curve.sigma[-1] > scan.curve.sigma[0]
        assert np.all(scan.curve.sigma_err > 0)

    def test_no_release_times(self, z_axis, z_noise, z_initial, ideal_protocol):
        with pytest.raises(ConfigurationError):
            scan_ensemble(z_axis, StiffnessSchedule.free(T_R), z_noise, ideal_protocol, z_initial, MASS)


class TestInvalidShots:
    @staticmethod
    def _shots(n_total, n_invalid, rng):
        values = rng.normal(size=(n_total, 2))
        return [Shot("z", T_R, float("nan"), float("nan"), i, valid=False) if i < n_invalid
                else Shot("z", T_R, float(z) * 1e-9, float(p) * 1e-24, i, float(z) * 1e-9, float(p) * 1e-24)
                for i, (z, p) in enumerate(values)]

    def test_one_percent_is_tolerated(self, rng):
        result = summarize_shots(self._shots(200, 2, rng), MASS, OMEGA_Z)
        assert result.n_invalid == 2
        assert result.n_valid == 198
        assert len(result.shots) == 200

    def test_more_than_one_percent_fails(self, rng):
        with pytest.raises(EnsembleError):
            summarize_shots(self._shots(200, 3, rng), MASS, OMEGA_Z)


class TestLockIn:
    def test_clean_sinusoid(self):
        sample_rate = 20 * OMEGA_Z / TWO_PI
        t = np.arange(int(500e-6 * sample_rate)) / sample_rate
        amplitude, phase = 37e-9, 0.8
        trace = amplitude * np.cos(OMEGA_Z * t + phase)
        got_amplitude, got_phase = lockin_reconstruct(trace, OMEGA_Z, 500e-6, sample_rate)
        assert got_amplitude == pytest.approx(amplitude, rel=1e-9)
        assert got_phase == pytest.approx(phase, abs=1e-9)

    def test_window_shorter_than_a_period(self):
        sample_rate = 20 * OMEGA_Z / TWO_PI
        with pytest.raises(ReconstructionError):
            lockin_reconstruct(np.zeros(200), OMEGA_Z, 10e-6, sample_rate)

    def test_undersampled_record(self):
        with pytest.raises(DomainError):
            lockin_reconstruct(np.zeros(200), OMEGA_Z, 500e-6, 5 * OMEGA_Z / TWO_PI)

    def test_retrap_sampling_spans_whole_periods(self):
        n_samples, sample_rate = retrap_sampling(OMEGA_Z, 500e-6, 20)
        assert n_samples == 21 * 20
        assert sample_rate == pytest.approx(20 * OMEGA_Z / TWO_PI, rel=1e-12)

    def test_short_protocol_window_fails_the_ensemble(self, z_axis, z_noise, z_initial):
        protocol = ProtocolSpec(measure_window=10e-6, shots_per_release=10)
        with pytest.raises(ReconstructionError):
            run_ensemble(z_axis, dark_schedule(z_axis, MASS, T_R), z_noise, protocol, T_R, z_initial, MASS)


class TestHeadlineSigma:
    def test_axis_aligned_cloud(self, rng):
        z = rng.normal(size=4000) * 1e-9
        p = MASS * OMEGA_Z * rng.normal(size=4000) * 1e-11
        result = summarize_shots(_cloud_shots(z, p), MASS, OMEGA_Z)
        assert result.sample_sigma == pytest.approx(result.position_sigma, rel=1e-3)
        assert result.major_sigma == result.sample_sigma
        assert result.minor_axis_low_confidence

    def test_cloud_tilted_by_the_readout_delay(self, rng):
        z = rng.normal(size=4000) * 1e-9
        p = MASS * OMEGA_Z * rng.normal(size=4000) * 1e-11
        # an eighth of an optical period turns the cloud by 45 degrees in (z, p / (m Omega))
        delay = flow_matrix("jump", OMEGA_Z, MASS, TWO_PI / OMEGA_Z / 8)
        tilted = delay @ np.vstack([z, p])
        result = summarize_shots(_cloud_shots(tilted[0], tilted[1]), MASS, OMEGA_Z)
        assert result.sample_sigma == pytest.approx(np.std(z, ddof=1), rel=1e-3)
        assert result.position_sigma == pytest.approx(result.sample_sigma / math.sqrt(2), rel=0.02)
        assert abs(result.rotation_angle) == pytest.approx(math.pi / 4, abs=0.01)

    def test_bootstrap_error_of_the_major_axis(self, rng):
        z = rng.normal(size=1600) * 1e-9
        p = MASS * OMEGA_Z * rng.normal(size=1600) * 1e-11
        result = summarize_shots(_cloud_shots(z, p), MASS, OMEGA_Z)
        assert result.sample_sigma_err == pytest.approx(result.sample_sigma / math.sqrt(2 * 1600), rel=0.2)


class TestHelpers:
    def test_broadening_quadrature(self):
        assert apply_measurement_broadening(3.0, 4.0) == pytest.approx(5.0)
        assert apply_measurement_broadening(2.0, 0.0) == 2.0
        with pytest.raises(DomainError):
            apply_measurement_broadening(-1.0, 1.0)

    def test_principal_axes_of_a_tilted_cloud(self, rng):
        z = rng.normal(size=5000) * 1e-9
        p = MASS * OMEGA_Z * (z + rng.normal(size=5000) * 1e-11)
        angle, major, minor = principal_axes(z, p, MASS, OMEGA_Z)
        assert angle == pytest.approx(math.pi / 4, abs=0.02)
        assert major > 50 * minor
