import math

import numpy as np
import pytest

from conftest import DARK_Z, HEATING_Z, MASS, OMEGA_Z, SIGMA0_Z
from simulator.analytic_dynamics import (
    ExpansionCurve,
    expansion_curve,
    flow_matrix,
    second_moments,
    second_moments_free,
    second_moments_inverted,
    second_moments_jump,
    variance_free,
    variance_inverted,
    variance_jump,
)
from simulator.core_model import (
    HBAR,
    AxisParams,
    DomainError,
    NoiseSpec,
    gamma1_from_heating_rate,
    purity,
    thermal_like_state,
)

GAMMA1_Z = gamma1_from_heating_rate(HEATING_Z, OMEGA_Z)


class TestInverted:
    def test_starts_at_initial_variance(self):
        assert variance_inverted(0.0, SIGMA0_Z ** 2, OMEGA_Z, DARK_Z, GAMMA1_Z, MASS) == pytest.approx(SIGMA0_Z ** 2)

    def test_equal_frequencies_give_cosh(self):
        t = np.linspace(0, 300e-6, 25)
        variance = variance_inverted(t, SIGMA0_Z ** 2, DARK_Z, DARK_Z, 0.0, MASS)
        np.testing.assert_allclose(variance, SIGMA0_Z ** 2 * np.cosh(2 * DARK_Z * t), rtol=1e-12)

    def test_nominal_z_size_at_260us(self):
        sigma = math.sqrt(variance_inverted(260e-6, SIGMA0_Z ** 2, OMEGA_Z, DARK_Z, GAMMA1_Z, MASS))
        assert 30e-9 <= sigma <= 56e-9
        assert sigma == pytest.approx(37.4e-9, rel=0.03)

    def test_short_times_follow_free_expansion(self):
        t = 0.01 / DARK_Z
        inverted = variance_inverted(t, SIGMA0_Z ** 2, OMEGA_Z, DARK_Z, 0.0, MASS)
        free = variance_free(t, SIGMA0_Z ** 2, OMEGA_Z, 0.0, MASS)
        assert inverted == pytest.approx(free, rel=1e-4)

    def test_monotone_with_noise(self):
        t = np.linspace(0, 500e-6, 400)
        variance = variance_inverted(t, SIGMA0_Z ** 2, OMEGA_Z, DARK_Z, GAMMA1_Z, MASS)
        assert np.all(np.diff(variance) > 0)

    def test_scale_invariance_without_noise(self, rng):
        for _ in range(20):
            wt, ratio = rng.uniform(0.01, 4.0), rng.uniform(1.0, 100.0)
            omega_a, omega_b = rng.uniform(1e3, 1e5, size=2)
            a = variance_inverted(wt / omega_a, 1.0, ratio * omega_a, omega_a, 0.0, MASS)
            b = variance_inverted(wt / omega_b, 4.0, ratio * omega_b, omega_b, 0.0, MASS) / 4.0
            assert a == pytest.approx(b, rel=1e-12)

    def test_analytic_continuation_gives_jump(self, rng):
        for t in rng.uniform(0, 400e-6, 20):
            continued = variance_inverted(t, SIGMA0_Z ** 2, OMEGA_Z, 1j * DARK_Z, GAMMA1_Z, MASS)
            jump = variance_jump(t, SIGMA0_Z ** 2, OMEGA_Z, DARK_Z, GAMMA1_Z, MASS)
            assert abs(continued.imag) <= 1e-10 * abs(jump)
            assert continued.real == pytest.approx(jump, rel=1e-10)

    def test_zero_dark_frequency_is_a_domain_error(self):
        with pytest.raises(DomainError):
            variance_inverted(1e-6, SIGMA0_Z ** 2, OMEGA_Z, 0.0, 0.0, MASS)

    def test_negative_time_is_a_domain_error(self):
        with pytest.raises(DomainError):
            variance_inverted(-1e-6, SIGMA0_Z ** 2, OMEGA_Z, DARK_Z, 0.0, MASS)


class TestJump:
    omega, dark, sigma0 = 2 * math.pi * 185e3, 2 * math.pi * 2.7e3, 183e-12

    def test_quarter_period_reaches_frequency_ratio(self):
        t = math.pi / (2 * self.dark)
        sigma = math.sqrt(variance_jump(t, self.sigma0 ** 2, self.omega, self.dark, 0.0, MASS))
        assert sigma / self.sigma0 == pytest.approx(self.omega / self.dark, rel=1e-10)

    def test_half_period_recompresses(self):
        t = math.pi / self.dark
        sigma = math.sqrt(variance_jump(t, self.sigma0 ** 2, self.omega, self.dark, 0.0, MASS))
        assert sigma == pytest.approx(self.sigma0, rel=1e-10)

    def test_periodic_without_noise(self, rng):
        period = math.pi / self.dark
        for t in rng.uniform(0, 2 * period, 20):
            a = variance_jump(t, self.sigma0 ** 2, self.omega, self.dark, 0.0, MASS)
            b = variance_jump(t + period, self.sigma0 ** 2, self.omega, self.dark, 0.0, MASS)
            assert a == pytest.approx(b, rel=1e-9)

    def test_starts_at_initial_variance(self):
        assert variance_jump(0.0, self.sigma0 ** 2, self.omega, self.dark, 1e3, MASS) == pytest.approx(
            self.sigma0 ** 2)


class TestFree:
    def test_unit_phase(self):
        assert variance_free(1.0 / OMEGA_Z, SIGMA0_Z ** 2, OMEGA_Z, 0.0, MASS) == pytest.approx(2 * SIGMA0_Z ** 2)

    def test_heating_term(self):
        t = 260e-6
        expected = SIGMA0_Z ** 2 * (1 + (OMEGA_Z * t) ** 2) + 2 / 3 * HEATING_Z / MASS * t ** 3
        assert variance_free(t, SIGMA0_Z ** 2, OMEGA_Z, HEATING_Z, MASS) == pytest.approx(expected, rel=1e-14)

    def test_slower_than_inverted_at_long_times(self):
        t = 260e-6
        free = variance_free(t, SIGMA0_Z ** 2, OMEGA_Z, HEATING_Z, MASS)
        assert free < variance_inverted(t, SIGMA0_Z ** 2, OMEGA_Z, DARK_Z, GAMMA1_Z, MASS)


class TestSecondMoments:
    def test_position_matches_variance_inverted(self, rng):
        for _ in range(100):
            omega = rng.uniform(1e4, 1e6)
            dark = rng.uniform(1e3, 2e4)
            sigma0 = rng.uniform(10e-12, 500e-12)
            heating = rng.uniform(0, 20) * 1.380649e-23
            t = rng.uniform(0, 300e-6)
            axis = AxisParams(axis_label="z", trap_frequency=omega, dark_frequency=dark, potential_kind="inverted")
            noise = NoiseSpec.from_heating_rate(heating, omega)
            state = second_moments_inverted(t, thermal_like_state(sigma0, omega, MASS), axis, noise, MASS)
            expected = variance_inverted(t, sigma0 ** 2, omega, dark, noise.gamma1, MASS)
            assert state.var_position == pytest.approx(expected, rel=1e-10)

    def test_position_matches_variance_jump(self, u_axis, u_noise, u_initial):
        for t in np.linspace(0, 400e-6, 17):
            state = second_moments_jump(t, u_initial, u_axis, u_noise, MASS)
            expected = variance_jump(t, u_initial.var_position, u_axis.trap_frequency, u_axis.dark_frequency,
                                     u_noise.gamma1, MASS)
            assert state.var_position == pytest.approx(expected, rel=1e-10)

    def test_position_matches_variance_free(self, z_noise, z_initial):
        for t in np.linspace(0, 400e-6, 17):
            state = second_moments_free(t, z_initial, z_noise, MASS)
            expected = variance_free(t, SIGMA0_Z ** 2, OMEGA_Z, HEATING_Z, MASS)
            assert state.var_position == pytest.approx(expected, rel=1e-10)

    def test_time_zero_is_identity(self, z_axis, z_noise, z_initial):
        assert second_moments_inverted(0.0, z_initial, z_axis, z_noise, MASS) == z_initial

    def test_noiseless_flow_preserves_determinant(self, z_axis, z_initial):
        for t in np.linspace(0, 300e-6, 13):
            state = second_moments(t, z_initial, z_axis, NoiseSpec.silent(), MASS)
            assert state.determinant == pytest.approx(z_initial.determinant, rel=1e-8)

    def test_purity_decreases_with_heating(self, z_axis, z_noise):
        initial = thermal_like_state(math.sqrt(HBAR / (2 * MASS * OMEGA_Z)), OMEGA_Z, MASS)
        assert purity(initial) == pytest.approx(1.0, abs=1e-9)
        values = [purity(second_moments_inverted(t, initial, z_axis, z_noise, MASS))
                  for t in np.linspace(0, 50e-6, 26)]
        assert np.all(np.diff(values) < 0)

    def test_flow_matrix_is_symplectic(self):
        for regime in ("inverted", "jump", "free"):
            assert np.linalg.det(flow_matrix(regime, DARK_Z, MASS, 123e-6)) == pytest.approx(1.0, rel=1e-12)

    def test_wrong_axis_kind(self, u_axis, z_noise, z_initial):
        with pytest.raises(DomainError):
            second_moments_inverted(1e-6, z_initial, u_axis, z_noise, MASS)


class TestExpansionCurve:
    def test_curve_and_free_comparator(self, z_axis, z_noise, z_initial):
        times = np.linspace(0, 260e-6, 100)
        curve = expansion_curve(times, z_initial, z_axis, z_noise, MASS)
        free = expansion_curve(times, z_initial, z_axis, z_noise, MASS, regime="free")
        assert curve.regime == "inverted" and free.regime == "free"
        assert np.all(np.diff(curve.sigma) >= 0)
        assert curve.sigma[-1] > free.sigma[-1]
        assert len(curve) == 100

    def test_times_must_increase(self):
        with pytest.raises(DomainError):
            ExpansionCurve(times=[0.0, 2e-6, 1e-6], sigma=[1e-12, 2e-12, 3e-12], regime="inverted")

    def test_sigma_must_be_non_negative(self):
        with pytest.raises(DomainError):
            ExpansionCurve(times=[0.0, 1e-6], sigma=[1e-12, -1e-12], regime="free")
