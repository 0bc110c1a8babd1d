import math
from statistics import NormalDist

import numpy as np
import pytest

from loopguard.estimation import (Chi2Detector, KalmanFilter, chi2_cdf,
                                  chi2_quantile, residual_power,
                                  steady_state_gain)
from loopguard.plants import dc_motor_model
from loopguard.statespace import LtiModel, SimState, gaussian_noise, lti_step


# --- independent oracles ------------------------------------------------------

class TextbookKalman:
    """Straight transcription of the two-step filter equations, using plain
    matrix inversion.  Kept deliberately independent of the production code."""

    def __init__(self, model, x0, P0):
        self.m = model
        self.x = np.array(x0, dtype=float).reshape(-1, 1)
        self.P = np.array(P0, dtype=float)

    def step(self, u, y):
        m = self.m
        u = np.array(u, dtype=float).reshape(-1, 1)
        y = np.array(y, dtype=float).reshape(-1, 1)
        x_pred = m.A @ self.x + m.B @ u
        P_pred = m.A @ self.P @ m.A.T + m.Q
        S = m.C @ P_pred @ m.C.T + m.R
        K = P_pred @ m.C.T @ np.linalg.inv(S)
        r = y - (m.C @ x_pred + m.D @ u)
        self.x = x_pred + K @ r
        self.P = (np.eye(m.A.shape[0]) - K @ m.C) @ P_pred
        return r


def chi2_cdf_quadrature(x, dof, steps=40000):
    """Simpson integration of the chi-square density with the substitution
    t = x s^2, which removes the dof=1 endpoint singularity."""
    if x <= 0:
        return 0.0
    k = dof / 2.0
    norm = 1.0 / (2 ** k * math.gamma(k))

    def integrand(s):
        # norm * (x s^2)^(k-1) * exp(-x s^2 / 2) * 2 x s, with the s -> 0
        # limit folded in analytically.
        if s == 0.0:
            return norm * 2.0 * math.sqrt(x) if dof == 1 else 0.0
        t = x * s * s
        return norm * t ** (k - 1) * math.exp(-t / 2.0) * 2.0 * x * s

    total = 0.0
    n = steps
    h = 1.0 / n
    for i in range(n + 1):
        w = 1.0 if i in (0, n) else (4.0 if i % 2 else 2.0)
        total += w * integrand(i * h)
    return total * h / 3.0


def random_stable_system(rng, n, p):
    A = rng.normal(size=(n, n))
    A *= 0.9 / max(abs(np.linalg.eigvals(A)))
    B = rng.normal(size=(n, 1))
    C = rng.normal(size=(p, n))
    L = rng.normal(size=(n, n)) * 0.3
    Q = L @ L.T + 0.01 * np.eye(n)
    M = rng.normal(size=(p, p)) * 0.3
    R = M @ M.T + 0.05 * np.eye(p)
    return LtiModel(A=A, B=B, C=C, D=np.zeros((p, 1)), Q=Q, R=R, ts=0.1)


# --- Kalman filter ------------------------------------------------------------

class TestKalmanFilter:
    def test_known_state_zero_p0_first_prediction_exact(self):
        m = dc_motor_model()
        kf = KalmanFilter(m, [10.0], [[0.0]])
        y_pred = kf.predict([5.0])
        assert y_pred[0, 0] == pytest.approx(0.91 * 10.0 + 0.095 * 5.0)

    def test_unknown_state_sentinel_inflates_p0(self):
        m = dc_motor_model()
        kf = KalmanFilter(m)
        assert np.allclose(kf.x_hat, 0.0)
        assert kf.P[0, 0] == pytest.approx(1e6)

    def test_asymmetric_p0_rejected(self):
        rng = np.random.default_rng(0)
        m = random_stable_system(rng, 2, 1)
        with pytest.raises(ValueError, match="P0"):
            KalmanFilter(m, np.zeros(2), [[1.0, 0.5], [0.0, 1.0]])

    def test_scalar_predict_arithmetic(self):
        m = dc_motor_model()
        kf = KalmanFilter(m, [10.0], [[1.0]])
        y_pred = kf.predict([0.0])
        assert y_pred[0, 0] == pytest.approx(9.1)
        # P_pred = 0.91^2 * 1 + 0.005
        assert kf.innovation_covariance()[0, 0] == pytest.approx(0.8331 + 0.1)

    def test_scalar_gain_from_predicted_covariance(self):
        m = dc_motor_model()
        kf = KalmanFilter(m, [10.0], [[1.0]])
        kf.predict([0.0])
        p_pred = 0.91 ** 2 * 1.0 + 0.005
        kf.update([9.1])  # residual zero: x_hat stays at prediction
        k_expected = p_pred / (p_pred + 0.1)
        assert kf.P[0, 0] == pytest.approx((1 - k_expected) * p_pred)
        assert kf.x_hat[0, 0] == pytest.approx(9.1)

    def test_identity_model_keeps_estimate(self):
        m = LtiModel(A=np.eye(2), B=np.zeros((2, 1)), C=np.eye(2),
                     D=np.zeros((2, 1)), Q=np.zeros((2, 2)), R=np.eye(2), ts=1.0)
        kf = KalmanFilter(m, [1.0, -2.0], np.zeros((2, 2)))
        y = kf.predict([0.0])
        assert np.allclose(y, [[1.0], [-2.0]])

    def test_update_before_predict_raises(self):
        kf = KalmanFilter(dc_motor_model(), [0.0], [[0.0]])
        with pytest.raises(RuntimeError):
            kf.update([0.0])

    def test_feedthrough_prediction_uses_current_input(self):
        m = LtiModel(A=[[1.0]], B=[[0.775]], C=[[1.0]], D=[[3.275]],
                     Q=[[0.0]], R=[[1e-4]], ts=0.05)
        kf = KalmanFilter(m, [0.0], [[0.0]])
        y = kf.predict([2.0], u_out=[1.0])
        assert y[0, 0] == pytest.approx(0.775 * 2.0 + 3.275 * 1.0)

    def test_matches_textbook_filter_on_random_system(self):
        rng = np.random.default_rng(42)
        m = random_stable_system(rng, 3, 2)
        kf = KalmanFilter(m, np.zeros(3), np.eye(3))
        oracle = TextbookKalman(m, np.zeros(3), np.eye(3))
        state = SimState(np.zeros((3, 1)))
        for k in range(500):
            u = [math.sin(0.05 * k)]
            w = gaussian_noise(rng, m.Q)
            v = gaussian_noise(rng, m.R)
            state, y = lti_step(m, state, u, w, v)
            kf.predict(u)
            kf.update(y)
            oracle.step(u, y)
            denom = max(np.linalg.norm(oracle.x), 1e-12)
            assert np.linalg.norm(kf.x_hat - oracle.x) / denom < 1e-9
            assert (np.linalg.norm(kf.P - oracle.P)
                    / max(np.linalg.norm(oracle.P), 1e-12)) < 1e-9

    def test_covariance_symmetric_psd_along_run(self):
        rng = np.random.default_rng(7)
        m = random_stable_system(rng, 4, 2)
        kf = KalmanFilter(m)
        state = SimState(np.zeros((4, 1)))
        for k in range(200):
            state, y = lti_step(m, state, [0.1], gaussian_noise(rng, m.Q),
                                gaussian_noise(rng, m.R))
            kf.predict([0.1])
            kf.update(y)
            assert np.max(np.abs(kf.P - kf.P.T)) < 1e-10
            assert np.linalg.eigvalsh(kf.P).min() >= -1e-10

    def test_residual_zero_mean_over_long_run(self):
        m = dc_motor_model()
        rng = np.random.default_rng(101)
        kf = KalmanFilter(m, [0.0], [[0.0]])
        state = SimState(np.zeros((1, 1)))
        n = 100_000
        total = 0.0
        for _ in range(n):
            state, y = lti_step(m, state, [50.0], gaussian_noise(rng, m.Q),
                                gaussian_noise(rng, m.R))
            kf.predict([50.0])
            total += kf.update(y)[0, 0]
        sigma = kf.last_sigma[0, 0]
        assert abs(total / n) <= 4.0 * math.sqrt(sigma / n)


class TestResidualPower:
    def test_scalar(self):
        assert residual_power([1.0], [[0.2]]) == pytest.approx(5.0)

    def test_zero_residual(self):
        assert residual_power([0.0, 0.0], np.eye(2)) == 0.0

    def test_identity_sigma(self):
        assert residual_power([1.0, 1.0], np.eye(2)) == pytest.approx(2.0)

    def test_singular_sigma_rejected(self):
        with pytest.raises(ValueError):
            residual_power([1.0, 1.0], np.zeros((2, 2)))


# --- chi-square ---------------------------------------------------------------

class TestChi2:
    def test_dof2_closed_form(self):
        for prob in (0.9, 0.99, 1 - 1e-6):
            expected = -2.0 * math.log(1.0 - prob)
            assert chi2_quantile(prob, 2) == pytest.approx(expected, abs=1e-9)

    def test_dof1_against_normal_quantile(self):
        # P(chi2_1 <= g) = prob  <=>  g = z^2 with z the normal quantile at
        # 1 - (1-prob)/2.
        expected = NormalDist().inv_cdf(1 - 5e-7) ** 2
        got = chi2_quantile(1 - 1e-6, 1)
        assert got == pytest.approx(expected, rel=1e-5)
        assert got == pytest.approx(23.928, abs=2e-3)

    def test_dof1_median_against_quadrature(self):
        g = chi2_quantile(0.5, 1)
        assert g == pytest.approx(0.4549, abs=1e-4)
        assert chi2_cdf_quadrature(g, 1) == pytest.approx(0.5, abs=1e-6)

    def test_quantile_cdf_roundtrip(self):
        for dof in (1, 2, 4):
            for prob in (0.01, 0.3, 0.9, 0.999, 1 - 1e-7):
                g = chi2_quantile(prob, dof)
                assert chi2_cdf(g, dof) == pytest.approx(prob, abs=1e-9)

    def test_quantile_monotone_in_prob(self):
        qs = [chi2_quantile(p, 3) for p in (0.1, 0.5, 0.9, 0.99)]
        assert qs == sorted(qs)
        assert len(set(qs)) == len(qs)

    def test_out_of_range_prob_rejected(self):
        for prob in (0.0, 1.0, -0.5, 1.5):
            with pytest.raises(ValueError):
                chi2_quantile(prob, 1)

    def test_detector_threshold(self):
        det = Chi2Detector(p_fa=1e-6, dof=2)
        assert det.g == pytest.approx(-2.0 * math.log(1.0 - (1 - 1e-6)), abs=1e-6)
        assert det.exceeds(det.g + 1e-3)
        assert not det.exceeds(det.g - 1e-3)

    def test_nominal_exceedance_rate_matches_p_fa(self):
        # Run the filter on its exact model and count threshold crossings.
        m = dc_motor_model()
        rng = np.random.default_rng(2024)
        kf = KalmanFilter(m, [0.0], [[0.0]])
        state = SimState(np.zeros((1, 1)))
        thresholds = {p: chi2_quantile(1 - p, 1) for p in (1e-2, 1e-3)}
        counts = {p: 0 for p in thresholds}
        n = 100_000
        for _ in range(n):
            state, y = lti_step(m, state, [20.0], gaussian_noise(rng, m.Q),
                                gaussian_noise(rng, m.R))
            kf.predict([20.0])
            r = kf.update(y)
            power = residual_power(r, kf.last_sigma)
            for p, g in thresholds.items():
                counts[p] += (power > g)
        for p in thresholds:
            rate = counts[p] / n
            half_band = 2.576 * math.sqrt(p * (1 - p) / n)
            assert abs(rate - p) <= half_band, f"p={p}: rate {rate}"


# --- steady-state gain ----------------------------------------------------------

class TestSteadyState:
    def test_no_process_noise_stable_plant_converges_to_zero(self):
        m = LtiModel(A=[[0.8]], B=[[1.0]], C=[[1.0]], D=[[0.0]],
                     Q=[[0.0]], R=[[0.5]], ts=0.1)
        K, P = steady_state_gain(m)
        assert abs(P[0, 0]) < 1e-10
        assert abs(K[0, 0]) < 1e-10

    def test_motor_model_matches_scalar_fixed_point(self):
        m = dc_motor_model()
        # Scalar predicted-covariance recursion iterated separately.
        p = 0.005
        for _ in range(10000):
            p_new = 0.91 ** 2 * (p * 0.1 / (p + 0.1)) + 0.005
            if abs(p_new - p) < 1e-15:
                break
            p = p_new
        K, P = steady_state_gain(m)
        assert P[0, 0] == pytest.approx(p, rel=1e-9)
        assert K[0, 0] == pytest.approx(p / (p + 0.1), rel=1e-9)

    def test_zero_a_converges_to_q(self):
        m = LtiModel(A=[[0.0]], B=[[1.0]], C=[[1.0]], D=[[0.0]],
                     Q=[[0.3]], R=[[0.1]], ts=0.1)
        _, P = steady_state_gain(m)
        assert P[0, 0] == pytest.approx(0.3)

    def test_non_convergence_raises(self):
        # Unstable and unobservable in the unstable mode.
        m = LtiModel(A=[[2.0, 0.0], [0.0, 0.5]], B=np.zeros((2, 1)),
                     C=[[0.0, 1.0]], D=np.zeros((1, 1)),
                     Q=np.eye(2), R=[[0.1]], ts=0.1)
        with pytest.raises(RuntimeError):
            steady_state_gain(m, iters=500)
