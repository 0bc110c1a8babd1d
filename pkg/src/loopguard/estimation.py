"""Kalman filtering, residual statistics and chi-square thresholds.

The residual r = y - predicted_output is the anomaly signal: under a correct
model and no tampering it is zero-mean with covariance S = C P_pred C' + R,
and the residual power r' S^-1 r is chi-square distributed with p degrees of
freedom.  Thresholds come from the inverse chi-square CDF at 1 - P_false_alarm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .statespace import LtiModel, as_column, require_symmetric_psd

UNKNOWN_STATE_VARIANCE = 1e6


class KalmanFilter:
    """Two-step (predict/update) state estimator for an LtiModel.

    Mutable, single-owner.  predict() must be called before each update().
    After update(), `last_residual` and `last_sigma` hold the innovation and
    its covariance for the step just consumed.
    """

    def __init__(self, model: LtiModel, x0=None, P0=None):
        self.model = model
        n = model.n
        if x0 is None and P0 is None:
            # Unknown initial state: zero estimate, very large covariance.
            x0 = np.zeros((n, 1))
            P0 = UNKNOWN_STATE_VARIANCE * np.eye(n)
        elif x0 is None or P0 is None:
            raise ValueError("pass both x0 and P0, or neither")
        self.x_hat = as_column(x0, "x0")
        if self.x_hat.shape[0] != n:
            raise ValueError(f"x0 has length {self.x_hat.shape[0]}; expected n={n}")
        P0 = np.atleast_2d(np.asarray(P0, dtype=float))
        if P0.shape != (n, n):
            raise ValueError(f"P0 has shape {P0.shape}; expected ({n}, {n})")
        require_symmetric_psd(P0, "P0")
        self.P = P0
        self._x_pred = None
        self._P_pred = None
        self._y_pred = None
        self.last_residual = None
        self.last_sigma = None
        self.steps = 0

    def predict(self, u, u_out=None):
        """Time update.  Returns the predicted output C x_pred (+ D u).

        `u` drives the state transition.  For models with feedthrough whose
        output depends on the *current* input (controllers), pass the current
        input as `u_out`; it defaults to `u`.
        """
        m = self.model
        u = as_column(u, "u")
        if u.shape[0] != m.m:
            raise ValueError(f"u has length {u.shape[0]}; expected m={m.m}")
        u_out = u if u_out is None else as_column(u_out, "u_out")
        self._x_pred = m.A @ self.x_hat + m.B @ u
        self._P_pred = m.A @ self.P @ m.A.T + m.Q
        self._y_pred = m.C @ self._x_pred + m.D @ u_out
        return self._y_pred

    def predicted_output(self):
        if self._y_pred is None:
            raise RuntimeError("predict() has not been called")
        return self._y_pred

    def innovation_covariance(self):
        """C P_pred C' + R for the pending prediction."""
        if self._P_pred is None:
            raise RuntimeError("predict() has not been called")
        m = self.model
        return m.C @ self._P_pred @ m.C.T + m.R

    def set_predicted_state(self, x_pred, P_pred, u_out=None):
        """Install an externally computed time update (e.g. sub-period
        integration of an observed command timeline) in place of predict()."""
        m = self.model
        self._x_pred = as_column(x_pred, "x_pred")
        self._P_pred = np.atleast_2d(np.asarray(P_pred, dtype=float))
        d_term = 0.0 if u_out is None else m.D @ as_column(u_out, "u_out")
        self._y_pred = m.C @ self._x_pred + d_term
        return self._y_pred

    def update(self, y):
        """Measurement update.  Returns the residual y - predicted_output."""
        if self._x_pred is None:
            raise RuntimeError("update() called before predict()")
        m = self.model
        y = as_column(y, "y")
        if y.shape[0] != m.p:
            raise ValueError(f"y has length {y.shape[0]}; expected p={m.p}")
        sigma = m.C @ self._P_pred @ m.C.T + m.R
        try:
            chol = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            raise ValueError("residual covariance is not invertible "
                             "(degenerate R/P configuration)") from None
        r = y - self._y_pred
        # K = P_pred C' Sigma^-1 via the Cholesky factor of Sigma.
        k_t = np.linalg.solve(chol.T, np.linalg.solve(chol, m.C @ self._P_pred.T))
        K = k_t.T
        self.x_hat = self._x_pred + K @ r
        P = (np.eye(m.n) - K @ m.C) @ self._P_pred
        self.P = 0.5 * (P + P.T)
        self.last_residual = r
        self.last_sigma = sigma
        self._x_pred = None
        self._P_pred = None
        self._y_pred = None
        self.steps += 1
        return r


def residual_power(r, sigma):
    """r' Sigma^-1 r, solved through the Cholesky factor of Sigma."""
    r = as_column(r, "r")
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ValueError("sigma is singular or not positive definite") from None
    z = np.linalg.solve(chol, r)
    return float(np.sum(z * z))


# --- chi-square distribution ------------------------------------------------
#
# Regularized incomplete gamma pair P(a, x) / Q(a, x) by series and continued
# fraction, then the quantile by bisection seeded with the Wilson-Hilferty
# approximation.  Dependency-free and testable against closed forms.

_MAX_ITER = 500
_EPS = 1e-16


def _gamma_p_series(a, x):
    ap = a
    total = 1.0 / a
    delta = total
    for _ in range(_MAX_ITER):
        ap += 1.0
        delta *= x / ap
        total += delta
        if abs(delta) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a, x):
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gammp(a, x):
    if x < 0 or a <= 0:
        raise ValueError("invalid incomplete gamma arguments")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_p_series(a, x)
    return 1.0 - _gamma_q_contfrac(a, x)


def _gammq(a, x):
    if x < 0 or a <= 0:
        raise ValueError("invalid incomplete gamma arguments")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_contfrac(a, x)


def chi2_cdf(x, dof):
    """CDF of the chi-square distribution with `dof` degrees of freedom."""
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    if x <= 0:
        return 0.0
    return _gammp(0.5 * dof, 0.5 * x)


def chi2_sf(x, dof):
    """Survival function 1 - CDF, computed directly for tail accuracy."""
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    if x <= 0:
        return 1.0
    return _gammq(0.5 * dof, 0.5 * x)


def _wilson_hilferty(prob, dof):
    # Normal quantile via erf-free rational approximation is overkill here;
    # statistics.NormalDist is exact enough to seed the bracket.
    from statistics import NormalDist

    z = NormalDist().inv_cdf(prob)
    c = 2.0 / (9.0 * dof)
    return dof * (1.0 - c + z * math.sqrt(c)) ** 3


def chi2_quantile(prob, dof):
    """Inverse chi-square CDF: g with CDF(g) = prob.

    Bisection on the CDF for prob <= 0.5 and on the survival function for
    prob > 0.5 (relative tail accuracy), bracketed around a Wilson-Hilferty
    seed and run to floating-point interval exhaustion.
    """
    if not 0.0 < prob < 1.0:
        raise ValueError(f"prob must be in (0, 1), got {prob}")
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    guess = max(_wilson_hilferty(prob, dof), 1e-8)
    lo, hi = guess, guess
    if prob > 0.5:
        target = 1.0 - prob

        def f(x):
            return target - chi2_sf(x, dof)
    else:

        def f(x):
            return chi2_cdf(x, dof) - prob

    # Expand the bracket until it straddles the root.
    for _ in range(200):
        if f(lo) <= 0:
            break
        lo *= 0.5
    for _ in range(200):
        if f(hi) >= 0:
            break
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class Chi2Detector:
    """Threshold test on residual power at a target false-alarm probability."""

    p_fa: float
    dof: int
    g: float = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.p_fa < 1.0:
            raise ValueError(f"p_fa must be in (0, 1), got {self.p_fa}")
        if self.dof < 1:
            raise ValueError(f"dof must be >= 1, got {self.dof}")
        self.g = chi2_quantile(1.0 - self.p_fa, self.dof)

    def exceeds(self, power):
        return power > self.g


def steady_state_gain(model, iters=100000, tol=1e-12):
    """Iterate the covariance recursion to its fixed point.

    Returns (K_inf, P_inf) where P_inf is the converged *predicted* error
    covariance and K_inf the corresponding Kalman gain.  Raises on
    non-convergence, which signals a mis-modeled system.
    """
    A, C, Q, R = model.A, model.C, model.Q, model.R
    P = Q.copy()
    for _ in range(iters):
        sigma = C @ P @ C.T + R
        K = np.linalg.solve(sigma.T, (P @ C.T).T).T
        P_upd = (np.eye(model.n) - K @ C) @ P
        P_next = A @ P_upd @ A.T + Q
        if np.max(np.abs(P_next - P)) < tol:
            sigma = C @ P_next @ C.T + R
            K = np.linalg.solve(sigma.T, (P_next @ C.T).T).T
            return K, P_next
        P = P_next
    raise RuntimeError(f"covariance recursion did not converge in {iters} iterations")
