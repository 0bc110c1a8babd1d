"""Controllers used inside the loop and their LTI models.

Discrete parallel PID with back-calculation anti-windup, the published scalar
controller model used by the detector, an exact LTI re-derivation of the PID
implementation, and LQR gain synthesis by Riccati iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .statespace import LtiModel, as_matrix, require_symmetric_pd, require_symmetric_psd


@dataclass(frozen=True)
class PidConfig:
    """Parallel PID gains plus saturation limits.

    kb is the back-calculation gain feeding the saturation excess back into
    the integral term.
    """

    kp: float
    ki: float
    kd: float
    kb: float
    ts: float
    u_min: float = -math.inf
    u_max: float = math.inf

    def __post_init__(self):
        if not self.ts > 0:
            raise ValueError(f"ts must be positive, got {self.ts}")
        if not self.u_min < self.u_max:
            raise ValueError(f"u_min must be below u_max, got [{self.u_min}, {self.u_max}]")


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    prev_error: float = 0.0


def pid_step(config, state, error):
    """One controller step: returns (u_applied, new_state).

    Forward-Euler integral updated before the output, backward-difference
    derivative, clamp to [u_min, u_max], then back-calculation:
    integral += kb * (u_applied - u_raw).
    """
    if not math.isfinite(error):
        raise ValueError(f"error must be finite, got {error}")
    integral = state.integral + config.ki * config.ts * error
    u_raw = (config.kp * error + integral
             + config.kd * (error - state.prev_error) / config.ts)
    u_applied = min(max(u_raw, config.u_min), config.u_max)
    integral += config.kb * (u_applied - u_raw)
    return u_applied, PidState(integral=integral, prev_error=error)


# DC-motor speed loop gains (tuned for the first-order shop model).
def speed_pid_config():
    return PidConfig(kp=2.5, ki=15.5, kd=0.0, kb=0.01, ts=0.05, u_min=0.0, u_max=255.0)


def controller_lti_model():
    """Scalar controller model identified on the running implementation:
    x' = x + u, y = 5.775 x + 3.725 u, with Q=0.5 and R=0.0005."""
    return LtiModel(A=[[1.0]], B=[[1.0]], C=[[5.775]], D=[[3.725]],
                    Q=[[0.5]], R=[[0.0005]], ts=0.05)


def pid_lti_model(config, q=0.0, r=0.0005):
    """Exact LTI form of the unsaturated PID recursion.

    State [accumulated integral, previous error]; input is the error signal,
    output the command:

        x1[k+1] = x1[k] + ki*ts*e[k]        x2[k+1] = e[k]
        u[k]    = x1[k] - (kd/ts) x2[k] + (kp + ki*ts + kd/ts) e[k]

    which reproduces pid_step exactly while the output stays inside the
    saturation limits.  q=0 expresses full certainty in the software
    implementation; r covers the command quantization floor.
    """
    kdt = config.kd / config.ts
    A = [[1.0, 0.0], [0.0, 0.0]]
    B = [[config.ki * config.ts], [1.0]]
    C = [[1.0, -kdt]]
    D = [[config.kp + config.ki * config.ts + kdt]]
    return LtiModel(A=A, B=B, C=C, D=D, Q=np.eye(2) * q, R=[[r]], ts=config.ts)


def lqg_compensator_model(plant, K, L, r=1e-10):
    """LTI model of an observer-based state-feedback controller.

    The controller runs predict/update/feedback each sample:
        xp = A z + B u_prev,  z' = xp + L (y - C xp),  u = -K z'
    With state z (the post-update estimate) and the measurement vector as
    input, this is A_c = (I - L C)(A - B K), B_c = L, C_c = -K A_c,
    D_c = -K L.  Process noise is zero (exact software); r is a small
    diagonal floor on the command covariance.
    """
    A, B, C = plant.A, plant.B, plant.C
    n = A.shape[0]
    ilc = np.eye(n) - L @ C
    a_c = ilc @ (A - B @ K)
    c_c = -K @ a_c
    d_c = -K @ L
    m_out = K.shape[0]
    return LtiModel(A=a_c, B=L, C=c_c, D=d_c,
                    Q=np.zeros((n, n)), R=np.eye(m_out) * r, ts=plant.ts)


@dataclass(frozen=True)
class LqrWeights:
    Qw: np.ndarray
    Rw: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Qw", as_matrix(self.Qw, "Qw"))
        object.__setattr__(self, "Rw", as_matrix(self.Rw, "Rw"))
        require_symmetric_psd(self.Qw, "Qw")
        require_symmetric_pd(self.Rw, "Rw")


def dare_solve(A, B, Qw, Rw, iters=100000, tol=1e-12):
    """Fixed point of the discrete Riccati recursion
    P <- Qw + A'(P - P B (Rw + B'PB)^-1 B'P)A."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    Qw = as_matrix(Qw, "Qw")
    Rw = as_matrix(Rw, "Rw")
    P = Qw.copy()
    for _ in range(iters):
        bpb = Rw + B.T @ P @ B
        gain = np.linalg.solve(bpb, B.T @ P @ A)
        P_next = Qw + A.T @ (P @ A - P @ B @ gain)
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) < tol:
            return P_next
        P = P_next
    raise RuntimeError(f"Riccati recursion did not converge in {iters} iterations")


def lqr_gain(A, B, Qw, Rw, iters=100000, tol=1e-12):
    """Infinite-horizon LQR gain K = (Rw + B'PB)^-1 B'PA."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    P = dare_solve(A, B, Qw, Rw, iters=iters, tol=tol)
    return np.linalg.solve(as_matrix(Rw, "Rw") + B.T @ P @ B, B.T @ P @ A)
