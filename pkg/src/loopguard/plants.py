"""Concrete model library for the two simulated control loops.

DC-motor speed loop (50 ms period): first-order speed model driven by an
8-bit PWM command, with a second-order DC-current channel used as the
operational-context sensor.  Lane keeping (100 ms period): fourth-order
lateral error dynamics around a fixed cruising speed.

Speed is expressed in encoder counts per sampling window throughout; no
conversion to rpm is performed anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .statespace import LtiModel, as_column, discretize_zoh

DC_TS = 0.05
LANE_TS = 0.1


def dc_motor_model():
    """First-order speed-vs-PWM model: x' = 0.91 x + 0.095 u, y = x."""
    return LtiModel(A=[[0.91]], B=[[0.095]], C=[[1.0]], D=[[0.0]],
                    Q=[[0.005]], R=[[0.1]], ts=DC_TS)


def dc_current_model():
    """Second-order DC-current-vs-PWM model; the first state is the actual
    current magnitude (amps)."""
    return LtiModel(A=[[0.0, 1.0], [-0.6349, 1.6148]],
                    B=[[0.0602], [0.0392]],
                    C=[[1.0, 0.0]], D=[[0.0]],
                    Q=[[1e-5, 0.0], [0.0, 1e-5]], R=[[0.2]], ts=DC_TS)


def dc_current_dc_gain():
    """Steady-state amps per unit of held PWM input."""
    model = dc_current_model()
    g = model.C @ np.linalg.solve(np.eye(2) - model.A, model.B)
    return float(g[0, 0])


@dataclass(frozen=True)
class VehicleParams:
    """Mid-size sedan defaults; any consistent parameter set is acceptable."""

    m: float = 1575.0       # total mass [kg]
    lf: float = 1.2         # CG to front axle [m]
    lr: float = 1.6         # CG to rear axle [m]
    cf: float = 80000.0     # front cornering stiffness [N/rad]
    cr: float = 80000.0     # rear cornering stiffness [N/rad]
    iz: float = 2875.0      # yaw inertia [kg m^2]
    vx: float = 30.0        # longitudinal speed [m/s]

    def __post_init__(self):
        for name in ("m", "lf", "lr", "cf", "cr", "iz", "vx"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def lw(self):
        return self.lf + self.lr

    @property
    def mf(self):
        return self.m * self.lr / self.lw

    @property
    def mr(self):
        return self.m * self.lf / self.lw


def lane_keeping_matrices(params):
    """Continuous-time lateral error dynamics (Ac, Bc, C).

    States: lateral error, its rate, yaw error, its rate.  Input is the
    steering angle; measured outputs are lateral error and yaw error.
    """
    m, iz, vx = params.m, params.iz, params.vx
    cf, cr, lf, lr = params.cf, params.cr, params.lf, params.lr
    a22 = -(2 * cf + 2 * cr) / (m * vx)
    a23 = (2 * cf + 2 * cr) / m
    a24 = (-2 * cf * lf + 2 * cr * lr) / (m * vx)
    a42 = -(2 * cf * lf - 2 * cr * lr) / (iz * vx)
    a43 = (2 * cf * lf - 2 * cr * lr) / iz
    a44 = -(2 * cf * lf ** 2 + 2 * cr * lr ** 2) / (iz * vx)
    Ac = np.array([[0.0, 1.0, 0.0, 0.0],
                   [0.0, a22, a23, a24],
                   [0.0, 0.0, 0.0, 1.0],
                   [0.0, a42, a43, a44]])
    Bc = np.array([[0.0], [2 * cf / m], [0.0], [2 * cf * lf / iz]])
    C = np.array([[1.0, 0.0, 0.0, 0.0],
                  [0.0, 0.0, 1.0, 0.0]])
    return Ac, Bc, C


# Default noise levels for the simulated camera loop: ~1 cm lateral and
# ~3 mrad yaw measurement noise, small state noise on the rate states.
LANE_Q = np.diag([1e-8, 4e-6, 1e-9, 4e-7])
LANE_R = np.diag([1e-4, 1e-5])


def lane_keeping_model(params=None, ts=LANE_TS, Q=None, R=None, order=12):
    """Discretized lane-keeping model ready for simulation/estimation."""
    params = params or VehicleParams()
    Ac, Bc, C = lane_keeping_matrices(params)
    Ad, Bd = discretize_zoh(Ac, Bc, ts, order=order)
    return LtiModel(A=Ad, B=Bd, C=C, D=np.zeros((2, 1)),
                    Q=LANE_Q if Q is None else Q,
                    R=LANE_R if R is None else R, ts=ts)


@dataclass(frozen=True)
class LoadDisturbance:
    """Shaft-load stand-in: drags the speed state down and lifts the DC
    current, once per sampling step inside [t_on, t_off).

    speed_drag is an additive (negative) speed-state offset per step.
    current_rise is the steady-state current lift in amps; it enters the
    current channel through its input direction (the load draws current the
    way extra drive would), because a raw offset on the first state of the
    companion-form model inverts sign through the dynamics.
    """

    t_on: float
    t_off: float
    speed_drag: float = 0.0
    current_rise: float = 0.0

    def __post_init__(self):
        if not self.t_on < self.t_off:
            raise ValueError(f"t_on must precede t_off, got [{self.t_on}, {self.t_off})")
        if self.speed_drag > 0:
            raise ValueError(f"speed_drag must be <= 0, got {self.speed_drag}")
        if self.current_rise < 0:
            raise ValueError(f"current_rise must be >= 0, got {self.current_rise}")

    def active(self, t):
        return self.t_on <= t < self.t_off

    def scaled(self, factor):
        return LoadDisturbance(self.t_on, self.t_off,
                               self.speed_drag * factor, self.current_rise * factor)


_CURRENT_KICK = None


def _current_kick_direction():
    # Per-step state kick whose closed-form steady state lifts the measured
    # current by exactly one amp.
    global _CURRENT_KICK
    if _CURRENT_KICK is None:
        model = dc_current_model()
        _CURRENT_KICK = model.B / dc_current_dc_gain()
    return _CURRENT_KICK


def apply_load(disturbance, t, plant_states):
    """Apply the load offsets for time t to (speed_state, current_state).

    Identity outside the active interval.  States are column vectors; the
    returned pair holds adjusted copies.
    """
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    speed_x, current_x = plant_states
    speed_x = as_column(speed_x, "speed state")
    current_x = as_column(current_x, "current state")
    if disturbance is None or not disturbance.active(t):
        return speed_x, current_x
    speed_x = speed_x + disturbance.speed_drag
    if disturbance.current_rise:
        current_x = current_x + disturbance.current_rise * _current_kick_direction()
    return speed_x, current_x
