"""Network-attached intrusion detector with residual-pattern localization.

The detector is a promiscuous bus tap.  It consumes only frames -- sensor
measurements, actuation commands, and the context (DC-current) channel --
and never reads plant or node internal state.  Three estimators run side by
side:

* plant estimator: predicts the controlled output from attributed actuation
  commands and checks the sensor stream against it;
* controller estimator: predicts what the controller should have transmitted
  from the measurements it consumed, and checks every observed command
  against that prediction (injected frames are scored individually and never
  averaged away);
* context estimator: predicts the context channel from the commanded input.

Residual powers are chi-square thresholded.  Context awareness comes in two
flavors: adaptive thresholding (speed threshold g = a * I + b) and adaptive
estimation (plant input gain B = d * I + e, d <= 0), both driven by the
smoothed context-channel level I.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .estimation import KalmanFilter, chi2_quantile, residual_power

CONTEXT_MODES = ("off", "adaptive-threshold", "adaptive-estimation")
ATTRIBUTIONS = ("scheduled-slot", "as-applied")


@dataclass
class DetectorConfig:
    """Detector tuning knobs.

    a, b parameterize the adaptive threshold g = a * I + b (b defaults to the
    fixed chi-square threshold at p_fa).  d, e parameterize adaptive
    estimation B = d * I + e (e defaults to the nominal input gain).
    debounce asserts a flag when at least k of the last n windows exceed.
    dc_baseline / dc_load_margin define the load flag: smoothed current above
    baseline + margin.  ema_alpha smooths the context channel; margins are
    calibrated against the same smoothed stream.
    """

    p_fa: float = 1e-3
    attribution: str | None = None  # None: plant default (scheduled-slot for
    # the motor loop, as-applied for lane keeping)
    context_mode: str = "off"
    a: float = 0.0
    b: float | None = None
    d: float = 0.0
    e: float | None = None
    debounce_k: int = 3
    debounce_n: int = 5
    dc_baseline: float | None = None
    dc_load_margin: float | None = None
    dc_threshold: float | None = None  # None: fixed chi-square at p_fa
    ema_alpha: float = 0.05
    startup_inhibit: int = 20
    load_flag_warmup: int = 100  # slow context flag: EMA settling + loop ramp
    controller_model: str = "derived"  # or "published"
    per_component: bool = False

    def __post_init__(self):
        if not 0.0 < self.p_fa < 1.0:
            raise ValueError(f"p_fa must be in (0, 1), got {self.p_fa}")
        if self.attribution is not None and self.attribution not in ATTRIBUTIONS:
            raise ValueError(f"unknown attribution policy {self.attribution!r}")
        if self.context_mode not in CONTEXT_MODES:
            raise ValueError(f"unknown context mode {self.context_mode!r}")
        if self.d > 0:
            raise ValueError(f"adaptive-estimation slope d must be <= 0, got {self.d}")
        if not 1 <= self.debounce_k <= self.debounce_n:
            raise ValueError("debounce must satisfy 1 <= k <= n")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise ValueError("ema_alpha must be in (0, 1]")
        if self.controller_model not in ("derived", "published"):
            raise ValueError(f"unknown controller model {self.controller_model!r}")


@dataclass(frozen=True)
class FlagVector:
    f_speed: bool = False
    f_ctrl: bool = False
    f_dc_load: bool = False
    f_dc_res: bool = False

    def as_tuple(self):
        return (int(self.f_speed), int(self.f_ctrl),
                int(self.f_dc_load), int(self.f_dc_res))


@dataclass(frozen=True)
class Diagnosis:
    label: str
    window: tuple
    flags: FlagVector


# Residual-pattern map: (plant residual, controller residual, context level,
# context residual) -> attack localization.
CHARACTERIZATION_MAP = {
    (0, 0, 0, 0): "nominal",
    (0, 0, 1, 0): "load only",
    (1, 0, 0, 0): "internal sensor or internal actuator attack w/o load",
    (1, 0, 1, 0): "internal sensor or internal actuator attack w/ load",
    (0, 1, 0, 1): "external sensor attack w/o load",
    (0, 1, 1, 1): "external sensor attack w/ load",
    (0, 1, 0, 0): "internal controller attack w/o load",
    (1, 1, 1, 0): "internal controller attack w/ load",
    (1, 1, 0, 1): "external controller attack w/o load",
    (1, 1, 1, 1): "external controller attack w/ load",
}

UNCLASSIFIED = "unclassified anomaly"


def classify(flags, window=(0.0, 0.0)):
    """Exact-match lookup of the flag pattern against the localization map."""
    label = CHARACTERIZATION_MAP.get(flags.as_tuple(), UNCLASSIFIED)
    return Diagnosis(label=label, window=window, flags=flags)


def adaptive_B(config, i_dc, b_nominal):
    """Context-adapted input gain d * I + e, clamped to (0, b_nominal]."""
    if i_dc < 0:
        raise ValueError(f"i_dc must be >= 0, got {i_dc}")
    e = b_nominal if config.e is None else config.e
    value = config.d * i_dc + e
    return float(min(max(value, 1e-9), b_nominal))


class Debounce:
    """k-of-n persistence filter over raw per-window exceedances."""

    def __init__(self, k, n):
        self.k = k
        self.window = deque(maxlen=n)

    def push(self, raw):
        self.window.append(bool(raw))
        return sum(self.window) >= self.k


class CommandMirror:
    """Replays the actuator's acceptance policy and quantizer over observed
    command frames, yielding the as-applied hold timeline."""

    def __init__(self, policy, quantizer, initial=0.0):
        self.policy = policy
        self.quantizer = quantizer
        self.held = float(initial)
        self.last_accept_t = None
        self.events = []  # (t, applied value) accepted this window

    def observe(self, t, value):
        if (self.last_accept_t is not None
                and t - self.last_accept_t < self.policy.min_interarrival - 1e-12):
            return
        self.held = self.quantizer(value)
        self.last_accept_t = t
        self.events.append((t, self.held))

    def take_window(self):
        events, self.events = self.events, []
        return events


class IntrusionDetector:
    """Bus tap running the three estimators and the localization logic.

    Built from public model knowledge only: the plant / controller / context
    LtiModels, message ids, the sampling schedule, and the actuator policy
    (needed to mirror which observed commands were applied).
    """

    def __init__(self, config, schedule, plant_model, plant_msg_id,
                 cmd_msg_id, ctrl_model, ctrl_input_fn,
                 context_model=None, context_msg_id=None,
                 mirror_policy=None, quantizer=float,
                 tick_matrices=None):
        self.config = config
        self.schedule = schedule
        self.plant_model = plant_model
        self.plant_msg_id = plant_msg_id
        self.cmd_msg_id = cmd_msg_id
        self.ctrl_input_fn = ctrl_input_fn
        self.context_msg_id = context_msg_id

        n = plant_model.n
        self.plant_kf = KalmanFilter(plant_model, np.zeros((n, 1)), np.zeros((n, n)))
        self.b_nominal = float(plant_model.B[np.argmax(np.abs(plant_model.B)), 0])
        nc = ctrl_model.n
        self.ctrl_kf = KalmanFilter(ctrl_model, np.zeros((nc, 1)), np.zeros((nc, nc)))
        self.ctx_kf = None
        if context_model is not None:
            m = context_model.n
            self.ctx_kf = KalmanFilter(context_model, np.zeros((m, 1)), np.zeros((m, m)))

        p = plant_model.p
        self.dof_plant = 1 if config.per_component else p
        self.g_plant_fixed = (config.b if config.b is not None
                              else chi2_quantile(1.0 - config.p_fa, self.dof_plant))
        self.g_ctrl = chi2_quantile(1.0 - config.p_fa, 1)
        self.g_ctx = (config.dc_threshold if config.dc_threshold is not None
                      else chi2_quantile(1.0 - config.p_fa, 1))

        self.mirror = None
        if mirror_policy is not None:
            self.mirror = CommandMirror(mirror_policy, quantizer)
        self.quantizer = quantizer
        self._tick_powers = None
        self._tick_bcum = None
        if tick_matrices is not None:
            a_t, b_t = tick_matrices
            tpp = schedule.ticks_per_period
            powers = [np.eye(a_t.shape[0])]
            bcum = [np.zeros_like(b_t)]
            for _ in range(tpp):
                bcum.append(a_t @ bcum[-1] + b_t)
                powers.append(a_t @ powers[-1])
            self._tick_powers = powers
            self._tick_bcum = bcum

        # Per-window bookkeeping.
        self._slot_y = None
        self._slot_i = None
        self._cmds = []  # (t, raw value) in arrival order
        self._window_start_held = 0.0
        self._ctrl_input_prev = np.zeros((ctrl_model.m, 1))
        self._ctrl_sigma = None
        self._ctrl_powers = []
        self._ctrl_powers_prev = []
        self._ctrl_first_cmd = None
        self._ctrl_armed = False
        self.ema = None
        self.ignored = []
        self._deb = {name: Debounce(config.debounce_k, config.debounce_n)
                     for name in ("speed", "ctrl", "dc_load", "dc_res")}
        self.diagnoses = []
        self.first_detection_time = None

    # -- frame path --------------------------------------------------------

    def on_frame(self, frame):
        if frame.msg_id == self.plant_msg_id:
            if self._slot_y is None:
                self._slot_y = np.array(frame.payload, dtype=float).reshape(-1, 1)
                self._arm_controller(frame.t, self._slot_y)
        elif frame.msg_id == self.context_msg_id:
            if self._slot_i is None:
                self._slot_i = float(frame.payload[0])
        elif frame.msg_id == self.cmd_msg_id:
            value = float(frame.payload[0])
            self._cmds.append((frame.t, value))
            if self.mirror is not None:
                self.mirror.observe(frame.t, value)
            if self._ctrl_armed:
                r = value - float(self.ctrl_kf.predicted_output()[0, 0])
                self._ctrl_powers.append(r * r / self._ctrl_sigma)
                if self._ctrl_first_cmd is None:
                    self._ctrl_first_cmd = value
        else:
            self.ignored.append(frame.msg_id)
        return ()

    def _arm_controller(self, t, y_vec):
        """Close out the previous controller window and predict the next
        command from the measurement the controller is about to consume."""
        if self._ctrl_armed:
            obs = self._ctrl_first_cmd
            if obs is None:
                obs = float(self.ctrl_kf.predicted_output()[0, 0])
            self.ctrl_kf.update([obs])
        self._ctrl_powers_prev = self._ctrl_powers
        self._ctrl_powers = []
        self._ctrl_first_cmd = None
        u_now = np.asarray(self.ctrl_input_fn(t, y_vec), dtype=float).reshape(-1, 1)
        self.ctrl_kf.predict(self._ctrl_input_prev, u_out=u_now)
        sig = self.ctrl_kf.innovation_covariance()
        self._ctrl_sigma = float(sig[0, 0])
        self._ctrl_input_prev = u_now
        self._ctrl_armed = True

    # -- attribution -------------------------------------------------------

    def _window_cmds(self, t_now):
        past = [(t, v) for t, v in self._cmds if t < t_now - 1e-12]
        current = [(t, v) for t, v in self._cmds if t >= t_now - 1e-12]
        self._cmds = current
        return past

    def _attributed_input(self, cmds):
        """Scheduled-slot input: the window's first observed command, passed
        through the actuation quantizer (mirroring the physical boundary)."""
        if cmds:
            return self.quantizer(cmds[0][1])
        return self._window_start_held

    def _commanded_total(self, cmds):
        """Context-channel input attribution: the window's total commanded
        actuation.  A single well-formed command per window makes this the
        scheduled value; frame injection multiplies it."""
        if cmds:
            return float(sum(self.quantizer(v) for _, v in cmds))
        return self._window_start_held

    def _predict_plant_as_applied(self, window_t0):
        """Integrate the mirrored hold timeline through the tick-level model:
        exact attribution of what the actuator actually applied."""
        events = self.mirror.take_window()
        tpp = self.schedule.ticks_per_period
        tick = self.schedule.tick
        segments = []
        value = self._window_start_held
        start_tick = 0
        for t_ev, v_ev in events:
            k = int(round((t_ev - window_t0) / tick))
            k = min(max(k, 0), tpp)
            if k > start_tick:
                segments.append((k - start_tick, value))
            value = v_ev
            start_tick = k
        if tpp > start_tick:
            segments.append((tpp - start_tick, value))
        self._window_start_held = value
        x = self.plant_kf.x_hat
        for n_ticks, u in segments:
            x = self._tick_powers[n_ticks] @ x + self._tick_bcum[n_ticks] * u
        m = self.plant_model
        p_pred = m.A @ self.plant_kf.P @ m.A.T + m.Q
        self.plant_kf.set_predicted_state(x, p_pred)

    # -- window evaluation ---------------------------------------------------

    def end_of_slot(self, t, window):
        """Evaluate the window that just ended.  Called once per sampling
        period after all slot-tick frames have been dispatched."""
        cfg = self.config
        record = {"t": t, "r_speed_pow": 0.0, "r_ctrl_pow": 0.0, "r_dc_pow": 0.0,
                  "g_speed": self.g_plant_fixed, "f_speed": False, "f_ctrl": False,
                  "f_dc_load": False, "f_dc_res": False, "label": "nominal",
                  "i_dc_smooth": self.ema if self.ema is not None else 0.0,
                  "y_reported": (float(self._slot_y[0, 0])
                                 if self._slot_y is not None else 0.0),
                  "i_dc": self._slot_i if self._slot_i is not None else 0.0}
        ema_prev = self.ema
        if window == 0:
            # The first slot only opens window 0; commands observed now are
            # attributed when the window closes at the next slot.
            diagnosis = classify(FlagVector(), window=(t, t))
            self.diagnoses.append(diagnosis)
            self._finish_window(record, t)
            return record

        cmds = self._window_cmds(t)

        # Plant estimator over the closed window, then update with this
        # slot's measurement.
        if cfg.context_mode == "adaptive-estimation" and ema_prev is not None:
            b_adapted = adaptive_B(cfg, max(ema_prev, 0.0), self.b_nominal)
            idx = int(np.argmax(np.abs(self.plant_model.B)))
            b_new = self.plant_model.B.copy()
            b_new[idx, 0] = b_adapted
            self.plant_kf.model = replace(self.plant_model, B=b_new)
        if cfg.attribution == "as-applied" and self.mirror is not None:
            self._predict_plant_as_applied(t - self.schedule.ts)
        else:
            u_attr = self._attributed_input(cmds)
            if cmds:
                self._window_start_held = self.quantizer(cmds[-1][1])
            self.plant_kf.predict([u_attr])
        r_speed_pow = 0.0
        if self._slot_y is not None:
            r = self.plant_kf.update(self._slot_y)
            sigma = self.plant_kf.last_sigma
            if cfg.per_component:
                powers = [float(r[i, 0] ** 2 / sigma[i, i]) for i in range(r.shape[0])]
                r_speed_pow = max(powers)
            else:
                r_speed_pow = residual_power(r, sigma)

        # Context estimator: commanded-total input, measured current output.
        r_dc_pow = 0.0
        if self.ctx_kf is not None and self._slot_i is not None:
            total = self._commanded_total(cmds)
            self.ctx_kf.predict([total])
            r_dc = self.ctx_kf.update([self._slot_i])
            r_dc_pow = residual_power(r_dc, self.ctx_kf.last_sigma)

        r_ctrl_pow = max(self._ctrl_powers_prev, default=0.0)

        # Thresholds: the speed threshold adapts to context when configured;
        # controller and context channels use fixed chi-square thresholds.
        g_speed = self.g_plant_fixed
        if cfg.context_mode == "adaptive-threshold" and ema_prev is not None:
            g_speed = cfg.a * ema_prev + self.g_plant_fixed

        inhibited = window < cfg.startup_inhibit
        raw_speed = (not inhibited) and r_speed_pow > g_speed
        raw_ctrl = (not inhibited) and r_ctrl_pow > self.g_ctrl
        raw_dc_res = (not inhibited) and r_dc_pow > self.g_ctx
        raw_dc_load = False
        if (window >= cfg.load_flag_warmup and ema_prev is not None
                and cfg.dc_baseline is not None and cfg.dc_load_margin is not None):
            raw_dc_load = ema_prev > cfg.dc_baseline + cfg.dc_load_margin

        flags = FlagVector(
            f_speed=self._deb["speed"].push(raw_speed),
            f_ctrl=self._deb["ctrl"].push(raw_ctrl),
            f_dc_load=self._deb["dc_load"].push(raw_dc_load),
            f_dc_res=self._deb["dc_res"].push(raw_dc_res),
        )
        diagnosis = classify(flags, window=(t - self.schedule.ts, t))
        self.diagnoses.append(diagnosis)
        if (self.first_detection_time is None
                and flags.as_tuple() != (0, 0, 0, 0)):
            self.first_detection_time = t

        record.update(r_speed_pow=r_speed_pow, r_ctrl_pow=r_ctrl_pow,
                      r_dc_pow=r_dc_pow, g_speed=g_speed,
                      f_speed=flags.f_speed, f_ctrl=flags.f_ctrl,
                      f_dc_load=flags.f_dc_load, f_dc_res=flags.f_dc_res,
                      label=diagnosis.label)
        self._finish_window(record, t)
        return record

    def _finish_window(self, record, t):
        if self._slot_i is not None:
            alpha = self.config.ema_alpha
            self.ema = (self._slot_i if self.ema is None
                        else alpha * self._slot_i + (1 - alpha) * self.ema)
            record["i_dc_smooth"] = self.ema
        self._slot_y = None
        self._slot_i = None
