"""Deterministic discrete-event broadcast-bus simulation.

One simulation owns a shared bus, a set of ECU nodes (sensor, controller,
actuator, optional attackers, and a promiscuous detector tap) and the
physical plant channels.  Receivers dispatch on message id only: the
receiver-visible view of a frame carries no sender field, so no node can
branch on sender identity.  Time advances on a fixed tick grid; the control
sampling period is an integer number of ticks, and plants integrate every
tick using the currently held actuation value so that sub-period injected
commands physically affect the plant.

Identical (scenario, seed) pairs produce bit-identical frame traces: node
processing order, within-tick arbitration (stable sort by message id) and
all noise streams are fully determined.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .statespace import as_column, discretize_zoh, gaussian_noise


@dataclass(frozen=True)
class Frame:
    """Bus message with ground-truth sender (trace bookkeeping only)."""

    msg_id: int
    sender: int
    payload: tuple
    t: float


@dataclass(frozen=True)
class ReceivedFrame:
    """What a receiver sees: message id, payload, timestamp.  No sender."""

    msg_id: int
    payload: tuple
    t: float


@dataclass(frozen=True)
class BusSchedule:
    """Tick grid for one control loop."""

    ts: float
    ticks_per_period: int = 20
    sensor_slot: int = 0

    def __post_init__(self):
        if not self.ts > 0:
            raise ValueError(f"ts must be positive, got {self.ts}")
        if self.ticks_per_period < 10:
            raise ValueError("tick must resolve at least 10x the sampling period")
        if not 0 <= self.sensor_slot < self.ticks_per_period:
            raise ValueError("sensor_slot outside the period")

    @property
    def tick(self):
        return self.ts / self.ticks_per_period


@dataclass(frozen=True)
class ActuatorPolicy:
    """Commands arriving closer together than min_interarrival are rejected."""

    min_interarrival: float

    def __post_init__(self):
        if self.min_interarrival < 0:
            raise ValueError("min_interarrival must be >= 0")


class Node:
    """Base ECU behavior: emit on schedule and/or react to received frames.

    Emissions are (msg_id, payload) pairs; the simulation stamps sender and
    time.  Nodes never see who sent a frame.
    """

    def __init__(self, node_id, name):
        self.node_id = node_id
        self.name = name

    def on_tick(self, t, slot_index):
        return ()

    def on_frame(self, frame):
        return ()


class PlantChannel:
    """One physical channel integrated on the tick grid.

    The channel's window-level behavior reproduces its LtiModel exactly:
    tick matrices are chosen so that ticks_per_period deterministic ticks
    under a constant held input equal one model step, and process noise is
    injected once per sampling period at the window boundary.
    """

    def __init__(self, model, a_tick, b_tick, x0=None, name="plant"):
        self.model = model
        self.a_tick = a_tick
        self.b_tick = b_tick
        self.x = np.zeros((model.n, 1)) if x0 is None else as_column(x0, "x0")
        self.name = name

    @classmethod
    def from_discrete(cls, model, ticks_per_period, x0=None, name="plant"):
        """Rescale a period-level discrete model to the tick grid via a
        fractional matrix power (valid for the stable, positive-real-spectrum
        models used here)."""
        vals, vecs = np.linalg.eig(model.A)
        if np.any(vals.real <= 0) or np.any(np.abs(vals.imag) > 1e-12):
            raise ValueError(f"{name}: cannot rescale a model whose spectrum "
                             "is not positive real")
        frac = np.diag(vals.real ** (1.0 / ticks_per_period))
        a_tick = (vecs.real @ frac @ np.linalg.inv(vecs.real))
        b_tick = (a_tick - np.eye(model.n)) @ np.linalg.solve(
            model.A - np.eye(model.n), model.B)
        return cls(model, a_tick, b_tick, x0=x0, name=name)

    @classmethod
    def from_continuous(cls, Ac, Bc, model, ticks_per_period, x0=None,
                        name="plant", order=12):
        a_tick, b_tick = discretize_zoh(Ac, Bc, model.ts / ticks_per_period,
                                        order=order)
        return cls(model, a_tick, b_tick, x0=x0, name=name)

    def tick(self, u):
        self.x = self.a_tick @ self.x + self.b_tick * float(u)

    def output(self):
        """True (noise-free) measured output from the current state."""
        return self.model.C @ self.x


class ActuationState:
    """Zero-order hold shared by the actuator node and the plant channels."""

    def __init__(self, initial=0.0):
        self.held = float(initial)
        self.last_accept_t = None


class SensorNode(Node):
    """Samples its plant channel at the sampling slot and broadcasts the
    noisy measurement.  An installed tamper hook transforms the payload; a
    block hook suppresses emission entirely."""

    def __init__(self, node_id, name, msg_id, channel, meas_rng):
        super().__init__(node_id, name)
        self.msg_id = msg_id
        self.channel = channel
        self.meas_rng = meas_rng
        self.tamper = None
        self.block = None

    def on_tick(self, t, slot_index):
        if slot_index != 0:
            return ()
        if self.block is not None and self.block(t):
            return ()
        y = self.channel.output() + gaussian_noise(self.meas_rng, self.channel.model.R)
        y = y[:, 0]
        if self.tamper is not None:
            y = self.tamper(t, y)
        return ((self.msg_id, tuple(float(v) for v in y)),)


class ControllerNode(Node):
    """Event-driven controller: one actuation frame per consumed sensor
    frame.  `compute(t, measurements)` runs the control law and owns the
    controller state.  Input/output tamper hooks model software attacks on
    the controller ECU."""

    def __init__(self, node_id, name, sensor_msg_id, cmd_msg_id, compute):
        super().__init__(node_id, name)
        self.sensor_msg_id = sensor_msg_id
        self.cmd_msg_id = cmd_msg_id
        self.compute = compute
        self.input_tamper = None
        self.output_tamper = None

    def on_frame(self, frame):
        if frame.msg_id != self.sensor_msg_id:
            return ()
        y = np.array(frame.payload, dtype=float)
        if self.input_tamper is not None:
            y = self.input_tamper(frame.t, y)
        u = self.compute(frame.t, y)
        if self.output_tamper is not None:
            u = self.output_tamper(frame.t, u)
        return ((self.cmd_msg_id, (float(u),)),)


class ActuatorNode(Node):
    """Applies received commands to the shared hold, enforcing the
    minimum-interarrival policy.  The quantizer models the physical
    actuation boundary (PWM rounding for the motor, range clamp for
    steering); a tamper hook models an attacked actuator ECU."""

    def __init__(self, node_id, name, cmd_msg_id, actuation, policy,
                 quantizer=float):
        super().__init__(node_id, name)
        self.cmd_msg_id = cmd_msg_id
        self.actuation = actuation
        self.policy = policy
        self.quantizer = quantizer
        self.tamper = None
        self.rejected = []

    def on_frame(self, frame):
        if frame.msg_id != self.cmd_msg_id:
            return ()
        last = self.actuation.last_accept_t
        if last is not None and frame.t - last < self.policy.min_interarrival - 1e-12:
            self.rejected.append((frame.t, frame.payload[0]))
            return ()
        u = frame.payload[0]
        if self.tamper is not None:
            u = self.tamper(frame.t, u)
        self.actuation.held = self.quantizer(u)
        self.actuation.last_accept_t = frame.t
        return ()


class Bus:
    """Broadcast medium with a global ground-truth trace.

    Frames queue FIFO; same-tick submissions are arbitrated by message id
    (stable, so send order breaks exact ties).  Delivery reaches every node
    except the sender, in attach order, as sender-less ReceivedFrames.
    """

    def __init__(self):
        self.nodes = []
        self.trace = []
        self._queue = deque()

    def attach(self, node):
        self.nodes.append(node)

    def submit(self, sender_id, msg_id, payload, t):
        frame = Frame(msg_id=msg_id, sender=sender_id, payload=tuple(payload), t=t)
        self.trace.append(frame)
        self._queue.append(frame)

    def dispatch(self):
        """Deliver queued frames, cascading any emissions they trigger."""
        while self._queue:
            frame = self._queue.popleft()
            rx = ReceivedFrame(msg_id=frame.msg_id, payload=frame.payload, t=frame.t)
            for node in self.nodes:
                if node.node_id == frame.sender:
                    continue
                for msg_id, payload in node.on_frame(rx) or ():
                    self.submit(node.node_id, msg_id, payload, frame.t)


class Simulation:
    """Single-threaded event loop over the tick grid.

    Per tick: at sampling slots the plant channels first receive their
    per-period process noise and load offsets, then scheduled emissions are
    arbitrated and dispatched (sensor frame -> controller -> actuator all
    within the slot tick), the detector tap is evaluated, and finally every
    channel integrates one tick under the held actuation value.
    """

    def __init__(self, schedule, bus, channels, actuation, process_rngs,
                 boundary_hook=None, detector=None):
        self.schedule = schedule
        self.bus = bus
        self.channels = channels
        self.actuation = actuation
        self.process_rngs = process_rngs
        self.boundary_hook = boundary_hook
        self.detector = detector
        self.window_records = []
        self._window = 0

    def run(self, duration, slot_callback=None):
        tpp = self.schedule.ticks_per_period
        total_ticks = int(round(duration / self.schedule.ts)) * tpp
        for k_tick in range(total_ticks):
            t = (k_tick // tpp) * self.schedule.ts + (k_tick % tpp) * self.schedule.tick
            slot_index = (k_tick - self.schedule.sensor_slot) % tpp
            if slot_index == 0 and k_tick > 0:
                for name, channel in self.channels.items():
                    rng = self.process_rngs.get(name)
                    if rng is not None:
                        channel.x = channel.x + gaussian_noise(rng, channel.model.Q)
                if self.boundary_hook is not None:
                    self.boundary_hook(t, self.channels)
            emissions = []
            for node in self.bus.nodes:
                for msg_id, payload in node.on_tick(t, slot_index) or ():
                    emissions.append((msg_id, node.node_id, payload))
            emissions.sort(key=lambda e: e[0])  # stable: send order breaks ties
            for msg_id, sender_id, payload in emissions:
                self.bus.submit(sender_id, msg_id, payload, t)
            self.bus.dispatch()
            if slot_index == 0:
                record = None
                if self.detector is not None:
                    record = self.detector.end_of_slot(t, self._window)
                if slot_callback is not None:
                    slot_callback(t, self._window, record)
                self.window_records.append(record)
                self._window += 1
            for channel in self.channels.values():
                channel.tick(self.actuation.held)
        return self.window_records
