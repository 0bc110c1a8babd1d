"""Declarative attack specifications, injection hooks and the scenario catalog.

Attacks are characterized by target (sensor / controller / actuator) and
class (internal, i.e. software executing on a legitimate loop ECU, vs
external, i.e. network-based frame injection).  External attacks on the
actuator are invalid: the actuator does not transmit, so there is nothing to
impersonate.

Internal attacks install tamper hooks on the victim node and never change
frame counts.  External attacks add an attacker node that broadcasts spoofed
frames under the victim's message id at rate_multiplier times the nominal
rate, with payload = bias applied to the last legitimately observed value
(the attacker, like any receiver, never sees its own frames back, so "last
observed" is exactly what bus access affords it).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .netsim import Node
from .plants import LoadDisturbance

TARGETS = ("sensor", "controller", "actuator")
KINDS = ("internal", "external")

# Catalog defaults: every DC-motor attack biases its signal by +10 percent;
# disturbances and attacks start a third of the way into the run.
DEFAULT_DURATION = 30.0
DEFAULT_ONSET = 10.0
DEFAULT_BIAS = 1.1
DEFAULT_RATE = 10
DEFAULT_SEED = 1
LOAD_SPEED_DRAG = -0.25
LOAD_CURRENT_RISE = 2.5

LANE_ONSET = 5.0
LANE_DURATION = 30.0
LANE_SENSOR_BIAS_M = 0.2
LANE_STEER_OFFSET_RAD = 0.012


@dataclass(frozen=True)
class AttackSpec:
    """One attack: who is compromised, how, when, and by how much.

    bias is multiplicative by default (payload *= bias); with additive=True
    it is an offset in the signal's own units.  rate_multiplier applies to
    external attacks only.  tamper_point distinguishes internal controller
    attacks on the consumed measurements ("input") from attacks on the
    emitted commands ("output").  block=True turns an internal sensor attack
    into message suppression instead of biasing.
    """

    target: str
    kind: str
    start: float = DEFAULT_ONSET
    stop: float | None = None
    bias: float = DEFAULT_BIAS
    additive: bool = False
    rate_multiplier: int = DEFAULT_RATE
    tamper_point: str = "input"
    block: bool = False
    component: int = 0  # payload component the bias applies to

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack class {self.kind!r}")
        if self.kind == "external" and self.target == "actuator":
            raise ValueError("external actuator attacks are invalid: "
                             "the actuator ECU does not transmit")
        if self.stop is not None and not self.start < self.stop:
            raise ValueError(f"start must precede stop, got [{self.start}, {self.stop})")
        if self.rate_multiplier < 1:
            raise ValueError("rate_multiplier must be >= 1")
        if self.tamper_point not in ("input", "output"):
            raise ValueError(f"unknown tamper_point {self.tamper_point!r}")

    def active(self, t):
        return t >= self.start and (self.stop is None or t < self.stop)

    def transform(self, value):
        """Apply the bias to one scalar."""
        return value + self.bias if self.additive else value * self.bias


@dataclass(frozen=True)
class Scenario:
    """A runnable experiment: optional attack, optional load, plant, seed."""

    id: str
    description: str
    plant: str = "dc-motor"
    attack: AttackSpec | None = None
    load: LoadDisturbance | None = None
    duration: float = DEFAULT_DURATION
    seed: int = DEFAULT_SEED

    def with_overrides(self, duration=None, seed=None):
        out = self
        if duration is not None:
            out = replace(out, duration=duration)
        if seed is not None:
            out = replace(out, seed=seed)
        return out


def _shaft_load(duration):
    return LoadDisturbance(t_on=DEFAULT_ONSET, t_off=duration,
                           speed_drag=LOAD_SPEED_DRAG,
                           current_rise=LOAD_CURRENT_RISE)


def scenario_catalog():
    """The thirteen DC-motor experiment scenarios.

    S1 is the pure shaft-load disturbance; even ids are the six attack
    flavors; each following odd id combines the preceding attack with the
    load.
    """
    dur = DEFAULT_DURATION
    load = _shaft_load(dur)
    attacks = {
        "S2": ("speed measurements biased at the sensor ECU before transmission",
               AttackSpec(target="sensor", kind="internal")),
        "S4": ("biased speed measurements injected onto the bus by an attacker ECU",
               AttackSpec(target="sensor", kind="external")),
        "S6": ("actuation commands biased at the actuator ECU before reaching the motor",
               AttackSpec(target="actuator", kind="internal")),
        "S8": ("biased actuation commands injected onto the bus by an attacker ECU",
               AttackSpec(target="controller", kind="external")),
        "S10": ("sensor measurements biased at the controller ECU after reception",
                AttackSpec(target="controller", kind="internal", tamper_point="input")),
        "S12": ("actuation commands biased at the controller ECU before transmission",
                AttackSpec(target="controller", kind="internal", tamper_point="output")),
    }
    scenarios = [Scenario(id="S1", description="motor shaft loaded, no attack",
                          load=load)]
    for even_id, (desc, spec) in attacks.items():
        scenarios.append(Scenario(id=even_id, description=desc, attack=spec))
        odd_id = f"S{int(even_id[1:]) + 1}"
        scenarios.append(Scenario(id=odd_id, description=f"{desc}, with shaft load",
                                  attack=spec, load=load))
    scenarios.sort(key=lambda s: int(s.id[1:]))
    return scenarios


def lane_keeping_attacks():
    """The two lane-keeping scenarios: a 0.2 m lateral-measurement bias at
    the sensor, and additive steering-command injection at 10x rate."""
    return [
        Scenario(id="LK-internal-sensor",
                 description="lateral position measurement biased by +0.2 m "
                             "at the camera ECU",
                 plant="lane-keeping",
                 attack=AttackSpec(target="sensor", kind="internal",
                                   start=LANE_ONSET, bias=LANE_SENSOR_BIAS_M,
                                   additive=True, component=0),
                 duration=LANE_DURATION),
        Scenario(id="LK-external-controller",
                 description="steering commands injected onto the bus at 10x "
                             "rate to push the vehicle off center",
                 plant="lane-keeping",
                 attack=AttackSpec(target="controller", kind="external",
                                   start=LANE_ONSET, bias=LANE_STEER_OFFSET_RAD,
                                   additive=True),
                 duration=LANE_DURATION),
    ]


def all_scenarios():
    return scenario_catalog() + lane_keeping_attacks()


def find_scenario(scenario_id):
    for sc in all_scenarios():
        if sc.id == scenario_id:
            return sc
    raise KeyError(scenario_id)


class AttackerNode(Node):
    """External attacker: sniffs the victim's message id and re-broadcasts
    biased payloads on an off-slot tick grid at rate_multiplier x the nominal
    rate.  Spoofed frames are indistinguishable from legitimate ones to every
    receiver."""

    def __init__(self, node_id, spec, victim_msg_id, ticks_per_period):
        super().__init__(node_id, "attacker")
        self.spec = spec
        self.victim_msg_id = victim_msg_id
        if ticks_per_period % spec.rate_multiplier:
            raise ValueError("tick grid cannot express the injection rate")
        self.stride = ticks_per_period // spec.rate_multiplier
        self.last_seen = None

    def on_frame(self, frame):
        # Own frames are never delivered back, so this is the last
        # legitimately transmitted payload (single attacker).
        if frame.msg_id == self.victim_msg_id:
            self.last_seen = frame.payload
        return ()

    def on_tick(self, t, slot_index):
        if self.last_seen is None or not self.spec.active(t):
            return ()
        # Odd phase: injections sit between legitimate slots.
        if slot_index % self.stride != self.stride // 2 and self.stride > 1:
            return ()
        payload = list(self.last_seen)
        payload[self.spec.component] = self.spec.transform(payload[self.spec.component])
        return ((self.victim_msg_id, tuple(payload)),)


def install_attack(sim, spec, world):
    """Wire an attack into a built simulation.

    `world` supplies the node handles and message ids (see runner).  Internal
    specs install tamper hooks on the victim node; external specs attach an
    attacker node to the bus.
    """
    if spec is None:
        return
    if spec.kind == "internal":
        if spec.target == "sensor":
            node = world.sensor_node
            if spec.block:
                node.block = spec.active
            else:
                def tamper(t, y, _spec=spec):
                    if _spec.active(t):
                        y = y.copy()
                        y[_spec.component] = _spec.transform(y[_spec.component])
                    return y
                node.tamper = tamper
        elif spec.target == "actuator":
            def tamper_u(t, u, _spec=spec):
                return _spec.transform(u) if _spec.active(t) else u
            world.actuator_node.tamper = tamper_u
        else:  # controller
            if spec.tamper_point == "input":
                def tamper_in(t, y, _spec=spec):
                    if _spec.active(t):
                        y = y.copy()
                        y[_spec.component] = _spec.transform(y[_spec.component])
                    return y
                world.controller_node.input_tamper = tamper_in
            else:
                def tamper_out(t, u, _spec=spec):
                    return _spec.transform(u) if _spec.active(t) else u
                world.controller_node.output_tamper = tamper_out
    else:
        victim = (world.sensor_msg_id if spec.target == "sensor"
                  else world.cmd_msg_id)
        attacker = AttackerNode(node_id=world.attacker_node_id, spec=spec,
                                victim_msg_id=victim,
                                ticks_per_period=sim.schedule.ticks_per_period)
        sim.bus.attach(attacker)
