"""Security Response Engine and Anti-Tamper Engine.

The SRE collects violations from the guardians on interrupt lines, orders
them FIQ-before-IRQ (FIFO within a class) and runs the programmed
countermeasures.  Peripheral-level actions are carried out by the guarding
SPE/SCK; system-level actions by the ATE, which also watches supply
voltage, temperature, clock and single-event upsets.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .errors import ChannelDisabled, ConfigurationError, ExecutionFault, ValidationError
from .events import Priority, SecurityEvent, SourceClass, Violation


class Channel(str, Enum):
    """Interrupt channel an event arrives on."""

    PL = "pl"
    RPU = "rpu"
    APU = "apu"


class ActionLevel(str, Enum):
    PERIPHERAL = "Peripheral"
    SYSTEM = "System"


class ActionKind(str, Enum):
    ISOLATE_PERIPHERAL = "IsolatePeripheral"
    DEACTIVATE_INTERFACE = "DeactivateInterface"
    DELETE_KEYS = "DeleteKeys"
    DISABLE_CRYPTO = "DisableCrypto"
    DISABLE_INTERFACE = "DisableInterface"
    LOCKDOWN = "Lockdown"
    RESET = "Reset"
    LOG_ONLY = "LogOnly"


_TARGETED = {ActionKind.ISOLATE_PERIPHERAL, ActionKind.DEACTIVATE_INTERFACE,
             ActionKind.DISABLE_INTERFACE}
_PERIPHERAL = {ActionKind.ISOLATE_PERIPHERAL, ActionKind.DEACTIVATE_INTERFACE}
_ACTION_RE = re.compile(r"^\s*(\w+)\s*(?:\(\s*([^()\s]*)\s*\))?\s*$")


@dataclass(frozen=True)
class ResponseAction:
    kind: ActionKind
    target: str | None = None

    def __post_init__(self) -> None:
        if (self.kind in _TARGETED) != (self.target is not None):
            raise ValidationError(f"{self.kind.value} target mismatch: {self.target!r}")

    @property
    def level(self) -> ActionLevel:
        return ActionLevel.PERIPHERAL if self.kind in _PERIPHERAL else ActionLevel.SYSTEM

    @classmethod
    def parse(cls, text: str) -> "ResponseAction":
        m = _ACTION_RE.match(text)
        if m is None:
            raise ValidationError(f"cannot parse response action {text!r}")
        try:
            kind = ActionKind(m.group(1))
        except ValueError:
            raise ValidationError(f"unknown response action {m.group(1)!r}") from None
        return cls(kind, m.group(2) or None)

    def __str__(self) -> str:
        return f"{self.kind.value}({self.target})" if self.target else self.kind.value


LOG_ONLY = ResponseAction(ActionKind.LOG_ONLY)


class ResponsePolicy:
    """(source class, violation kind) -> ordered actions; LogOnly otherwise.

    A rule with kind ``*`` matches every kind from its source class; exact
    rules win over wildcards.
    """

    def __init__(self) -> None:
        self._rules: dict[tuple[SourceClass, str], tuple[ResponseAction, ...]] = {}

    def add(self, source: SourceClass | str, kind: Violation | str,
            actions: Iterable[ResponseAction | str]) -> None:
        src = SourceClass(source)
        k = kind.value if isinstance(kind, Violation) else str(kind)
        if k != "*":
            Violation(k)
        acts = tuple(a if isinstance(a, ResponseAction) else ResponseAction.parse(a)
                     for a in actions)
        self._rules[(src, k)] = acts

    def actions_for(self, event: SecurityEvent) -> tuple[ResponseAction, ...]:
        return (self._rules.get((event.source, event.kind.value))
                or self._rules.get((event.source, "*"))
                or (LOG_ONLY,))

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "ResponsePolicy":
        pol = cls()
        for rec in records or ():
            try:
                pol.add(rec["source"], rec["kind"], rec.get("actions", []))
            except (KeyError, ValueError) as exc:
                raise ValidationError(f"bad response rule {rec!r}: {exc}") from None
        return pol

    def to_records(self) -> list[dict]:
        return [{"source": s.value, "kind": k, "actions": [str(a) for a in acts]}
                for (s, k), acts in self._rules.items()]


@dataclass(frozen=True)
class Intake:
    seq: int
    event: SecurityEvent
    channel: Channel


@dataclass(frozen=True)
class Dispatch:
    tick: int
    seq: int
    event: SecurityEvent
    action: ResponseAction
    outcome: str  # "ok" or "fault:<reason>"


Executor = Callable[[ResponseAction, SecurityEvent], None]


class SecurityResponseEngine:
    def __init__(self, policy: ResponsePolicy | None = None, *,
                 interrupts_enabled: bool = True):
        self.policy = policy or ResponsePolicy()
        self.interrupts_enabled = interrupts_enabled
        self._queues: dict[Priority, deque[Intake]] = {p: deque() for p in Priority}
        self._seq = 0
        self.intake_log: list[Intake] = []
        self.rejected: list[tuple[SecurityEvent, Channel]] = []
        self.dispatch_log: list[Dispatch] = []
        self.recent: deque[Dispatch] = deque(maxlen=10)

    @property
    def depth(self) -> int:
        return sum(len(q) for q in self._queues.values())

    def pending(self) -> list[Intake]:
        return [i for p in Priority for i in self._queues[p]]

    def enqueue(self, event: SecurityEvent, channel: Channel = Channel.PL) -> int:
        """Accept ``event``; returns its intake sequence number."""
        if not self.interrupts_enabled:
            raise ConfigurationError("SRE interrupts are not enabled")
        channel = Channel(channel)
        if channel is Channel.APU:
            self.rejected.append((event, channel))
            raise ChannelDisabled("the application-processor interrupt channel is disabled")
        self._seq += 1
        intake = Intake(self._seq, event, channel)
        self._queues[event.priority].append(intake)
        self.intake_log.append(intake)
        return intake.seq

    def dispatch(self, execute: Executor, tick: int, limit: int | None = None) -> list[Dispatch]:
        """Drain up to ``limit`` events (all if None) in priority order."""
        done: list[Dispatch] = []
        handled = 0
        while limit is None or handled < limit:
            intake = next((q.popleft() for p in Priority if (q := self._queues[p])), None)
            if intake is None:
                break
            handled += 1
            for action in self.policy.actions_for(intake.event):
                try:
                    if action.kind is not ActionKind.LOG_ONLY:
                        execute(action, intake.event)
                    outcome = "ok"
                except ExecutionFault as exc:
                    outcome = f"fault:{exc}"
                rec = Dispatch(tick, intake.seq, intake.event, action, outcome)
                done.append(rec)
                self.dispatch_log.append(rec)
                self.recent.append(rec)
        return done


# -- anti-tamper -------------------------------------------------------------

@dataclass(frozen=True)
class TamperReading:
    voltage_mv: int = 950
    temperature_c: int = 25
    clock_ok: bool = True
    seu_detected: bool = False

    def override(self, sensor: str, value: object) -> "TamperReading":
        fields = {"voltage": "voltage_mv", "voltage_mv": "voltage_mv",
                  "temperature": "temperature_c", "temperature_c": "temperature_c",
                  "clock": "clock_ok", "clock_ok": "clock_ok",
                  "seu": "seu_detected", "seu_detected": "seu_detected"}
        try:
            name = fields[sensor]
        except KeyError:
            raise ValidationError(f"unknown sensor {sensor!r}") from None
        kw = dict(self.__dict__)
        kw[name] = bool(value) if name in ("clock_ok", "seu_detected") else int(value)  # type: ignore[call-overload]
        return TamperReading(**kw)


@dataclass(frozen=True)
class TamperLimits:
    v_min_mv: int = 850
    v_max_mv: int = 1050
    t_min_c: int = -40
    t_max_c: int = 125

    def __post_init__(self) -> None:
        if not (self.v_min_mv < self.v_max_mv and self.t_min_c < self.t_max_c):
            raise ConfigurationError("tamper windows need min < max")


def tamper_violations(reading: TamperReading, limits: TamperLimits) -> list[Violation]:
    out = []
    if not limits.v_min_mv <= reading.voltage_mv <= limits.v_max_mv:
        out.append(Violation.VOLTAGE_TAMPER)
    if not limits.t_min_c <= reading.temperature_c <= limits.t_max_c:
        out.append(Violation.TEMPERATURE_TAMPER)
    if not reading.clock_ok:
        out.append(Violation.CLOCK_TAMPER)
    if reading.seu_detected:
        out.append(Violation.SEU_DETECTED)
    return out


def ate_monitor(reading: TamperReading, limits: TamperLimits, tick: int = 0) -> SecurityEvent | None:
    """First violated condition of a single reading, as an FIQ event."""
    found = tamper_violations(reading, limits)
    if not found:
        return None
    return SecurityEvent(SourceClass.ATE, "ate", found[0], tick, priority=Priority.FIQ)


@dataclass
class AntiTamperEngine:
    limits: TamperLimits = field(default_factory=TamperLimits)
    key_store: bytearray = field(default_factory=lambda: bytearray(32))
    crypto_enabled: bool = True
    lockdown: bool = False
    reset_requested: bool = False
    disabled_interfaces: list[str] = field(default_factory=list)
    _active: set[Violation] = field(default_factory=set)

    def monitor(self, reading: TamperReading, tick: int) -> list[SecurityEvent]:
        """Edge-triggered: one event when a condition starts violating."""
        now = tamper_violations(reading, self.limits)
        events = [SecurityEvent(SourceClass.ATE, "ate", v, tick, priority=Priority.FIQ)
                  for v in now if v not in self._active]
        self._active = set(now)
        return events

    def read_keys(self) -> bytes:
        return bytes(self.key_store)

    def execute(self, action: ResponseAction) -> None:
        if action.level is not ActionLevel.SYSTEM:
            raise ExecutionFault(f"{action} is not a system-level action")
        kind = action.kind
        if kind is ActionKind.DELETE_KEYS:
            self.key_store[:] = bytes(len(self.key_store))
        elif kind is ActionKind.DISABLE_CRYPTO:
            self.crypto_enabled = False
        elif kind is ActionKind.LOCKDOWN:
            self.lockdown = True
        elif kind is ActionKind.RESET:
            self.reset_requested = True
        elif kind is ActionKind.DISABLE_INTERFACE:
            assert action.target is not None
            if action.target not in self.disabled_interfaces:
                self.disabled_interfaces.append(action.target)
