"""CAN bus slot model with error confinement and the CAN-SE filter.

Arbitration, stuffing and CRC are abstracted to whole slots: in each slot
the lowest pending identifier wins and the frame is either delivered or
destroyed by an error frame.  Node error counters follow the CAN 2.0
confinement rules in :data:`CONFINEMENT_RULES`.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .errors import ConfigurationError, ValidationError
from .events import Priority, SecurityEvent, SourceClass, Violation

STANDARD_ID_MAX = (1 << 11) - 1
EXTENDED_ID_MAX = (1 << 29) - 1

CONFINEMENT_RULES = {
    "tx_error_inc": 8,
    "rx_error_inc": 1,
    "success_dec": 1,
    "error_passive": 128,
    "bus_off": 256,
}


class Confinement(str, Enum):
    ERROR_ACTIVE = "ErrorActive"
    ERROR_PASSIVE = "ErrorPassive"
    BUS_OFF = "BusOff"


class Role(str, Enum):
    TRANSMITTER = "Transmitter"
    RECEIVER = "Receiver"


class Outcome(str, Enum):
    SUCCESS = "Success"
    ERROR = "Error"


def confinement(tec: int, rec: int) -> Confinement:
    if tec >= CONFINEMENT_RULES["bus_off"]:
        return Confinement.BUS_OFF
    if tec >= CONFINEMENT_RULES["error_passive"] or rec >= CONFINEMENT_RULES["error_passive"]:
        return Confinement.ERROR_PASSIVE
    return Confinement.ERROR_ACTIVE


@dataclass(frozen=True)
class CanFrame:
    can_id: int
    data: bytes = b""
    extended: bool = False
    is_error_frame: bool = False

    def __post_init__(self) -> None:
        limit = EXTENDED_ID_MAX if self.extended else STANDARD_ID_MAX
        if not 0 <= self.can_id <= limit:
            raise ValidationError(f"CAN id {self.can_id:#x} exceeds {limit:#x}")
        if len(self.data) > 8:
            raise ValidationError("CAN frame carries at most 8 data bytes")

    @property
    def dlc(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class ApprovedLists:
    read_ids: frozenset[int] = frozenset()
    write_ids: frozenset[int] = frozenset()


def can_filter_tx(frame: CanFrame, lists: ApprovedLists) -> bool:
    return frame.can_id in lists.write_ids


def can_filter_rx(frame: CanFrame, lists: ApprovedLists) -> bool:
    return frame.can_id in lists.read_ids


@dataclass
class CanNode:
    node_id: int
    lists: ApprovedLists = field(default_factory=ApprovedLists)
    can_se_enabled: bool = True
    notify_threshold: int = CONFINEMENT_RULES["error_passive"]
    priority: Priority = Priority.FIQ
    tec: int = 0
    rec: int = 0
    tx_queue: deque[CanFrame] = field(default_factory=deque)
    delivered: list[tuple[int, CanFrame]] = field(default_factory=list)
    connected: bool = True
    _notified: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.notify_threshold <= CONFINEMENT_RULES["bus_off"]:
            raise ConfigurationError("notify threshold must be in 1..256")

    @property
    def origin(self) -> str:
        return f"can-se:{self.node_id}"

    @property
    def state(self) -> Confinement:
        return confinement(self.tec, self.rec)

    @property
    def active(self) -> bool:
        return self.connected and self.state is not Confinement.BUS_OFF

    def _event(self, kind: Violation, tick: int, note: str = "") -> SecurityEvent:
        return SecurityEvent(SourceClass.CAN, self.origin, kind, tick, priority=self.priority,
                             annotation=note)

    def update_error_counters(self, role: Role, outcome: Outcome, tick: int = 0) -> list[SecurityEvent]:
        if self.state is Confinement.BUS_OFF:
            raise ConfigurationError(f"node {self.node_id} is bus-off")
        rules = CONFINEMENT_RULES
        if outcome is Outcome.ERROR:
            if role is Role.TRANSMITTER:
                self.tec += rules["tx_error_inc"]
            else:
                self.rec += rules["rx_error_inc"]
        elif role is Role.TRANSMITTER:
            self.tec = max(0, self.tec - rules["success_dec"])
        else:
            self.rec = max(0, self.rec - rules["success_dec"])
        events = []
        ev = self.error_limit_check(tick)
        if ev is not None:
            events.append(ev)
        if self.state is Confinement.BUS_OFF:
            self.tx_queue.clear()
            if self.can_se_enabled:
                events.append(self._event(Violation.NODE_BUS_OFF, tick, f"tec{self.tec}"))
        return events

    def error_limit_check(self, tick: int = 0) -> SecurityEvent | None:
        """Latched once-per-run notification when tec or rec reaches the threshold."""
        if self._notified or not self.can_se_enabled:
            return None
        if self.tec >= self.notify_threshold or self.rec >= self.notify_threshold:
            self._notified = True
            return self._event(Violation.MALICIOUS_NODE_SUSPECTED, tick,
                               f"tec{self.tec}_rec{self.rec}")
        return None


@dataclass(frozen=True)
class SlotResult:
    slot: int
    winner: int | None       # node id
    frame: CanFrame | None
    outcome: str             # "ok" | "error" | "idle"
    blocked: tuple[tuple[int, int], ...] = ()      # (node, can id) stopped by tx filter
    dropped: tuple[tuple[int, int], ...] = ()      # (node, can id) stopped by rx filter
    delivered: tuple[int, ...] = ()                # receiving node ids
    events: tuple[SecurityEvent, ...] = ()

    def trace(self) -> str:
        wid = "-" if self.frame is None else f"{self.frame.can_id:#x}"
        node = "-" if self.winner is None else str(self.winner)
        return f"slot={self.slot} winner={wid} outcome={self.outcome} node={node}"


class CanBus:
    def __init__(self, nodes: Iterable[CanNode] = ()):
        self.nodes: dict[int, CanNode] = {}
        for n in nodes:
            self.add(n)
        self.trace: list[SlotResult] = []

    def add(self, node: CanNode) -> None:
        if node.node_id in self.nodes:
            raise ConfigurationError(f"duplicate CAN node {node.node_id}")
        self.nodes[node.node_id] = node

    def send(self, node_id: int, frame: CanFrame) -> None:
        self.nodes[node_id].tx_queue.append(frame)

    def step(self, slot: int, corrupt: Iterable[int] = ()) -> SlotResult:
        """Run one bus slot.

        ``corrupt`` lists node ids an attacker targets this slot; if the
        arbitration winner is among them its frame is destroyed.
        """
        events: list[SecurityEvent] = []
        blocked = []
        contenders: list[tuple[int, int, CanNode]] = []
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            if not node.active:
                continue
            # CAN-SE write filter sits between controller and bus
            while node.tx_queue and node.can_se_enabled and not can_filter_tx(node.tx_queue[0], node.lists):
                frame = node.tx_queue.popleft()
                blocked.append((nid, frame.can_id))
                events.append(node._event(Violation.UNAPPROVED_CAN_ID, slot, f"id{frame.can_id:#x}"))
            if node.tx_queue:
                contenders.append((node.tx_queue[0].can_id, nid, node))
        if not contenders:
            res = SlotResult(slot, None, None, "idle", blocked=tuple(blocked), events=tuple(events))
            self.trace.append(res)
            return res
        contenders.sort(key=lambda c: (c[0], c[1]))
        _, wid, winner = contenders[0]
        frame = winner.tx_queue[0]
        receivers = [n for nid, n in sorted(self.nodes.items()) if nid != wid and n.active]
        dropped = []
        delivered = []
        if wid in set(corrupt):
            # frame stays queued for automatic retransmission
            events += winner.update_error_counters(Role.TRANSMITTER, Outcome.ERROR, slot)
            for r in receivers:
                events += r.update_error_counters(Role.RECEIVER, Outcome.ERROR, slot)
            outcome = "error"
        else:
            winner.tx_queue.popleft()
            events += winner.update_error_counters(Role.TRANSMITTER, Outcome.SUCCESS, slot)
            for r in receivers:
                events += r.update_error_counters(Role.RECEIVER, Outcome.SUCCESS, slot)
                if not r.can_se_enabled or can_filter_rx(frame, r.lists):
                    r.delivered.append((slot, frame))
                    delivered.append(r.node_id)
                else:
                    dropped.append((r.node_id, frame.can_id))
            outcome = "ok"
        res = SlotResult(slot, wid, frame, outcome, tuple(blocked), tuple(dropped),
                         tuple(delivered), tuple(events))
        self.trace.append(res)
        return res
