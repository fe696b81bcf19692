"""Log records and security events.

Every component writes to one :class:`EventLog`.  Lines have the fixed
layout ``tick=<n> comp=<name> event=<kind> txn=<id> detail=<k=v,...>`` so
that two runs can be compared byte for byte.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Iterator


class Priority(IntEnum):
    """Interrupt class.  Lower value is dispatched first."""

    FIQ = 0
    IRQ = 1


class SourceClass(str, Enum):
    SPE = "SPE"
    SCK = "SCK"
    ATE = "ATE"
    CAN = "CAN"


class Violation(str, Enum):
    # SPE
    UNKNOWN_MASTER = "UnknownMaster"
    NO_POLICY = "NoPolicy"
    MODE_DENIED = "ModeDenied"
    PERMISSION_DENIED = "PermissionDenied"
    SECURITY_ATTRIBUTE_MISMATCH = "SecurityAttributeMismatch"
    ISOLATED = "Isolated"
    LOCKDOWN = "Lockdown"
    CONFIG_REJECTED = "ConfigRejected"
    # SCK
    ERROR_TIMEOUT = "ErrorTimeout"
    OKAY_IMPERSONATION = "OkayImpersonation"
    # ATE
    VOLTAGE_TAMPER = "VoltageTamper"
    TEMPERATURE_TAMPER = "TemperatureTamper"
    CLOCK_TAMPER = "ClockTamper"
    SEU_DETECTED = "SeuDetected"
    # CAN-SE
    UNAPPROVED_CAN_ID = "UnapprovedCanId"
    MALICIOUS_NODE_SUSPECTED = "MaliciousNodeSuspected"
    NODE_BUS_OFF = "NodeBusOff"


@dataclass(frozen=True)
class SecurityEvent:
    """A violation reported to the response engine.

    ``origin`` names the emitting component instance, e.g. ``spe:infotainment``
    or ``can-se:3``; ``source`` is its class, used for response lookup.
    """

    source: SourceClass
    origin: str
    kind: Violation
    tick: int
    txn_id: int | None = None
    priority: Priority = Priority.FIQ
    annotation: str = ""

    def detail(self) -> dict[str, object]:
        d: dict[str, object] = {"kind": self.kind.value, "prio": self.priority.name}
        if self.annotation:
            d["note"] = self.annotation
        return d


_UNSAFE = re.compile(r"[\s,=]")


def _clean(value: object) -> str:
    if isinstance(value, bool):
        text = "1" if value else "0"
    elif isinstance(value, Enum):
        text = str(value.value if not isinstance(value, IntEnum) else value.name)
    else:
        text = str(value)
    return _UNSAFE.sub("_", text)


@dataclass(frozen=True)
class LogRecord:
    tick: int
    comp: str
    event: str
    txn: int | None = None
    detail: tuple[tuple[str, str], ...] = ()

    def get(self, key: str, default: str | None = None) -> str | None:
        for k, v in self.detail:
            if k == key:
                return v
        return default

    def format(self) -> str:
        txn = "-" if self.txn is None else str(self.txn)
        det = ",".join(f"{k}={v}" for k, v in self.detail)
        return f"tick={self.tick} comp={self.comp} event={self.event} txn={txn} detail={det}"

    @classmethod
    def parse(cls, line: str) -> "LogRecord":
        m = re.fullmatch(
            r"tick=(\d+) comp=(\S+) event=(\S+) txn=(\S+) detail=(\S*)", line.strip()
        )
        if m is None:
            raise ValueError(f"malformed log line: {line!r}")
        tick, comp, event, txn, det = m.groups()
        pairs = tuple(tuple(p.split("=", 1)) for p in det.split(",") if p)
        return cls(int(tick), comp, event, None if txn == "-" else int(txn), pairs)  # type: ignore[arg-type]


@dataclass
class EventLog:
    records: list[LogRecord] = field(default_factory=list)

    def emit(self, tick: int, comp: str, event: str, txn: int | None = None,
             **detail: object) -> LogRecord:
        rec = LogRecord(tick, comp, event, txn,
                        tuple((k, _clean(v)) for k, v in detail.items()))
        self.records.append(rec)
        return rec

    def __iter__(self) -> Iterator[LogRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def lines(self) -> list[str]:
        return [r.format() for r in self.records]

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def select(self, *, comp: str | None = None, event: str | None = None) -> list[LogRecord]:
        return [r for r in self.records
                if (comp is None or r.comp == comp) and (event is None or r.event == event)]


def parse_log(lines: Iterable[str]) -> list[LogRecord]:
    return [LogRecord.parse(line) for line in lines if line.strip()]
