"""Bus Sanity Checker: response-channel watchdog for one slave.

A three-state FSM with a reloadable countdown.  The timer is loaded when an
error response (SLVERR/DECERR) first appears and decremented on every
further tick that the error stays asserted; reaching zero enters ATTACK.
So with reload ``T`` an error held for ``d`` consecutive ticks is reported
iff ``d > T``.  ATTACK is absorbing until an authorised reset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from .bus import RespCode
from .errors import ConfigRejected, ConfigurationError
from .events import Priority, SecurityEvent, SourceClass, Violation

TIMER_MAX = 0xFFFF_FFFF
DEFAULT_TIMER_RELOAD = 16


class SckState(str, Enum):
    NORMAL = "Normal"
    DETECTION = "Detection"
    ATTACK = "Attack"


def okay_impersonations(granted: Iterable[int],
                        okay_completions: Iterable[int]) -> list[int]:
    """Txn ids completed OKAY at the master without a matching SPE Grant.

    Order follows ``okay_completions``; each id is reported once.
    """
    grants = set(granted)
    seen: set[int] = set()
    out = []
    for txn in okay_completions:
        if txn not in grants and txn not in seen:
            seen.add(txn)
            out.append(txn)
    return out


@dataclass
class BusSanityChecker:
    slave_name: str
    owner_master: int
    timer_reload: int = DEFAULT_TIMER_RELOAD
    enabled: bool = True
    priority: Priority = Priority.FIQ
    state: SckState = SckState.NORMAL
    remaining: int = 0
    last_violation: Violation | None = None
    trajectory: list[SckState] = field(default_factory=list)
    outbox: list[SecurityEvent] = field(default_factory=list)
    _reported_okay: set[int] = field(default_factory=set)

    def __post_init__(self) -> None:
        if not 1 <= self.timer_reload <= TIMER_MAX:
            raise ConfigurationError(f"timer reload must be in 1..{TIMER_MAX}")

    @property
    def origin(self) -> str:
        return f"sck:{self.slave_name}"

    def step(self, observed: RespCode | None, tick: int) -> SecurityEvent | None:
        """Advance one tick given the response currently asserted by the slave."""
        if not self.enabled:
            self.trajectory.append(self.state)
            return None
        event = None
        error = observed is not None and observed.is_error
        if self.state is SckState.NORMAL:
            if error:
                self.state = SckState.DETECTION
                self.remaining = self.timer_reload
        elif self.state is SckState.DETECTION:
            if error:
                self.remaining -= 1
                if self.remaining == 0:
                    self.state = SckState.ATTACK
                    self.last_violation = Violation.ERROR_TIMEOUT
                    event = SecurityEvent(SourceClass.SCK, self.origin, Violation.ERROR_TIMEOUT,
                                          tick, priority=self.priority,
                                          annotation=observed.name if observed else "")
            else:
                self.state = SckState.NORMAL
                self.remaining = 0
        self.trajectory.append(self.state)
        return event

    def okay_check(self, verdicts: Mapping[int, object], okay_txns: Iterable[int],
                   tick: int) -> list[SecurityEvent]:
        """Compare OKAY completions seen at the master against SPE grants.

        ``verdicts`` maps txn id to the SPE verdict ("Grant"/"Block" or the
        enum); anything but a Grant makes an OKAY completion suspicious.
        """
        if not self.enabled:
            return []
        events = []
        for txn in okay_txns:
            v = verdicts.get(txn)
            if getattr(v, "value", v) == "Grant" or txn in self._reported_okay:
                continue
            self._reported_okay.add(txn)
            self.last_violation = Violation.OKAY_IMPERSONATION
            events.append(SecurityEvent(SourceClass.SCK, self.origin,
                                        Violation.OKAY_IMPERSONATION, tick, txn, self.priority))
        return events

    def reset(self, requester: int | str, tick: int = 0) -> bool:
        """Return to NORMAL.  Accepted from the owner or from ``"sre"``.

        Anyone else gets :class:`ConfigRejected` and a SecurityEvent is
        queued in ``outbox``.
        """
        if requester != self.owner_master and requester != "sre":
            self.outbox.append(SecurityEvent(
                SourceClass.SCK, self.origin, Violation.CONFIG_REJECTED, tick,
                priority=self.priority, annotation=f"requester{requester}"))
            raise ConfigRejected(f"{requester!r} may not reset {self.origin}")
        self.state = SckState.NORMAL
        self.remaining = 0
        self.last_violation = None
        return True

    def drain_events(self) -> list[SecurityEvent]:
        events, self.outbox = self.outbox, []
        return events

    def status(self) -> dict:
        return {
            "slave": self.slave_name,
            "enabled": self.enabled,
            "state": self.state.value,
            "remaining": self.remaining,
            "timer_reload": self.timer_reload,
            "last_violation": self.last_violation.value if self.last_violation else None,
        }
