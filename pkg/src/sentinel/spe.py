"""Security Policy Engine: a per-slave transaction gate.

A transaction arriving at a protected slave is sniffed (held away from the
slave), its master is looked up in the device table, the master's block of
the policy table is searched for a register-level rule, and the decision
block compares issued and expected AxPROT.  The decision is released
``pipeline_latency`` ticks after sniffing.

Table mutations are staged and become active at the end of the tick in
which they were acknowledged, so a change acked at tick ``t`` only affects
transactions issued after ``t``.  Each sniffed sample keeps a reference to
the (immutable) tables active when it was sampled.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Union

from .bus import AxProt, Direction, Phase, Transaction
from .errors import CapacityExceeded, ConfigRejected, ConfigurationError, ValidationError
from .events import Priority, SecurityEvent, SourceClass, Violation

POLICY_CAPACITY = 1024
DEFAULT_PIPELINE_LATENCY = 4


class Permission(str, Enum):
    R = "R"
    W = "W"
    RW = "RW"

    def allows(self, direction: Direction) -> bool:
        if direction is Direction.READ:
            return self is not Permission.W
        return self is not Permission.R

    def __or__(self, other: "Permission") -> "Permission":  # type: ignore[override]
        if self is other:
            return self
        return Permission.RW

    def intersects(self, other: "Permission") -> bool:
        return self is Permission.RW or other is Permission.RW or self is other


class Mode(str, Enum):
    NORMAL = "Normal"
    DIAGNOSTIC = "Diagnostic"
    FAILSAFE = "FailSafe"

    @classmethod
    def parse(cls, text: "str | Mode") -> "Mode":
        if isinstance(text, Mode):
            return text
        key = str(text).strip().lower().replace("-", "").replace("_", "").replace(" ", "")
        aliases = {"normal": cls.NORMAL, "diagnostic": cls.DIAGNOSTIC,
                   "diagnostics": cls.DIAGNOSTIC, "failsafe": cls.FAILSAFE}
        try:
            return aliases[key]
        except KeyError:
            raise ValidationError(f"unknown vehicle mode {text!r}") from None


def parse_prot(value: "int | str | AxProt") -> AxProt:
    if isinstance(value, AxProt):
        return value
    if isinstance(value, str):
        value = int(value, 0)
    return AxProt.decode(value)


@dataclass(frozen=True)
class PolicyEntry:
    master_id: int
    offset_start: int
    offset_end: int
    permission: Permission
    expected_prot: AxProt = AxProt()
    modes: frozenset[Mode] = frozenset({Mode.NORMAL})
    stride: str = field(default="", compare=False)   # threat categories, annotation only

    def __post_init__(self) -> None:
        if not 0 <= self.offset_start < self.offset_end:
            raise ConfigurationError(
                f"policy range [{self.offset_start:#x}, {self.offset_end:#x}) is empty or negative")
        if not self.modes:
            raise ConfigurationError("policy must apply to at least one mode")

    def covers(self, offset: int) -> bool:
        return self.offset_start <= offset < self.offset_end

    def overlaps(self, other: "PolicyEntry") -> bool:
        return (self.master_id == other.master_id
                and self.offset_start < other.offset_end
                and other.offset_start < self.offset_end
                and self.permission.intersects(other.permission)
                and bool(self.modes & other.modes))

    def to_record(self, slave: str) -> dict:
        rec = {
            "master": self.master_id,
            "slave": slave,
            "offset_start": self.offset_start,
            "offset_end": self.offset_end,
            "perm": self.permission.value,
            "prot": str(self.expected_prot),
            "modes": [m.value for m in Mode if m in self.modes],
        }
        if self.stride:
            rec["stride"] = self.stride
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "PolicyEntry":
        try:
            return cls(
                master_id=int(rec["master"]),
                offset_start=_int(rec["offset_start"]),
                offset_end=_int(rec["offset_end"]),
                permission=Permission(str(rec["perm"]).upper()),
                expected_prot=parse_prot(rec.get("prot", 0)),
                modes=frozenset(Mode.parse(m) for m in rec.get("modes", ["Normal"])),
                stride=str(rec.get("stride", "")),
            )
        except KeyError as exc:
            raise ValidationError(f"policy record missing field {exc.args[0]!r}") from None
        except ValueError as exc:
            raise ValidationError(f"bad policy record {rec!r}: {exc}") from None


def _int(v: "int | str") -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


@dataclass(frozen=True)
class DeviceTableEntry:
    master_id: int
    policy_base: int
    policy_count: int = 0
    enabled: bool = True


@dataclass(frozen=True)
class Tables:
    """An immutable snapshot of device and policy tables."""

    devices: tuple[DeviceTableEntry, ...] = ()
    policies: tuple[PolicyEntry, ...] = ()


def device_lookup(devices: Iterable[DeviceTableEntry], master_id: int) -> DeviceTableEntry | None:
    for entry in devices:
        if entry.master_id == master_id:
            return entry if entry.enabled else None
    return None


def policy_lookup(policies: tuple[PolicyEntry, ...], entry: DeviceTableEntry, offset: int,
                  direction: Direction, mode: Mode) -> PolicyEntry | None:
    for p in policies[entry.policy_base:entry.policy_base + entry.policy_count]:
        if p.covers(offset) and mode in p.modes and p.permission.allows(direction):
            return p
    return None


class Verdict(str, Enum):
    GRANT = "Grant"
    BLOCK = "Block"


@dataclass(frozen=True)
class Sample:
    txn_id: int
    master_id: int
    offset: int
    direction: Direction
    prot: AxProt
    tick: int
    mode: Mode = Mode.NORMAL


@dataclass(frozen=True)
class SpeDecision:
    verdict: Verdict
    violation: Violation | None
    txn_id: int
    tick: int
    annotation: str = ""

    def __post_init__(self) -> None:
        if (self.verdict is Verdict.BLOCK) != (self.violation is not None):
            raise ValueError("a Block carries a violation and a Grant does not")


def decide(sample: Sample, tables: Tables, tick: int, *,
           isolated: bool = False, lockdown: bool = False) -> SpeDecision:
    """Pure decision function.

    Precedence of violations: Lockdown, Isolated, UnknownMaster,
    NoPolicy/ModeDenied, PermissionDenied, SecurityAttributeMismatch.
    """
    def block(v: Violation, note: str = "") -> SpeDecision:
        return SpeDecision(Verdict.BLOCK, v, sample.txn_id, tick, note)

    if lockdown:
        return block(Violation.LOCKDOWN)
    if isolated:
        return block(Violation.ISOLATED)
    entry = device_lookup(tables.devices, sample.master_id)
    if entry is None:
        return block(Violation.UNKNOWN_MASTER)
    mode = sample.mode
    match = policy_lookup(tables.policies, entry, sample.offset, sample.direction, mode)
    if match is None:
        block_ = tables.policies[entry.policy_base:entry.policy_base + entry.policy_count]
        covering = [p for p in block_ if p.covers(sample.offset)]
        if not covering:
            return block(Violation.NO_POLICY)
        in_mode = [p for p in covering if mode in p.modes]
        if not in_mode:
            return block(Violation.MODE_DENIED, covering[0].stride)
        return block(Violation.PERMISSION_DENIED, in_mode[0].stride)
    if sample.prot != match.expected_prot:
        return block(Violation.SECURITY_ATTRIBUTE_MISMATCH, match.stride)
    return SpeDecision(Verdict.GRANT, None, sample.txn_id, tick)


# -- table mutations -------------------------------------------------------

@dataclass(frozen=True)
class AddPolicy:
    policy: PolicyEntry


@dataclass(frozen=True)
class DeletePolicy:
    index: int


@dataclass(frozen=True)
class AddDevice:
    master_id: int
    enabled: bool = True


@dataclass(frozen=True)
class SetDeviceEnabled:
    master_id: int
    enabled: bool


@dataclass(frozen=True)
class SetEngineEnabled:
    enabled: bool


TableChange = Union[AddPolicy, DeletePolicy, AddDevice, SetDeviceEnabled, SetEngineEnabled]


def change_from_record(rec: dict) -> TableChange:
    op = rec.get("op")
    if op == "add_policy":
        return AddPolicy(PolicyEntry.from_record(rec["policy"]))
    if op == "delete_policy":
        return DeletePolicy(int(rec["index"]))
    if op == "add_device":
        return AddDevice(int(rec["master"]), bool(rec.get("enabled", True)))
    if op == "set_device_enabled":
        return SetDeviceEnabled(int(rec["master"]), bool(rec["enabled"]))
    if op == "set_enabled":
        return SetEngineEnabled(bool(rec["enabled"]))
    raise ValidationError(f"unknown table change {op!r}")


@dataclass
class _Pending:
    txn: Transaction
    sample: Sample
    tables: Tables
    ready_tick: int


@dataclass
class SecurityPolicyEngine:
    slave_id: int
    slave_name: str
    slave_base: int
    owner_master: int
    pipeline_latency: int = DEFAULT_PIPELINE_LATENCY
    enabled: bool = True
    priority: Priority = Priority.FIQ
    isolated: bool = False
    outbox: list[SecurityEvent] = field(default_factory=list)
    verdicts: dict[int, Verdict] = field(default_factory=dict)
    decisions: list[SpeDecision] = field(default_factory=list)
    mutation_log: list[tuple[int, int, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.pipeline_latency < 0:
            raise ConfigurationError("pipeline latency must be non-negative")
        self._device_order: list[int] = []
        self._device_enabled: dict[int, bool] = {}
        self._policies: dict[int, list[PolicyEntry]] = {}
        self._active = Tables()
        self._dirty = False
        self._pipeline: deque[_Pending] = deque()

    @property
    def origin(self) -> str:
        return f"spe:{self.slave_name}"

    # -- configuration ------------------------------------------------------

    @property
    def tables(self) -> Tables:
        """Tables currently used for sampling."""
        return self._active

    @property
    def policy_count(self) -> int:
        """Number of staged policies, including changes not yet active."""
        return sum(len(v) for v in self._policies.values())

    def configure(self, requester: int, change: TableChange, tick: int = 0) -> bool:
        """Apply ``change`` on behalf of ``requester``.

        Only the owner (the platform security manager) may mutate the
        tables.  A rejected request raises :class:`ConfigRejected` after
        queueing a SecurityEvent for the response engine.
        """
        if requester != self.owner_master:
            self.outbox.append(SecurityEvent(
                SourceClass.SPE, self.origin, Violation.CONFIG_REJECTED, tick,
                priority=self.priority, annotation=f"requester{requester}"))
            raise ConfigRejected(f"master {requester} may not configure {self.origin}")
        self._apply(change)
        self._dirty = True
        self.mutation_log.append((tick, requester, type(change).__name__))
        return True

    def _apply(self, change: TableChange) -> None:
        if isinstance(change, AddPolicy):
            p = change.policy
            if self.policy_count >= POLICY_CAPACITY:
                raise CapacityExceeded(f"{self.origin}: policy table holds {POLICY_CAPACITY} entries")
            for other in self._policies.get(p.master_id, []):
                if p.overlaps(other):
                    raise ConfigurationError(
                        f"{self.origin}: policy {p} overlaps {other} for master {p.master_id}")
            self._ensure_device(p.master_id)
            self._policies.setdefault(p.master_id, []).append(p)
        elif isinstance(change, DeletePolicy):
            layout = self._layout().policies
            if not 0 <= change.index < len(layout):
                raise ConfigurationError(f"{self.origin}: no policy at index {change.index}")
            victim = layout[change.index]
            bucket = self._policies[victim.master_id]
            bucket.remove(victim)
        elif isinstance(change, AddDevice):
            if change.master_id in self._device_enabled:
                raise ConfigurationError(f"{self.origin}: master {change.master_id} already listed")
            self._ensure_device(change.master_id, change.enabled)
        elif isinstance(change, SetDeviceEnabled):
            if change.master_id not in self._device_enabled:
                raise ConfigurationError(f"{self.origin}: master {change.master_id} not listed")
            self._device_enabled[change.master_id] = change.enabled
        elif isinstance(change, SetEngineEnabled):
            self.enabled = change.enabled
        else:  # pragma: no cover
            raise TypeError(change)

    def _ensure_device(self, master_id: int, enabled: bool = True) -> None:
        if master_id not in self._device_enabled:
            self._device_order.append(master_id)
            self._device_enabled[master_id] = enabled

    def _layout(self) -> Tables:
        devices = []
        policies: list[PolicyEntry] = []
        for m in self._device_order:
            block = self._policies.get(m, [])
            devices.append(DeviceTableEntry(m, len(policies), len(block), self._device_enabled[m]))
            policies.extend(block)
        return Tables(tuple(devices), tuple(policies))

    def commit(self) -> None:
        if self._dirty:
            self._active = self._layout()
            self._dirty = False

    def load(self, policies: Iterable[PolicyEntry], devices: Iterable[int] = ()) -> None:
        """Provision initial tables (scenario start); active immediately."""
        for m in devices:
            self._ensure_device(m)
        for p in policies:
            self._apply(AddPolicy(p))
        self._dirty = True
        self.commit()

    def dump(self) -> list[dict]:
        return [p.to_record(self.slave_name) for p in self._layout().policies]

    # -- datapath -----------------------------------------------------------

    def sniff(self, txn: Transaction, tick: int, mode: Mode = Mode.NORMAL) -> Sample:
        """Hold ``txn`` away from the slave and queue it for evaluation."""
        txn.advance(Phase.GATED)
        sample = Sample(txn.txn_id, txn.master_id, txn.address - self.slave_base,
                        txn.direction, txn.prot, tick, mode)
        self._pipeline.append(_Pending(txn, sample, self._active, tick + self.pipeline_latency))
        return sample

    def pass_through(self, txn: Transaction) -> None:
        """Disabled engine: forward without evaluation."""
        self.verdicts[txn.txn_id] = Verdict.GRANT

    def step(self, tick: int, lockdown: bool = False) -> list[tuple[Transaction, SpeDecision]]:
        """Release every decision due at ``tick`` in arrival order."""
        out = []
        while self._pipeline and self._pipeline[0].ready_tick <= tick:
            pend = self._pipeline.popleft()
            d = decide(pend.sample, pend.tables, tick,
                       isolated=self.isolated, lockdown=lockdown)
            self.verdicts[d.txn_id] = d.verdict
            self.decisions.append(d)
            if d.verdict is Verdict.BLOCK:
                assert d.violation is not None
                self.outbox.append(SecurityEvent(SourceClass.SPE, self.origin, d.violation,
                                                 tick, d.txn_id, self.priority, d.annotation))
            out.append((pend.txn, d))
        return out

    def in_flight(self) -> list[Transaction]:
        return [p.txn for p in self._pipeline]

    def abort_in_flight(self) -> list[Transaction]:
        txns = self.in_flight()
        self._pipeline.clear()
        return txns

    def drain_events(self) -> list[SecurityEvent]:
        events, self.outbox = self.outbox, []
        return events
