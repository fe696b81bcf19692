"""Scenario documents: world configuration, stimuli and attack injections.

Scenarios are YAML documents.  See ``docs/formats.md`` for the schema and
``sentinel/data/scenarios`` for worked examples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Union

import yaml

from .bus import Direction, RespCode
from .errors import ValidationError
from .events import Priority
from .response import ResponsePolicy, TamperLimits, TamperReading
from .spe import DEFAULT_PIPELINE_LATENCY, Mode, PolicyEntry, change_from_record
from .sck import DEFAULT_TIMER_RELOAD

MASTER_ROLES = ("psm", "apu", "rpu", "device")
STIMULUS_OPS = ("read", "write", "configure", "sck_reset", "mode", "sensor", "can_send",
                "raise_event")


def _num(v: Any) -> int:
    if isinstance(v, bool):
        raise ValidationError(f"expected an integer, got {v!r}")
    if isinstance(v, str):
        return int(v, 0)
    return int(v)


@dataclass(frozen=True)
class MasterSpec:
    master_id: int
    name: str
    role: str = "device"


@dataclass(frozen=True)
class SlaveSpec:
    slave_id: int
    name: str
    base: int
    size: int


@dataclass(frozen=True)
class SpeSpec:
    slave: str
    owner: int
    pipeline_latency: int = DEFAULT_PIPELINE_LATENCY
    enabled: bool = True
    priority: Priority = Priority.FIQ
    devices: tuple[int, ...] = ()


@dataclass(frozen=True)
class SckSpec:
    slave: str
    enabled: bool = True
    timer_reload: int = DEFAULT_TIMER_RELOAD
    priority: Priority = Priority.FIQ


@dataclass(frozen=True)
class CanNodeSpec:
    node_id: int
    read_ids: frozenset[int] = frozenset()
    write_ids: frozenset[int] = frozenset()
    can_se_enabled: bool = True
    notify_threshold: int = 128
    frames: tuple[tuple[int, int, bytes], ...] = ()   # (slot, can id, data)


@dataclass(frozen=True)
class Selector:
    """Positional transaction matcher: master, slave, direction, address range."""

    master: int | None = None
    slave: str | None = None
    direction: Direction | None = None
    address_lo: int | None = None
    address_hi: int | None = None      # exclusive

    def matches(self, master: int, slave: str | None, direction: Direction, address: int) -> bool:
        return ((self.master is None or master == self.master)
                and (self.slave is None or slave == self.slave)
                and (self.direction is None or direction is self.direction)
                and (self.address_lo is None or address >= self.address_lo)
                and (self.address_hi is None or address < self.address_hi))

    @classmethod
    def parse(cls, rec: Mapping | None) -> "Selector":
        rec = rec or {}
        return cls(
            master=None if rec.get("master") is None else int(rec["master"]),
            slave=rec.get("slave"),
            direction=None if rec.get("direction") is None else Direction(rec["direction"]),
            address_lo=None if rec.get("address_lo") is None else _num(rec["address_lo"]),
            address_hi=None if rec.get("address_hi") is None else _num(rec["address_hi"]),
        )


@dataclass(frozen=True)
class NsBitFlip:
    select: Selector
    duration: int = 1


@dataclass(frozen=True)
class ResponseForge:
    slave: str
    resp: RespCode
    hold_ticks: int


@dataclass(frozen=True)
class OkayForge:
    select: Selector
    count: int = 1


@dataclass(frozen=True)
class CanErrorFlood:
    node: int
    slots: tuple[int, ...]


@dataclass(frozen=True)
class CanRogueNode:
    node: int
    ids: tuple[int, ...]
    slots: tuple[int, ...]


@dataclass(frozen=True)
class TamperPulse:
    sensor: str
    value: int | bool


InjectionKind = Union[NsBitFlip, ResponseForge, OkayForge, CanErrorFlood, CanRogueNode, TamperPulse]
INJECTION_KINDS = {c.__name__: c for c in
                   (NsBitFlip, ResponseForge, OkayForge, CanErrorFlood, CanRogueNode, TamperPulse)}


@dataclass(frozen=True)
class AttackInjection:
    kind: InjectionKind
    tick: int | None = None
    when_mode: Mode | None = None

    @property
    def name(self) -> str:
        return type(self.kind).__name__


@dataclass(frozen=True)
class TrafficSpec:
    """Seeded benign traffic: one transaction every ``period`` ticks."""

    master: int
    slave: str
    period: int = 1
    start: int = 1
    stop: int | None = None
    directions: tuple[Direction, ...] = (Direction.READ, Direction.WRITE)
    offset_lo: int = 0
    offset_hi: int = 0x100
    prot: int = 0
    length: int = 4


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    duration: int
    masters: tuple[MasterSpec, ...]
    slaves: tuple[SlaveSpec, ...] = ()
    mode: Mode = Mode.NORMAL
    spes: tuple[SpeSpec, ...] = ()
    policies: tuple[tuple[str, PolicyEntry], ...] = ()
    scks: tuple[SckSpec, ...] = ()
    responses: tuple[dict, ...] = ()
    tamper_limits: TamperLimits = TamperLimits()
    sensors: TamperReading = TamperReading()
    can_nodes: tuple[CanNodeSpec, ...] = ()
    stimuli: tuple[dict, ...] = ()
    traffic: tuple[TrafficSpec, ...] = ()
    injections: tuple[AttackInjection, ...] = ()
    keys: bytes = bytes(range(1, 33))
    source: str | None = field(default=None, compare=False)

    def slave_named(self, name: str) -> SlaveSpec:
        for s in self.slaves:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def owner(self) -> int | None:
        for m in self.masters:
            if m.role == "psm":
                return m.master_id
        return None

    def validate(self) -> None:
        """Raise :class:`ValidationError` naming the first unresolved reference."""
        if self.duration < 1:
            raise ValidationError("duration must be at least 1 tick")
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError("seed must fit in 64 bits")
        mids = [m.master_id for m in self.masters]
        if len(set(mids)) != len(mids):
            raise ValidationError("duplicate master id")
        for m in self.masters:
            if m.role not in MASTER_ROLES:
                raise ValidationError(f"master {m.master_id}: unknown role {m.role!r}")
        names = [s.name for s in self.slaves]
        if len(set(names)) != len(names) or len({s.slave_id for s in self.slaves}) != len(names):
            raise ValidationError("duplicate slave name or id")
        slave_names = set(names)
        node_ids = {n.node_id for n in self.can_nodes}
        if len(node_ids) != len(self.can_nodes):
            raise ValidationError("duplicate CAN node id")

        def need_slave(name: str | None, what: str) -> None:
            if name is not None and name not in slave_names:
                raise ValidationError(f"{what}: unknown slave {name!r}")

        def need_master(mid: int | None, what: str) -> None:
            if mid is not None and mid not in mids:
                raise ValidationError(f"{what}: unknown master {mid}")

        seen_spe = set()
        for s in self.spes:
            need_slave(s.slave, "spe")
            need_master(s.owner, f"spe {s.slave} owner")
            if s.slave in seen_spe:
                raise ValidationError(f"two SPEs guard {s.slave!r}")
            seen_spe.add(s.slave)
        for slave, p in self.policies:
            need_slave(slave, "policy")
            if slave not in seen_spe:
                raise ValidationError(f"policy for {slave!r} but no SPE guards it")
        for s in self.scks:
            need_slave(s.slave, "sck")
        for t in self.traffic:
            need_master(t.master, "traffic")
            need_slave(t.slave, "traffic")
        for st in self.stimuli:
            op = st.get("op")
            where = f"stimulus at tick {st.get('tick')}"
            if op not in STIMULUS_OPS:
                raise ValidationError(f"{where}: unknown op {op!r}")
            if op in ("configure", "sck_reset"):
                need_slave(st.get("slave"), where)
            if op == "can_send" and int(st["node"]) not in node_ids:
                raise ValidationError(f"{where}: unknown CAN node {st['node']}")
        for i, inj in enumerate(self.injections):
            where = f"injection {i} ({inj.name})"
            if inj.tick is None and inj.when_mode is None:
                raise ValidationError(f"{where}: needs an activation tick or mode predicate")
            k = inj.kind
            if isinstance(k, (NsBitFlip, OkayForge)):
                need_slave(k.select.slave, where)
                need_master(k.select.master, where)
            elif isinstance(k, ResponseForge):
                need_slave(k.slave, where)
                if k.hold_ticks < 1:
                    raise ValidationError(f"{where}: hold_ticks must be positive")
            elif isinstance(k, CanErrorFlood):
                if k.node not in node_ids:
                    raise ValidationError(f"{where}: unknown CAN node {k.node}")
            elif isinstance(k, CanRogueNode):
                if not k.ids or not k.slots:
                    raise ValidationError(f"{where}: needs ids and slots")


# -- parsing -----------------------------------------------------------------

def _priority(v: Any) -> Priority:
    try:
        return Priority[str(v).upper()]
    except KeyError:
        raise ValidationError(f"unknown priority {v!r}") from None


def _slots(v: Any) -> tuple[int, ...]:
    if isinstance(v, Mapping):
        return tuple(range(_num(v["start"]), _num(v["stop"])))
    return tuple(_num(x) for x in v)


def _injection(rec: Mapping) -> AttackInjection:
    kind = rec.get("kind")
    if kind not in INJECTION_KINDS:
        raise ValidationError(f"unknown injection kind {kind!r}")
    if kind == "NsBitFlip":
        k: InjectionKind = NsBitFlip(Selector.parse(rec.get("select")), int(rec.get("duration", 1)))
    elif kind == "ResponseForge":
        k = ResponseForge(rec["slave"], RespCode[str(rec.get("resp", "SLVERR")).upper()],
                          int(rec["hold_ticks"]))
    elif kind == "OkayForge":
        k = OkayForge(Selector.parse(rec.get("select")), int(rec.get("count", 1)))
    elif kind == "CanErrorFlood":
        k = CanErrorFlood(int(rec["node"]), _slots(rec["slots"]))
    elif kind == "CanRogueNode":
        k = CanRogueNode(int(rec["node"]), tuple(_num(i) for i in rec["ids"]), _slots(rec["slots"]))
    else:
        k = TamperPulse(str(rec["sensor"]), rec["value"])
    when = rec.get("when") or {}
    tick = rec.get("tick")
    if isinstance(k, (CanErrorFlood, CanRogueNode)) and tick is None and not when:
        tick = min(k.slots)
    return AttackInjection(k, None if tick is None else int(tick),
                           Mode.parse(when["mode"]) if "mode" in when else None)


def parse_scenario(doc: Mapping, source: str | None = None) -> Scenario:
    """Build a :class:`Scenario` from a parsed YAML document."""
    try:
        return _parse(doc, source)
    except ValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed scenario {source or ''}: {exc!r}") from None


def _parse(doc: Mapping, source: str | None) -> Scenario:
    masters = tuple(MasterSpec(int(m["id"]), str(m.get("name", f"m{m['id']}")),
                               str(m.get("role", "device"))) for m in doc.get("masters", []))
    slaves = tuple(SlaveSpec(int(s.get("id", i)), str(s["name"]), _num(s["base"]), _num(s["size"]))
                   for i, s in enumerate(doc.get("slaves", [])))
    owner = next((m.master_id for m in masters if m.role == "psm"), None)
    spes = []
    for rec in doc.get("spe", []):
        o = rec.get("owner", owner)
        if o is None:
            raise ValidationError(f"spe {rec.get('slave')!r}: no owner and no psm master")
        spes.append(SpeSpec(str(rec["slave"]), int(o),
                            int(rec.get("pipeline_latency", DEFAULT_PIPELINE_LATENCY)),
                            bool(rec.get("enabled", True)), _priority(rec.get("priority", "FIQ")),
                            tuple(int(d) for d in rec.get("devices", []))))
    policies = tuple((str(p["slave"]), PolicyEntry.from_record(p)) for p in doc.get("policies", []))
    scks = tuple(SckSpec(str(r["slave"]), bool(r.get("enabled", True)),
                         int(r.get("timer_reload", DEFAULT_TIMER_RELOAD)),
                         _priority(r.get("priority", "FIQ"))) for r in doc.get("sck", []))
    responses = tuple(dict(r) for r in doc.get("responses", []))
    ResponsePolicy.from_records(responses)   # validate early
    lim = doc.get("tamper_limits") or {}
    limits = TamperLimits(**{k: int(v) for k, v in lim.items()})
    sens = doc.get("sensors") or {}
    reading = TamperReading()
    for k, v in sens.items():
        reading = reading.override(k, v)
    nodes = []
    for n in (doc.get("can") or {}).get("nodes", []):
        frames = tuple((int(f["slot"]), _num(f["id"]), bytes(f.get("data", [])))
                       for f in n.get("frames", []))
        nodes.append(CanNodeSpec(int(n["node_id"]),
                                 frozenset(_num(i) for i in n.get("read_ids", [])),
                                 frozenset(_num(i) for i in n.get("write_ids", [])),
                                 bool(n.get("can_se_enabled", True)),
                                 int(n.get("notify_threshold", 128)), frames))
    stimuli = []
    for st in doc.get("stimuli", []):
        st = dict(st)
        st["tick"] = int(st["tick"])
        if st.get("op") in ("read", "write"):
            st["master"] = int(st["master"])
            st["address"] = _num(st["address"])
            st["prot"] = _num(st.get("prot", 0))
        if st.get("op") == "configure":
            change_from_record(st["change"])    # validate early
        stimuli.append(st)
    traffic = tuple(TrafficSpec(
        master=int(t["master"]), slave=str(t["slave"]), period=int(t.get("period", 1)),
        start=int(t.get("start", 1)), stop=None if t.get("stop") is None else int(t["stop"]),
        directions=tuple(Direction(d) for d in t.get("directions", ["read", "write"])),
        offset_lo=_num(t.get("offset_lo", 0)), offset_hi=_num(t.get("offset_hi", 0x100)),
        prot=_num(t.get("prot", 0)), length=int(t.get("length", 4)))
        for t in doc.get("traffic", []))
    keys = bytes.fromhex(doc["keys"]) if "keys" in doc else bytes(range(1, 33))
    sc = Scenario(
        name=str(doc.get("name", Path(source).stem if source else "scenario")),
        seed=int(doc.get("seed", 0)),
        duration=int(doc.get("duration", 1)),
        masters=masters, slaves=slaves, mode=Mode.parse(doc.get("mode", "Normal")),
        spes=tuple(spes), policies=policies, scks=scks, responses=responses,
        tamper_limits=limits, sensors=reading, can_nodes=tuple(nodes),
        stimuli=tuple(sorted(stimuli, key=lambda s: s["tick"])), traffic=traffic,
        injections=tuple(_injection(r) for r in doc.get("injections", [])),
        keys=keys, source=source)
    sc.validate()
    return sc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if not isinstance(doc, Mapping):
        raise ValidationError(f"{path}: scenario must be a mapping")
    return parse_scenario(doc, str(path))
