"""The simulation world and its fixed-order tick scheduler.

Within one tick components run in this order: masters (stimuli, traffic,
injections), SPEs, slaves, SCKs, ATE, CAN bus, SRE.  Everything a tick does
is written to the world's :class:`~sentinel.events.EventLog`.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field

from .bus import (AddressMap, AxProt, Direction, Interconnect, Phase, Region, RespCode, Slave,
                  SimClock, Transaction)
from .can import CanBus, CanFrame, CanNode, ApprovedLists
from .errors import (CapacityExceeded, ChannelDisabled, ConfigRejected, ConfigurationError,
                     ExecutionFault, SentinelError)
from .events import EventLog, LogRecord, Priority, SecurityEvent, SourceClass, Violation
from .response import (ActionKind, AntiTamperEngine, Channel, ResponseAction, ResponsePolicy,
                       SecurityResponseEngine, TamperReading)
from .scenario import (AttackInjection, CanErrorFlood, CanRogueNode, NsBitFlip, OkayForge,
                       ResponseForge, Scenario, TamperPulse)
from .sck import BusSanityChecker, SckState
from .spe import Mode, SecurityPolicyEngine, Verdict, change_from_record

log = logging.getLogger(__name__)


@dataclass
class Completion:
    tick: int
    txn_id: int
    slave_id: int | None
    resp: RespCode
    origin: str


@dataclass
class _InjectionState:
    spec: AttackInjection
    index: int
    active_since: int | None = None
    done: bool = False
    affected: list[int] = field(default_factory=list)
    rogue_next: int = 0


class World:
    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.scenario = scenario
        self.clock = SimClock()
        self.log = EventLog()
        self.rng = random.Random(scenario.seed)
        self.ate = AntiTamperEngine(scenario.tamper_limits, bytearray(scenario.keys))
        self.sre = SecurityResponseEngine(ResponsePolicy.from_records(scenario.responses))
        self.txns: dict[int, Transaction] = {}
        self.completions: list[Completion] = []
        self.security_events: list[SecurityEvent] = []
        self.lockdown_tick: int | None = None
        self.resets: list[int] = []
        self._next_txn_id = 1
        self._issued: list[Transaction] = []
        self._submitted: list[dict] = []
        self._evt_of_seq: dict[int, int] = {}
        self._stimuli: dict[int, list[dict]] = {}
        for st in scenario.stimuli:
            self._stimuli.setdefault(st["tick"], []).append(st)
        self.injections = [_InjectionState(inj, i) for i, inj in enumerate(scenario.injections)]
        self._build()

    # -- construction / reset ---------------------------------------------

    def _build(self) -> None:
        sc = self.scenario
        self.mode: Mode = sc.mode
        self.reading: TamperReading = sc.sensors
        amap = AddressMap([Region(s.slave_id, s.base, s.size) for s in sc.slaves])
        self.interconnect = Interconnect(amap, {m.master_id for m in sc.masters},
                                         self._next_txn_id)
        self.slaves: dict[int, Slave] = {
            s.slave_id: Slave(s.slave_id, s.name, s.base, s.size)
            for s in sorted(sc.slaves, key=lambda s: s.slave_id)}
        self.slave_ids: dict[str, int] = {s.name: s.slave_id for s in sc.slaves}
        self.spes: dict[int, SecurityPolicyEngine] = {}
        for spec in sc.spes:
            sid = self.slave_ids[spec.slave]
            spe = SecurityPolicyEngine(sid, spec.slave, self.slaves[sid].base, spec.owner,
                                       spec.pipeline_latency, spec.enabled, spec.priority)
            spe.load([p for name, p in sc.policies if name == spec.slave], spec.devices)
            self.spes[sid] = spe
        self.scks: dict[int, BusSanityChecker] = {}
        owner = sc.owner if sc.owner is not None else -1
        for spec in sc.scks:
            sid = self.slave_ids[spec.slave]
            self.scks[sid] = BusSanityChecker(spec.slave, owner, spec.timer_reload, spec.enabled,
                                              spec.priority)
        self.can = CanBus(CanNode(n.node_id, ApprovedLists(n.read_ids, n.write_ids),
                                  n.can_se_enabled, n.notify_threshold)
                          for n in sc.can_nodes)
        self._can_frames: dict[int, list[tuple[int, CanFrame]]] = {}
        for n in sc.can_nodes:
            for slot, cid, data in n.frames:
                self._can_frames.setdefault(slot, []).append((n.node_id, CanFrame(cid, data)))
        self.ate._active = set()
        self._arrivals: dict[int, list[Transaction]] = {sid: [] for sid in self.slaves}
        self._to_slave: dict[int, list[Transaction]] = {sid: [] for sid in self.slaves}
        self._pending_events: list[SecurityEvent] = []
        self._apu_events: list[SecurityEvent] = []
        self._pulse: dict[str, object] = {}

    def _reset(self, tick: int) -> None:
        for spe in self.spes.values():
            for txn in spe.abort_in_flight():
                self._complete(txn, RespCode.SLVERR, "reset", tick)
        self._next_txn_id = self.interconnect.next_txn_id
        self._build()
        self.ate.reset_requested = False
        self.resets.append(tick)
        self.log.emit(tick, "world", "reset")

    # -- helpers ----------------------------------------------------------

    @property
    def tick(self) -> int:
        return self.clock.tick

    @property
    def lockdown(self) -> bool:
        return self.ate.lockdown

    def slave_name(self, sid: int | None) -> str | None:
        return None if sid is None else self.slaves[sid].name

    def _raise(self, ev: SecurityEvent) -> None:
        self.security_events.append(ev)
        evt = len(self.security_events)
        self._pending_events.append(ev)
        self.log.emit(ev.tick, ev.origin, "security", ev.txn_id, evt=evt, **ev.detail())

    def _complete(self, txn: Transaction, resp: RespCode, origin: str, tick: int) -> None:
        txn.complete(resp)
        self.completions.append(Completion(tick, txn.txn_id, txn.slave_id, resp, origin))
        self.log.emit(tick, "bus", "complete", txn.txn_id, resp=resp.name, origin=origin)

    def _to_data(self, txn: Transaction, tick: int) -> None:
        txn.advance(Phase.DATA_TRANSFER)
        self.log.emit(tick, "bus", "data", txn.txn_id)
        assert txn.slave_id is not None
        self._to_slave[txn.slave_id].append(txn)

    def submit(self, **stimulus: object) -> None:
        """Queue a stimulus (same keys as a scenario stimulus) for the next tick."""
        self._submitted.append(dict(stimulus))

    def _issue(self, master_id: int, direction: Direction | str, address: int,
               prot: AxProt | int, payload: bytes | int) -> Transaction:
        t = self.tick
        txn = self.interconnect.issue_transaction(master_id, Direction(direction), address,
                                                  prot, payload, t)
        self.txns[txn.txn_id] = txn
        self._issued.append(txn)
        self.log.emit(t, "bus", "issue", txn.txn_id, master=master_id,
                      slave=self.slave_name(txn.slave_id) or "-", dir=txn.direction.value,
                      addr=f"{address:#010x}", prot=str(txn.prot))
        return txn

    # -- tick ---------------------------------------------------------------

    def advance_tick(self) -> list[LogRecord]:
        t = self.clock.advance()
        start = len(self.log)
        self._phase_masters(t)
        self._phase_spe(t)
        signals = self._phase_slaves(t)
        self._phase_sck(t, signals)
        self._phase_ate(t)
        self._phase_can(t)
        self._phase_sre(t)
        return self.log.records[start:]

    def run(self, ticks: int | None = None) -> EventLog:
        n = self.scenario.duration if ticks is None else ticks
        for _ in range(n):
            self.advance_tick()
        return self.log

    # masters -------------------------------------------------------------

    def _activate_injections(self, t: int) -> None:
        for st in self.injections:
            if st.active_since is not None:
                continue
            spec = st.spec
            due = (spec.tick is not None and spec.tick == t) or (
                spec.tick is None and spec.when_mode is not None and self.mode is spec.when_mode)
            if not due:
                continue
            st.active_since = t
            self.log.emit(t, "inject", "activate", inj=st.index, kind=spec.name)
            k = spec.kind
            if isinstance(k, ResponseForge):
                slave = self.slaves[self.slave_ids[k.slave]]
                slave.forced_resp = k.resp
                slave.forced_until = t + k.hold_ticks
            elif isinstance(k, TamperPulse):
                self._pulse[k.sensor] = k.value

    def _phase_masters(self, t: int) -> None:
        self._pulse = {}
        self._activate_injections(t)
        submitted, self._submitted = self._submitted, []
        for st in self._stimuli.get(t, []) + submitted:
            self._stimulus(st, t)
        for tr in self.scenario.traffic:
            if t < tr.start or (tr.stop is not None and t >= tr.stop) or (t - tr.start) % tr.period:
                continue
            direction = self.rng.choice(tr.directions)
            span = max(1, (tr.offset_hi - tr.offset_lo) // tr.length)
            offset = tr.offset_lo + self.rng.randrange(span) * tr.length
            base = self.slaves[self.slave_ids[tr.slave]].base
            payload: bytes | int = (bytes(self.rng.randrange(256) for _ in range(tr.length))
                                    if direction is Direction.WRITE else tr.length)
            self._issue(tr.master, direction, base + offset, tr.prot, payload)
        # NS-bit tampering happens between master and SPE sampling
        for inj in self.injections:
            k = inj.spec.kind
            if (not isinstance(k, NsBitFlip) or inj.active_since is None
                    or t >= inj.active_since + k.duration):
                continue
            hit = False
            for txn in self._issued:
                if k.select.matches(txn.master_id, self.slave_name(txn.slave_id), txn.direction,
                                    txn.address):
                    txn.prot = txn.prot.with_ns_flipped()
                    inj.affected.append(txn.txn_id)
                    hit = True
                    self.log.emit(t, "inject", "ns_flip", txn.txn_id, inj=inj.index,
                                  prot=str(txn.prot))
            if not hit and t == inj.active_since + k.duration - 1 and not inj.affected:
                self.log.emit(t, "inject", "noop", inj=inj.index)
        for txn in self._issued:
            sid = txn.slave_id
            if sid is None:
                self.log.emit(t, "bus", "decerr", txn.txn_id)
                self._complete(txn, RespCode.DECERR, "interconnect", t)
            elif sid in self.spes and (self.spes[sid].enabled or self.lockdown):
                self._arrivals[sid].append(txn)
            else:
                if sid in self.spes:
                    self.spes[sid].pass_through(txn)
                    self.log.emit(t, self.spes[sid].origin, "bypass", txn.txn_id)
                self._to_data(txn, t)
        self._issued = []

    def _stimulus(self, st: dict, t: int) -> None:
        op = st["op"]
        if op in ("read", "write"):
            payload = bytes(st.get("data", [0])) if op == "write" else int(st.get("length", 4))
            addr = st["address"]
            addr = int(addr, 0) if isinstance(addr, str) else int(addr)
            prot = st.get("prot", 0)
            prot = int(prot, 0) if isinstance(prot, str) else int(prot)
            try:
                self._issue(int(st["master"]), op, addr, prot, payload)
            except (ConfigurationError, ValueError) as exc:
                self.log.emit(t, "bus", "issue_error", master=st["master"], reason=exc)
        elif op == "configure":
            sid = self.slave_ids[st["slave"]]
            spe = self.spes.get(sid)
            if spe is None:
                self.log.emit(t, "world", "config_error", slave=st["slave"], reason="no_spe")
                return
            requester = int(st["requester"])
            change = change_from_record(st["change"])
            try:
                spe.configure(requester, change, t)
                self.log.emit(t, spe.origin, "config_ack", requester=requester,
                              change=type(change).__name__, size=spe.policy_count)
            except ConfigRejected:
                self.log.emit(t, spe.origin, "config_reject", requester=requester,
                              change=type(change).__name__)
            except (CapacityExceeded, ConfigurationError) as exc:
                self.log.emit(t, spe.origin, "config_error", requester=requester,
                              error=type(exc).__name__)
        elif op == "sck_reset":
            sck = self.scks.get(self.slave_ids[st["slave"]])
            if sck is None:
                return
            requester = st["requester"]
            try:
                sck.reset(requester, t)
                self.log.emit(t, sck.origin, "reset_ack", requester=requester)
            except ConfigRejected:
                self.log.emit(t, sck.origin, "reset_reject", requester=requester)
        elif op == "mode":
            self.mode = Mode.parse(st["mode"])
            self.log.emit(t, "world", "mode", mode=self.mode.value)
        elif op == "sensor":
            for k, v in st.items():
                if k not in ("op", "tick"):
                    self.reading = self.reading.override(k, v)
        elif op == "can_send":
            data = bytes(st.get("data", []))
            cid = st["id"]
            self._can_frames.setdefault(t, []).append(
                (int(st["node"]), CanFrame(int(cid, 0) if isinstance(cid, str) else int(cid), data)))
        elif op == "raise_event":
            ev = SecurityEvent(SourceClass(st.get("source", "SPE")), str(st.get("origin", "apu")),
                               Violation(st["kind"]), t, priority=Priority[st.get("priority", "IRQ")])
            if Channel(st.get("channel", "apu")) is Channel.APU:
                self._apu_events.append(ev)
            else:
                self._raise(ev)

    # SPE -----------------------------------------------------------------

    def _phase_spe(self, t: int) -> None:
        for sid, spe in self.spes.items():
            for txn in self._arrivals[sid]:
                spe.sniff(txn, t, self.mode)
                self.log.emit(t, spe.origin, "gated", txn.txn_id, due=t + spe.pipeline_latency)
            self._arrivals[sid] = []
            for txn, d in spe.step(t, self.lockdown):
                if d.verdict is Verdict.GRANT:
                    self.log.emit(t, spe.origin, "decision", txn.txn_id, verdict=d.verdict.value)
                    self._to_data(txn, t)
                else:
                    self.log.emit(t, spe.origin, "decision", txn.txn_id, verdict=d.verdict.value,
                                  violation=d.violation.value if d.violation else "-")
                    self._complete(txn, RespCode.SLVERR, "spe", t)
            for ev in spe.drain_events():
                self._raise(ev)
            spe.commit()

    # slaves --------------------------------------------------------------

    def _phase_slaves(self, t: int) -> dict[int, RespCode | None]:
        signals: dict[int, RespCode | None] = {}
        for sid, slave in self.slaves.items():
            signal = slave.forced_signal(t)
            for txn in self._to_slave[sid]:
                resp, _ = slave.access(txn, t)
                self.log.emit(t, f"slave:{slave.name}", "access", txn.txn_id,
                              dir=txn.direction.value, offset=f"{txn.address - slave.base:#x}")
                self._complete(txn, resp, "slave", t)
                signal = resp
            self._to_slave[sid] = []
            signals[sid] = signal
        for inj in self.injections:
            k = inj.spec.kind
            if not isinstance(k, OkayForge) or inj.active_since is None or inj.done:
                continue
            for txn_id in sorted(self.txns):
                if len(inj.affected) >= k.count:
                    break
                txn = self.txns[txn_id]
                sid = txn.slave_id
                if sid is None or sid not in self.spes or txn_id in inj.affected:
                    continue
                if txn_id not in self.spes[sid].verdicts:
                    continue
                if not k.select.matches(txn.master_id, self.slave_name(sid), txn.direction,
                                        txn.address):
                    continue
                inj.affected.append(txn_id)
                self.completions.append(Completion(t, txn_id, sid, RespCode.OKAY, "forged"))
                self.log.emit(t, "inject", "okay_forge", txn_id, inj=inj.index)
                self.log.emit(t, "bus", "complete", txn_id, resp="OKAY", origin="forged")
            if len(inj.affected) >= k.count:
                inj.done = True
        return signals

    # SCK -----------------------------------------------------------------

    def _phase_sck(self, t: int, signals: dict[int, RespCode | None]) -> None:
        okays: dict[int, list[int]] = {}
        for c in reversed(self.completions):
            if c.tick != t:
                break
            if c.resp is RespCode.OKAY and c.slave_id is not None:
                okays.setdefault(c.slave_id, []).append(c.txn_id)
        for sid, sck in self.scks.items():
            before = sck.state
            ev = sck.step(signals.get(sid), t)
            if sck.state is not before:
                self.log.emit(t, sck.origin, "state", frm=before.value, to=sck.state.value)
            if ev is not None:
                self._raise(ev)
            if sid in self.spes:
                for ev in sck.okay_check(self.spes[sid].verdicts, reversed(okays.get(sid, [])), t):
                    self._raise(ev)
            for ev in sck.drain_events():
                self._raise(ev)

    # ATE -----------------------------------------------------------------

    def _phase_ate(self, t: int) -> None:
        reading = self.reading
        for sensor, value in self._pulse.items():
            reading = reading.override(sensor, value)
        for ev in self.ate.monitor(reading, t):
            self._raise(ev)

    # CAN -----------------------------------------------------------------

    def _phase_can(self, t: int) -> None:
        for nid, frame in self._can_frames.get(t, []):
            if nid in self.can.nodes and self.can.nodes[nid].active:
                self.can.send(nid, frame)
        corrupt = []
        for inj in self.injections:
            k = inj.spec.kind
            if inj.active_since is None or t < inj.active_since:
                continue
            if isinstance(k, CanErrorFlood) and t in k.slots:
                corrupt.append(k.node)
            elif isinstance(k, CanRogueNode) and t in k.slots:
                if k.node not in self.can.nodes:
                    self.can.add(CanNode(k.node, can_se_enabled=False))
                    self.log.emit(t, "can", "node_added", node=k.node)
                node = self.can.nodes[k.node]
                if node.active:
                    cid = k.ids[inj.rogue_next % len(k.ids)]
                    inj.rogue_next += 1
                    node.tx_queue.append(CanFrame(cid))
                    self.log.emit(t, "inject", "can_rogue", inj=inj.index, node=k.node, id=hex(cid))
        if not self.can.nodes:
            return
        res = self.can.step(t, corrupt)
        for nid, cid in res.blocked:
            self.log.emit(t, f"can-se:{nid}", "tx_block", id=hex(cid))
        if res.outcome != "idle":
            self.log.emit(t, "can", "slot", winner=hex(res.frame.can_id) if res.frame else "-",
                          outcome=res.outcome, node=res.winner)
            if res.outcome == "ok":
                assert res.frame is not None
                for nid, _ in res.dropped:
                    self.log.emit(t, f"can-se:{nid}", "rx_drop", id=hex(res.frame.can_id),
                                  frm=res.winner)
                for nid in res.delivered:
                    self.log.emit(t, f"can-se:{nid}", "rx_deliver", id=hex(res.frame.can_id),
                                  frm=res.winner, filtered=self.can.nodes[nid].can_se_enabled)
        for ev in res.events:
            self._raise(ev)

    # SRE -----------------------------------------------------------------

    def _phase_sre(self, t: int) -> None:
        evt_base = len(self.security_events) - len(self._pending_events)
        for i, ev in enumerate(self._pending_events, start=1):
            seq = self.sre.enqueue(ev, Channel.PL)
            self._evt_of_seq[seq] = evt_base + i
            self.log.emit(t, "sre", "intake", ev.txn_id, evt=evt_base + i, seq=seq,
                          source=ev.origin, kind=ev.kind.value, prio=ev.priority.name,
                          channel=Channel.PL.value)
        self._pending_events = []
        for ev in self._apu_events:
            try:
                self.sre.enqueue(ev, Channel.APU)
            except ChannelDisabled:
                self.log.emit(t, "sre", "reject", ev.txn_id, channel=Channel.APU.value,
                              kind=ev.kind.value)
        self._apu_events = []
        for d in self.sre.dispatch(self._execute, t):
            self.log.emit(t, "sre", "dispatch", d.event.txn_id, evt=self._evt_of_seq[d.seq],
                          prio=d.event.priority.name, resp=str(d.action), outcome=d.outcome)
        if self.ate.lockdown and self.lockdown_tick is None:
            self.lockdown_tick = t
        if self.ate.reset_requested:
            self._reset(t)

    def _execute(self, action: ResponseAction, event: SecurityEvent) -> None:
        kind = action.kind
        if kind in (ActionKind.ISOLATE_PERIPHERAL, ActionKind.DEACTIVATE_INTERFACE):
            sid = self.slave_ids.get(action.target or "")
            if sid is None:
                raise ExecutionFault(f"unknown slave {action.target!r}")
            spe, sck = self.spes.get(sid), self.scks.get(sid)
            if kind is ActionKind.ISOLATE_PERIPHERAL:
                if spe is None:
                    raise ExecutionFault(f"no SPE guards {action.target!r}")
                spe.isolated = True
            else:
                if spe is None and sck is None:
                    raise ExecutionFault(f"no guardian on {action.target!r}")
                if spe is not None:
                    spe.isolated = True
                if sck is not None:
                    sck.enabled = False
            return
        if kind is ActionKind.DISABLE_INTERFACE:
            name = action.target or ""
            if name in self.slave_ids and self.slave_ids[name] in self.spes:
                self.spes[self.slave_ids[name]].isolated = True
            elif name.startswith("can:") and name[4:].isdigit() and int(name[4:]) in self.can.nodes:
                self.can.nodes[int(name[4:])].connected = False
            else:
                raise ExecutionFault(f"no interface named {name!r}")
        try:
            self.ate.execute(action)
        except SentinelError as exc:  # pragma: no cover - level checked above
            raise ExecutionFault(str(exc)) from exc
