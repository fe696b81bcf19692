"""Scenario runner, log-based invariant checks and run reports.

Reports and invariant checks are computed from the event log alone, so a
saved log can be re-audited without re-running the world.
"""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import yaml

from .bus import Phase, legal_phase_sequence
from .events import LogRecord
from .scenario import (CanErrorFlood, CanRogueNode, NsBitFlip, OkayForge, ResponseForge,
                       Scenario, TamperPulse)
from .world import World

EXIT_OK = 0
EXIT_MISSED = 1
EXIT_INVARIANT = 2

_TAMPER_KIND = {"voltage": "VoltageTamper", "voltage_mv": "VoltageTamper",
                "temperature": "TemperatureTamper", "temperature_c": "TemperatureTamper",
                "clock": "ClockTamper", "clock_ok": "ClockTamper",
                "seu": "SeuDetected", "seu_detected": "SeuDetected"}


# -- invariants ----------------------------------------------------------------

def check_invariants(scenario: Scenario, records: Iterable[LogRecord],
                     end_tick: int | None = None) -> list[str]:
    """Return one message per violated invariant instance (empty if clean).

    Decisions due after ``end_tick`` (default: last logged tick) are not
    expected to be in the log.
    """
    records = list(records)
    if end_tick is None:
        end_tick = records[-1].tick if records else 0
    problems: list[str] = []
    phases: dict[int, list[Phase]] = defaultdict(list)
    blocked: set[int] = set()
    decerr: set[int] = set()
    accessed: dict[int, int] = {}
    gated_due: dict[int, int] = {}
    decisions: dict[int, list[int]] = defaultdict(list)
    aborted: set[int] = set()
    security: dict[int, LogRecord] = {}
    intakes: dict[int, int] = defaultdict(int)
    lockdown_at: int | None = None
    pending_fiq: set[int] = set()
    busoff: dict[int, int] = {}
    nodes = {n.node_id: n for n in scenario.can_nodes}

    for r in records:
        ev = r.event
        if r.comp == "world" and ev == "reset":
            busoff.clear()
        elif ev == "issue":
            phases[r.txn].append(Phase.ADDRESS_ISSUED)  # type: ignore[index]
        elif ev == "gated":
            phases[r.txn].append(Phase.GATED)  # type: ignore[index]
            gated_due[r.txn] = int(r.get("due", "-1"))  # type: ignore[index]
        elif ev == "data":
            phases[r.txn].append(Phase.DATA_TRANSFER)  # type: ignore[index]
        elif ev == "complete" and r.get("origin") != "forged":
            phases[r.txn].append(Phase.RESPONSE_RETURNED)  # type: ignore[index]
            if r.get("origin") == "interconnect":
                decerr.add(r.txn)  # type: ignore[arg-type]
            if r.get("origin") == "reset":
                aborted.add(r.txn)  # type: ignore[arg-type]
        elif ev == "decision":
            decisions[r.txn].append(r.tick)  # type: ignore[index]
            if r.get("verdict") == "Block":
                blocked.add(r.txn)  # type: ignore[arg-type]
            elif lockdown_at is not None and r.tick > lockdown_at:
                problems.append(f"txn {r.txn}: Grant at tick {r.tick} after lockdown at {lockdown_at}")
        elif ev == "access":
            accessed[r.txn] = r.tick  # type: ignore[index]
        elif ev == "security":
            security[int(r.get("evt", "0"))] = r  # type: ignore[arg-type]
            if r.get("kind") == "NodeBusOff" and r.comp.startswith("can-se:"):
                busoff[int(r.comp.split(":")[1])] = r.tick
        elif r.comp == "sre" and ev == "intake":
            evt = int(r.get("evt", "0"))  # type: ignore[arg-type]
            intakes[evt] += 1
            if r.get("channel") == "apu":
                problems.append(f"evt {evt}: accepted on the APU channel")
            if r.get("prio") == "FIQ":
                pending_fiq.add(evt)
        elif r.comp == "sre" and ev == "dispatch":
            evt = int(r.get("evt", "0"))  # type: ignore[arg-type]
            if r.get("prio") == "FIQ":
                pending_fiq.discard(evt)
            elif pending_fiq:
                problems.append(f"evt {evt}: IRQ dispatched while FIQ {min(pending_fiq)} pending")
            if r.get("resp") == "Lockdown" and r.get("outcome") == "ok" and lockdown_at is None:
                lockdown_at = r.tick
        elif r.comp == "can" and ev == "slot":
            node = int(r.get("node", "-1"))  # type: ignore[arg-type]
            if node in busoff and r.tick > busoff[node]:
                problems.append(f"slot {r.tick}: bus-off node {node} transmitted")
            spec = nodes.get(node)
            if (r.get("outcome") == "ok" and spec is not None and spec.can_se_enabled
                    and int(r.get("winner", "0"), 16) not in spec.write_ids):  # type: ignore[arg-type]
                problems.append(f"slot {r.tick}: node {node} sent unapproved id {r.get('winner')}")
        elif ev == "rx_deliver" and r.get("filtered") == "1":
            node = int(r.comp.split(":")[1])
            spec = nodes.get(node)
            if spec is not None and int(r.get("id", "0"), 16) not in spec.read_ids:  # type: ignore[arg-type]
                problems.append(f"slot {r.tick}: node {node} delivered unapproved id {r.get('id')}")

    for txn, seq in phases.items():
        if not legal_phase_sequence(seq):
            problems.append(f"txn {txn}: illegal phase order {[p.value for p in seq]}")
    for txn in sorted((blocked | decerr) & accessed.keys()):
        problems.append(f"txn {txn}: reached its slave despite Block/DECERR")
    for txn, due in gated_due.items():
        got = decisions.get(txn, [])
        if (txn in aborted or due > end_tick) and not got:
            continue
        if got != [due]:
            problems.append(f"txn {txn}: decisions at {got}, expected exactly one at {due}")
    for evt in sorted(security):
        if intakes.get(evt, 0) != 1:
            problems.append(f"evt {evt}: {intakes.get(evt, 0)} intake records")
    return problems


# -- report -------------------------------------------------------------------

@dataclass
class InjectionResult:
    index: int
    kind: str
    activation_tick: int | None
    verdict: str                       # "Detected" | "Missed"
    guardian: str | None = None
    detection_tick: int | None = None
    latency: int | None = None
    responses: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunReport:
    scenario: str
    seed: int
    duration: int
    detections: dict[str, int]
    injections: list[InjectionResult]
    responses: list[dict]
    invariant_violations: list[str]
    security_events: int
    log_lines: int
    log_sha256: str

    @property
    def exit_code(self) -> int:
        if self.invariant_violations:
            return EXIT_INVARIANT
        if any(i.verdict != "Detected" for i in self.injections):
            return EXIT_MISSED
        return EXIT_OK

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "duration": self.duration,
            "exit_code": self.exit_code,
            "security_events": self.security_events,
            "detections": dict(self.detections),
            "injections": [i.as_dict() for i in self.injections],
            "responses": list(self.responses),
            "invariant_violations": list(self.invariant_violations),
            "log_lines": self.log_lines,
            "log_sha256": self.log_sha256,
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.as_dict(), sort_keys=False)

    def to_text(self) -> str:
        out = [f"scenario {self.scenario}  seed={self.seed}  ticks={self.duration}  "
               f"security_events={self.security_events}  exit={self.exit_code}"]
        if self.detections:
            out.append("detections: " + ", ".join(f"{k}={v}" for k, v in self.detections.items()))
        hdr = f"{'#':>3}  {'injection':<14} {'tick':>6}  {'verdict':<9} {'guardian':<20} {'latency':>7}  response"
        out.append(hdr)
        out.append("-" * len(hdr))
        for i in self.injections:
            flag = "" if i.verdict == "Detected" else "  <-- MISSED"
            out.append(f"{i.index:>3}  {i.kind:<14} {_dash(i.activation_tick):>6}  {i.verdict:<9} "
                       f"{i.guardian or '-':<20} {_dash(i.latency):>7}  "
                       f"{'; '.join(i.responses) or '-'}{flag}")
        if not self.injections:
            out.append("  (no injections)")
        for msg in self.invariant_violations:
            out.append(f"INVARIANT: {msg}")
        return "\n".join(out) + "\n"


def _dash(v: object) -> str:
    return "-" if v is None else str(v)


def build_report(scenario: Scenario, records: list[LogRecord],
                 end_tick: int | None = None) -> RunReport:
    activation: dict[int, int] = {}
    affected: dict[int, set[int]] = defaultdict(set)
    security: list[LogRecord] = []
    rx_drops: list[LogRecord] = []
    dispatch: dict[str, list[str]] = defaultdict(list)
    responses = []
    for r in records:
        if r.comp == "inject":
            i = int(r.get("inj", "-1"))  # type: ignore[arg-type]
            if r.event == "activate":
                activation[i] = r.tick
            elif r.txn is not None:
                affected[i].add(r.txn)
        elif r.event == "security":
            security.append(r)
        elif r.event == "rx_drop":
            rx_drops.append(r)
        elif r.comp == "sre" and r.event == "dispatch":
            resp = r.get("resp") or ""
            dispatch[r.get("evt") or ""].append(resp)
            if resp != "LogOnly":
                responses.append({"tick": r.tick, "evt": int(r.get("evt", "0")),  # type: ignore[arg-type]
                                  "action": resp, "outcome": r.get("outcome")})

    detections: dict[str, int] = {}
    for r in security:
        detections[r.comp] = detections.get(r.comp, 0) + 1

    results = []
    for i, inj in enumerate(scenario.injections):
        act = activation.get(i)
        res = InjectionResult(i, inj.name, act, "Missed")
        if act is not None:
            hit = _first_detection(inj.kind, act, affected[i], security, rx_drops)
            if hit is not None:
                res.verdict = "Detected"
                res.guardian = hit.comp
                res.detection_tick = hit.tick
                res.latency = hit.tick - act
                res.responses = list(dispatch.get(hit.get("evt") or "", [])) if hit.event == "security" else []
        results.append(res)

    text = "".join(r.format() + "\n" for r in records)
    return RunReport(
        scenario=scenario.name, seed=scenario.seed, duration=scenario.duration,
        detections=detections, injections=results, responses=responses,
        invariant_violations=check_invariants(scenario, records, end_tick),
        security_events=len(security), log_lines=len(records),
        log_sha256=hashlib.sha256(text.encode()).hexdigest())


def _first_detection(kind, act: int, affected: set[int], security: list[LogRecord],
                     rx_drops: list[LogRecord]) -> LogRecord | None:
    def first(pred) -> LogRecord | None:
        return next((r for r in security if r.tick >= act and pred(r)), None)

    if isinstance(kind, NsBitFlip):
        return first(lambda r: r.txn in affected and r.comp.startswith("spe:"))
    if isinstance(kind, OkayForge):
        return first(lambda r: r.txn in affected and r.get("kind") == "OkayImpersonation")
    if isinstance(kind, ResponseForge):
        return first(lambda r: r.comp == f"sck:{kind.slave}" and r.get("kind") == "ErrorTimeout")
    if isinstance(kind, CanErrorFlood):
        return first(lambda r: r.comp == f"can-se:{kind.node}"
                     and r.get("kind") in ("MaliciousNodeSuspected", "NodeBusOff"))
    if isinstance(kind, CanRogueNode):
        hit = first(lambda r: r.comp == f"can-se:{kind.node}" and r.get("kind") == "UnapprovedCanId")
        drop = next((r for r in rx_drops if r.tick >= act and r.get("frm") == str(kind.node)), None)
        if hit is None or (drop is not None and drop.tick < hit.tick):
            return drop
        return hit
    if isinstance(kind, TamperPulse):
        want = _TAMPER_KIND.get(kind.sensor)
        return first(lambda r: r.comp == "ate" and r.get("kind") == want)
    return None


@dataclass
class RunResult:
    world: World
    report: RunReport

    @property
    def log_text(self) -> str:
        return self.world.log.text()


def run_scenario(scenario: Scenario, ticks: int | None = None) -> RunResult:
    """Run ``scenario`` for its duration (or ``ticks``) and build its report."""
    scenario.validate()
    world = World(scenario)
    world.run(ticks)
    return RunResult(world, build_report(scenario, world.log.records, world.tick))
