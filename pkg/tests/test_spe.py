import random

import pytest
from hypothesis import given, settings, strategies as st

from sentinel.bus import AddressMap, AxProt, Direction, Interconnect, Phase, Region
from sentinel.errors import CapacityExceeded, ConfigRejected, ConfigurationError
from sentinel.events import Violation
from sentinel.spe import (POLICY_CAPACITY, AddPolicy, DeletePolicy, DeviceTableEntry, Mode,
                          Permission, PolicyEntry, Sample, SecurityPolicyEngine, SetDeviceEnabled,
                          Tables, Verdict, decide, device_lookup, policy_lookup)
from sentinel.world import World

from conftest import scenario

BASE = 0x4000_0000
OWNER = 0


def engine(latency=4, policies=(), devices=()):
    spe = SecurityPolicyEngine(0, "door_locks", BASE, OWNER, latency)
    spe.load(policies, devices)
    return spe


def ic():
    return Interconnect(AddressMap([Region(0, BASE, 0x1000)]), {0, 1, 2, 3})


def sample(master=2, offset=0, direction=Direction.READ, prot=0, mode=Mode.NORMAL, txn=1):
    return Sample(txn, master, offset, direction, AxProt.decode(prot), 0, mode)


def test_owner_adds_policy():
    spe = engine()
    assert spe.configure(OWNER, AddPolicy(PolicyEntry(2, 0, 4, Permission.R)), tick=1)
    assert spe.policy_count == 1


def test_non_owner_delete_rejected_with_event():
    spe = engine(policies=[PolicyEntry(2, 0, 4, Permission.R)])
    with pytest.raises(ConfigRejected):
        spe.configure(1, DeletePolicy(0), tick=3)
    assert spe.policy_count == 1
    [ev] = spe.drain_events()
    assert ev.kind is Violation.CONFIG_REJECTED and ev.tick == 3


def test_capacity_1024():
    spe = engine()
    for i in range(POLICY_CAPACITY):
        spe.configure(OWNER, AddPolicy(PolicyEntry(2, 4 * i, 4 * i + 4, Permission.RW)))
    with pytest.raises(CapacityExceeded):
        spe.configure(OWNER, AddPolicy(PolicyEntry(2, 0x10000, 0x10004, Permission.RW)))
    assert spe.policy_count == POLICY_CAPACITY


def test_overlap_is_configuration_error():
    with pytest.raises(ConfigurationError):
        engine(policies=[PolicyEntry(2, 0, 8, Permission.R), PolicyEntry(2, 4, 12, Permission.RW)])
    # different master, or disjoint permission, may overlap
    engine(policies=[PolicyEntry(2, 0, 8, Permission.R), PolicyEntry(3, 0, 8, Permission.R),
                     PolicyEntry(2, 0, 8, Permission.W)])


def test_sniff_gates_and_decides_after_latency():
    spe = engine(policies=[PolicyEntry(2, 0, 4, Permission.R)])
    txn = ic().issue_transaction(2, Direction.READ, BASE, 0, 4, tick=7)
    spe.sniff(txn, 7)
    assert txn.phase is Phase.GATED
    for t in range(7, 11):
        assert spe.step(t) == []
    [(got, d)] = spe.step(11)
    assert got is txn and d.verdict is Verdict.GRANT and d.tick == 11


def test_simultaneous_arrivals_fifo():
    spe = engine(policies=[PolicyEntry(2, 0, 0x40, Permission.RW)])
    bus = ic()
    txns = [bus.issue_transaction(2, Direction.READ, BASE + 4 * i, 0, 4, tick=0) for i in range(3)]
    for t in txns:
        spe.sniff(t, 0)
    out = spe.step(4)
    assert [t.txn_id for t, _ in out] == [t.txn_id for t in txns]


def test_device_lookup():
    table = (DeviceTableEntry(1, 0), DeviceTableEntry(2, 16), DeviceTableEntry(5, 40))
    assert device_lookup((), 3) is None
    assert device_lookup(table, 2).policy_base == 16
    assert device_lookup((DeviceTableEntry(2, 0, 1, enabled=False),), 2) is None


def test_device_table_layout_bases():
    # the engine packs each master's block contiguously, in first-seen order
    spe = engine(policies=[PolicyEntry(1, 4 * i, 4 * i + 4, Permission.R) for i in range(16)]
                 + [PolicyEntry(2, 4 * i, 4 * i + 4, Permission.R) for i in range(24)]
                 + [PolicyEntry(5, 0, 4, Permission.R)])
    assert [(d.master_id, d.policy_base) for d in spe.tables.devices] == [(1, 0), (2, 16), (5, 40)]


def test_policy_lookup_examples():
    p = PolicyEntry(2, 0, 4, Permission.R, modes=frozenset({Mode.NORMAL}))
    entry = DeviceTableEntry(2, 0, 1)
    assert policy_lookup((p,), entry, 0, Direction.READ, Mode.NORMAL) is p
    assert policy_lookup((p,), entry, 0, Direction.WRITE, Mode.NORMAL) is None


def test_policy_lookup_random_probes_against_scan():
    rng = random.Random(20)
    policies = []
    for i in range(20):
        modes = frozenset(rng.sample(list(Mode), rng.randint(1, 3)))
        policies.append(PolicyEntry(2, 16 * i, 16 * i + rng.randint(1, 16),
                                    rng.choice(list(Permission)), modes=modes))
    spe = engine(policies=policies)
    t = spe.tables
    entry = device_lookup(t.devices, 2)
    for _ in range(200):
        off = rng.randrange(0, 16 * 21)
        d = rng.choice(list(Direction))
        m = rng.choice(list(Mode))
        expect = [p for p in policies
                  if p.offset_start <= off < p.offset_end and m in p.modes
                  and (p.permission is Permission.RW or p.permission.value == d.value[0].upper())]
        assert len(expect) <= 1
        assert policy_lookup(t.policies, entry, off, d, m) == (expect[0] if expect else None)


def test_decide_eight_prots_vs_secure_policy():
    t = engine(policies=[PolicyEntry(2, 0, 4, Permission.RW, AxProt.decode(0))]).tables
    verdicts = {b: decide(sample(prot=b), t, 0) for b in range(8)}
    assert [b for b, d in verdicts.items() if d.verdict is Verdict.GRANT] == [0]
    assert all(d.violation is Violation.SECURITY_ATTRIBUTE_MISMATCH
               for b, d in verdicts.items() if b)


def test_decide_ns_flip_is_mismatch():
    t = engine(policies=[PolicyEntry(2, 0, 4, Permission.W, AxProt.decode(0))]).tables
    d = decide(sample(direction=Direction.WRITE, prot=0b010), t, 0)
    assert d.violation is Violation.SECURITY_ATTRIBUTE_MISMATCH


def test_violation_precedence():
    p = PolicyEntry(2, 0, 4, Permission.R, AxProt.decode(0), frozenset({Mode.FAILSAFE}))
    t = engine(policies=[p]).tables
    assert decide(sample(master=9, prot=7), t, 0, lockdown=True).violation is Violation.LOCKDOWN
    assert decide(sample(master=9), t, 0, isolated=True).violation is Violation.ISOLATED
    assert decide(sample(master=9), t, 0).violation is Violation.UNKNOWN_MASTER
    assert decide(sample(offset=8), t, 0).violation is Violation.NO_POLICY
    assert decide(sample(prot=7), t, 0).violation is Violation.MODE_DENIED
    assert decide(sample(direction=Direction.WRITE, prot=7, mode=Mode.FAILSAFE), t,
                  0).violation is Violation.PERMISSION_DENIED
    assert decide(sample(prot=7, mode=Mode.FAILSAFE), t,
                  0).violation is Violation.SECURITY_ATTRIBUTE_MISMATCH


def test_block_event_carries_stride_annotation():
    spe = engine(policies=[PolicyEntry(2, 0, 4, Permission.W, stride="TDE")])
    txn = ic().issue_transaction(2, Direction.WRITE, BASE, 0b010, b"\x01", tick=0)
    spe.sniff(txn, 0)
    spe.step(4)
    [ev] = spe.drain_events()
    assert ev.annotation == "TDE"


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 0x3C), st.sampled_from(list(Direction)),
                          st.integers(0, 7), st.sampled_from(list(Mode))), max_size=20))
def test_decision_purity(probes):
    spe = engine(latency=2, policies=[PolicyEntry(2, 0, 0x20, Permission.RW),
                                      PolicyEntry(1, 0, 0x40, Permission.R, AxProt.decode(2))])
    bus = ic()
    samples = {}
    for i, (m, off, d, prot, mode) in enumerate(probes):
        payload = b"\x00" if d is Direction.WRITE else 4
        txn = bus.issue_transaction(m, d, BASE + off, prot, payload, tick=i)
        samples[txn.txn_id] = (spe.sniff(txn, i, mode), spe.tables)
        spe.step(i)
    spe.step(len(probes) + 2)
    assert len(spe.decisions) == len(probes)
    for d in spe.decisions:
        s, tables = samples[d.txn_id]
        assert decide(s, tables, d.tick) == d


def test_dump_round_trip():
    pols = [PolicyEntry(2, 0, 4, Permission.R, AxProt.decode(0), frozenset({Mode.NORMAL})),
            PolicyEntry(2, 4, 8, Permission.RW, AxProt.decode(2),
                        frozenset({Mode.DIAGNOSTIC, Mode.FAILSAFE}), "TI")]
    spe = engine(policies=pols)
    again = engine(policies=[PolicyEntry.from_record(r) for r in spe.dump()])
    assert again.dump() == spe.dump()
    assert again.tables == spe.tables


def test_disabled_device_becomes_unknown():
    spe = engine(policies=[PolicyEntry(2, 0, 4, Permission.R)])
    spe.configure(OWNER, SetDeviceEnabled(2, False))
    spe.commit()
    assert decide(sample(), spe.tables, 0).violation is Violation.UNKNOWN_MASTER


# -- in a world --------------------------------------------------------------

def test_config_epoch_affects_only_later_txns():
    add = {"op": "add_policy", "policy": {"master": 2, "offset_start": 0x40,
                                          "offset_end": 0x80, "perm": "R", "prot": 0}}
    sc = scenario(stimuli=[
        {"tick": 5, "op": "configure", "slave": "door_locks", "requester": 0, "change": add},
        {"tick": 5, "op": "read", "master": 2, "address": BASE + 0x40, "length": 4},
        {"tick": 6, "op": "read", "master": 2, "address": BASE + 0x40, "length": 4},
    ])
    w = World(sc)
    w.run(15)
    verdicts = [(r.txn, r.get("verdict")) for r in w.log.select(event="decision")]
    assert verdicts == [(1, "Block"), (2, "Grant")]
    acks = w.log.select(event="config_ack")
    assert [r.get("requester") for r in acks] == ["0"]


def test_non_owner_config_in_world_raises_event():
    sc = scenario(stimuli=[{"tick": 2, "op": "configure", "slave": "door_locks", "requester": 1,
                            "change": {"op": "delete_policy", "index": 0}}])
    w = World(sc)
    w.run(3)
    assert [r.event for r in w.log.select(comp="spe:door_locks")] == ["config_reject", "security"]
    assert len(w.spes[0].tables.policies) == 1


def test_blocked_txn_never_reaches_slave():
    sc = scenario(stimuli=[{"tick": 1, "op": "write", "master": 1, "address": BASE, "data": [1]}])
    w = World(sc)
    w.run(10)
    assert w.slaves[0].access_log == []
    [c] = [c for c in w.completions if c.txn_id == 1]
    assert c.resp.name == "SLVERR" and c.origin == "spe"


def test_granted_txn_reaches_slave_once():
    sc = scenario(stimuli=[{"tick": 1, "op": "write", "master": 2, "address": BASE, "data": [1]}])
    w = World(sc)
    w.run(10)
    assert [(t, txn) for t, txn, _, _ in w.slaves[0].access_log] == [(5, 1)]


def test_disabled_spe_bypasses():
    sc = scenario(spe=[{"slave": "door_locks", "enabled": False}], policies=[],
                  stimuli=[{"tick": 1, "op": "read", "master": 1, "address": BASE, "length": 4}])
    w = World(sc)
    w.run(3)
    assert [r.event for r in w.log.select(comp="spe:door_locks")] == ["bypass"]
    assert len(w.slaves[0].access_log) == 1
