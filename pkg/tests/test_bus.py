import pytest
from hypothesis import given, strategies as st

from sentinel.bus import (AddressMap, AxProt, Direction, Interconnect, Phase, Region, RespCode,
                          legal_phase_sequence)
from sentinel.errors import ConfigurationError, DecodeError, PhaseError
from sentinel.world import World

from conftest import scenario


def make_ic(masters=(1, 2)):
    amap = AddressMap([Region(0, 0x4000_0000, 0x1000), Region(1, 0x4001_0000, 0x1000)])
    return Interconnect(amap, set(masters))


@pytest.mark.parametrize("bits", range(8))
def test_axprot_round_trip(bits):
    assert AxProt.decode(bits).encode() == bits


def test_axprot_ns_is_bit_one():
    assert AxProt.decode(0b010).non_secure
    assert not AxProt.decode(0b101).non_secure
    assert AxProt.decode(0b000).with_ns_flipped().encode() == 0b010
    assert str(AxProt.decode(0b110)) == "0b110"


def test_axprot_out_of_range():
    with pytest.raises(DecodeError):
        AxProt.decode(8)


def test_resp_codes():
    assert [RespCode.decode(b) for b in (0, 2, 3)] == [RespCode.OKAY, RespCode.SLVERR,
                                                       RespCode.DECERR]
    with pytest.raises(DecodeError):
        RespCode.decode(0b01)  # EXOKAY
    assert not RespCode.OKAY.is_error and RespCode.SLVERR.is_error


def test_issue_transaction_constructor():
    txn = make_ic().issue_transaction(1, Direction.WRITE, 0x4000_0000, 0b010, b"\xff", tick=3)
    assert txn.phase is Phase.ADDRESS_ISSUED
    assert txn.prot.non_secure
    assert txn.resp is None
    assert txn.slave_id == 0 and txn.issue_tick == 3


def test_issue_unknown_master():
    with pytest.raises(ConfigurationError):
        make_ic().issue_transaction(7, Direction.READ, 0x0, 0b000, 4, tick=0)


def test_issue_empty_write():
    with pytest.raises(ValueError):
        make_ic().issue_transaction(1, Direction.WRITE, 0x4000_0000, 0, b"", tick=0)


def test_txn_ids_unique_over_1000():
    ic = make_ic()
    ids = {ic.issue_transaction(1, Direction.READ, 0x4000_0000, 0, 4, tick=i).txn_id
           for i in range(1000)}
    assert len(ids) == 1000


def test_phase_advance_rejects_illegal_order():
    txn = make_ic().issue_transaction(1, Direction.READ, 0x4000_0000, 0, 4, tick=0)
    txn.advance(Phase.DATA_TRANSFER)
    with pytest.raises(PhaseError):
        txn.advance(Phase.GATED)
    txn.complete(RespCode.OKAY)
    assert txn.done and txn.resp is RespCode.OKAY


def test_legal_phase_sequences():
    A, G, D, R = (Phase.ADDRESS_ISSUED, Phase.GATED, Phase.DATA_TRANSFER,
                  Phase.RESPONSE_RETURNED)
    assert legal_phase_sequence([A, G, D, R])
    assert legal_phase_sequence([A, G, R])      # blocked
    assert legal_phase_sequence([A, R])         # decode miss
    assert not legal_phase_sequence([G, D, R])
    assert not legal_phase_sequence([A, D, G, R])


def test_route_containment_and_miss():
    ic = make_ic()
    assert ic.route(0x4001_0004) == 1
    assert ic.route(0x3FFF_FFFF) is None


def test_address_map_rejects_overlap():
    with pytest.raises(ConfigurationError):
        AddressMap([Region(0, 0x1000, 0x100), Region(1, 0x10FF, 0x10)])


def test_route_boundaries_five_slaves():
    regions = [Region(i, base, size) for i, (base, size) in enumerate(
        [(0x0, 0x10), (0x10, 0x1), (0x100, 0x100), (0x1000_0000, 0x20), (0xFFFF_FF00, 0x100)])]
    amap = AddressMap(list(reversed(regions)))

    def oracle(addr):
        hits = [r.slave_id for r in regions if r.base <= addr < r.base + r.size]
        return hits[0] if hits else None

    probes = sorted({a for r in regions for a in (r.base, r.base + r.size - 1, r.base + r.size)
                     if a <= 0xFFFF_FFFF})
    for a in probes:
        assert amap.route(a) == oracle(a), hex(a)


@given(st.integers(0, 0xFFFF_FFFF))
def test_route_matches_scan(addr):
    ic = make_ic()
    regions = ic.address_map.regions
    expect = next((r.slave_id for r in regions if r.base <= addr < r.limit), None)
    assert ic.route(addr) == expect


def test_decode_miss_completes_decerr_without_slave():
    w = World(scenario())
    w.submit(op="read", master=2, address=0x6000_0000, length=4)
    recs = w.advance_tick()
    assert [r.event for r in recs if r.comp == "bus"] == ["issue", "decerr", "complete"]
    assert recs[-1].get("resp") == "DECERR"
    assert all(not s.access_log for s in w.slaves.values())


def test_empty_world_tick_is_empty():
    w = World(scenario(slaves=[], spe=[], policies=[], sck=[]))
    assert w.advance_tick() == []


def test_one_gated_transaction_event():
    w = World(scenario())
    w.submit(op="write", master=2, address=0x4000_0000, data=[1])
    recs = w.advance_tick()
    assert [r.event for r in recs].count("gated") == 1


def test_replay_is_byte_identical():
    sc = scenario(traffic=[{"master": 1, "slave": "infotainment", "period": 1,
                            "offset_hi": 0x400, "prot": 0b010}], duration=200)
    a, b = World(sc), World(sc)
    assert a.run().text() == b.run().text()
