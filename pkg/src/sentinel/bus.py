"""Transaction-level model of an AXI4-style master/slave interconnect.

The five AXI channels are collapsed into a single :class:`Transaction`
record that moves through request, data and response phases.  Protection
attributes and response codes keep their wire encodings so that the
NS-bit and xRESP attacks can be expressed exactly.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum, IntEnum

from .errors import ConfigurationError, DecodeError, PhaseError

ADDRESS_MASK = 0xFFFF_FFFF

PROT_PRIVILEGED = 0b001
PROT_NONSECURE = 0b010
PROT_INSTRUCTION = 0b100


@dataclass(frozen=True)
class AxProt:
    """3-bit AxPROT attribute.  Bit 1 is the NS (non-secure) bit."""

    privileged: bool = False
    non_secure: bool = False
    instruction: bool = False

    @classmethod
    def decode(cls, bits: int) -> "AxProt":
        if not 0 <= bits <= 0b111:
            raise DecodeError(f"AxPROT out of range: {bits!r}")
        return cls(bool(bits & PROT_PRIVILEGED), bool(bits & PROT_NONSECURE),
                   bool(bits & PROT_INSTRUCTION))

    def encode(self) -> int:
        return ((PROT_PRIVILEGED if self.privileged else 0)
                | (PROT_NONSECURE if self.non_secure else 0)
                | (PROT_INSTRUCTION if self.instruction else 0))

    def with_ns_flipped(self) -> "AxProt":
        return AxProt(self.privileged, not self.non_secure, self.instruction)

    def __str__(self) -> str:
        return f"0b{self.encode():03b}"


class RespCode(IntEnum):
    OKAY = 0b00
    SLVERR = 0b10
    DECERR = 0b11

    @classmethod
    def decode(cls, bits: int) -> "RespCode":
        # EXOKAY (0b01) is deliberately not representable
        try:
            return cls(bits)
        except ValueError:
            raise DecodeError(f"illegal xRESP encoding: {bits!r}") from None

    @property
    def is_error(self) -> bool:
        return self is not RespCode.OKAY


class Direction(str, Enum):
    READ = "read"
    WRITE = "write"


class Phase(str, Enum):
    ADDRESS_ISSUED = "AddressIssued"
    GATED = "Gated"
    DATA_TRANSFER = "DataTransfer"
    RESPONSE_RETURNED = "ResponseReturned"


_NEXT_PHASES = {
    Phase.ADDRESS_ISSUED: {Phase.GATED, Phase.DATA_TRANSFER, Phase.RESPONSE_RETURNED},
    Phase.GATED: {Phase.DATA_TRANSFER, Phase.RESPONSE_RETURNED},
    Phase.DATA_TRANSFER: {Phase.RESPONSE_RETURNED},
    Phase.RESPONSE_RETURNED: set(),
}


def legal_phase_sequence(phases: list[Phase]) -> bool:
    """True if ``phases`` is a subsequence of AddressIssued, Gated, DataTransfer,
    ResponseReturned starting with AddressIssued."""
    if not phases or phases[0] is not Phase.ADDRESS_ISSUED:
        return False
    return all(b in _NEXT_PHASES[a] for a, b in zip(phases, phases[1:]))


@dataclass
class Transaction:
    txn_id: int
    master_id: int
    direction: Direction
    address: int
    prot: AxProt
    data: bytes
    length: int
    issue_tick: int
    slave_id: int | None = None
    resp: RespCode | None = None
    phases: list[Phase] = field(default_factory=lambda: [Phase.ADDRESS_ISSUED])

    @property
    def phase(self) -> Phase:
        return self.phases[-1]

    @property
    def done(self) -> bool:
        return self.phase is Phase.RESPONSE_RETURNED

    def advance(self, phase: Phase) -> None:
        if phase not in _NEXT_PHASES[self.phase]:
            raise PhaseError(f"txn {self.txn_id}: {self.phase.value} -> {phase.value}")
        self.phases.append(phase)

    def complete(self, resp: RespCode) -> None:
        self.advance(Phase.RESPONSE_RETURNED)
        self.resp = resp


@dataclass
class SimClock:
    tick: int = 0

    def advance(self) -> int:
        self.tick += 1
        return self.tick


@dataclass(frozen=True)
class Region:
    slave_id: int
    base: int
    size: int

    @property
    def limit(self) -> int:
        return self.base + self.size


class AddressMap:
    """Static slave_id -> [base, base+size) decode table."""

    def __init__(self, regions: list[Region] | None = None):
        self._regions: list[Region] = []
        self._bases: list[int] = []
        for r in regions or []:
            self.add(r)

    def add(self, region: Region) -> None:
        if region.size <= 0:
            raise ConfigurationError(f"slave {region.slave_id}: empty address range")
        if region.base < 0 or region.limit - 1 > ADDRESS_MASK:
            raise ConfigurationError(f"slave {region.slave_id}: range outside 32-bit space")
        for r in self._regions:
            if r.slave_id == region.slave_id:
                raise ConfigurationError(f"slave {region.slave_id} mapped twice")
            if region.base < r.limit and r.base < region.limit:
                raise ConfigurationError(
                    f"slaves {r.slave_id} and {region.slave_id} have overlapping ranges")
        i = bisect.bisect_left(self._bases, region.base)
        self._bases.insert(i, region.base)
        self._regions.insert(i, region)

    @property
    def regions(self) -> tuple[Region, ...]:
        return tuple(self._regions)

    def region_of(self, slave_id: int) -> Region:
        for r in self._regions:
            if r.slave_id == slave_id:
                return r
        raise KeyError(slave_id)

    def route(self, address: int) -> int | None:
        """Slave whose range contains ``address``, or None on a decode miss."""
        i = bisect.bisect_right(self._bases, address) - 1
        if i >= 0 and address < self._regions[i].limit:
            return self._regions[i].slave_id
        return None


@dataclass
class Slave:
    """A memory-mapped peripheral with a byte-addressed register file."""

    slave_id: int
    name: str
    base: int
    size: int
    access_log: list[tuple[int, int, Direction, int]] = field(default_factory=list)
    registers: dict[int, int] = field(default_factory=dict)
    forced_resp: RespCode | None = None
    forced_until: int = -1

    def forced_signal(self, tick: int) -> RespCode | None:
        if self.forced_resp is not None and tick < self.forced_until:
            return self.forced_resp
        return None

    def access(self, txn: Transaction, tick: int) -> tuple[RespCode, bytes]:
        offset = txn.address - self.base
        self.access_log.append((tick, txn.txn_id, txn.direction, offset))
        resp = self.forced_signal(tick) or RespCode.OKAY
        if txn.direction is Direction.WRITE:
            if resp is RespCode.OKAY:
                for i, b in enumerate(txn.data):
                    self.registers[offset + i] = b
            return resp, b""
        return resp, bytes(self.registers.get(offset + i, 0) for i in range(txn.length))


class Interconnect:
    """Registered masters, the address map and the transaction id counter."""

    def __init__(self, address_map: AddressMap, masters: set[int] | frozenset[int],
                 first_txn_id: int = 1):
        self.address_map = address_map
        self.masters = frozenset(masters)
        self._next_id = first_txn_id

    @property
    def next_txn_id(self) -> int:
        return self._next_id

    def issue_transaction(self, master_id: int, direction: Direction, address: int,
                          prot: AxProt | int, payload: bytes | int, tick: int) -> Transaction:
        """Create a transaction in phase AddressIssued.

        ``payload`` is the write data, or the expected read length.
        """
        if master_id not in self.masters:
            raise ConfigurationError(f"master {master_id} is not registered")
        if not 0 <= address <= ADDRESS_MASK:
            raise ValueError(f"address {address:#x} outside 32-bit space")
        if isinstance(prot, int):
            prot = AxProt.decode(prot)
        direction = Direction(direction)
        if direction is Direction.WRITE:
            data = bytes(payload) if not isinstance(payload, int) else b""
            if not data:
                raise ValueError("write payload must be at least one byte")
            length = len(data)
        else:
            length = payload if isinstance(payload, int) else len(payload)
            if length < 1:
                raise ValueError("read length must be at least one byte")
            data = b""
        txn = Transaction(self._next_id, master_id, direction, address, prot, data,
                          length, tick)
        self._next_id += 1
        txn.slave_id = self.address_map.route(address)
        return txn

    def route(self, address: int) -> int | None:
        return self.address_map.route(address)
