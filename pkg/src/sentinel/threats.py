"""Threat tables: STRIDE/DREAD validation, ranking and policy compilation.

A threat table is delimiter-separated text with one threat per row::

    asset;mode;entry_points;description;stride;damage;reproducibility;\
exploitability;affected_users;discoverability;avg;policy

``entry_points`` is comma-separated, ``avg`` is optional (when present it is
checked against the recomputed DREAD average).  DREAD averages are kept as
exact fractions; a sum of five integers divided by five always has a
one-digit decimal expansion, so rendering never rounds.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .bus import AxProt
from .errors import ValidationError
from .spe import Mode, Permission, PolicyEntry

STRIDE_LETTERS = "STRIDE"
DREAD_FIELDS = ("damage", "reproducibility", "exploitability", "affected_users", "discoverability")
DREAD_MAX = 10
COLUMNS = ("asset", "mode", "entry_points", "description", "stride", *DREAD_FIELDS, "avg", "policy")


@dataclass(frozen=True)
class DreadRating:
    scores: tuple[int, int, int, int, int]

    @property
    def total(self) -> int:
        return sum(self.scores)

    @property
    def average(self) -> Fraction:
        return Fraction(self.total, 5)

    @property
    def damage(self) -> int:
        return self.scores[0]

    def render(self) -> str:
        return f"{self.total // 5}.{(self.total % 5) * 2}"

    def __str__(self) -> str:
        return f"{','.join(map(str, self.scores))} ({self.render()})"


def dread_average(scores: Sequence[int]) -> DreadRating:
    if len(scores) != 5:
        raise ValidationError(f"DREAD needs exactly 5 scores, got {len(scores)}")
    for s in scores:
        if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s <= DREAD_MAX:
            raise ValidationError(f"DREAD score {s!r} outside 0..{DREAD_MAX}")
    return DreadRating(tuple(scores))  # type: ignore[arg-type]


@dataclass(frozen=True)
class ThreatEntry:
    """One threat row as read; fields are checked by :func:`validate_threat_table`."""

    asset: str
    mode: str
    entry_points: tuple[str, ...]
    description: str
    stride: str
    dread: tuple[int, ...]
    policy: str
    stated_avg: str | None = None
    row: int = 0

    @property
    def rating(self) -> DreadRating:
        return dread_average(self.dread)

    @property
    def average(self) -> Fraction:
        return self.rating.average

    @property
    def vehicle_mode(self) -> Mode:
        return Mode.parse(self.mode)

    @property
    def permission(self) -> Permission:
        return Permission(self.policy.strip().upper())


def _cell_int(text: str) -> int | str:
    try:
        return int(text.strip())
    except ValueError:
        return text.strip()


def parse_threat_table(text: str, delimiter: str = ";") -> list[ThreatEntry]:
    reader = csv.DictReader(io.StringIO(text), delimiter=delimiter)
    missing = [c for c in COLUMNS if c != "avg" and c not in (reader.fieldnames or [])]
    if missing:
        raise ValidationError(f"threat table lacks columns: {', '.join(missing)}")
    rows = []
    for i, rec in enumerate(reader, start=1):
        if not any((v or "").strip() for v in rec.values()):
            continue
        rows.append(ThreatEntry(
            asset=(rec["asset"] or "").strip(),
            mode=(rec["mode"] or "").strip(),
            entry_points=tuple(e.strip() for e in (rec["entry_points"] or "").split(",") if e.strip()),
            description=(rec["description"] or "").strip(),
            stride=(rec["stride"] or "").strip(),
            dread=tuple(_cell_int(rec[f] or "") for f in DREAD_FIELDS),  # type: ignore[misc]
            policy=(rec["policy"] or "").strip(),
            stated_avg=(rec.get("avg") or "").strip() or None,
            row=i,
        ))
    return rows


def load_threat_table(path: str | Path) -> list[ThreatEntry]:
    return parse_threat_table(Path(path).read_text(encoding="utf-8"))


def format_threat_table(rows: Iterable[ThreatEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=";", lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([r.asset, r.mode, ", ".join(r.entry_points), r.description, r.stride,
                    *r.dread, r.rating.render(), r.policy])
    return buf.getvalue()


@dataclass(frozen=True)
class Finding:
    row: int
    message: str

    def __str__(self) -> str:
        return f"row {self.row}: {self.message}"


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)
    confirmed: list[tuple[int, str]] = field(default_factory=list)
    rows: int = 0

    @property
    def ok(self) -> bool:
        return not self.findings


def validate_threat_table(rows: Sequence[ThreatEntry]) -> ValidationReport:
    report = ValidationReport(rows=len(rows))
    for r in rows:
        bad = report.findings.append
        if not r.asset:
            bad(Finding(r.row, "empty asset name"))
        try:
            Mode.parse(r.mode)
        except ValidationError:
            bad(Finding(r.row, f"unknown vehicle mode {r.mode!r}"))
        if not r.stride:
            bad(Finding(r.row, "empty STRIDE set"))
        unknown = sorted({c for c in r.stride if c not in STRIDE_LETTERS})
        if unknown:
            bad(Finding(r.row, f"unknown STRIDE letter(s) {''.join(unknown)!r}"))
        elif len(set(r.stride)) != len(r.stride):
            bad(Finding(r.row, f"repeated STRIDE letter in {r.stride!r}"))
        if r.policy.strip().upper() not in {p.value for p in Permission}:
            bad(Finding(r.row, f"policy {r.policy!r} is not R, W or RW"))
        try:
            rating = dread_average(list(r.dread))
        except ValidationError as exc:
            bad(Finding(r.row, str(exc)))
            continue
        if r.stated_avg is not None:
            try:
                stated = Fraction(Decimal(r.stated_avg.strip("()")))
            except (InvalidOperation, ValueError):
                bad(Finding(r.row, f"stated average {r.stated_avg!r} is not a number"))
                continue
            if stated != rating.average:
                bad(Finding(r.row, f"stated {r.stated_avg} != computed {rating.render()}"))
            else:
                report.confirmed.append((r.row, rating.render()))
    return report


def rank_threats(rows: Iterable[ThreatEntry]) -> list[ThreatEntry]:
    """Highest DREAD average first; ties by Damage, then input order."""
    return sorted(rows, key=lambda r: (-r.average, -r.rating.damage))


# -- compilation -------------------------------------------------------------

@dataclass(frozen=True)
class AssetMapping:
    slave: str
    ranges: tuple[tuple[int, int], ...]
    masters: tuple[int, ...]
    secure: bool = True

    @property
    def expected_prot(self) -> AxProt:
        return AxProt(non_secure=not self.secure)


def _num(v: int | str) -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


def parse_asset_map(doc: Mapping) -> dict[str, AssetMapping]:
    assets = doc.get("assets", doc)
    out = {}
    for name, spec in assets.items():
        try:
            ranges = tuple((_num(a), _num(b)) for a, b in spec["ranges"])
            masters = tuple(int(m) for m in spec["masters"])
            out[str(name)] = AssetMapping(str(spec["slave"]), ranges, masters,
                                          bool(spec.get("secure", True)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad asset mapping for {name!r}: {exc}") from None
    return out


@dataclass(frozen=True)
class CompiledPolicy:
    slave: str
    policy: PolicyEntry
    sources: tuple[int, ...]


@dataclass
class CompiledPolicySet:
    entries: list[CompiledPolicy] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def to_records(self, with_sources: bool = False) -> list[dict]:
        out = []
        for e in self.entries:
            rec = e.policy.to_record(e.slave)
            if with_sources:
                rec["sources"] = list(e.sources)
            out.append(rec)
        return out


def compile_policies(rows: Sequence[ThreatEntry], asset_map: Mapping[str, AssetMapping],
                     min_avg: Fraction | float = 0) -> CompiledPolicySet:
    """Translate threat rows into SPE policies.

    Rows sharing (asset, mode, range) are merged, unioning their
    permissions (R + W gives RW).
    """
    threshold = Fraction(str(min_avg)) if isinstance(min_avg, float) else Fraction(min_avg)
    for r in rows:
        if r.asset not in asset_map:
            raise ValidationError(f"asset {r.asset!r} has no mapping")
    merged: dict[tuple, tuple[Permission, list[ThreatEntry]]] = {}
    for r in rows:
        if r.average < threshold:
            continue
        m = asset_map[r.asset]
        mode = r.vehicle_mode
        for rng in m.ranges:
            for master in m.masters:
                key = (r.asset, mode, rng, master)
                if key in merged:
                    perm, src = merged[key]
                    merged[key] = (perm | r.permission, src + [r])
                else:
                    merged[key] = (r.permission, [r])
    out = CompiledPolicySet()
    for (asset, mode, (start, end), master), (perm, src) in merged.items():
        m = asset_map[asset]
        letters = {c for r in src for c in r.stride}
        stride = "".join(c for c in STRIDE_LETTERS if c in letters)
        out.entries.append(CompiledPolicy(
            m.slave,
            PolicyEntry(master, start, end, perm, m.expected_prot, frozenset({mode}), stride),
            tuple(r.row for r in src)))
    return out
