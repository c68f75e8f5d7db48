"""ip2asn interval database: load TSV range files and map addresses to ASNs."""

from __future__ import annotations

import io
import logging
import os
from bisect import bisect_right
from dataclasses import dataclass, field
from ipaddress import IPv4Address, IPv6Address, ip_address
from typing import IO, Iterable, Optional, Union

log = logging.getLogger(__name__)

Family = str  # "v4" | "v6"
FAMILIES = ("v4", "v6")

Source = Union[bytes, str, os.PathLike, IO]


class Ip2AsnError(ValueError):
    """Raised for malformed or overlapping ip2asn input."""


def family_of(ip) -> Family:
    """Return "v4" or "v6" for an address (string or ipaddress object)."""
    if not isinstance(ip, (IPv4Address, IPv6Address)):
        ip = ip_address(ip)
    return "v4" if ip.version == 4 else "v6"


@dataclass(frozen=True)
class AsnRange:
    range_start: str
    range_end: str
    asn: int
    country: str = ""
    description: str = ""

    @property
    def start_int(self) -> int:
        return int(ip_address(self.range_start))

    @property
    def end_int(self) -> int:
        return int(ip_address(self.range_end))


@dataclass(frozen=True)
class _FamilyIndex:
    ranges: tuple
    starts: tuple
    ends: tuple

    @classmethod
    def build(cls, ranges: Iterable[AsnRange]) -> "_FamilyIndex":
        ranges = tuple(ranges)
        return cls(ranges, tuple(r.start_int for r in ranges), tuple(r.end_int for r in ranges))

    def find(self, value: int) -> Optional[AsnRange]:
        i = bisect_right(self.starts, value) - 1
        if i >= 0 and value <= self.ends[i]:
            return self.ranges[i]
        return None


_EMPTY = _FamilyIndex((), (), ())


@dataclass(frozen=True)
class AsnDatabase:
    """Sorted, non-overlapping ranges per address family.

    Immutable after construction; lookups only read the index.
    """

    _v4: _FamilyIndex = field(default=_EMPTY, repr=False)
    _v6: _FamilyIndex = field(default=_EMPTY, repr=False)

    @classmethod
    def from_ranges(cls, v4: Iterable[AsnRange] = (), v6: Iterable[AsnRange] = ()) -> "AsnDatabase":
        return cls(_FamilyIndex.build(_validated(v4, "v4")), _FamilyIndex.build(_validated(v6, "v6")))

    @property
    def ranges_v4(self) -> tuple:
        return self._v4.ranges

    @property
    def ranges_v6(self) -> tuple:
        return self._v6.ranges

    def has_family(self, family: Family) -> bool:
        return bool(self._index(family).ranges)

    def _index(self, family: Family) -> _FamilyIndex:
        if family == "v4":
            return self._v4
        if family == "v6":
            return self._v6
        raise ValueError(f"unknown address family {family!r}")

    def merge(self, other: "AsnDatabase") -> "AsnDatabase":
        """Combine two single-family databases into one."""
        v4 = self._v4 if self._v4.ranges else other._v4
        v6 = self._v6 if self._v6.ranges else other._v6
        if self._v4.ranges and other._v4.ranges or self._v6.ranges and other._v6.ranges:
            raise Ip2AsnError("both databases carry ranges for the same family")
        return AsnDatabase(v4, v6)

    def find_range(self, ip) -> Optional[AsnRange]:
        try:
            addr = ip if isinstance(ip, (IPv4Address, IPv6Address)) else ip_address(ip)
        except ValueError:
            return None
        index = self._v4 if addr.version == 4 else self._v6
        return index.find(int(addr))

    def lookup(self, ip) -> Optional[int]:
        return lookup(self, ip)

    def name(self, asn: int) -> str:
        """AS description from the first range announcing ``asn`` (empty if unknown)."""
        names = self.__dict__.get("_names")
        if names is None:
            names = {}
            for r in self._v4.ranges + self._v6.ranges:
                names.setdefault(r.asn, r.description)
            object.__setattr__(self, "_names", names)
        return names.get(asn, "")

    def country(self, asn: int) -> str:
        countries = self.__dict__.get("_countries")
        if countries is None:
            countries = {}
            for r in self._v4.ranges + self._v6.ranges:
                countries.setdefault(r.asn, r.country)
            object.__setattr__(self, "_countries", countries)
        return countries.get(asn, "")


def lookup(db: AsnDatabase, ip) -> Optional[int]:
    """Map an address to its ASN; ``None`` for gaps, AS0 and unparseable input."""
    found = db.find_range(ip)
    if found is None or found.asn == 0:
        return None
    return found.asn


def _validated(ranges: Iterable[AsnRange], family: Family, lines: Optional[list] = None) -> list:
    indexed = [(r.start_int, r.end_int, i, r) for i, r in enumerate(ranges)]
    indexed.sort(key=lambda t: (t[0], t[1]))
    out = []
    prev = None
    for start, end, i, r in indexed:
        if family_of(r.range_start) != family or family_of(r.range_end) != family:
            raise Ip2AsnError(f"range {r.range_start}-{r.range_end} is not {family}")
        if start > end:
            raise Ip2AsnError(f"range start {r.range_start} after end {r.range_end}")
        if prev is not None and start <= prev[1]:
            a = lines[prev[2]] if lines else prev[2]
            b = lines[i] if lines else i
            raise Ip2AsnError(
                f"overlapping ranges at lines {a} and {b}: "
                f"{prev[3].range_start}-{prev[3].range_end} / {r.range_start}-{r.range_end}"
            )
        prev = (start, end, i, r)
        out.append(r)
    return out


def _open_text(source: Source) -> IO[str]:
    if isinstance(source, bytes):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, (str, os.PathLike)):
        return open(source, encoding="utf-8")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8")


def load_ip2asn(source: Source, family: Family) -> AsnDatabase:
    """Load one published ip2asn TSV variant (v4 or v6).

    Unsorted input is sorted; overlapping ranges raise ``Ip2AsnError``
    naming both 1-based line numbers.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown address family {family!r}")
    ranges, line_numbers = [], []
    fh = _open_text(source)
    try:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise Ip2AsnError(f"line {lineno}: expected at least 3 tab-separated fields")
            try:
                asn = int(parts[2])
            except ValueError:
                raise Ip2AsnError(f"line {lineno}: bad AS number {parts[2]!r}") from None
            try:
                ip_address(parts[0]), ip_address(parts[1])
            except ValueError as exc:
                raise Ip2AsnError(f"line {lineno}: {exc}") from None
            ranges.append(AsnRange(
                parts[0], parts[1], asn,
                parts[3] if len(parts) > 3 else "",
                parts[4] if len(parts) > 4 else "",
            ))
            line_numbers.append(lineno)
    finally:
        if fh is not source:
            fh.close()
    checked = _validated(ranges, family, line_numbers)
    index = _FamilyIndex.build(checked)
    log.debug("loaded %d %s ranges", len(checked), family)
    return AsnDatabase(index, _EMPTY) if family == "v4" else AsnDatabase(_EMPTY, index)


def load_ip2asn_files(v4: Optional[Source] = None, v6: Optional[Source] = None) -> AsnDatabase:
    db = AsnDatabase()
    if v4 is not None:
        db = db.merge(load_ip2asn(v4, "v4"))
    if v6 is not None:
        db = db.merge(load_ip2asn(v6, "v6"))
    return db
