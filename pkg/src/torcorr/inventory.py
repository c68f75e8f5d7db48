"""RIPE Atlas probe inventory: eligibility, per-AS probe selection, coverage."""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .consensus import AsStats, rank_ases, side_ases


class ProbeParseError(ValueError):
    pass


# status ids used by the probe API
_STATUS_IDS = {0: "disconnected", 1: "connected", 2: "disconnected", 3: "abandoned"}


def _normalize_status(raw) -> str:
    if isinstance(raw, dict):
        raw = raw.get("name", raw.get("id"))
    if isinstance(raw, int):
        return _STATUS_IDS.get(raw, "disconnected")
    name = str(raw or "").strip().lower()
    if name in ("connected", "abandoned"):
        return name
    return "disconnected"


@dataclass(frozen=True)
class ProbeRecord:
    probe_id: int
    asn_v4: Optional[int] = None
    asn_v6: Optional[int] = None
    status: str = "connected"
    address_family_capabilities: frozenset = frozenset()
    country_code: Optional[str] = None
    address_v4: Optional[str] = None
    address_v6: Optional[str] = None

    def asn(self, family: str) -> Optional[int]:
        return self.asn_v4 if family == "v4" else self.asn_v6

    def address(self, family: str) -> Optional[str]:
        return self.address_v4 if family == "v4" else self.address_v6

    def eligible(self, family: str) -> bool:
        return (
            self.status == "connected"
            and self.asn(family) is not None
            and family in self.address_family_capabilities
        )


def _capabilities(record: dict) -> frozenset:
    if "capabilities" in record:
        return frozenset(record["capabilities"] or ())
    caps = set()
    for family in ("v4", "v6"):
        if record.get(f"asn_{family}") is None:
            continue
        key = f"address_{family}"
        if key in record and record[key] is None:
            continue
        caps.add(family)
    return frozenset(caps)


def _opt_int(value) -> Optional[int]:
    return None if value is None else int(value)


def load_probes(source) -> list:
    """Parse a probe document: a JSON array, or a paginated ``{"results": [...]}`` page."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            source = fh.read()
    elif not isinstance(source, bytes):
        source = source.read()
    try:
        doc = json.loads(source)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProbeParseError(f"probe document is not valid JSON: {exc}") from None
    if isinstance(doc, dict) and isinstance(doc.get("results"), list):
        doc = doc["results"]
    if not isinstance(doc, list):
        raise ProbeParseError("probe document must be a JSON array")
    probes = []
    for record in doc:
        if not isinstance(record, dict) or "id" not in record:
            raise ProbeParseError(f"probe entry without id: {record!r}")
        try:
            probes.append(ProbeRecord(
                probe_id=int(record["id"]),
                asn_v4=_opt_int(record.get("asn_v4")),
                asn_v6=_opt_int(record.get("asn_v6")),
                status=_normalize_status(record.get("status")),
                address_family_capabilities=_capabilities(record),
                country_code=record.get("country_code"),
                address_v4=record.get("address_v4"),
                address_v6=record.get("address_v6"),
            ))
        except (TypeError, ValueError) as exc:
            raise ProbeParseError(f"probe {record.get('id')}: {exc}") from None
    return probes


class ProbeInventory(Sequence):
    """Read-only probe list with a per-(family, ASN) index of eligible probes."""

    def __init__(self, probes: Iterable[ProbeRecord]):
        self._probes = tuple(probes)
        index = defaultdict(list)
        for p in self._probes:
            for family in ("v4", "v6"):
                if p.eligible(family):
                    index[family, p.asn(family)].append(p)
        self._index = {k: tuple(sorted(v, key=lambda p: p.probe_id)) for k, v in index.items()}

    def __getitem__(self, i):
        return self._probes[i]

    def __len__(self):
        return len(self._probes)

    def eligible_in(self, asn: int, family: str) -> tuple:
        return self._index.get((family, asn), ())

    def ases(self, family: str) -> set:
        return {asn for fam, asn in self._index if fam == family}


def as_inventory(inventory) -> ProbeInventory:
    return inventory if isinstance(inventory, ProbeInventory) else ProbeInventory(inventory)


def select_probe(inventory, asn: int, family: str) -> Optional[ProbeRecord]:
    """Eligible probe with the lowest id in ``asn``, or None."""
    found = as_inventory(inventory).eligible_in(asn, family)
    return found[0] if found else None


def select_probes(inventory, asn: int, family: str, count: int) -> tuple:
    """The primary probe followed by up to ``count - 1`` fallbacks, by ascending id."""
    return as_inventory(inventory).eligible_in(asn, family)[:max(count, 0)]


@dataclass(frozen=True)
class CoverageReport:
    family: str
    side: str
    total_ases: int
    covered_ases: int
    total_relays: int
    covered_relays: int
    covered_probability: float
    total_probability: float = 0.0


def coverage(stats: Sequence[AsStats], inventory, side: str, family: str) -> CoverageReport:
    inv = as_inventory(inventory)
    relevant = side_ases(stats, side)
    covered = [s for s in relevant if inv.eligible_in(s.asn, family)]
    return CoverageReport(
        family=family,
        side=side,
        total_ases=len(relevant),
        covered_ases=len(covered),
        total_relays=sum(s.relays_of(side) for s in relevant),
        covered_relays=sum(s.relays_of(side) for s in covered),
        covered_probability=math.fsum(s.probability(side) for s in covered),
        total_probability=math.fsum(s.probability(side) for s in relevant),
    )


def top_uncovered(stats: Sequence[AsStats], inventory, side: str, n: int) -> list:
    """The ``n`` most probable ``side`` ASes without any eligible probe.

    The family is taken from the stats themselves.
    """
    inv = as_inventory(inventory)
    uncovered = [
        s for s in side_ases(stats, side)
        if not inv.eligible_in(s.asn, s.address_family)
    ]
    return rank_ases(uncovered, side)[:max(n, 0)]
