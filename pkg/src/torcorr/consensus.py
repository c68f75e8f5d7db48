"""Tor relay snapshots (onionoo details documents) and per-AS statistics."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from ipaddress import ip_address
from itertools import accumulate
from typing import IO, NamedTuple, Optional, Sequence, Union

from .asn_map import AsnDatabase, lookup

log = logging.getLogger(__name__)

EPS = 1e-6
KINDS = ("guard", "exit")


class SnapshotError(ValueError):
    pass


class SnapshotParseError(SnapshotError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SnapshotValidationError(SnapshotError):
    pass


@dataclass(frozen=True)
class RelayDescriptor:
    fingerprint: str
    addr_v4: Optional[str] = None
    addr_v6: Optional[str] = None
    flags: frozenset = frozenset()
    advertised_bandwidth: int = 0
    guard_probability: float = 0.0
    exit_probability: float = 0.0

    def address(self, family: str) -> Optional[str]:
        return self.addr_v4 if family == "v4" else self.addr_v6

    def probability(self, kind: str) -> float:
        return self.guard_probability if kind == "guard" else self.exit_probability


@dataclass(frozen=True)
class ConsensusSnapshot:
    fetched_at: str
    relays: tuple = ()
    dropped: int = 0

    def total(self, kind: str) -> float:
        return math.fsum(r.probability(kind) for r in self.relays)


@dataclass(frozen=True)
class AsStats:
    """Relays of one AS for one address family.

    ``bandwidth`` is in bytes/s; ``bandwidth_gbit`` gives the table unit.
    ``guard_target``/``exit_target`` hold the address of the AS's highest
    probability guard/exit relay (used as traceroute target).
    """

    asn: int
    relay_count: int
    bandwidth: int
    p_guard: float
    p_exit: float
    address_family: str
    guard_relays: int = 0
    exit_relays: int = 0
    guard_target: Optional[str] = None
    exit_target: Optional[str] = None

    @property
    def bandwidth_gbit(self) -> float:
        return self.bandwidth * 8 / 1e9

    def probability(self, kind: str) -> float:
        return self.p_guard if kind == "guard" else self.p_exit

    def relays_of(self, kind: str) -> int:
        return self.guard_relays if kind == "guard" else self.exit_relays

    def target(self, kind: str) -> Optional[str]:
        return self.guard_target if kind == "guard" else self.exit_target


@dataclass(frozen=True)
class UnmappedBucket:
    relay_count: int = 0
    p_guard: float = 0.0
    p_exit: float = 0.0


class AsAggregation(NamedTuple):
    stats: list
    unmapped: UnmappedBucket


@dataclass(frozen=True)
class DiversityCurve:
    kind: str
    points: tuple = ()  # (rank, cumulative probability)
    asns: tuple = ()    # AS at each rank

    def ases_to_reach(self, fraction: float) -> Optional[int]:
        """Smallest AS rank whose cumulative probability is >= ``fraction``."""
        for rank, cumulative in self.points:
            if cumulative >= fraction - 1e-12:
                return rank
        return None


def _split_or_address(entry: str) -> str:
    host = entry.rsplit(":", 1)[0] if not entry.startswith("[") else entry[1:entry.index("]")]
    return str(ip_address(host))


def _read_bytes(source) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    data = source.read()
    return data.encode("utf-8") if isinstance(data, str) else data


def _probability(record: dict, key: str, fingerprint: str) -> float:
    value = record.get(key)
    if value is None:
        return 0.0
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise SnapshotValidationError(f"relay {fingerprint}: {key} is not a number") from None
    if not 0.0 <= value <= 1.0:
        raise SnapshotValidationError(f"relay {fingerprint}: {key}={value} outside [0, 1]")
    return value


def load_snapshot(source: Union[bytes, str, os.PathLike, IO], fetched_at: Optional[str] = None) -> ConsensusSnapshot:
    """Parse an onionoo-style relay details document.

    Relays without any usable address are dropped and counted in
    ``ConsensusSnapshot.dropped``.
    """
    raw = _read_bytes(source)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SnapshotParseError("document is not UTF-8", exc.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SnapshotParseError(exc.msg, len(text[: exc.pos].encode("utf-8"))) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("relays"), list):
        raise SnapshotParseError("expected an object with a 'relays' array", 0)

    relays, dropped = [], 0
    for record in doc["relays"]:
        if not isinstance(record, dict):
            raise SnapshotParseError("relay entry is not an object", 0)
        fingerprint = str(record.get("fingerprint", ""))
        v4 = v6 = None
        for entry in record.get("or_addresses") or ():
            try:
                addr = _split_or_address(str(entry))
            except ValueError:
                continue
            if ":" in addr:
                v6 = v6 or addr
            else:
                v4 = v4 or addr
        guard = _probability(record, "guard_probability", fingerprint)
        exit_ = _probability(record, "exit_probability", fingerprint)
        if v4 is None and v6 is None:
            dropped += 1
            continue
        relays.append(RelayDescriptor(
            fingerprint=fingerprint,
            addr_v4=v4,
            addr_v6=v6,
            flags=frozenset(record.get("flags") or ()),
            advertised_bandwidth=int(record.get("advertised_bandwidth") or 0),
            guard_probability=guard,
            exit_probability=exit_,
        ))
    if dropped:
        log.warning("dropped %d relays without a usable address", dropped)

    snapshot = ConsensusSnapshot(
        fetched_at=fetched_at or str(doc.get("relays_published", "")),
        relays=tuple(relays),
        dropped=dropped,
    )
    for kind in KINDS:
        if snapshot.total(kind) > 1 + EPS:
            raise SnapshotValidationError(f"{kind} probabilities sum to {snapshot.total(kind)} > 1")
    return snapshot


def aggregate_by_as(snapshot: ConsensusSnapshot, mapper: AsnDatabase, family: str) -> AsAggregation:
    """Group relays with an address of ``family`` by origin AS.

    Relays whose address does not map land in the unmapped bucket.
    Stats are ordered by ascending ASN.
    """
    members = defaultdict(list)
    unmapped = []
    for relay in snapshot.relays:
        addr = relay.address(family)
        if addr is None:
            continue
        asn = lookup(mapper, addr)
        (unmapped if asn is None else members[asn]).append(relay)

    stats = []
    for asn in sorted(members):
        relays = members[asn]
        stats.append(AsStats(
            asn=asn,
            relay_count=len(relays),
            bandwidth=sum(r.advertised_bandwidth for r in relays),
            p_guard=math.fsum(r.guard_probability for r in relays),
            p_exit=math.fsum(r.exit_probability for r in relays),
            address_family=family,
            guard_relays=sum(1 for r in relays if r.guard_probability > 0),
            exit_relays=sum(1 for r in relays if r.exit_probability > 0),
            guard_target=_top_address(relays, "guard", family),
            exit_target=_top_address(relays, "exit", family),
        ))
    bucket = UnmappedBucket(
        relay_count=len(unmapped),
        p_guard=math.fsum(r.guard_probability for r in unmapped),
        p_exit=math.fsum(r.exit_probability for r in unmapped),
    )
    return AsAggregation(stats, bucket)


def _top_address(relays: Sequence[RelayDescriptor], kind: str, family: str) -> Optional[str]:
    candidates = [r for r in relays if r.probability(kind) > 0 and r.address(family)]
    if not candidates:
        return None
    best = min(candidates, key=lambda r: (-r.probability(kind), r.fingerprint))
    return best.address(family)


def side_ases(stats: Sequence[AsStats], kind: str) -> list:
    """ASes hosting at least one relay with nonzero ``kind`` probability."""
    return [s for s in stats if s.probability(kind) > 0]


def rank_ases(stats: Sequence[AsStats], kind: str) -> list:
    """Descending probability, ties by ascending ASN."""
    return sorted(stats, key=lambda s: (-s.probability(kind), s.asn))


def diversity_curve(stats: Sequence[AsStats], kind: str) -> DiversityCurve:
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    if not stats:
        raise ValueError("diversity curve needs at least one AS")
    ranked = [s for s in rank_ases(stats, kind) if s.probability(kind) > 0]
    cumulative = accumulate(s.probability(kind) for s in ranked)
    points = tuple((i, c) for i, c in enumerate(cumulative, start=1))
    return DiversityCurve(kind, points, tuple(s.asn for s in ranked))


def percent(part: float, whole: float) -> int:
    """Whole-percent share, rounded half away from zero."""
    if not whole:
        return 0
    return int(math.floor(100 * part / whole + 0.5))


@dataclass(frozen=True)
class SupportRow:
    relays_all: int
    relays_v6: int
    ases_all: int
    ases_v6: int
    bandwidth_all: int
    bandwidth_v6: int

    @property
    def relay_share(self) -> int:
        return percent(self.relays_v6, self.relays_all)

    @property
    def as_share(self) -> int:
        return percent(self.ases_v6, self.ases_all)

    @property
    def bandwidth_share(self) -> int:
        return percent(self.bandwidth_v6, self.bandwidth_all)


@dataclass(frozen=True)
class Ipv6Summary:
    rows: dict = field(default_factory=dict)  # "all" | "exit" | "guard" -> SupportRow

    def __getitem__(self, key: str) -> SupportRow:
        return self.rows[key]


def ipv6_support_summary(snapshot: ConsensusSnapshot, mapper: AsnDatabase) -> Ipv6Summary:
    """Relay, AS and bandwidth totals for all relays vs. IPv6-capable relays.

    The "all" AS column maps each relay by its IPv4 address (IPv6 if it
    has none); the v6 column maps v6-capable relays by their IPv6 address.
    """
    groups = {
        "all": list(snapshot.relays),
        "exit": [r for r in snapshot.relays if r.exit_probability > 0],
        "guard": [r for r in snapshot.relays if r.guard_probability > 0],
    }
    rows = {}
    for name, relays in groups.items():
        v6 = [r for r in relays if r.addr_v6]
        ases_all = {lookup(mapper, r.addr_v4 or r.addr_v6) for r in relays} - {None}
        ases_v6 = {lookup(mapper, r.addr_v6) for r in v6} - {None}
        rows[name] = SupportRow(
            relays_all=len(relays),
            relays_v6=len(v6),
            ases_all=len(ases_all),
            ases_v6=len(ases_v6),
            bandwidth_all=sum(r.advertised_bandwidth for r in relays),
            bandwidth_v6=sum(r.advertised_bandwidth for r in v6),
        )
    return Ipv6Summary(rows)


def relay_statistics(snapshot: ConsensusSnapshot, mapper: AsnDatabase, family: str = "v4") -> dict:
    """Relay counts, distinct ASes and bandwidth (Gbit/s) for all/exit/guard relays."""
    stats = aggregate_by_as(snapshot, mapper, family).stats
    out = {}
    for name, pred in (("all", lambda r: True),
                       ("exit", lambda r: r.exit_probability > 0),
                       ("guard", lambda r: r.guard_probability > 0)):
        relays = [r for r in snapshot.relays if pred(r)]
        if name == "all":
            ases = len(stats)
        else:
            ases = len(side_ases(stats, name))
        out[name] = {
            "relays": len(relays),
            "ases": ases,
            "bandwidth_gbit": sum(r.advertised_bandwidth for r in relays) * 8 / 1e9,
        }
    return out
