"""Expand target sets into the four traceroute directions D1-D4."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .consensus import AsStats, side_ases
from .inventory import as_inventory, select_probes
from .targets import TargetSets

log = logging.getLogger(__name__)

DIRECTIONS = ("D1", "D2", "D3", "D4")
PROTOCOL = "ICMP"
RESPONSE_TIMEOUT_MS = 20000
PACKETS_PER_HOP = 1

# direction -> (source role, target role)
ROLES = {
    "D1": ("client", "guard"),
    "D2": ("exit", "destination"),
    "D3": ("destination", "exit"),
    "D4": ("guard", "client"),
}


@dataclass(frozen=True)
class MeasurementDefinition:
    direction: str
    source_probe: int
    source_asn: int
    target_ip: str
    target_asn: int
    family: str
    protocol: str = PROTOCOL
    response_timeout_ms: int = RESPONSE_TIMEOUT_MS
    packets_per_hop: int = PACKETS_PER_HOP
    attempt: int = 0      # 0 = primary probe, >0 = fallback probe of the same AS
    repetition: int = 0

    @property
    def key(self) -> str:
        """Archive key; stable across probe churn."""
        key = f"{self.direction}_AS{self.source_asn}_AS{self.target_asn}_{self.family}"
        if self.attempt:
            key += f"_a{self.attempt}"
        if self.repetition:
            key += f"_r{self.repetition}"
        return key

    def sort_key(self):
        return (self.direction, self.source_asn, self.target_asn, self.attempt, self.repetition)


_FIELDS = tuple(MeasurementDefinition.__dataclass_fields__)


@dataclass(frozen=True)
class Plan:
    scenario_label: str
    definitions: tuple = ()
    coverage_estimate: dict = field(default_factory=dict)

    def by_direction(self, direction: str) -> list:
        return [d for d in self.definitions if d.direction == direction]

    def definitions_json(self) -> str:
        return definitions_to_json(self.definitions)

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.definitions_json().encode("utf-8")).hexdigest()


def definitions_to_json(definitions: Sequence[MeasurementDefinition]) -> str:
    rows = [{k: asdict(d)[k] for k in _FIELDS} for d in definitions]
    return json.dumps(rows, indent=1) + "\n"


def definitions_from_json(text) -> tuple:
    rows = json.loads(text)
    return tuple(MeasurementDefinition(**{k: row[k] for k in _FIELDS if k in row}) for row in rows)


def build_plan(
    targets: TargetSets,
    guard_stats: Sequence[AsStats],
    exit_stats: Sequence[AsStats],
    inventory,
    fallback_count: int = 0,
    repeat: int = 1,
    label: str = "",
) -> Plan:
    """Generate definitions for D1 client->guard, D2 exit->destination,
    D3 destination->exit and D4 guard->client.

    Relay ASes are targeted at their most probable relay; client and
    destination ASes at their selected probe's address. With
    ``fallback_count`` > 0 relay-AS sources (D2, D4) get extra
    definitions from further eligible probes of the same AS.
    """
    inv = as_inventory(inventory)
    family = targets.family
    guards = side_ases(guard_stats, "guard")
    exits = side_ases(exit_stats, "exit")
    probes = {p.probe_id: p for p in inv}
    defs = []

    def endpoint_address(probe_id, asn):
        addr = probes[probe_id].address(family)
        if addr is None:
            log.warning("probe %d in AS%d has no %s address; pairs skipped", probe_id, asn, family)
        return addr

    def add(direction, probe_id, src_asn, target_ip, dst_asn, attempt=0):
        for rep in range(max(repeat, 1)):
            defs.append(MeasurementDefinition(direction, probe_id, src_asn, target_ip, dst_asn,
                                              family, attempt=attempt, repetition=rep))

    def relay_sources(asn):
        return select_probes(inv, asn, family, 1 + max(fallback_count, 0))

    for c_asn, c_probe in targets.clients:
        for g in guards:
            if g.guard_target is None:
                log.warning("guard AS%d has no %s relay address; skipped", g.asn, family)
                continue
            add("D1", c_probe, c_asn, g.guard_target, g.asn)

    for d_asn, d_probe, _ in targets.destinations:
        d_addr = endpoint_address(d_probe, d_asn)
        for e in exits:
            if e.exit_target is None:
                log.warning("exit AS%d has no %s relay address; skipped", e.asn, family)
                continue
            add("D3", d_probe, d_asn, e.exit_target, e.asn)
        if d_addr is None:
            continue
        for e in exits:
            for attempt, probe in enumerate(relay_sources(e.asn)):
                add("D2", probe.probe_id, e.asn, d_addr, d_asn, attempt)

    for c_asn, c_probe in targets.clients:
        c_addr = endpoint_address(c_probe, c_asn)
        if c_addr is None:
            continue
        for g in guards:
            for attempt, probe in enumerate(relay_sources(g.asn)):
                add("D4", probe.probe_id, g.asn, c_addr, c_asn, attempt)

    defs.sort(key=MeasurementDefinition.sort_key)
    plan = Plan(label, tuple(defs))
    return Plan(label, plan.definitions, estimate_coverage(plan, guard_stats, exit_stats))


def estimate_coverage(plan: Plan, guard_stats: Sequence[AsStats], exit_stats: Sequence[AsStats]) -> dict:
    """Probability mass reached per direction.

    D1/D3 sum over the relay ASes targeted, D2/D4 over the relay ASes
    that source traceroutes.
    """
    p_guard = {s.asn: s.p_guard for s in guard_stats}
    p_exit = {s.asn: s.p_exit for s in exit_stats}
    relay_asn = {
        "D1": lambda d: d.target_asn, "D4": lambda d: d.source_asn,
        "D2": lambda d: d.source_asn, "D3": lambda d: d.target_asn,
    }
    out = {}
    for direction in DIRECTIONS:
        probs = p_guard if direction in ("D1", "D4") else p_exit
        ases = {relay_asn[direction](d) for d in plan.definitions if d.direction == direction}
        out[direction] = math.fsum(probs.get(a, 0.0) for a in ases)
    return out
