"""Entry/exit side tables and their combination into correlation potential."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .asn_map import AsnDatabase, lookup
from .consensus import AsStats
from .executor import TracerouteResult
from .planner import DIRECTIONS, MeasurementDefinition, Plan
from .util import fmt_prob

ROLE_RANK = {"endpoint": 0, "relay": 1, "transit": 2}

# direction -> (side, relay ASN is the source?)
_SIDES = {"D1": ("entry", False), "D4": ("entry", True), "D2": ("exit", True), "D3": ("exit", False)}


class AnalysisError(ValueError):
    pass


def side_of(direction: str) -> str:
    return _SIDES[direction][0]


@dataclass(frozen=True)
class PathObservation:
    side: str
    endpoint_asn: int
    relay_asn: int
    relay_probability: float
    observed_asns: frozenset
    direction: str = ""
    definition_ref: int = -1


@dataclass
class Diagnostics:
    unmapped_hops: int = 0
    no_reply_hops: int = 0


def extract_observation(
    result: TracerouteResult,
    definition: MeasurementDefinition,
    mapper: AsnDatabase,
    relay_probability: float,
    diagnostics: Optional[Diagnostics] = None,
) -> Optional[PathObservation]:
    """ASes on one successful traceroute, with the source AS always included.

    Returns None unless the result succeeded.
    """
    if result.status != "success":
        return None
    observed = {definition.source_asn}
    for hop in result.hops:
        for ip, _ in hop.responses:
            if ip is None:
                if diagnostics is not None:
                    diagnostics.no_reply_hops += 1
                continue
            asn = lookup(mapper, ip)
            if asn is None:
                if diagnostics is not None:
                    diagnostics.unmapped_hops += 1
                continue
            observed.add(asn)
    side, relay_is_source = _SIDES[definition.direction]
    if relay_is_source:
        relay, endpoint = definition.source_asn, definition.target_asn
    else:
        relay, endpoint = definition.target_asn, definition.source_asn
    return PathObservation(side, endpoint, relay, relay_probability, frozenset(observed),
                           definition.direction, result.definition_ref)


@dataclass(frozen=True)
class SideRow:
    p_total: float
    p_relays: float
    p_routes: float
    route_count: int
    role: str


@dataclass(frozen=True)
class SideTable:
    side: str
    endpoint_asn: int
    rows: dict = field(default_factory=dict)  # observed ASN -> SideRow

    def ranked(self) -> list:
        """(asn, row) pairs by descending p_total, ties by ascending ASN."""
        return sorted(self.rows.items(), key=lambda kv: (-kv[1].p_total, kv[0]))

    def p(self, asn: int) -> float:
        row = self.rows.get(asn)
        return row.p_total if row else 0.0


def build_side_table(
    observations: Sequence[PathObservation],
    relay_stats: Sequence[AsStats] = (),
    endpoint_asns: Iterable[int] = (),
    side: Optional[str] = None,
    endpoint_asn: Optional[int] = None,
) -> SideTable:
    """Accumulate path probabilities for one endpoint and side.

    For every relay AS the forward and reverse observations are unioned,
    and each AS in the union accrues that relay AS's probability once:
    into ``p_relays`` when it is the relay AS itself, else ``p_routes``.
    ``route_count`` counts the traceroutes an AS appeared on.

    Roles: ``endpoint`` for the table's endpoint (and any ASN in
    ``endpoint_asns``), ``relay`` for ASes hosting relays of this side
    whose relay share dominates, else ``transit``.
    """
    if observations:
        side = side or observations[0].side
        endpoint_asn = observations[0].endpoint_asn if endpoint_asn is None else endpoint_asn
    if side is None or endpoint_asn is None:
        raise AnalysisError("empty observation list needs explicit side and endpoint_asn")
    kind = "guard" if side == "entry" else "exit"
    probs = {s.asn: s.probability(kind) for s in relay_stats}

    union = defaultdict(set)
    pair_prob = {}
    counts = Counter()
    for obs in observations:
        if obs.side != side or obs.endpoint_asn != endpoint_asn:
            raise AnalysisError(
                f"observation for {obs.side}/AS{obs.endpoint_asn} in table for {side}/AS{endpoint_asn}")
        union[obs.relay_asn] |= obs.observed_asns
        pair_prob[obs.relay_asn] = probs.get(obs.relay_asn, obs.relay_probability)
        counts.update(obs.observed_asns)

    relays_acc = defaultdict(list)
    routes_acc = defaultdict(list)
    for relay, seen in union.items():
        p = pair_prob[relay]
        for asn in seen:
            (relays_acc if asn == relay else routes_acc)[asn].append(p)

    endpoints = {endpoint_asn, *endpoint_asns}
    rows = {}
    for asn in sorted(set(relays_acc) | set(routes_acc)):
        p_relays = math.fsum(relays_acc.get(asn, ()))
        p_routes = math.fsum(routes_acc.get(asn, ()))
        if asn in endpoints:
            role = "endpoint"
        elif probs.get(asn, 0.0) > 0 and p_relays >= p_routes:
            role = "relay"
        else:
            role = "transit"
        rows[asn] = SideRow(p_relays + p_routes, p_relays, p_routes, counts[asn], role)
    return SideTable(side, endpoint_asn, rows)


@dataclass(frozen=True)
class CorrelationRow:
    asn: int
    p_guard: float
    p_exit: float
    p_and: float
    role: str
    endpoint_asn: Optional[int] = None     # the client
    destination_asn: Optional[int] = None  # set in per-destination mode


def _combined_role(*roles: str) -> str:
    return min(roles, key=ROLE_RANK.__getitem__)


def combine(entry: SideTable, exits: Sequence[SideTable], mode: str = "worst_case_max") -> list:
    """Correlation potential ``p_guard * p_exit`` for ASes seen on both sides.

    ``worst_case_max`` takes, per AS, the largest exit probability over all
    destinations; ``per_destination`` emits one row set per destination.
    """
    if not exits:
        raise AnalysisError("combine needs at least one exit-side table")
    if entry.side != "entry" or any(t.side != "exit" for t in exits):
        raise AnalysisError("combine expects one entry table and exit tables")

    def rows_for(exit_rows: dict, destination: Optional[int]) -> list:
        out = []
        for asn, e in entry.rows.items():
            x = exit_rows.get(asn)
            if x is None or e.p_total <= 0 or x[0] <= 0:
                continue
            out.append(CorrelationRow(asn, e.p_total, x[0], e.p_total * x[0],
                                      _combined_role(e.role, x[1]), entry.endpoint_asn, destination))
        return sorted(out, key=lambda r: (-r.p_and, r.asn))

    if mode == "worst_case_max":
        best = {}
        for table in exits:
            for asn, row in table.rows.items():
                p, role = best.get(asn, (0.0, "transit"))
                best[asn] = (max(p, row.p_total), _combined_role(role, row.role))
        return rows_for(best, None)
    if mode == "per_destination":
        out = []
        for table in sorted(exits, key=lambda t: t.endpoint_asn):
            out.extend(rows_for({a: (r.p_total, r.role) for a, r in table.rows.items()}, table.endpoint_asn))
        return out
    raise AnalysisError(f"unknown combine mode {mode!r}")


def filter_significant(rows: Sequence[CorrelationRow], threshold: float = 0.01,
                       include_endpoints: bool = True) -> list:
    """Rows whose entry and exit probability both reach ``threshold``."""
    return [
        r for r in rows
        if r.p_guard >= threshold and r.p_exit >= threshold
        and (include_endpoints or r.role == "transit")
    ]


@dataclass(frozen=True)
class AnalysisCoverage:
    planned: dict          # direction -> count
    succeeded: dict        # direction -> count
    entry_probability: float
    exit_probability: float

    @property
    def total_planned(self) -> int:
        return sum(self.planned.values())

    @property
    def total_succeeded(self) -> int:
        return sum(self.succeeded.values())

    @property
    def success_rate(self) -> float:
        return self.total_succeeded / self.total_planned if self.total_planned else 0.0


def analysis_coverage(observations: Sequence[PathObservation], plan: Plan) -> AnalysisCoverage:
    planned = Counter(d.direction for d in plan.definitions)
    succeeded = Counter(o.direction for o in observations)
    covered = {"entry": {}, "exit": {}}
    for o in observations:
        covered[o.side][o.relay_asn] = o.relay_probability
    return AnalysisCoverage(
        planned={d: planned.get(d, 0) for d in DIRECTIONS},
        succeeded={d: succeeded.get(d, 0) for d in DIRECTIONS},
        entry_probability=math.fsum(covered["entry"].values()),
        exit_probability=math.fsum(covered["exit"].values()),
    )


@dataclass
class RunAnalysis:
    entry: dict            # client ASN -> SideTable
    exit: dict             # destination ASN -> SideTable
    observations: list
    coverage: AnalysisCoverage
    diagnostics: Diagnostics


def analyze_run(plan: Plan, results: Sequence[TracerouteResult], mapper: AsnDatabase,
                guard_stats: Sequence[AsStats], exit_stats: Sequence[AsStats],
                clients: Iterable[int] = (), destinations: Iterable[int] = ()) -> RunAnalysis:
    """Observations and side tables for a whole executed plan."""
    p_guard = {s.asn: s.p_guard for s in guard_stats}
    p_exit = {s.asn: s.p_exit for s in exit_stats}
    diag = Diagnostics()
    observations = []
    for result in sorted(results, key=lambda r: r.definition_ref):
        d = plan.definitions[result.definition_ref]
        side, relay_is_source = _SIDES[d.direction]
        relay = d.source_asn if relay_is_source else d.target_asn
        prob = (p_guard if side == "entry" else p_exit).get(relay, 0.0)
        obs = extract_observation(result, d, mapper, prob, diag)
        if obs is not None:
            observations.append(obs)

    clients, destinations = set(clients), set(destinations)
    for d in plan.definitions:
        if d.direction == "D1":
            clients.add(d.source_asn)
        elif d.direction == "D3":
            destinations.add(d.source_asn)
    scenario_endpoints = clients | destinations

    grouped = defaultdict(list)
    for o in observations:
        grouped[o.side, o.endpoint_asn].append(o)
    entry = {c: build_side_table(grouped.get(("entry", c), []), guard_stats, scenario_endpoints,
                                 side="entry", endpoint_asn=c) for c in sorted(clients)}
    exit_ = {t: build_side_table(grouped.get(("exit", t), []), exit_stats, scenario_endpoints,
                                 side="exit", endpoint_asn=t) for t in sorted(destinations)}
    return RunAnalysis(entry, exit_, observations, analysis_coverage(observations, plan), diag)


SIDE_COLUMNS = ("asn", "name", "role", "p_total", "p_relays", "p_routes", "route_count")
CORRELATION_COLUMNS = ("asn", "name", "role", "p_guard", "p_exit", "p_and", "endpoint_asn", "destination_asn")


def side_table_records(table: SideTable, names=lambda asn: "") -> list:
    return [
        {"asn": asn, "name": names(asn), "role": row.role, "p_total": row.p_total,
         "p_relays": row.p_relays, "p_routes": row.p_routes, "route_count": row.route_count}
        for asn, row in table.ranked()
    ]


def correlation_records(rows: Sequence[CorrelationRow], names=lambda asn: "") -> list:
    return [
        {"asn": r.asn, "name": names(r.asn), "role": r.role, "p_guard": r.p_guard, "p_exit": r.p_exit,
         "p_and": r.p_and, "endpoint_asn": r.endpoint_asn, "destination_asn": r.destination_asn}
        for r in rows
    ]


def records_csv(records: Sequence[dict], columns: Sequence[str]) -> str:
    """CSV with probabilities rendered at 3 decimals (half away from zero)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for rec in records:
        w.writerow([
            fmt_prob(rec[c]) if c.startswith("p_") else ("" if rec[c] is None else rec[c])
            for c in columns
        ])
    return buf.getvalue()


def records_json(records: Sequence[dict], columns: Sequence[str]) -> str:
    return json.dumps([{c: rec[c] for c in columns} for rec in records], indent=1) + "\n"
