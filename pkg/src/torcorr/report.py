"""Figure row selection, plot-data/table emission and run comparison."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .analysis import CorrelationRow, SideTable
from .consensus import DiversityCurve
from .util import atomic_write_text, fmt_prob

FIGURE_KINDS = ("entry_paths", "exit_paths", "combined", "diversity")
NAME_WIDTH = 12


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    top_n: int = 15
    min_clients: int = 5          # entry rows need > this many clients in every country
    rank_statistic: str = "max"   # statistic behind "most likely": max or median
    exit_gate: float = 0.20       # exit candidates need max p_total above this
    min_median: float = 0.01
    min_points: int = 5
    carry_forward: tuple = ()

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise ValueError(f"unknown figure kind {self.kind!r}")
        if self.rank_statistic not in ("max", "median"):
            raise ValueError("rank_statistic must be 'max' or 'median'")


@dataclass(frozen=True)
class RowSet:
    asns: tuple                        # display order
    carried: tuple = ()                # present only because of carry_forward
    relay_hosts: frozenset = frozenset()


def short_name(name: str) -> str:
    return name[:NAME_WIDTH]


def _values(tables: Sequence[SideTable], asn: int) -> list:
    """One data point per table in which ``asn`` is an intermediary with p > 0."""
    out = []
    for t in tables:
        row = t.rows.get(asn)
        if row is not None and asn != t.endpoint_asn and row.p_total > 0:
            out.append(row.p_total)
    return out


def _candidates(tables: Sequence[SideTable]) -> set:
    return {a for t in tables for a in t.rows if a != t.endpoint_asn}


def _stat(values: list, how: str) -> float:
    if not values:
        return 0.0
    return max(values) if how == "max" else statistics.median(values)


def select_entry_rows(tables_by_country: Mapping[str, Sequence[SideTable]],
                      spec: FigureSpec = FigureSpec("entry_paths")) -> RowSet:
    """Top ASes per country, kept only if seen for more than
    ``min_clients`` clients in every country, plus carry-forward ASes."""
    top = set()
    for country in sorted(tables_by_country):
        tables = tables_by_country[country]
        scored = [(a, _stat(_values(tables, a), spec.rank_statistic)) for a in _candidates(tables)]
        scored = [s for s in scored if s[1] > 0]
        scored.sort(key=lambda s: (-s[1], s[0]))
        top.update(a for a, _ in scored[:spec.top_n])

    keep = [
        a for a in top
        if tables_by_country and all(len(_values(t, a)) > spec.min_clients for t in tables_by_country.values())
    ]
    everything = [t for ts in tables_by_country.values() for t in ts]
    keep.sort(key=lambda a: (-_stat(_values(everything, a), "max"), a))
    carried = tuple(sorted(a for a in spec.carry_forward if a not in keep))
    return RowSet(tuple(keep) + carried, carried)


def select_exit_rows(tables: Sequence[SideTable], spec: FigureSpec = FigureSpec("exit_paths")) -> RowSet:
    """ASes above the max gate for some destination, minus rows with a low
    median or too few data points, plus carry-forward ASes."""
    keep = []
    for a in _candidates(tables):
        values = _values(tables, a)
        if not values or max(values) <= spec.exit_gate:
            continue
        if len(values) < spec.min_points or statistics.median(values) < spec.min_median:
            continue
        keep.append(a)
    keep.sort(key=lambda a: (-max(_values(tables, a)), a))
    carried = tuple(sorted(a for a in spec.carry_forward if a not in keep))
    rows = tuple(keep) + carried
    hosts = frozenset(a for a in rows for t in tables if a in t.rows and t.rows[a].p_relays > 0)
    return RowSet(rows, carried, hosts)


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _summary_row(asn, name, group, values, flag=""):
    if values:
        lo, med, hi = min(values), statistics.median(values), max(values)
        stats = [fmt_prob(lo), fmt_prob(med), fmt_prob(hi)]
    else:
        stats = ["", "", ""]
    return [asn, short_name(name), group, len(values), *stats, flag]


def emit(figure: FigureSpec, data, out_dir, stem: Optional[str] = None,
         names: Callable[[int], str] = lambda asn: "") -> tuple:
    """Write ``<stem>.jsonl`` plot points and ``<stem>.csv`` summary table.

    ``data`` by figure kind:
      diversity  -> DiversityCurve
      entry_paths -> {country: [entry SideTable per client]}
      exit_paths -> {group: [exit SideTable per destination]}
      combined   -> {country: [CorrelationRow, ...]} (rows of all clients)
    """
    out_dir = Path(out_dir)
    stem = stem or figure.kind
    kind = figure.kind
    points, table = [], None

    if kind == "diversity":
        curve: DiversityCurve = data
        asns = curve.asns or (None,) * len(curve.points)
        for (rank, value), asn in zip(curve.points, asns):
            points.append({"figure": kind, "kind": curve.kind, "rank": rank, "asn": asn,
                           "name": names(asn) if asn is not None else "", "value": value})
        table = _csv(["rank", "cumulative"], [[r, f"{v:.6f}"] for r, v in curve.points])

    elif kind in ("entry_paths", "exit_paths"):
        groups = {g: list(ts) for g, ts in data.items()}
        if kind == "entry_paths":
            selection = select_entry_rows(groups, figure)
        else:
            selection = select_exit_rows([t for g in sorted(groups) for t in groups[g]], figure)
        rows = []
        for asn in selection.asns:
            flag = "*" if asn in selection.relay_hosts else ""
            for group in sorted(groups):
                tables = sorted(groups[group], key=lambda t: t.endpoint_asn)
                values = []
                for t in tables:
                    row = t.rows.get(asn)
                    if row is None or asn == t.endpoint_asn or row.p_total <= 0:
                        continue
                    values.append(row.p_total)
                    points.append({"figure": kind, "group": group, "endpoint_asn": t.endpoint_asn,
                                   "asn": asn, "name": names(asn), "value": row.p_total, "role": row.role})
                rows.append(_summary_row(asn, names(asn), group, values, flag))
        table = _csv(["asn", "name", "group", "points", "min", "median", "max", "relay_host"], rows)

    elif kind == "combined":
        rows = []
        by_asn = {}
        for group in sorted(data):
            for r in sorted(data[group], key=lambda r: (r.asn, r.endpoint_asn or 0, r.destination_asn or 0)):
                points.append({"figure": kind, "group": group, "endpoint_asn": r.endpoint_asn,
                               "asn": r.asn, "name": names(r.asn), "value": r.p_and,
                               "p_guard": r.p_guard, "p_exit": r.p_exit, "role": r.role})
                by_asn.setdefault((r.asn, group), []).append(r.p_and)
        for (asn, group) in sorted(by_asn):
            rows.append(_summary_row(asn, names(asn), group, by_asn[asn, group]))
        table = _csv(["asn", "name", "group", "points", "min", "median", "max", "relay_host"], rows)

    points.sort(key=lambda p: json.dumps(p, sort_keys=True))
    points_path, table_path = out_dir / f"{stem}.jsonl", out_dir / f"{stem}.csv"
    atomic_write_text(points_path, _jsonl(points))
    atomic_write_text(table_path, table)
    return points_path, table_path


@dataclass(frozen=True)
class AnalysisSummary:
    """Per-metric, per-AS values of one analyzed run (metric -> {asn: value})."""

    family: str
    values: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DeltaReport:
    family: str
    deltas: dict       # metric -> {asn: (a, b, b - a)}
    appeared: dict     # metric -> sorted ASNs only in B
    disappeared: dict  # metric -> sorted ASNs only in A

    def nonzero(self) -> dict:
        return {m: {a: d for a, d in rows.items() if d[2] != 0} for m, rows in self.deltas.items()}


def compare_runs(a: AnalysisSummary, b: AnalysisSummary) -> DeltaReport:
    if a.family != b.family:
        raise ValueError(f"cannot compare {a.family} run with {b.family} run")
    deltas, appeared, disappeared = {}, {}, {}
    for metric in sorted(set(a.values) | set(b.values)):
        va, vb = a.values.get(metric, {}), b.values.get(metric, {})
        deltas[metric] = {
            asn: (va.get(asn, 0.0), vb.get(asn, 0.0), vb.get(asn, 0.0) - va.get(asn, 0.0))
            for asn in sorted(set(va) | set(vb))
        }
        appeared[metric] = sorted(set(vb) - set(va))
        disappeared[metric] = sorted(set(va) - set(vb))
    return DeltaReport(a.family, deltas, appeared, disappeared)


def delta_report_csv(report: DeltaReport, names: Callable[[int], str] = lambda asn: "") -> str:
    rows = []
    for metric, entries in report.deltas.items():
        for asn, (va, vb, d) in entries.items():
            if asn in report.appeared[metric]:
                change = "appeared"
            elif asn in report.disappeared[metric]:
                change = "disappeared"
            else:
                change = ""
            rows.append([metric, asn, short_name(names(asn)), fmt_prob(va), fmt_prob(vb), fmt_prob(d), change])
    return _csv(["metric", "asn", "name", "a", "b", "delta", "change"], rows)
