"""Command line entry point: snapshot, coverage, plan, run, analyze, report, compare."""

from __future__ import annotations

import argparse
import gzip
import json
import logging
import os
import sys
import tempfile
from collections import defaultdict
from pathlib import Path

from . import analysis as an
from .asn_map import Ip2AsnError
from .consensus import (SnapshotError, aggregate_by_as, diversity_curve, ipv6_support_summary,
                        relay_statistics)
from .executor import AtlasBackend, BackendSuspended, Limits, ReplayBackend, RunStore, RunStoreError, execute
from .inventory import ProbeParseError, coverage, top_uncovered
from .planner import Plan, build_plan, definitions_from_json
from .report import (AnalysisSummary, FigureSpec, compare_runs, delta_report_csv, emit, short_name)
from .targets import FixtureResolver, ScenarioError, SystemResolver, build_targets, load_scenario
from .util import atomic_write_text, fmt_prob, sha256_file
from .workspace import Workspace, WorkspaceError, dump_json, read_json

log = logging.getLogger("torcorr")

EXIT_OK, EXIT_VALIDATION, EXIT_EXECUTION = 0, 1, 2

ONIONOO_URL = ("https://onionoo.torproject.org/details?type=relay&running=true&fields="
               "fingerprint,or_addresses,flags,advertised_bandwidth,guard_probability,exit_probability")
PROBES_URL = "https://atlas.ripe.net/api/v2/probes/?page_size=500"
IP2ASN_URL = "https://iptoasn.com/data/ip2asn-{family}.tsv.gz"


class OfflineError(WorkspaceError):
    pass


def _family(args, ws: Workspace) -> str:
    return args.family or ws.config.get("family") or "v4"


# snapshot


def _fetch_inputs(dest: Path) -> dict:
    import requests

    files = {}
    resp = requests.get(ONIONOO_URL, timeout=120)
    resp.raise_for_status()
    (dest / "consensus.json").write_bytes(resp.content)
    files["consensus"] = dest / "consensus.json"

    probes, url = [], PROBES_URL
    while url:
        page = requests.get(url, timeout=120)
        page.raise_for_status()
        doc = page.json()
        probes.extend(doc["results"])
        url = doc.get("next")
    (dest / "probes.json").write_text(json.dumps(probes), encoding="utf-8")
    files["probes"] = dest / "probes.json"

    for family in ("v4", "v6"):
        resp = requests.get(IP2ASN_URL.format(family=family), timeout=300)
        resp.raise_for_status()
        (dest / f"ip2asn-{family}.tsv").write_bytes(gzip.decompress(resp.content))
        files[f"ip2asn_{family}"] = dest / f"ip2asn-{family}.tsv"
    return files


def cmd_snapshot(args, ws: Workspace) -> int:
    files = {role: getattr(args, role) for role in
             ("consensus", "probes", "ip2asn_v4", "ip2asn_v6", "resolver") if getattr(args, role)}
    if args.fetch:
        if args.offline:
            raise OfflineError("--fetch needs network access but --offline is set")
        with tempfile.TemporaryDirectory() as tmp:
            fetched = _fetch_inputs(Path(tmp))
            fetched.update(files)
            dest = ws.import_snapshot(args.name, fetched, args.fetched_at or "")
    else:
        dest = ws.import_snapshot(args.name, files, args.fetched_at or "")
    bundle = ws.snapshot(args.name)
    snap = bundle.consensus
    print(f"snapshot {args.name}: {len(snap.relays)} relays ({snap.dropped} dropped), "
          f"{len(bundle.inventory)} probes -> {dest}")
    return EXIT_OK


# coverage


def cmd_coverage(args, ws: Workspace) -> int:
    bundle = ws.snapshot(args.snapshot)
    family = _family(args, ws)
    names = bundle.mapper.name
    agg = aggregate_by_as(bundle.consensus, bundle.mapper, family)
    out = ws.dir("reports", f"coverage-{bundle.name}-{family}")
    summary = {"snapshot": bundle.name, "snapshot_manifest_sha256": bundle.manifest_hash, "family": family,
               "unmapped": {"relays": agg.unmapped.relay_count, "p_guard": agg.unmapped.p_guard,
                            "p_exit": agg.unmapped.p_exit},
               "relay_statistics": relay_statistics(bundle.consensus, bundle.mapper, family)}
    ipv6 = ipv6_support_summary(bundle.consensus, bundle.mapper)
    summary["ipv6_support"] = {
        k: {"relays": [r.relays_all, r.relays_v6, r.relay_share], "ases": [r.ases_all, r.ases_v6, r.as_share],
            "bandwidth_gbit": [round(r.bandwidth_all * 8 / 1e9, 2), round(r.bandwidth_v6 * 8 / 1e9, 2),
                               r.bandwidth_share]}
        for k, r in ipv6.rows.items()
    }
    for side in ("guard", "exit"):
        rep = coverage(agg.stats, bundle.inventory, side, family)
        summary[side] = {
            "total_ases": rep.total_ases, "covered_ases": rep.covered_ases,
            "total_relays": rep.total_relays, "covered_relays": rep.covered_relays,
            "covered_probability": rep.covered_probability, "total_probability": rep.total_probability,
        }
        rows = [[s.asn, short_name(names(s.asn)), s.relays_of(side), f"{s.bandwidth_gbit:.2f}",
                 fmt_prob(s.p_exit), fmt_prob(s.p_guard)]
                for s in top_uncovered(agg.stats, bundle.inventory, side, args.top)]
        lines = ["asn,name,relays,gbit_s,p_exit,p_guard"] + [",".join(map(str, r)) for r in rows]
        atomic_write_text(out / f"uncovered_{side}.csv", "\n".join(lines) + "\n")
        curve = diversity_curve(agg.stats, side) if agg.stats else None
        if curve is not None:
            emit(FigureSpec("diversity"), curve, out, f"diversity_{side}", names)
        print(f"{side}: {rep.covered_ases}/{rep.total_ases} ASes, {rep.covered_relays}/{rep.total_relays} "
              f"relays, covered probability {rep.covered_probability:.3f}")
    atomic_write_text(out / "coverage.json", dump_json(summary))
    return EXIT_OK


# plan


def _resolver(scenario, bundle, offline: bool):
    (kind, _), = scenario.destination_rule.items()
    if kind == "explicit":
        return None
    path = bundle.path("resolver")
    if path is not None:
        return FixtureResolver(path)
    if offline:
        raise OfflineError("destination rule needs DNS but the snapshot has no resolver fixture and --offline is set")
    return SystemResolver()


def cmd_plan(args, ws: Workspace) -> int:
    scenario_path = ws.scenario_path(args.scenario)
    scenario = load_scenario(scenario_path)
    bundle = ws.snapshot(args.snapshot)
    if args.family and args.family != scenario.family:
        raise WorkspaceError(f"--family {args.family} conflicts with scenario family {scenario.family}")
    agg = aggregate_by_as(bundle.consensus, bundle.mapper, scenario.family)
    targets = build_targets(scenario, bundle.inventory, bundle.mapper, _resolver(scenario, bundle, args.offline))
    fallback = scenario.fallback_count if args.fallback_count is None else args.fallback_count
    plan = build_plan(targets, agg.stats, agg.stats, bundle.inventory,
                      fallback_count=fallback, repeat=scenario.repeat, label=scenario.label)
    out = ws.dir("plans", scenario.label)
    atomic_write_text(out / "definitions.json", plan.definitions_json())
    meta = {
        "label": scenario.label,
        "family": scenario.family,
        "scenario": {"file": scenario_path.name, "sha256": sha256_file(scenario_path)},
        "snapshot": {"name": bundle.name, "manifest_sha256": bundle.manifest_hash},
        "definitions_sha256": plan.content_hash,
        "clients": [list(c) for c in targets.clients],
        "destinations": [[a, p, list(d)] for a, p, d in targets.destinations],
        "dropped": list(targets.dropped),
        "fallback_count": fallback,
        "coverage_estimate": plan.coverage_estimate,
        "counts": {d: len(plan.by_direction(d)) for d in ("D1", "D2", "D3", "D4")},
    }
    atomic_write_text(out / "plan.json", dump_json(meta))
    counts = " ".join(f"{d}={n}" for d, n in meta["counts"].items())
    print(f"plan {scenario.label}: {len(plan.definitions)} definitions ({counts}) -> {out}")
    return EXIT_OK


def load_plan(ws: Workspace, label: str) -> tuple:
    root = ws.dir("plans", label)
    meta = read_json(root / "plan.json")
    defs_path = root / "definitions.json"
    if not defs_path.exists():
        raise WorkspaceError(f"missing {defs_path}")
    plan = Plan(label, definitions_from_json(defs_path.read_text(encoding="utf-8")),
                meta.get("coverage_estimate", {}))
    if plan.content_hash != meta["definitions_sha256"]:
        raise WorkspaceError(f"plan {label}: definitions.json does not match plan.json hash")
    return plan, meta


# run


def cmd_run(args, ws: Workspace) -> int:
    plan, meta = load_plan(ws, args.plan)
    name = args.name or args.plan
    if args.replay:
        backend = ReplayBackend(args.replay)
        backend_desc = {"kind": "replay", "archive": os.path.basename(os.path.normpath(args.replay))}
    else:
        if args.offline:
            raise OfflineError("live runs need network access but --offline is set")
        backend = AtlasBackend(poll_interval=args.poll_interval, description=plan.scenario_label)
        backend_desc = {"kind": "live"}
    root = ws.dir("runs", name)
    run_meta = {"plan": args.plan, "plan_sha256": plan.content_hash, "snapshot": meta["snapshot"],
                "backend": backend_desc}
    atomic_write_text(root / "run.json", dump_json(run_meta))
    result = execute(plan, backend, root, Limits(args.parallelism, args.rps))
    statuses = defaultdict(int)
    for outcome in result.state.outcomes.values():
        statuses[outcome["status"]] += 1
    summary = ", ".join(f"{k}={statuses[k]}" for k in sorted(statuses))
    print(f"run {name}: {len(result.state.completed)}/{len(plan.definitions)} complete ({summary})")
    missing = sum(1 for o in result.state.outcomes.values() if o["reason"] == "no archived result")
    if missing:
        print(f"warning: {missing} definitions had no archived result", file=sys.stderr)
    if result.suspended:
        print(f"run suspended: {result.reason}; re-run the same command to resume", file=sys.stderr)
        return EXIT_EXECUTION
    return EXIT_OK


# analyze


def _relay_stats(bundle, family):
    return aggregate_by_as(bundle.consensus, bundle.mapper, family).stats


def cmd_analyze(args, ws: Workspace) -> int:
    run_root = ws.dir("runs", args.run)
    run_meta = read_json(run_root / "run.json")
    plan, meta = load_plan(ws, run_meta["plan"])
    store = RunStore.open(run_root)
    if store.state.plan_hash != plan.content_hash or run_meta["plan_sha256"] != plan.content_hash:
        raise WorkspaceError(f"run {args.run} was executed for a different version of plan {plan.scenario_label}")
    bundle = ws.snapshot(meta["snapshot"]["name"])
    if bundle.manifest_hash != meta["snapshot"]["manifest_sha256"]:
        raise WorkspaceError(f"snapshot {bundle.name} changed since plan {plan.scenario_label} was built")
    family = meta["family"]
    stats = _relay_stats(bundle, family)
    clients = [c[0] for c in meta["clients"]]
    dests = [d[0] for d in meta["destinations"]]
    result = an.analyze_run(plan, store.results(plan), bundle.mapper, stats, stats, clients, dests)
    names = bundle.mapper.name

    out = ws.dir("analyses", args.name or args.run)
    tables_doc = {"family": family, "run": args.run, "plan_sha256": plan.content_hash,
                  "snapshot_manifest_sha256": bundle.manifest_hash, "entry": {}, "exit": {}}
    for side, tables in (("entry", result.entry), ("exit", result.exit)):
        for asn, table in tables.items():
            recs = an.side_table_records(table, names)
            atomic_write_text(out / side / f"AS{asn}.csv", an.records_csv(recs, an.SIDE_COLUMNS))
            atomic_write_text(out / side / f"AS{asn}.json", an.records_json(recs, an.SIDE_COLUMNS))
            tables_doc[side][str(asn)] = recs

    exits = list(result.exit.values())
    correlation, significant = [], []
    for client, entry in result.entry.items():
        if not exits:
            break
        rows = an.combine(entry, exits, args.mode)
        correlation.extend(rows)
        significant.extend(an.filter_significant(rows, args.threshold))
        recs = an.correlation_records(rows, names)
        atomic_write_text(out / "correlation" / f"AS{client}.csv", an.records_csv(recs, an.CORRELATION_COLUMNS))
        atomic_write_text(out / "correlation" / f"AS{client}.json", an.records_json(recs, an.CORRELATION_COLUMNS))
    sig = an.correlation_records(significant, names)
    atomic_write_text(out / "significant.csv", an.records_csv(sig, an.CORRELATION_COLUMNS))
    tables_doc["correlation"] = an.correlation_records(correlation, names)
    tables_doc["mode"] = args.mode
    atomic_write_text(out / "tables.json", dump_json(tables_doc))

    cov = result.coverage
    coverage_doc = {
        "planned": cov.planned, "succeeded": cov.succeeded,
        "total_planned": cov.total_planned, "total_succeeded": cov.total_succeeded,
        "success_rate": cov.success_rate,
        "entry_probability": cov.entry_probability, "exit_probability": cov.exit_probability,
        "unmapped_hops": result.diagnostics.unmapped_hops, "no_reply_hops": result.diagnostics.no_reply_hops,
    }
    atomic_write_text(out / "coverage.json", dump_json(coverage_doc))
    atomic_write_text(out / "summary.json", dump_json(_summary(family, result, correlation)))
    per_dir = " ".join(f"{d}:{cov.succeeded[d]}/{cov.planned[d]}" for d in cov.planned)
    print(f"analysis {out.name}: {cov.total_succeeded}/{cov.total_planned} successful "
          f"({100 * cov.success_rate:.1f}%) {per_dir}; {len(significant)} significant rows")
    return EXIT_OK


def _summary(family, result, correlation) -> dict:
    values = {"entry": {}, "exit": {}, "combined": {}}
    for metric, tables in (("entry", result.entry), ("exit", result.exit)):
        for table in tables.values():
            for asn, row in table.rows.items():
                if asn != table.endpoint_asn:
                    values[metric][asn] = max(values[metric].get(asn, 0.0), row.p_total)
    for r in correlation:
        values["combined"][r.asn] = max(values["combined"].get(r.asn, 0.0), r.p_and)
    return {"family": family,
            "values": {m: {str(a): v[a] for a in sorted(v)} for m, v in values.items()}}


def _load_summary(ws: Workspace, name: str) -> AnalysisSummary:
    doc = read_json(ws.dir("analyses", name) / "summary.json")
    return AnalysisSummary(doc["family"], {m: {int(a): v for a, v in vals.items()}
                                           for m, vals in doc["values"].items()})


# report


def _tables_from_doc(doc, side):
    out = {}
    for asn, recs in doc[side].items():
        rows = {r["asn"]: an.SideRow(r["p_total"], r["p_relays"], r["p_routes"], r["route_count"], r["role"])
                for r in recs}
        out[int(asn)] = an.SideTable(side, int(asn), rows)
    return out


def cmd_report(args, ws: Workspace) -> int:
    root = ws.dir("analyses", args.analysis)
    doc = read_json(root / "tables.json")
    run_meta = read_json(ws.dir("runs", doc["run"]) / "run.json")
    _, meta = load_plan(ws, run_meta["plan"])
    bundle = ws.snapshot(meta["snapshot"]["name"])
    names = bundle.mapper.name
    out = ws.dir("reports", args.name or args.analysis)
    carry = tuple(int(a) for a in args.carry_forward.split(",")) if args.carry_forward else ()
    entry = _tables_from_doc(doc, "entry")
    exit_ = _tables_from_doc(doc, "exit")

    def country(asn):
        return bundle.mapper.country(asn) or "??"

    written = []
    for kind in args.figure or ("entry_paths", "exit_paths", "combined", "diversity"):
        if kind == "entry_paths":
            groups = defaultdict(list)
            for asn, t in entry.items():
                groups[country(asn)].append(t)
            written += emit(FigureSpec(kind, carry_forward=carry), groups, out, names=names)
        elif kind == "exit_paths":
            written += emit(FigureSpec(kind, carry_forward=carry), {"all": list(exit_.values())}, out, names=names)
        elif kind == "combined":
            groups = defaultdict(list)
            for r in doc["correlation"]:
                groups[country(r["endpoint_asn"])].append(an.CorrelationRow(
                    r["asn"], r["p_guard"], r["p_exit"], r["p_and"], r["role"],
                    r["endpoint_asn"], r["destination_asn"]))
            written += emit(FigureSpec(kind), groups, out, names=names)
        elif kind == "diversity":
            stats = _relay_stats(bundle, doc["family"])
            for side in ("guard", "exit"):
                if stats:
                    written += emit(FigureSpec(kind), diversity_curve(stats, side), out,
                                    f"diversity_{side}", names)
    print(f"report {out.name}: wrote {len(written)} files -> {out}")
    return EXIT_OK


def cmd_compare(args, ws: Workspace) -> int:
    a, b = _load_summary(ws, args.a), _load_summary(ws, args.b)
    report = compare_runs(a, b)
    out = ws.dir("reports", args.name or f"compare-{args.a}-{args.b}")
    atomic_write_text(out / "delta.csv", delta_report_csv(report))
    doc = {"family": report.family,
           "appeared": report.appeared, "disappeared": report.disappeared,
           "changed": {m: {str(asn): d for asn, d in rows.items()} for m, rows in report.nonzero().items()}}
    atomic_write_text(out / "delta.json", dump_json(doc))
    n = sum(len(v) for v in report.nonzero().values())
    print(f"compare {args.a} -> {args.b}: {n} nonzero deltas -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommands repeat the global flags; SUPPRESS keeps them from
        # overwriting values given before the subcommand name
        g = argparse.ArgumentParser(add_help=False)
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g.add_argument("--workspace", "-w", default=d(os.environ.get("TORCORR_WORKSPACE", ".")),
                       help="workspace directory (default: current directory)")
        g.add_argument("--family", choices=("v4", "v6"), default=d(None))
        g.add_argument("--offline", action="store_true", default=d(False),
                       help="fail instead of touching the network")
        g.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return g

    common = global_flags(True)

    p = argparse.ArgumentParser(prog="torcorr", parents=[global_flags(False)],
                                description="Measure which ASes can observe both ends of Tor circuits.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("snapshot", parents=[common], help="import or fetch consensus/probe/ip2asn data")
    s.add_argument("--name", required=True)
    s.add_argument("--consensus")
    s.add_argument("--probes")
    s.add_argument("--ip2asn-v4", dest="ip2asn_v4")
    s.add_argument("--ip2asn-v6", dest="ip2asn_v6")
    s.add_argument("--resolver", help="resolver fixture (domain<TAB>family<TAB>ips)")
    s.add_argument("--fetched-at", default="")
    s.add_argument("--fetch", action="store_true", help="download missing inputs from public sources")
    s.set_defaults(func=cmd_snapshot)

    s = sub.add_parser("coverage", parents=[common], help="probe coverage of guard/exit probability")
    s.add_argument("--snapshot")
    s.add_argument("--top", type=int, default=5)
    s.set_defaults(func=cmd_coverage)

    s = sub.add_parser("plan", parents=[common], help="build traceroute definitions for a scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--snapshot")
    s.add_argument("--fallback-count", type=int)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("run", parents=[common], help="execute a plan (live or replay)")
    s.add_argument("--plan", required=True)
    s.add_argument("--name")
    s.add_argument("--replay", help="archive directory to replay instead of the live API")
    s.add_argument("--parallelism", type=int, default=4)
    s.add_argument("--rps", type=float, default=0.0, help="max requests per second (0 = unlimited)")
    s.add_argument("--poll-interval", type=float, default=30.0)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("analyze", parents=[common], help="side tables and correlation rows for a run")
    s.add_argument("--run", required=True)
    s.add_argument("--name")
    s.add_argument("--mode", choices=("worst_case_max", "per_destination"), default="worst_case_max")
    s.add_argument("--threshold", type=float, default=0.01)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("report", parents=[common], help="figure data and tables for an analysis")
    s.add_argument("--analysis", required=True)
    s.add_argument("--name")
    s.add_argument("--figure", action="append", choices=("entry_paths", "exit_paths", "combined", "diversity"))
    s.add_argument("--carry-forward", help="comma-separated ASNs selected in a previous period")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("compare", parents=[common], help="per-AS deltas between two analyses")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--name")
    s.set_defaults(func=cmd_compare)
    return p


VALIDATION_ERRORS = (WorkspaceError, ScenarioError, Ip2AsnError, SnapshotError, ProbeParseError,
                     RunStoreError, FileNotFoundError, ValueError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ws = Workspace(args.workspace)
    try:
        return args.func(args, ws)
    except BackendSuspended as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXECUTION
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.debug("execution failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXECUTION


if __name__ == "__main__":
    sys.exit(main())
