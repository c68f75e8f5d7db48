from __future__ import annotations

import os
from collections import defaultdict
from pathlib import Path

import pytest

from torcorr.analysis import analyze_run
from torcorr.asn_map import load_ip2asn_files
from torcorr.consensus import aggregate_by_as, load_snapshot
from torcorr.executor import ReplayBackend, parse_result
from torcorr.inventory import ProbeInventory, load_probes
from torcorr.planner import build_plan
from torcorr.targets import build_targets, load_scenario

FIXTURES = Path(__file__).parent / "fixtures"
SINGLE_SCAN = FIXTURES / "single_scan"

# Optional archived full snapshot: a directory with details.json, probes.json
# and ip2asn-v4.tsv. Tests needing it skip when the variable is unset.
ARCHIVE_ENV = "TORCORR_ARCHIVE_2022"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, title): acceptance criterion covered by this test")
    config._criteria = defaultdict(list)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    cid, title = marker.args
    store = item.config._criteria
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        store[(cid, title)].append((item.name, report.outcome, getattr(report, "duration", 0.0)))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = getattr(config, "_criteria", {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for (cid, title), results in sorted(store.items()):
        outcomes = [o for _, o, _ in results]
        if any(o == "failed" for o in outcomes):
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        skipped = sum(o == "skipped" for o in outcomes)
        note = f" ({skipped} part(s) skipped)" if skipped and verdict != "SKIP" else ""
        secs = sum(d for _, _, d in results)
        terminalreporter.write_line(f"{verdict}  {cid}  {title}  [{len(results)} checks, {secs:.2f}s]{note}")


class Bundle:
    def __init__(self, root: Path):
        self.root = root
        self.mapper = load_ip2asn_files(root / "ip2asn-v4.tsv", root / "ip2asn-v6.tsv")
        self.snapshot = load_snapshot(root / "consensus.json")
        self.inventory = ProbeInventory(load_probes(root / "probes.json"))
        self.scenario = load_scenario(root / "scenario.yaml")
        self.agg = aggregate_by_as(self.snapshot, self.mapper, "v4")
        self.archive = root / "archive"
        self._plan = self._analysis = None

    def plan(self):
        if self._plan is None:
            targets = build_targets(self.scenario, self.inventory, self.mapper)
            self._plan = build_plan(targets, self.agg.stats, self.agg.stats, self.inventory,
                                    fallback_count=self.scenario.fallback_count)
        return self._plan

    def results(self):
        backend = ReplayBackend(self.archive)
        return [parse_result(backend.fetch(d).raw or b"", i) for i, d in enumerate(self.plan().definitions)]

    def analysis(self):
        if self._analysis is None:
            self._analysis = analyze_run(self.plan(), self.results(), self.mapper, self.agg.stats, self.agg.stats)
        return self._analysis


@pytest.fixture(scope="session")
def single_scan() -> Bundle:
    return Bundle(SINGLE_SCAN)


@pytest.fixture(scope="session")
def archived_2022():
    root = os.environ.get(ARCHIVE_ENV)
    if not root or not Path(root).is_dir():
        pytest.skip(f"archived 2022 snapshot not available (set {ARCHIVE_ENV})")
    root = Path(root)
    mapper = load_ip2asn_files(root / "ip2asn-v4.tsv")
    snapshot = load_snapshot(root / "details.json")
    inventory = ProbeInventory(load_probes(root / "probes.json"))
    return snapshot, mapper, inventory
