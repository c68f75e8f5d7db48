"""Run the offline single-scan experiment and print the side tables.

Imports the bundled fixture into a workspace, replays the archive, analyzes
and reports, then prints the top rows of the entry and exit tables next to
the significant correlation rows.

Usage: python scripts/run_single_scan.py [WORKSPACE] [--top N]
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from torcorr.cli import main

FIXTURE = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "single_scan"
LABEL = "single-scan-v4"


def stage(ws: Path, *args: str) -> None:
    code = main(["--workspace", str(ws), "--offline", *args])
    if code != 0:
        sys.exit(code)


def show(path: Path, top: int) -> None:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    print(f"\n{path.relative_to(path.parents[2])}")
    widths = [max(len(r[i]) for r in rows[:top + 1]) for i in range(len(rows[0]))]
    for r in rows[:top + 1]:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))


def run(ws: Path, top: int) -> None:
    stage(ws, "snapshot", "--name", "single-scan",
          "--consensus", str(FIXTURE / "consensus.json"), "--probes", str(FIXTURE / "probes.json"),
          "--ip2asn-v4", str(FIXTURE / "ip2asn-v4.tsv"), "--ip2asn-v6", str(FIXTURE / "ip2asn-v6.tsv"))
    stage(ws, "coverage", "--snapshot", "single-scan")
    stage(ws, "plan", "--scenario", str(FIXTURE / "scenario.yaml"), "--snapshot", "single-scan")
    stage(ws, "run", "--plan", LABEL, "--replay", str(FIXTURE / "archive"))
    stage(ws, "analyze", "--run", LABEL)
    stage(ws, "report", "--analysis", LABEL)
    out = ws / "analyses" / LABEL
    show(out / "entry" / "AS1764.csv", top)
    show(out / "exit" / "AS24940.csv", top)
    show(out / "significant.csv", top)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("workspace", nargs="?", default="single-scan-ws")
    ap.add_argument("--top", type=int, default=6)
    args = ap.parse_args()
    run(Path(args.workspace), args.top)
