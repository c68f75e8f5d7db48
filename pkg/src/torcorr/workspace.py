"""Workspace directory layout and provenance bookkeeping.

    <root>/workspace.yaml            optional defaults (family, snapshot)
    <root>/snapshots/<name>/         imported inputs + manifest.json (sha256 per file)
    <root>/plans/<label>/            definitions.json + plan.json
    <root>/runs/<name>/              state.json, index.json, raw/, run.json
    <root>/analyses/<name>/          side tables, correlation rows, coverage
    <root>/reports/<name>/           plot data and tables
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import yaml

from .asn_map import AsnDatabase, load_ip2asn_files
from .consensus import ConsensusSnapshot, load_snapshot
from .inventory import ProbeInventory, load_probes
from .util import atomic_write_text, sha256_file

SNAPSHOT_FILES = {
    "consensus": "consensus.json",
    "probes": "probes.json",
    "ip2asn_v4": "ip2asn-v4.tsv",
    "ip2asn_v6": "ip2asn-v6.tsv",
    "resolver": "resolver.tsv",
}


class WorkspaceError(ValueError):
    """Missing artifact or provenance mismatch."""


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def read_json(path: Path):
    if not path.exists():
        raise WorkspaceError(f"missing {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


@dataclass
class SnapshotBundle:
    name: str
    root: Path
    manifest: dict

    @property
    def manifest_hash(self) -> str:
        return sha256_file(self.root / "manifest.json")

    def path(self, role: str) -> Optional[Path]:
        entry = self.manifest["files"].get(role)
        return self.root / entry["file"] if entry else None

    @cached_property
    def consensus(self) -> ConsensusSnapshot:
        return load_snapshot(self.path("consensus"), fetched_at=self.manifest.get("fetched_at") or None)

    @cached_property
    def inventory(self) -> ProbeInventory:
        return ProbeInventory(load_probes(self.path("probes")))

    @cached_property
    def mapper(self) -> AsnDatabase:
        return load_ip2asn_files(self.path("ip2asn_v4"), self.path("ip2asn_v6"))


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    @cached_property
    def config(self) -> dict:
        path = self.root / "workspace.yaml"
        if not path.exists():
            return {}
        with open(path, encoding="utf-8") as fh:
            return yaml.safe_load(fh) or {}

    def dir(self, kind: str, name: str) -> Path:
        return self.root / kind / name

    # snapshots

    def import_snapshot(self, name: str, files: dict, fetched_at: str = "") -> Path:
        if "consensus" not in files or "probes" not in files:
            raise WorkspaceError("a snapshot needs at least consensus and probes files")
        if not any(k in files for k in ("ip2asn_v4", "ip2asn_v6")):
            raise WorkspaceError("a snapshot needs an ip2asn file")
        dest = self.dir("snapshots", name)
        dest.mkdir(parents=True, exist_ok=True)
        manifest = {"name": name, "fetched_at": fetched_at, "files": {}}
        for role, src in sorted(files.items()):
            if role not in SNAPSHOT_FILES:
                raise WorkspaceError(f"unknown snapshot file role {role!r}")
            src = Path(src)
            if not src.exists():
                raise WorkspaceError(f"missing input {src}")
            target = dest / SNAPSHOT_FILES[role]
            tmp = target.with_suffix(target.suffix + ".tmp")
            shutil.copyfile(src, tmp)
            tmp.replace(target)
            manifest["files"][role] = {"file": target.name, "sha256": sha256_file(target)}
        atomic_write_text(dest / "manifest.json", dump_json(manifest))
        return dest

    def snapshot(self, name: Optional[str] = None) -> SnapshotBundle:
        name = name or self.config.get("snapshot")
        if not name:
            raise WorkspaceError("no snapshot given and no default in workspace.yaml")
        root = self.dir("snapshots", name)
        manifest = read_json(root / "manifest.json")
        for role, entry in manifest["files"].items():
            path = root / entry["file"]
            if not path.exists():
                raise WorkspaceError(f"snapshot {name}: missing {entry['file']}")
            if sha256_file(path) != entry["sha256"]:
                raise WorkspaceError(f"snapshot {name}: {entry['file']} does not match its recorded hash")
        return SnapshotBundle(name, root, manifest)

    # scenarios

    def scenario_path(self, ref: str) -> Path:
        path = Path(ref)
        if path.exists():
            return path
        for candidate in (self.root / "scenarios" / ref, self.root / "scenarios" / f"{ref}.yaml"):
            if candidate.exists():
                return candidate
        raise WorkspaceError(f"scenario {ref!r} not found")
