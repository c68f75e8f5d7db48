"""Run a plan against the live measurement API or a replay archive.

Raw API responses are written to the run store before they are parsed,
one file per definition key, so analysis can always be redone from disk.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from .planner import MeasurementDefinition, Plan
from .util import atomic_write_bytes, atomic_write_text

log = logging.getLogger(__name__)

STATUSES = ("success", "timeout", "failed")
ATLAS_API = "https://atlas.ripe.net/api/v2"


@dataclass(frozen=True)
class HopRecord:
    hop_index: int
    responses: tuple = ()  # (ip or None for "*", rtt_ms or None)

    @property
    def responding(self) -> list:
        return [ip for ip, _ in self.responses if ip is not None]


@dataclass(frozen=True)
class TracerouteResult:
    definition_ref: int
    status: str
    hops: tuple = ()
    measurement_id: Optional[str] = None
    malformed_hops: int = 0
    reason: str = ""

    @property
    def responding_addresses(self) -> list:
        return [ip for hop in self.hops for ip in hop.responding]


def _parse_hop(entry) -> Optional[HopRecord]:
    if not isinstance(entry, dict) or not isinstance(entry.get("hop"), int):
        return None
    replies = entry.get("result")
    if not isinstance(replies, list):
        return None
    responses = []
    for reply in replies:
        if not isinstance(reply, dict):
            continue
        if reply.get("x") == "*":
            responses.append((None, None))
        elif "from" in reply:
            rtt = reply.get("rtt")
            responses.append((str(reply["from"]), float(rtt) if isinstance(rtt, (int, float)) else None))
    if not responses:
        return None
    return HopRecord(entry["hop"], tuple(responses))


def parse_result(raw, definition_ref: int = -1, measurement_id: Optional[str] = None) -> TracerouteResult:
    """Parse one traceroute result document (or the API's one-element list of them).

    Empty or unparseable documents are ``failed``; documents where no hop
    answered are ``timeout``; anything with a responding hop is ``success``.
    """
    try:
        doc = json.loads(raw) if isinstance(raw, (bytes, str)) else raw
    except (json.JSONDecodeError, UnicodeDecodeError):
        return TracerouteResult(definition_ref, "failed", measurement_id=measurement_id,
                                reason="unparseable document")
    if isinstance(doc, list):
        doc = doc[0] if doc else None
    if not isinstance(doc, dict) or not isinstance(doc.get("result"), list):
        return TracerouteResult(definition_ref, "failed", measurement_id=measurement_id,
                                reason="no result array")
    if measurement_id is None and doc.get("msm_id") is not None:
        measurement_id = str(doc["msm_id"])
    hops, malformed, last = [], 0, 0
    for entry in doc["result"]:
        hop = _parse_hop(entry)
        if hop is None or hop.hop_index <= last:
            malformed += 1
            continue
        hops.append(hop)
        last = hop.hop_index
    if not doc["result"]:
        status, reason = "failed", "empty result"
    elif any(h.responding for h in hops):
        status, reason = "success", ""
    else:
        status, reason = "timeout", "no responding hop"
    return TracerouteResult(definition_ref, status, tuple(hops), measurement_id, malformed, reason)


class BackendSuspended(RuntimeError):
    """Quota or credential failure; the run stops with resumable state."""


@dataclass(frozen=True)
class Fetched:
    raw: Optional[bytes]
    measurement_id: Optional[str] = None
    reason: str = ""


def read_index(root: Path) -> dict:
    path = Path(root) / "index.json"
    if not path.exists():
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh).get("entries", {})


class ReplayBackend:
    """Serve archived raw results keyed by direction, source/target ASN, family."""

    def __init__(self, archive: os.PathLike):
        self.root = Path(archive)
        if not (self.root / "index.json").exists():
            raise FileNotFoundError(f"no archive index at {self.root / 'index.json'}")
        self.entries = read_index(self.root)

    def fetch(self, definition: MeasurementDefinition) -> Fetched:
        rel = self.entries.get(definition.key)
        if rel is None:
            return Fetched(None, reason="no archived result")
        with open(self.root / rel, "rb") as fh:
            return Fetched(fh.read())


class AtlasBackend:
    """Create one-off traceroutes, poll until stopped, download results."""

    FINAL = {"Stopped", "Failed", "No suitable probes", "Forced to stop", "Archived"}

    def __init__(self, api_key: Optional[str] = None, base_url: str = ATLAS_API,
                 poll_interval: float = 30.0, max_polls: int = 120,
                 session=None, sleep=time.sleep, description: str = ""):
        import requests

        self.api_key = api_key or os.environ.get("ATLAS_API_KEY")
        if not self.api_key:
            raise BackendSuspended("ATLAS_API_KEY is not set")
        self.base_url = base_url.rstrip("/")
        self.poll_interval = poll_interval
        self.max_polls = max_polls
        self.session = session or requests.Session()
        self.sleep = sleep
        self.description = description

    def _headers(self):
        return {"Authorization": f"Key {self.api_key}", "Accept": "application/json"}

    def _check(self, response):
        if response.status_code in (401, 403):
            raise BackendSuspended(f"authentication failed ({response.status_code})")
        if response.status_code == 429 or (
            response.status_code == 400 and any(w in response.text.lower() for w in ("credit", "quota", "limit"))
        ):
            raise BackendSuspended(f"quota exhausted ({response.status_code}): {response.text[:200]}")
        return response.status_code < 400

    def request_body(self, d: MeasurementDefinition) -> dict:
        return {
            "definitions": [{
                "type": "traceroute",
                "af": 4 if d.family == "v4" else 6,
                "protocol": d.protocol,
                "response_timeout": d.response_timeout_ms,
                "packets": d.packets_per_hop,
                "target": d.target_ip,
                "description": self.description or d.key,
            }],
            "probes": [{"type": "probes", "value": str(d.source_probe), "requested": 1}],
            "is_oneoff": True,
        }

    def fetch(self, definition: MeasurementDefinition) -> Fetched:
        resp = self.session.post(f"{self.base_url}/measurements/", json=self.request_body(definition),
                                 headers=self._headers())
        if not self._check(resp):
            return Fetched(None, reason=f"create failed ({resp.status_code})")
        msm_id = str(resp.json()["measurements"][0])
        for _ in range(self.max_polls):
            status = self.session.get(f"{self.base_url}/measurements/{msm_id}/", headers=self._headers())
            if not self._check(status):
                return Fetched(None, msm_id, f"status poll failed ({status.status_code})")
            if status.json().get("status", {}).get("name") in self.FINAL:
                break
            self.sleep(self.poll_interval)
        else:
            return Fetched(None, msm_id, "measurement did not stop")
        results = self.session.get(f"{self.base_url}/measurements/{msm_id}/results/", headers=self._headers())
        if not self._check(results):
            return Fetched(None, msm_id, f"result download failed ({results.status_code})")
        return Fetched(results.content, msm_id)


@dataclass(frozen=True)
class Limits:
    parallelism: int = 4
    requests_per_second: float = 0.0  # 0 disables rate limiting
    flush_every: int = 100


class RateLimiter:
    def __init__(self, per_second: float, clock=time.monotonic, sleep=time.sleep):
        self.interval = 1.0 / per_second if per_second > 0 else 0.0
        self.clock, self.sleep = clock, sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def acquire(self):
        if not self.interval:
            return
        with self._lock:
            now = self.clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self.sleep(start - now)


@dataclass
class RunState:
    plan_label: str
    plan_hash: str
    raw_store_path: str
    completed: set = field(default_factory=set)
    pending: set = field(default_factory=set)
    outcomes: dict = field(default_factory=dict)  # index -> {status, reason, measurement_id}

    def to_json(self) -> str:
        doc = {
            "plan": {"label": self.plan_label, "sha256": self.plan_hash},
            "raw_store_path": self.raw_store_path,
            "completed": sorted(self.completed),
            "pending": sorted(self.pending),
            "outcomes": {str(k): self.outcomes[k] for k in sorted(self.outcomes)},
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunState":
        doc = json.loads(text)
        return cls(
            plan_label=doc["plan"]["label"],
            plan_hash=doc["plan"]["sha256"],
            raw_store_path=doc["raw_store_path"],
            completed=set(doc["completed"]),
            pending=set(doc["pending"]),
            outcomes={int(k): v for k, v in doc["outcomes"].items()},
        )

    @property
    def done(self) -> bool:
        return not self.pending


class RunStoreError(RuntimeError):
    pass


class RunStore:
    """On-disk run: ``state.json``, ``index.json`` and ``raw/<key>.json``.

    The layout doubles as a replay archive. All writes go through the
    caller's thread (single writer).
    """

    def __init__(self, root: os.PathLike, state: RunState):
        self.root = Path(root)
        self.state = state
        self.entries = read_index(self.root)

    @classmethod
    def open(cls, root: os.PathLike, plan: Optional[Plan] = None) -> "RunStore":
        root = Path(root)
        state_path = root / "state.json"
        if state_path.exists():
            state = RunState.from_json(state_path.read_text(encoding="utf-8"))
            if plan is not None and state.plan_hash != plan.content_hash:
                raise RunStoreError(f"run at {root} belongs to a different plan")
            return cls(root, state)
        if plan is None:
            raise RunStoreError(f"no run state at {root}")
        (root / "raw").mkdir(parents=True, exist_ok=True)
        state = RunState(plan.scenario_label, plan.content_hash, "raw",
                         pending=set(range(len(plan.definitions))))
        store = cls(root, state)
        store.save()
        return store

    def write_raw(self, key: str, data: bytes) -> None:
        if key in self.entries and (self.root / self.entries[key]).exists():
            return  # first stored result wins
        rel = f"raw/{key}.json"
        atomic_write_bytes(self.root / rel, data)
        self.entries[key] = rel

    def read_raw(self, key: str) -> Optional[bytes]:
        rel = self.entries.get(key)
        if rel is None:
            return None
        with open(self.root / rel, "rb") as fh:
            return fh.read()

    def record(self, result: TracerouteResult) -> None:
        i = result.definition_ref
        self.state.pending.discard(i)
        self.state.completed.add(i)
        self.state.outcomes[i] = {
            "status": result.status,
            "reason": result.reason,
            "measurement_id": result.measurement_id,
        }

    def save(self) -> None:
        atomic_write_text(self.root / "state.json", self.state.to_json())
        index = {"entries": {k: self.entries[k] for k in sorted(self.entries)}}
        atomic_write_text(self.root / "index.json", json.dumps(index, indent=1) + "\n")

    def results(self, plan: Plan) -> list:
        """Re-parse every completed definition from the raw store, in plan order."""
        out = []
        for i in sorted(self.state.completed):
            d = plan.definitions[i]
            raw = self.read_raw(d.key)
            outcome = self.state.outcomes.get(i, {})
            if raw is None:
                out.append(TracerouteResult(i, "failed", reason=outcome.get("reason", "no raw result"),
                                            measurement_id=outcome.get("measurement_id")))
            else:
                out.append(parse_result(raw, i, outcome.get("measurement_id")))
        return out


@dataclass
class Execution:
    state: RunState
    results: list
    suspended: bool = False
    reason: str = ""


def iter_execute(plan: Plan, backend, store: RunStore, limits: Limits = Limits(),
                 on_suspend=None) -> Iterator[TracerouteResult]:
    """Execute the store's pending definitions, yielding results in completion order.

    A ``BackendSuspended`` from the backend stops scheduling; in-flight work
    is drained and persisted, and ``on_suspend(reason)`` is called.
    """
    pending = sorted(store.state.pending)
    limiter = RateLimiter(limits.requests_per_second)
    suspended = threading.Event()

    def work(i):
        if suspended.is_set():
            return i, None, None
        limiter.acquire()
        try:
            return i, backend.fetch(plan.definitions[i]), None
        except BackendSuspended as exc:
            suspended.set()
            return i, None, exc

    since_flush = 0
    reason = ""
    with ThreadPoolExecutor(max_workers=max(1, limits.parallelism)) as pool:
        queue = iter(pending)
        running = set()

        def refill():
            while len(running) < max(1, limits.parallelism) and not suspended.is_set():
                try:
                    running.add(pool.submit(work, next(queue)))
                except StopIteration:
                    return

        refill()
        while running:
            finished, _ = wait(running, return_when=FIRST_COMPLETED)
            for fut in sorted(finished, key=lambda f: f.result()[0]):
                running.discard(fut)
                i, fetched, exc = fut.result()
                if exc is not None:
                    reason = str(exc)
                    continue
                if fetched is None:
                    continue  # skipped after suspension; stays pending
                d = plan.definitions[i]
                if fetched.raw is not None:
                    store.write_raw(d.key, fetched.raw)
                    result = parse_result(fetched.raw, i, fetched.measurement_id)
                else:
                    result = TracerouteResult(i, "failed", measurement_id=fetched.measurement_id,
                                              reason=fetched.reason or "no response")
                store.record(result)
                since_flush += 1
                if since_flush >= limits.flush_every:
                    store.save()
                    since_flush = 0
                yield result
            refill()
    store.save()
    if suspended.is_set() and on_suspend is not None:
        on_suspend(reason or "suspended")


def execute(plan: Plan, backend, store_dir: os.PathLike, limits: Limits = Limits()) -> Execution:
    """Run (or resume) ``plan`` into ``store_dir``; only pending definitions execute."""
    store = RunStore.open(store_dir, plan)
    stop = []
    results = list(iter_execute(plan, backend, store, limits, on_suspend=stop.append))
    if stop:
        log.warning("run suspended: %s (%d pending)", stop[0], len(store.state.pending))
    return Execution(store.state, results, bool(stop), stop[0] if stop else "")
