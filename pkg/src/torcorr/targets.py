"""Client and destination AS sets for a measurement scenario."""

from __future__ import annotations

import csv
import io
import logging
import os
import socket
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from ipaddress import ip_address
from pathlib import Path
from typing import Iterable, Optional, Sequence

import yaml

from .asn_map import AsnDatabase, lookup
from .inventory import as_inventory, select_probe

log = logging.getLogger(__name__)


class ScenarioError(ValueError):
    pass


# toplist depth per family; IPv6 needs a deeper list to find enough dual-stack sites
DEFAULT_TOP_K = {"v4": 100, "v6": 250}


@dataclass(frozen=True)
class ScenarioSpec:
    """Declarative scenario.

    ``client_rule`` is ``{"top_n_by_probe_count": {"country": .., "n": ..}}``
    or ``{"explicit": [asn, ...]}``; ``destination_rule`` is one of
    ``toplist``, ``blocked_list`` or ``explicit`` (see README for keys).
    """

    label: str
    family: str
    client_rule: dict
    destination_rule: dict
    union_clients: tuple = ()
    union_destinations: tuple = ()
    fallback_count: int = 0
    repeat: int = 1
    base_dir: Optional[Path] = None

    def __post_init__(self):
        if self.family not in ("v4", "v6"):
            raise ScenarioError(f"family must be v4 or v6, got {self.family!r}")
        if len(self.client_rule) != 1 or len(self.destination_rule) != 1:
            raise ScenarioError("client_rule and destination_rule need exactly one rule each")
        (kind, args), = self.client_rule.items()
        if kind == "top_n_by_probe_count":
            if int(args.get("n", 0)) < 1:
                raise ScenarioError("client n must be >= 1")
        elif kind != "explicit":
            raise ScenarioError(f"unknown client rule {kind!r}")
        (kind, args), = self.destination_rule.items()
        if kind == "toplist":
            if int(args.get("top_k", DEFAULT_TOP_K[self.family])) < 1:
                raise ScenarioError("destination top_k must be >= 1")
        elif kind not in ("blocked_list", "explicit"):
            raise ScenarioError(f"unknown destination rule {kind!r}")


def load_scenario(path) -> ScenarioSpec:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    union = doc.get("union_with") or {}
    if isinstance(union, list):
        union = {"clients": union, "destinations": union}
    try:
        return ScenarioSpec(
            label=str(doc["label"]),
            family=str(doc.get("family", "v4")),
            client_rule=dict(doc["client_rule"]),
            destination_rule=dict(doc["destination_rule"]),
            union_clients=tuple(int(a) for a in union.get("clients", ())),
            union_destinations=tuple(int(a) for a in union.get("destinations", ())),
            fallback_count=int(doc.get("fallback_count", 0)),
            repeat=int(doc.get("repeat", 1)),
            base_dir=path.parent,
        )
    except KeyError as exc:
        raise ScenarioError(f"{path}: missing key {exc}") from None


def load_domain_list(source) -> list:
    """Rank-ordered domains from ``rank,domain`` CSV or bare ``domain`` lines."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    elif isinstance(source, bytes):
        text = source.decode("utf-8")
    else:
        text = source.read()
    ranked, bare = [], []
    for row in csv.reader(io.StringIO(text)):
        if not row or not row[0].strip() or row[0].startswith("#"):
            continue
        if len(row) >= 2:
            try:
                ranked.append((int(row[0]), row[1].strip()))
                continue
            except ValueError:
                pass
        bare.append(row[-1].strip())
    if ranked:
        return [d for _, d in sorted(ranked, key=lambda t: t[0])] + bare
    return bare


@dataclass(frozen=True)
class Resolution:
    domain: str
    addresses: tuple = ()
    reason: str = ""


class FixtureResolver:
    """Offline resolver backed by ``domain<TAB>family<TAB>ip[,ip...]`` lines."""

    def __init__(self, source):
        if isinstance(source, (str, os.PathLike)):
            with open(source, encoding="utf-8") as fh:
                text = fh.read()
        else:
            text = source.decode("utf-8") if isinstance(source, bytes) else source.read()
        self._answers = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"resolver fixture line {lineno}: expected 3 tab-separated fields")
            domain, family, ips = parts
            addrs = tuple(str(ip_address(ip.strip())) for ip in ips.split(",") if ip.strip())
            self._answers[domain.strip().lower(), family.strip()] = addrs

    def lookup(self, domain: str, family: str) -> Resolution:
        addrs = self._answers.get((domain.lower(), family))
        if not addrs:
            return Resolution(domain, (), "no records")
        return Resolution(domain, addrs)


class SystemResolver:
    """Live resolver using the host's stub resolver."""

    def __init__(self, timeout: float = 5.0):
        self.timeout = timeout

    def lookup(self, domain: str, family: str) -> Resolution:
        af = socket.AF_INET if family == "v4" else socket.AF_INET6
        try:
            infos = socket.getaddrinfo(domain, None, af, socket.SOCK_STREAM)
        except socket.gaierror as exc:
            return Resolution(domain, (), f"no records ({exc.strerror})")
        except OSError as exc:
            return Resolution(domain, (), f"timeout ({exc})")
        seen = []
        for info in infos:
            addr = str(ip_address(info[4][0]))
            if addr not in seen:
                seen.append(addr)
        return Resolution(domain, tuple(seen), "" if seen else "no records")


def resolve(resolver, domain: str, family: str) -> Resolution:
    """Addresses of ``family`` for ``domain``; backend errors become an empty answer."""
    try:
        return resolver.lookup(domain, family)
    except Exception as exc:  # noqa: BLE001 - one bad domain must not stop the batch
        return Resolution(domain, (), f"resolver error: {exc}")


def derive_clients(inventory, country: str, n: int, family: str) -> list:
    """The ``n`` ASes of ``country`` hosting the most eligible probes (ties: lower ASN)."""
    counts = Counter(
        p.asn(family) for p in as_inventory(inventory)
        if p.eligible(family) and (p.country_code or "").upper() == country.upper()
    )
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if len(ranked) < n:
        log.warning("only %d candidate client ASes in %s (wanted %d)", len(ranked), country, n)
    return [asn for asn, _ in ranked[:n]]


@dataclass(frozen=True)
class DestinationCandidate:
    asn: int
    domains: tuple
    address: str  # lowest resolved address seen for this AS


def derive_destinations(
    domains: Sequence[str],
    resolver,
    mapper: AsnDatabase,
    inventory,
    top_k: Optional[int],
    family: str,
    country_filter: Optional[Iterable[str]] = None,
    max_in_flight: int = 16,
) -> list:
    """Resolve the first ``top_k`` domains and keep ASes that host an eligible probe.

    Resolution runs concurrently but results are consumed in rank order,
    so output never depends on scheduling.
    """
    inv = as_inventory(inventory)
    wanted = list(domains if top_k is None else domains[:top_k])
    countries = {c.upper() for c in country_filter} if country_filter else None
    with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
        answers = list(pool.map(lambda d: resolve(resolver, d, family), wanted))

    order, found = [], {}
    for answer in answers:
        if not answer.addresses:
            log.info("skipping %s: %s", answer.domain, answer.reason or "no records")
            continue
        for addr in answer.addresses:
            asn = lookup(mapper, addr)
            if asn is None:
                continue
            if countries is not None and mapper.country(asn).upper() not in countries:
                continue
            if not inv.eligible_in(asn, family):
                continue
            if asn not in found:
                order.append(asn)
                found[asn] = ([], [])
            doms, addrs = found[asn]
            if answer.domain not in doms:
                doms.append(answer.domain)
            addrs.append(ip_address(addr))
    return [DestinationCandidate(asn, tuple(found[asn][0]), str(min(found[asn][1]))) for asn in order]


@dataclass(frozen=True)
class TargetSets:
    family: str
    clients: tuple = ()        # (asn, probe_id)
    destinations: tuple = ()   # (asn, probe_id, domains)
    dropped: tuple = ()        # human-readable report lines


def _with_probes(asns: Iterable[int], inv, family: str, role: str, dropped: list) -> list:
    out, seen = [], set()
    for asn in asns:
        if asn in seen:
            continue
        seen.add(asn)
        probe = select_probe(inv, asn, family)
        if probe is None:
            dropped.append(f"{role} AS{asn}: no eligible {family} probe")
            continue
        out.append((asn, probe.probe_id))
    return out


def build_targets(scenario: ScenarioSpec, inventory, mapper: AsnDatabase, resolver=None) -> TargetSets:
    inv = as_inventory(inventory)
    family = scenario.family
    dropped = []

    (kind, args), = scenario.client_rule.items()
    if kind == "explicit":
        clients = [int(a) for a in args]
    else:
        clients = derive_clients(inv, args["country"], int(args["n"]), family)
    clients = clients + [a for a in scenario.union_clients if a not in clients]

    (kind, args), = scenario.destination_rule.items()
    domains_by_asn = {}
    if kind == "explicit":
        dests = [int(a) for a in args]
    else:
        if resolver is None:
            raise ScenarioError(f"destination rule {kind!r} needs a resolver")
        path = Path(args["domains"])
        if not path.is_absolute() and scenario.base_dir is not None:
            path = scenario.base_dir / path
        domain_list = load_domain_list(path)
        top_k = args.get("top_k", DEFAULT_TOP_K[family] if kind == "toplist" else None)
        cands = derive_destinations(
            domain_list, resolver, mapper, inv,
            None if top_k is None else int(top_k), family,
            args.get("country_filter"),
        )
        dests = [c.asn for c in cands]
        domains_by_asn = {c.asn: c.domains for c in cands}
    dests = dests + [a for a in scenario.union_destinations if a not in dests]

    client_pairs = _with_probes(clients, inv, family, "client", dropped)
    dest_pairs = _with_probes(dests, inv, family, "destination", dropped)
    for line in dropped:
        log.warning(line)
    return TargetSets(
        family=family,
        clients=tuple(client_pairs),
        destinations=tuple((asn, pid, domains_by_asn.get(asn, ())) for asn, pid in dest_pairs),
        dropped=tuple(dropped),
    )
