"""Generate the synthetic single-client/single-destination fixture.

One client AS (1764 NEXTLAYER) and one destination AS (24940 HETZNER),
563 guard ASes and 240 exit ASes. Probabilities are integer units of
1e-4 so every expected table value is exact by construction:

    entry  LEVEL3   P .330 = .002 own + .328 via 47 guard ASes, R 59
           HETZNER  P .224 own, R 2
           OVH      P .131 = .130 own + .0004 via one guard AS, R 2
           COGENT   P .123 = .002 own + .121 via 89 guard ASes, R 110
    exit   ZWIEBELFR P .221 own, R 1; INTERDOTL .221 transit, R 1
           AS-ANX   P .162 via two exit ASes, R 2
           HURRICANE P .130 = .002 own + .128 via 22 exit ASes, R 28

12 guard ASes and 5 exit ASes carry a second probe; their primary probe
times out, so 1194 planned traceroutes yield 1177 successes.

Usage: python scripts/make_single_scan_fixture.py [OUT_DIR]
"""

from __future__ import annotations

import ipaddress
import json
import random
import sys
from pathlib import Path

CLIENT, DEST = 1764, 24940
LEVEL3, COGENT, OVH = 3356, 174, 16276
ZWIEBEL, INTERDOTL, ANX, HURRICANE = 60729, 25291, 47147, 6939
ENTRY_TRANSITS = (1299, 2914, 3257, 6695)
EXIT_TRANSITS = (6461, 9002, 3223, 2828, 1273)
HOP_ORIGIN = 4200000000  # filler ASNs live in the private 32-bit range

NAMES = {
    CLIENT: ("NEXTLAYER-AS", "AT"), DEST: ("HETZNER-AS", "DE"), LEVEL3: ("LEVEL3", "US"),
    COGENT: ("COGENT-174", "US"), OVH: ("OVH", "FR"), ZWIEBEL: ("ZWIEBELFREUNDE", "DE"),
    INTERDOTL: ("INTERDOTLTD", "GB"), ANX: ("AS-ANX", "NL"), HURRICANE: ("HURRICANE", "US"),
    1299: ("TWELVE99", "SE"), 2914: ("NTT-LTD-2914", "US"), 3257: ("GTT-BACKBONE", "US"),
    6695: ("DECIX-AS", "DE"), 6461: ("ZAYO-6461", "US"), 9002: ("RETN-AS", "GB"),
    3223: ("VOXILITY", "RO"), 2828: ("XO-AS15", "US"), 1273: ("CW", "GB"),
}
COUNTRIES = ("DE", "US", "FR", "NL", "SE", "CH", "AT", "GB", "CA", "RO")


def spread(total: int, n: int) -> list:
    """``n`` integer units summing to ``total``, larger shares first."""
    base, extra = divmod(total, n)
    return [base + 1] * extra + [base] * (n - extra)


class Builder:
    def __init__(self, seed: int = 20221):
        self.rng = random.Random(seed)
        self.next_filler = 0
        self.blocks = {}      # asn -> block index
        self.guard = {}       # asn -> units
        self.exit = {}
        self.probes = {}      # asn -> [probe ids]; first is primary
        self.flaky = set()    # ASes whose primary probe times out
        self.entry_path = {}  # guard asn -> transit list between client and guard
        self.exit_path = {}   # exit asn -> transit list between destination and exit
        self.next_probe = 1000

    def filler(self) -> int:
        self.next_filler += 1
        return HOP_ORIGIN + self.next_filler

    def block(self, asn: int) -> int:
        if asn not in self.blocks:
            self.blocks[asn] = len(self.blocks)
        return self.blocks[asn]

    def ip(self, asn: int, host: int) -> str:
        # every other /24 is left unallocated so gaps exist between ASes
        base = int(ipaddress.IPv4Address("20.0.0.0")) + 512 * self.block(asn)
        return str(ipaddress.IPv4Address(base + host))

    def ip6(self, asn: int, host: int) -> str:
        base = int(ipaddress.IPv6Address("2a00::")) + (self.block(asn) << 80)
        return str(ipaddress.IPv6Address(base + host))

    def add_probes(self, asn: int, count: int = 1, flaky: bool = False):
        for _ in range(count):
            self.next_probe += self.rng.randint(1, 7)
            self.probes.setdefault(asn, []).append(self.next_probe)
        if flaky:
            self.flaky.add(asn)

    # topology

    def build(self):
        for asn in (CLIENT, DEST, LEVEL3, COGENT, OVH, ZWIEBEL, INTERDOTL, ANX, HURRICANE,
                    *ENTRY_TRANSITS, *EXIT_TRANSITS):
            self.block(asn)
        self.add_probes(CLIENT)
        self.add_probes(DEST)

        # guard side: 563 ASes, 10000 units
        self.guard[DEST] = 2240
        self.entry_path[DEST] = []
        self.guard[OVH] = 1304
        self.entry_path[OVH] = []
        x = self.filler()
        self.guard[x] = 4
        self.entry_path[x] = [OVH]
        self.guard[LEVEL3] = 20
        self.entry_path[LEVEL3] = []
        self.add_probes(LEVEL3)
        self.guard[COGENT] = 20
        self.entry_path[COGENT] = []
        for i, units in enumerate(spread(3280, 47)):
            a = self.filler()
            self.guard[a] = units
            self.entry_path[a] = [LEVEL3]
            if i < 10:
                self.add_probes(a)
        for i, units in enumerate(spread(1210, 89)):
            a = self.filler()
            self.guard[a] = units
            self.entry_path[a] = [COGENT]
            if i < 20:
                self.add_probes(a)
        self.guard[ZWIEBEL] = 20
        self.entry_path[ZWIEBEL] = [ENTRY_TRANSITS[0]]
        for i, units in enumerate(spread(1902, 421)):
            a = self.filler()
            self.guard[a] = units
            self.entry_path[a] = [ENTRY_TRANSITS[i % len(ENTRY_TRANSITS)]]
            if i < 238:
                self.add_probes(a, 2 if i < 12 else 1, flaky=i < 12)

        # exit side: 240 ASes, 10000 units
        self.exit[ZWIEBEL] = 2210
        self.exit_path[ZWIEBEL] = [INTERDOTL]
        for _ in range(2):
            a = self.filler()
            self.exit[a] = 810
            self.exit_path[a] = [ANX]
        self.exit[HURRICANE] = 20
        self.exit_path[HURRICANE] = []
        for i, units in enumerate(spread(1280, 22)):
            a = self.filler()
            self.exit[a] = units
            self.exit_path[a] = [HURRICANE]
            if i < 5:
                self.add_probes(a)
        for i, units in enumerate(spread(4870, 214)):
            a = self.filler()
            self.exit[a] = units
            self.exit_path[a] = [EXIT_TRANSITS[i % len(EXIT_TRANSITS)]]
            if i < 99:
                self.add_probes(a, 2 if i < 5 else 1, flaky=i < 5)

        # ASes that only host middle relays, plus an abandoned probe in OVH
        self.middle_only = [self.filler() for _ in range(6)]
        self.abandoned = {OVH: self.next_probe + 3}
        self.next_probe += 3
        self.disconnected = {COGENT: self.next_probe + 2}
        self.next_probe += 2

    # documents

    def consensus(self) -> dict:
        relays = []
        n = 0

        def relay(asn, guard_units, exit_units, flags, v6=False):
            nonlocal n
            n += 1
            fp = f"{n:040X}"
            addrs = [f"{self.ip(asn, 10 + n % 200)}:9001"]
            if v6:
                addrs.append(f"[{self.ip6(asn, n)}]:9001")
            doc = {"fingerprint": fp, "or_addresses": addrs, "flags": sorted(flags),
                   "advertised_bandwidth": 1_000_000 + 250_000 * (guard_units + exit_units)}
            if guard_units:
                doc["guard_probability"] = guard_units / 10000
            if exit_units:
                doc["exit_probability"] = exit_units / 10000
            relays.append(doc)
            return doc

        for asn in sorted(set(self.guard) | set(self.exit)):
            g, e = self.guard.get(asn, 0), self.exit.get(asn, 0)
            v6 = self.block(asn) % 3 == 0
            if g and e:
                relay(asn, g, 0, {"Guard", "Running", "Stable", "Valid"}, v6)
                relay(asn, 0, e, {"Exit", "Running", "Valid"}, v6)
            elif g >= 100:
                # big guard ASes split over a top relay and smaller ones
                top = g - (g // 4)
                relay(asn, top, 0, {"Guard", "Running", "Stable", "Valid"}, v6)
                relay(asn, g - top, 0, {"Guard", "Running", "Valid"}, v6)
            elif g:
                relay(asn, g, 0, {"Guard", "Running", "Valid"}, v6)
            else:
                relay(asn, 0, e, {"Exit", "Running", "Valid"}, v6)
            if asn in (DEST, OVH):
                relay(asn, 0, 0, {"Running", "Valid"}, v6)
        for asn in self.middle_only:
            relay(asn, 0, 0, {"Running", "Valid"}, True)
        # a relay without a usable address and one whose address is unallocated
        relays.append({"fingerprint": "F" * 40, "or_addresses": ["not-an-address:9001"],
                       "flags": ["Running"], "advertised_bandwidth": 5})
        relays.append({"fingerprint": "E" * 40, "or_addresses": ["20.0.1.77:443"],
                       "flags": ["Running", "Valid"], "advertised_bandwidth": 7})
        return {"version": "8.0", "relays_published": "2022-09-20 12:00:00", "relays": relays}

    def probe_docs(self) -> list:
        docs = []
        for asn in sorted(self.probes):
            country = NAMES.get(asn, (None, COUNTRIES[self.block(asn) % len(COUNTRIES)]))[1]
            for i, pid in enumerate(self.probes[asn]):
                doc = {"id": pid, "asn_v4": asn, "asn_v6": None, "country_code": country,
                       "address_v4": self.ip(asn, 100 + i), "address_v6": None,
                       "status": {"id": 1, "name": "Connected"}}
                if self.block(asn) % 5 == 0:
                    doc["asn_v6"] = asn
                    doc["address_v6"] = self.ip6(asn, 100 + i)
                docs.append(doc)
        for asn, pid in self.abandoned.items():
            docs.append({"id": pid, "asn_v4": asn, "asn_v6": None, "country_code": NAMES[asn][1],
                         "address_v4": self.ip(asn, 99), "address_v6": None,
                         "status": {"id": 3, "name": "Abandoned"}})
        for asn, pid in self.disconnected.items():
            docs.append({"id": pid, "asn_v4": asn, "asn_v6": None, "country_code": NAMES[asn][1],
                         "address_v4": self.ip(asn, 98), "address_v6": None,
                         "status": {"id": 2, "name": "Disconnected"}})
        docs.sort(key=lambda d: d["id"])
        return docs

    def ip2asn(self, family: str) -> str:
        rows = []
        for asn, idx in self.blocks.items():
            name, country = NAMES.get(asn, (f"AS{asn}-NET", COUNTRIES[idx % len(COUNTRIES)]))
            if family == "v4":
                lo = ipaddress.IPv4Address("20.0.0.0") + 512 * idx
                hi = lo + 255
            else:
                lo = ipaddress.IPv6Address("2a00::") + (idx << 80)
                hi = lo + (1 << 80) - 1
            rows.append((int(lo), str(lo), str(hi), asn, country, name))
        if family == "v4":
            rows.append((int(ipaddress.IPv4Address("0.0.0.0")), "0.0.0.0", "0.255.255.255", 0, "None",
                         "Not routed"))
            rows.append((int(ipaddress.IPv4Address("10.0.0.0")), "10.0.0.0", "10.255.255.255", 0, "None",
                         "Not routed"))
        rows.sort()
        return "".join(f"{lo}\t{hi}\t{asn}\t{c}\t{n}\n" for _, lo, hi, asn, c, n in rows)

    # traceroutes

    def top_relay_ip(self, asn: int, kind: str, consensus: dict) -> str:
        key = f"{kind}_probability"
        best = None
        for r in consensus["relays"]:
            p = r.get(key, 0)
            if not p:
                continue
            host = r["or_addresses"][0].rsplit(":", 1)[0]
            try:
                ipaddress.IPv4Address(host)
            except ValueError:
                continue
            if self.ip_owner(host) != asn:
                continue
            cand = (-p, r["fingerprint"], host)
            best = cand if best is None or cand < best else best
        return best[2]

    def ip_owner(self, ip: str):
        off = int(ipaddress.IPv4Address(ip)) - int(ipaddress.IPv4Address("20.0.0.0"))
        idx, host = divmod(off, 512)
        if host > 255:
            return None
        for asn, i in self.blocks.items():
            if i == idx:
                return asn
        return None

    def trace(self, src_asn, src_ip, path, dst_ip, dst_asn, probe, msm, timeout=False) -> bytes:
        hops = []

        def hop(*replies):
            hops.append({"hop": len(hops) + 1, "result": list(replies)})

        def reply(ip):
            return {"from": ip, "rtt": round(self.rng.uniform(0.3, 40.0), 3), "size": 68,
                    "ttl": 64 - len(hops)}

        if timeout:
            for _ in range(3):
                hop({"x": "*"}, {"x": "*"}, {"x": "*"})
        else:
            hop(reply(f"10.{self.rng.randint(0, 255)}.{self.rng.randint(0, 255)}.1"))
            hop(reply(self.ip(src_asn, 1)))
            for asn in path:
                if self.rng.random() < 0.15:
                    hop({"x": "*"})
                hop(reply(self.ip(asn, self.rng.randint(1, 9))))
            hop(reply(self.ip(dst_asn, 1)))
            hop(reply(dst_ip))
        doc = [{"af": 4, "dst_addr": dst_ip, "dst_name": dst_ip, "from": src_ip, "fw": 5020,
                "msm_id": msm, "prb_id": probe, "proto": "ICMP", "result": hops,
                "src_addr": src_ip, "type": "traceroute"}]
        return json.dumps(doc, sort_keys=True).encode("utf-8")

    def archive(self, consensus: dict) -> dict:
        """Archive key -> raw result bytes for every planned traceroute."""
        c_probe, d_probe = self.probes[CLIENT][0], self.probes[DEST][0]
        c_ip, d_ip = self.ip(CLIENT, 100), self.ip(DEST, 100)
        jobs = []  # (key, src_asn, src_ip, path, dst_ip, dst_asn, probe, timeout)
        for g in sorted(self.guard):
            path = self.entry_path[g]
            jobs.append((f"D1_AS{CLIENT}_AS{g}_v4", CLIENT, c_ip, path,
                         self.top_relay_ip(g, "guard", consensus), g, c_probe, False))
            for attempt, pid in enumerate(self.probes.get(g, ())[:2]):
                key = f"D4_AS{g}_AS{CLIENT}_v4" + (f"_a{attempt}" if attempt else "")
                jobs.append((key, g, self.ip(g, 100 + attempt), path[::-1], c_ip, CLIENT, pid,
                             g in self.flaky and attempt == 0))
        for e in sorted(self.exit):
            path = self.exit_path[e]
            jobs.append((f"D3_AS{DEST}_AS{e}_v4", DEST, d_ip, path,
                         self.top_relay_ip(e, "exit", consensus), e, d_probe, False))
            for attempt, pid in enumerate(self.probes.get(e, ())[:2]):
                key = f"D2_AS{e}_AS{DEST}_v4" + (f"_a{attempt}" if attempt else "")
                jobs.append((key, e, self.ip(e, 100 + attempt), path[::-1], d_ip, DEST, pid,
                             e in self.flaky and attempt == 0))
        out = {}
        for msm, (key, src, src_ip, path, dst_ip, dst, pid, timeout) in enumerate(sorted(jobs), start=40000001):
            out[key] = self.trace(src, src_ip, path, dst_ip, dst, pid, msm, timeout)
        return out


SCENARIO = """\
label: single-scan-v4
family: v4
client_rule:
  explicit: [1764]
destination_rule:
  explicit: [24940]
fallback_count: 1
"""


def write(out: Path) -> None:
    b = Builder()
    b.build()
    out.mkdir(parents=True, exist_ok=True)
    consensus = b.consensus()
    (out / "consensus.json").write_text(json.dumps(consensus, indent=1, sort_keys=True) + "\n")
    (out / "probes.json").write_text(json.dumps(b.probe_docs(), indent=1, sort_keys=True) + "\n")
    (out / "ip2asn-v4.tsv").write_text(b.ip2asn("v4"))
    (out / "ip2asn-v6.tsv").write_text(b.ip2asn("v6"))
    (out / "scenario.yaml").write_text(SCENARIO)
    archive = out / "archive"
    raw_dir = archive / "raw"
    raw_dir.mkdir(parents=True, exist_ok=True)
    for old in raw_dir.glob("*.json"):
        old.unlink()
    entries = {}
    for key, data in sorted(b.archive(consensus).items()):
        (raw_dir / f"{key}.json").write_bytes(data)
        entries[key] = f"raw/{key}.json"
    (archive / "index.json").write_text(json.dumps({"entries": entries}, indent=1) + "\n")
    print(f"wrote {len(entries)} archived traceroutes to {out}")


if __name__ == "__main__":
    default = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "single_scan"
    write(Path(sys.argv[1]) if len(sys.argv) > 1 else default)
