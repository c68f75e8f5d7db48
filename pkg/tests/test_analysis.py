import csv
import io
import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_side_table
from torcorr.analysis import (AnalysisError, CorrelationRow, Diagnostics, PathObservation, SIDE_COLUMNS, SideTable,
                              analysis_coverage, build_side_table, combine, extract_observation, filter_significant,
                              records_csv, records_json, side_table_records)
from torcorr.asn_map import load_ip2asn_files
from torcorr.consensus import AsStats
from torcorr.executor import HopRecord, TracerouteResult
from torcorr.planner import MeasurementDefinition, Plan

MAP = (
    "192.0.2.0\t192.0.2.255\t100\tDE\tCLIENT-NET\n"
    "198.51.100.0\t198.51.100.127\t200\tDE\tTRANSIT-A\n"
    "198.51.100.128\t198.51.100.255\t300\tNL\tTRANSIT-B\n"
    "203.0.113.0\t203.0.113.255\t400\tFR\tRELAY-HOST\n"
)


@pytest.fixture(scope="module")
def mapper():
    return load_ip2asn_files(MAP.encode())


def result(*ips, status="success"):
    hops = tuple(HopRecord(i + 1, ((ip, None if ip is None else 1.0),)) for i, ip in enumerate(ips))
    return TracerouteResult(0, status, hops)


def obs(relay, p, seen, side="entry", endpoint=1):
    return PathObservation(side, endpoint, relay, p, frozenset(seen | {endpoint}))


def guard_stats(probs):
    return [AsStats(a, 1, 0, p, 0.0, "v4") for a, p in probs.items()]


# extract_observation


def test_observed_set_from_hops(mapper):
    d = MeasurementDefinition("D1", 1, 100, "203.0.113.9", 400, "v4")
    diag = Diagnostics()
    o = extract_observation(result("10.0.0.1", "198.51.100.3", None, "198.51.100.200", "203.0.113.9"),
                            d, mapper, 0.25, diag)
    assert o.observed_asns == {100, 200, 300, 400}
    assert (o.side, o.endpoint_asn, o.relay_asn, o.relay_probability) == ("entry", 100, 400, 0.25)
    assert (diag.unmapped_hops, diag.no_reply_hops) == (1, 1)


def test_degenerate_path_is_just_source(mapper):
    d = MeasurementDefinition("D4", 5, 400, "192.0.2.1", 100, "v4")
    o = extract_observation(result(None, "10.1.1.1", None), d, mapper, 0.1)
    assert o.observed_asns == {400}
    assert (o.side, o.endpoint_asn, o.relay_asn) == ("entry", 100, 400)


def test_d3_direction_normalized(mapper):
    d = MeasurementDefinition("D3", 9, 300, "203.0.113.1", 400, "v4")
    o = extract_observation(result("203.0.113.1"), d, mapper, 0.2)
    assert (o.side, o.endpoint_asn, o.relay_asn, o.relay_probability) == ("exit", 300, 400, 0.2)
    d2 = MeasurementDefinition("D2", 9, 400, "198.51.100.200", 300, "v4")
    assert extract_observation(result("198.51.100.200"), d2, mapper, 0.2).endpoint_asn == 300


def test_failed_and_timeout_give_no_observation(mapper):
    d = MeasurementDefinition("D1", 1, 100, "203.0.113.9", 400, "v4")
    assert extract_observation(result(status="failed"), d, mapper, 0.1) is None
    assert extract_observation(result(None, status="timeout"), d, mapper, 0.1) is None


# build_side_table


def test_two_guard_example():
    # g1 (.3) seen forward through t1; g2 (.2) seen on the reverse path through t1 and t2
    t = build_side_table([obs(11, 0.3, {11, 21}), obs(12, 0.2, {12, 21, 22})], guard_stats({11: 0.3, 12: 0.2}))
    assert math.isclose(t.p(21), 0.5) and math.isclose(t.p(22), 0.2)
    assert t.rows[11].p_relays == 0.3 and t.rows[11].role == "relay"
    assert t.rows[21].role == "transit"
    assert math.isclose(t.p(1), 0.5) and t.rows[1].role == "endpoint"


def test_single_accrual_per_pair():
    fwd, rev = obs(11, 0.3, {11, 21}), obs(11, 0.3, {11, 21})
    t = build_side_table([fwd, rev, obs(11, 0.3, {11, 21, 22})], guard_stats({11: 0.3}))
    assert t.rows[21].p_total == 0.3
    assert t.rows[21].route_count == 3
    assert t.rows[22].route_count == 1


def test_relay_host_on_another_pairs_route():
    # AS 12 hosts guards but mostly shows up as transit for AS 11's paths
    t = build_side_table([obs(11, 0.4, {11, 12}), obs(12, 0.1, {12})], guard_stats({11: 0.4, 12: 0.1}))
    row = t.rows[12]
    assert (row.p_relays, row.p_routes) == (0.1, 0.4)
    assert row.role == "transit"
    assert t.rows[11].role == "relay"


def test_scenario_endpoints_take_precedence():
    t = build_side_table([obs(11, 0.4, {11, 50})], guard_stats({11: 0.4, 50: 0.2}), endpoint_asns={50})
    assert t.rows[50].role == "endpoint"


def test_mismatched_observations_rejected():
    with pytest.raises(AnalysisError):
        build_side_table([obs(11, 0.1, set()), obs(12, 0.1, set(), endpoint=2)])
    with pytest.raises(AnalysisError):
        build_side_table([obs(11, 0.1, set()), obs(12, 0.1, set(), side="exit")])
    with pytest.raises(AnalysisError):
        build_side_table([])
    empty = build_side_table([], side="exit", endpoint_asn=5)
    assert empty.rows == {}


def test_relay_stats_override_observation_probability():
    t = build_side_table([obs(11, 0.9, {11})], guard_stats({11: 0.25}))
    assert t.p(11) == 0.25


def test_cogent_row(single_scan):
    entry = single_scan.analysis().entry[1764]
    row = entry.rows[174]
    assert (round(row.p_relays, 3), round(row.p_routes, 3), round(row.p_total, 3)) == (0.002, 0.121, 0.123)
    assert row.route_count == 110


# property suite


def instance(draw_or_rng):
    """Random small instance: <=10 relay ASes, <=8 transit ASes, a few traceroutes per pair."""
    rng = draw_or_rng
    relays = rng.sample(range(100, 200), rng.randint(1, 10))
    transits = rng.sample(range(500, 600), rng.randint(0, 8))
    probs = {r: rng.choice([0.0, rng.random() / 10]) for r in relays}
    # some transit ASes also host relays of this side
    for t in transits:
        if rng.random() < 0.2:
            probs[t] = rng.random() / 20
    observations = []
    for r in relays:
        for _ in range(rng.randint(1, 3)):
            seen = {r, 1} | {t for t in transits if rng.random() < 0.4}
            if rng.random() < 0.2:
                seen |= {rng.choice(relays)}
            observations.append((r, frozenset(seen)))
    return observations, probs


def table_for(observations, probs, endpoints=()):
    side_obs = [PathObservation("entry", 1, r, probs.get(r, 0.0), seen) for r, seen in observations]
    stats = [AsStats(a, 1, 0, p, 0.0, "v4") for a, p in sorted(probs.items())]
    return build_side_table(side_obs, stats, endpoints, side="entry", endpoint_asn=1)


def as_tuples(table: SideTable):
    return {a: (r.p_total, r.p_relays, r.p_routes, r.route_count, r.role) for a, r in table.rows.items()}


def assert_matches_oracle(observations, probs, endpoints=()):
    got = as_tuples(table_for(observations, probs, endpoints))
    want = brute_force_side_table(observations, probs, {1, *endpoints})
    assert got.keys() == want.keys()
    for asn in want:
        g, w = got[asn], want[asn]
        assert all(math.isclose(a, b, abs_tol=1e-12) for a, b in zip(g[:3], w[:3])), asn
        assert g[3:] == w[3:], asn


seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=150, deadline=None)
@given(seed=seeds)
def test_matches_brute_force(seed):
    observations, probs = instance(random.Random(seed))
    assert_matches_oracle(observations, probs)


@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_decomposition_and_bounds(seed):
    observations, probs = instance(random.Random(seed))
    t = table_for(observations, probs)
    cap = math.fsum(probs.get(r, 0.0) for r in {r for r, _ in observations})
    for row in t.rows.values():
        assert row.p_total == row.p_relays + row.p_routes
        assert 0 <= row.p_total <= cap + 1e-12
    # the endpoint is on every path of its own
    assert math.isclose(t.p(1), cap, abs_tol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_adding_observation_never_lowers_probability(seed):
    rng = random.Random(seed)
    observations, probs = instance(rng)
    before = table_for(observations, probs)
    relay = rng.choice(sorted(probs))
    extra = frozenset({relay, 1} | set(rng.sample(range(500, 600), 3)))
    after = table_for(observations + [(relay, extra)], probs)
    for asn, row in before.rows.items():
        assert after.rows[asn].p_total >= row.p_total


@settings(max_examples=100, deadline=None)
@given(seed=seeds, shuffle_seed=seeds)
def test_permutation_invariant(seed, shuffle_seed):
    observations, probs = instance(random.Random(seed))
    shuffled = list(observations)
    random.Random(shuffle_seed).shuffle(shuffled)
    assert table_for(observations, probs) == table_for(shuffled, probs)


# combine and filter


def side(kind, endpoint, rows):
    from torcorr.analysis import SideRow

    return SideTable(kind, endpoint, {a: SideRow(p, 0.0, p, 1, role) for a, (p, role) in rows.items()})


def test_combine_product():
    entry = side("entry", 1, {24940: (0.224, "relay"), 3356: (0.3, "transit"), 1: (1.0, "endpoint")})
    exit_ = side("exit", 24940, {24940: (1.0, "endpoint"), 3356: (0.05, "transit")})
    rows = combine(entry, [exit_])
    assert [r.asn for r in rows] == [24940, 3356]
    assert rows[0].p_and == 0.224 and rows[0].role == "endpoint"
    assert math.isclose(rows[1].p_and, 0.015)


def test_worst_case_takes_max_over_destinations():
    entry = side("entry", 1, {7: (0.5, "transit")})
    exits = [side("exit", 10, {7: (0.1, "transit")}), side("exit", 11, {7: (0.4, "transit")}),
             side("exit", 12, {})]
    (row,) = combine(entry, exits)
    assert row.p_exit == 0.4 and math.isclose(row.p_and, 0.2)
    per = combine(entry, exits, mode="per_destination")
    assert [(r.destination_asn, r.p_exit) for r in per] == [(10, 0.1), (11, 0.4)]


def test_combine_errors():
    entry = side("entry", 1, {})
    with pytest.raises(AnalysisError):
        combine(entry, [])
    with pytest.raises(AnalysisError):
        combine(entry, [entry])
    with pytest.raises(AnalysisError):
        combine(entry, [side("exit", 2, {})], mode="median")


@settings(max_examples=200, deadline=None)
@given(
    entry=st.dictionaries(st.integers(1, 20), st.floats(0, 1), max_size=10),
    exits=st.lists(st.dictionaries(st.integers(1, 20), st.floats(0, 1), max_size=10), min_size=1, max_size=4),
    shuffle_seed=seeds,
)
def test_combination_bounds_and_destination_order(entry, exits, shuffle_seed):
    e = side("entry", 1, {a: (p, "transit") for a, p in entry.items()})
    xs = [side("exit", 100 + i, {a: (p, "transit") for a, p in x.items()}) for i, x in enumerate(exits)]
    rows = combine(e, xs)
    for r in rows:
        assert 0 <= r.p_and <= min(r.p_guard, r.p_exit)
        assert r.p_and == r.p_guard * r.p_exit
    assert [r.p_and for r in rows] == sorted((r.p_and for r in rows), reverse=True)
    random.Random(shuffle_seed).shuffle(xs)
    assert combine(e, xs) == rows


def test_filter_significant():
    keep = CorrelationRow(24940, 0.224, 1.0, 0.224, "endpoint")
    low = CorrelationRow(7, 0.009, 0.5, 0.0045, "transit")
    assert filter_significant([keep, low]) == [keep]
    assert filter_significant([keep, low], threshold=0) == [keep, low]
    assert filter_significant([keep], include_endpoints=False) == []


# coverage and export


def test_analysis_coverage():
    defs = (MeasurementDefinition("D1", 1, 1, "192.0.2.1", 10, "v4"),
            MeasurementDefinition("D1", 1, 1, "192.0.2.2", 11, "v4"))
    plan = Plan("c", defs)
    seen = [PathObservation("entry", 1, 10, 0.6, frozenset({1, 10}), "D1", 0)]
    cov = analysis_coverage(seen, plan)
    assert cov.entry_probability == 0.6 and cov.exit_probability == 0
    assert cov.planned["D1"] == 2 and cov.succeeded["D1"] == 1 and cov.success_rate == 0.5
    none = analysis_coverage([], plan)
    assert none.entry_probability == 0 and none.success_rate == 0


def test_records_render_three_decimals():
    t = side("entry", 1, {5: (0.0149, "transit"), 6: (0.0005, "transit")})
    text = records_csv(side_table_records(t, names=lambda a: f"AS{a}-NAME"), SIDE_COLUMNS)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == list(SIDE_COLUMNS)
    assert rows[1] == ["5", "AS5-NAME", "transit", "0.015", "0.000", "0.015", "1"]
    assert rows[2][3] == "0.001"
    # JSON keeps full precision and column order
    doc = json.loads(records_json(side_table_records(t), SIDE_COLUMNS))
    assert list(doc[0]) == list(SIDE_COLUMNS) and doc[0]["p_total"] == 0.0149
