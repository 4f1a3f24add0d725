import json

import pytest

from fedledger.adapter import (AdapterRule, FederationAdapter, METRIC_UNITS,
                               SensorEvent, parse_event_line)
from fedledger.errors import NoMatchingRule
from fedledger.ledger import LedgerConfig


def line(platform="SF", device="sf-01", metric="soil_moisture", value=312,
         ts=1000, unit=None, **extra):
    obj = {"platform": platform, "device": device, "metric": metric,
           "value": value, "unit": unit or METRIC_UNITS[metric], "ts": ts}
    obj.update(extra)
    return json.dumps(obj)


def sf_rule(ledger_id="sf-chain", signer="sf-adapter", metrics=()):
    return AdapterRule(platform="SF", metrics=frozenset(metrics),
                       ledger_id=ledger_id, contract="provenance",
                       method="record", signer=signer)


class RecordingPort:
    """Interface audit stub: records every call crossing the boundary."""

    def __init__(self, reject_with=None):
        self.calls = []
        self.reject_with = reject_with

    def submit_transaction(self, ledger_id, tx):
        self.calls.append(("submit_transaction", ledger_id, tx))
        if self.reject_with is not None:
            raise self.reject_with

    def __getattr__(self, name):
        raise AssertionError(f"adapter crossed the boundary via '{name}'")


def make_adapter(dep=None, port=None, rules=None):
    from fedledger.crypto import Keypair
    signer = Keypair.from_name(3, "sf-adapter")
    if dep is not None:
        dep.keyring.add("sf-adapter", signer)
        dep.registry.register(signer.address, signer.public_bytes)
        port = dep
    return FederationAdapter(rules or [sf_rule()], {"sf-adapter": signer},
                             port or RecordingPort())


# --- ingestion ---------------------------------------------------------

def test_valid_line_accepted():
    adapter = make_adapter()
    report = adapter.ingest_lines([line()])
    assert len(report.accepted) == 1 and not report.rejected
    event = report.accepted[0]
    assert event.metric == "soil_moisture" and event.value == 312


def test_duplicate_line_rejected_second_time():
    adapter = make_adapter()
    report = adapter.ingest_lines([line(), line()])
    assert len(report.accepted) == 1
    assert report.rejected == [(2, "DuplicateEvent")]


def test_duplicates_deduped_across_batches():
    adapter = make_adapter()
    adapter.ingest_lines([line()])
    report = adapter.ingest_lines([line()])
    assert report.rejected == [(1, "DuplicateEvent")]


def test_unknown_metric_rejected():
    adapter = make_adapter()
    report = adapter.ingest_lines([line(metric="vibe", unit="vibes")])
    assert report.rejected == [(1, "UnknownMetric")]


def test_wrong_unit_rejected():
    adapter = make_adapter()
    report = adapter.ingest_lines([line(unit="fahrenheit")])
    assert report.rejected == [(1, "UnknownMetric")]


def test_malformed_lines_never_abort_stream():
    adapter = make_adapter()
    report = adapter.ingest_lines([
        "not json at all",
        json.dumps({"platform": "SF"}),
        json.dumps({"platform": "SF", "device": "d", "metric": "temperature",
                    "unit": "celsius_x1000", "ts": -5, "value": 1}),
        line(ts=2000),
        json.dumps({"platform": "SF", "device": "d", "metric": "temperature",
                    "unit": "celsius_x1000", "ts": 1, "value": "hot"}),
    ])
    assert len(report.accepted) == 1
    assert [r[1] for r in report.rejected] == ["ParseError"] * 4


def test_gps_events_carry_coordinate_pair():
    raw = json.dumps({"platform": "SF", "device": "gps-1", "metric": "gps",
                      "unit": "microdeg", "ts": 10,
                      "value": [42560000, 12646000]})
    event = parse_event_line(raw)
    assert (event.lat, event.lon) == (42560000, 12646000)
    assert event.to_args()["lat"] == 42560000


def test_idempotency_key_ignores_value():
    a = parse_event_line(line(value=1))
    b = parse_event_line(line(value=2))
    c = parse_event_line(line(ts=1001))
    assert a.idempotency_key == b.idempotency_key
    assert a.idempotency_key != c.idempotency_key


# --- mapping -------------------------------------------------------------

def test_first_matching_rule_wins():
    rule_one = sf_rule(ledger_id="first")
    rule_two = sf_rule(ledger_id="second")
    adapter = FederationAdapter(
        [rule_one, rule_two],
        {"sf-adapter": __import__("fedledger.crypto", fromlist=["Keypair"])
         .Keypair.from_name(3, "sf-adapter")},
        RecordingPort())
    event = parse_event_line(line())
    ledger_id, call, rule = adapter.map_event(event)
    assert ledger_id == "first" and rule is rule_one
    assert call.contract == "provenance" and call.method == "record"


def test_metric_filtered_rule_skipped():
    temp_only = sf_rule(ledger_id="temps", metrics=["temperature"])
    fallback = sf_rule(ledger_id="rest")
    adapter = FederationAdapter(
        [temp_only, fallback],
        {"sf-adapter": __import__("fedledger.crypto", fromlist=["Keypair"])
         .Keypair.from_name(3, "sf-adapter")},
        RecordingPort())
    assert adapter.map_event(parse_event_line(line()))[0] == "rest"
    assert adapter.map_event(
        parse_event_line(line(metric="temperature", value=20000)))[0] == "temps"


def test_no_matching_rule():
    adapter = make_adapter()
    event = parse_event_line(line(platform="XX"))
    with pytest.raises(NoMatchingRule):
        adapter.map_event(event)


# --- submission -----------------------------------------------------------

def test_flush_preserves_ts_order_per_ledger(dep):
    dep.create_ledger(LedgerConfig(ledger_id="sf-chain", kind="open"))
    adapter = make_adapter(dep=dep)
    lines = [line(ts=ts, device=f"d{ts % 3}") for ts in (5, 3, 9, 1, 7)]
    ingest = adapter.ingest_lines(lines)
    report = adapter.flush_batch(ingest.accepted)
    assert report.per_ledger == {"sf-chain": 5}
    dep.seal_block("sf-chain")
    sealed = dep.ledger("sf-chain").chain[-1].transactions
    ts_order = [tx.call.args["ts"] for tx in sealed]
    assert ts_order == sorted(ts_order)


def test_flush_records_rejections_verbatim(dep):
    member = dep.actor("insider")
    dep.create_ledger(LedgerConfig(
        ledger_id="sf-chain", kind="permissioned",
        members=frozenset([member.address]), authority=member.address))
    adapter = make_adapter(dep=dep)  # adapter signer is not a member
    ingest = adapter.ingest_lines([line(ts=t) for t in range(10)])
    report = adapter.flush_batch(ingest.accepted)
    assert report.per_ledger == {}
    assert len(report.failures) == 10
    assert {f["reason"] for f in report.failures} == {"NotMember"}


def test_empty_batch_empty_report():
    adapter = make_adapter()
    report = adapter.flush_batch([])
    assert report.per_ledger == {} and not report.failures


def test_adapter_touches_only_the_submission_port():
    port = RecordingPort()
    adapter = make_adapter(port=port)
    ingest = adapter.ingest_lines([line(ts=t) for t in range(3)])
    adapter.flush_batch(ingest.accepted)
    assert len(port.calls) == 3
    assert {c[0] for c in port.calls} == {"submit_transaction"}


def test_exactly_once_under_duplicated_stream(dep):
    dep.create_ledger(LedgerConfig(ledger_id="sf-chain", kind="open"))
    adapter = make_adapter(dep=dep)
    unique = [line(ts=t, device=f"d{t}") for t in range(20)]
    stream = unique + unique[::4]  # 20% duplicates appended
    ingest, flush = adapter.ingest_and_flush(stream)
    dep.seal_block("sf-chain")
    sealed_keys = [
        SensorEvent(platform=tx.call.args["platform"],
                    device=tx.call.args["device"],
                    metric=tx.call.args["metric"],
                    unit=tx.call.args["unit"],
                    ts=tx.call.args["ts"]).idempotency_key
        for block in dep.ledger("sf-chain").chain
        for tx in block.transactions
    ]
    assert len(sealed_keys) == 20
    assert len(set(sealed_keys)) == 20
    assert len(ingest.rejected) == 5
