"""Federation adapters: NDJSON sensor feeds in, ledger transactions out.

An adapter consumes a platform's native event feed unchanged, validates and
deduplicates it, maps each event to a contract call through ordered rules,
and submits the calls in per-ledger batches. The adapter touches ledgers only
through a submission port, signs with its own per-rule identities, and tracks
its own nonces, so event producers never change and ledgers never see the
adapter's internals.

Values are fixed-point integers (scale 1000) or micro-degree coordinate
pairs; floats appear only when a gateway renders them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .codec import enc_i64, enc_str
from .contracts import ContractCall
from .crypto import Keypair, sha256
from .errors import FedLedgerError, NoMatchingRule
from .ledger import Transaction

# metric/unit pairs are a closed table; anything else is rejected
METRIC_UNITS = {
    "temperature": "celsius_x1000",
    "humidity": "pct_x1000",
    "wind_speed": "mps_x1000",
    "wind_direction": "deg_x1000",
    "rainfall": "mm_x1000",
    "soil_moisture": "pct_x1000",
    "gps": "microdeg",
    "box_presence": "bool",
    "meter_power": "wh",
}

REASON_PARSE = "ParseError"
REASON_UNKNOWN_METRIC = "UnknownMetric"
REASON_DUPLICATE = "DuplicateEvent"


@dataclass(frozen=True)
class SensorEvent:
    platform: str
    device: str
    metric: str
    unit: str
    ts: int
    value: Optional[int] = None
    lat: Optional[int] = None
    lon: Optional[int] = None
    lot: Optional[str] = None

    @property
    def idempotency_key(self) -> str:
        raw = (b"ev:" + enc_str(self.platform) + enc_str(self.device)
               + enc_str(self.metric) + enc_i64(self.ts))
        return sha256(raw).hex()

    def to_args(self) -> dict:
        args = {
            "platform": self.platform,
            "device": self.device,
            "metric": self.metric,
            "unit": self.unit,
            "ts": self.ts,
        }
        if self.metric == "gps":
            args["lat"] = self.lat
            args["lon"] = self.lon
        else:
            args["value"] = self.value
        if self.lot:
            args["lot"] = self.lot
        return args

    def to_obj(self) -> dict:
        obj = dict(self.to_args())
        obj["key"] = self.idempotency_key
        return obj


@dataclass(frozen=True)
class AdapterRule:
    """First matching rule in configuration order wins."""

    platform: str
    metrics: frozenset
    ledger_id: str
    contract: str
    method: str
    signer: str

    def matches(self, event: SensorEvent) -> bool:
        if self.platform != event.platform:
            return False
        return not self.metrics or event.metric in self.metrics


@dataclass
class IngestReport:
    accepted: List[SensorEvent] = field(default_factory=list)
    rejected: List[Tuple[int, str]] = field(default_factory=list)

    def to_obj(self) -> dict:
        return {
            "accepted": len(self.accepted),
            "rejected": [{"line": line, "reason": reason}
                         for line, reason in self.rejected],
        }


@dataclass
class FlushReport:
    per_ledger: Dict[str, int] = field(default_factory=dict)
    submitted: List[dict] = field(default_factory=list)
    failures: List[dict] = field(default_factory=list)

    def to_obj(self) -> dict:
        return {"per_ledger": self.per_ledger, "submitted": len(self.submitted),
                "failures": self.failures}


def parse_event_line(line: str) -> SensorEvent:
    """Parse one NDJSON line; raises ValueError with a reason code."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(REASON_PARSE) from exc
    if not isinstance(obj, dict):
        raise ValueError(REASON_PARSE)
    try:
        platform = obj["platform"]
        device = obj["device"]
        metric = obj["metric"]
        unit = obj["unit"]
        ts = obj["ts"]
    except KeyError as exc:
        raise ValueError(REASON_PARSE) from exc
    if not all(isinstance(v, str) and v for v in (platform, device, metric, unit)):
        raise ValueError(REASON_PARSE)
    if not isinstance(ts, int) or isinstance(ts, bool) or ts < 0:
        raise ValueError(REASON_PARSE)
    expected_unit = METRIC_UNITS.get(metric)
    if expected_unit is None or unit != expected_unit:
        raise ValueError(REASON_UNKNOWN_METRIC)
    lot = obj.get("lot")
    if lot is not None and not isinstance(lot, str):
        raise ValueError(REASON_PARSE)

    def _int(v) -> int:
        if not isinstance(v, int) or isinstance(v, bool):
            raise ValueError(REASON_PARSE)
        return v

    if metric == "gps":
        value = obj.get("value")
        if isinstance(value, list) and len(value) == 2:
            lat, lon = _int(value[0]), _int(value[1])
        else:
            lat, lon = _int(obj.get("lat")), _int(obj.get("lon"))
        return SensorEvent(platform=platform, device=device, metric=metric,
                           unit=unit, ts=ts, lat=lat, lon=lon, lot=lot)
    return SensorEvent(platform=platform, device=device, metric=metric,
                       unit=unit, ts=ts, value=_int(obj.get("value")), lot=lot)


class FederationAdapter:
    """Validating, deduplicating bridge from event feeds to ledger queues."""

    def __init__(self, rules: Sequence[AdapterRule], signers: Dict[str, Keypair],
                 port):
        """``port`` needs one method: submit_transaction(ledger_id, tx)."""
        self.rules = list(rules)
        self.signers = dict(signers)
        self.port = port
        self._seen: set = set()
        self._nonces: Dict[Tuple[str, str], int] = {}

    # -- ingestion -------------------------------------------------------

    def ingest_lines(self, lines: Iterable[str]) -> IngestReport:
        """Validate a stream; never aborts, rejects carry (line#, reason)."""
        report = IngestReport()
        for line_no, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                event = parse_event_line(line)
            except ValueError as exc:
                report.rejected.append((line_no, str(exc)))
                continue
            if event.idempotency_key in self._seen:
                report.rejected.append((line_no, REASON_DUPLICATE))
                continue
            self._seen.add(event.idempotency_key)
            report.accepted.append(event)
        return report

    # -- mapping ---------------------------------------------------------

    def map_event(self, event: SensorEvent) -> Tuple[str, ContractCall, AdapterRule]:
        for rule in self.rules:
            if rule.matches(event):
                call = ContractCall(rule.contract, rule.method, event.to_args())
                return rule.ledger_id, call, rule
        raise NoMatchingRule(f"{event.platform}/{event.metric}")

    # -- submission ---------------------------------------------------------

    def resume_nonce(self, ledger_id: str, address: str, last_used: int) -> None:
        """Continue a signer's nonce sequence after reloading persisted chains."""
        key = (ledger_id, address)
        self._nonces[key] = max(self._nonces.get(key, -1), last_used)

    def _next_nonce(self, ledger_id: str, address: str) -> int:
        key = (ledger_id, address)
        nonce = self._nonces.get(key, -1) + 1
        self._nonces[key] = nonce
        return nonce

    def flush_batch(self, events: Sequence[SensorEvent]) -> FlushReport:
        """Submit mapped events grouped per ledger in event-time order."""
        report = FlushReport()
        grouped: Dict[str, List[Tuple[SensorEvent, ContractCall, AdapterRule]]] = {}
        for event in events:
            try:
                ledger_id, call, rule = self.map_event(event)
            except NoMatchingRule as exc:
                report.failures.append({"key": event.idempotency_key,
                                        "reason": exc.code, "detail": exc.detail})
                continue
            grouped.setdefault(ledger_id, []).append((event, call, rule))

        for ledger_id in sorted(grouped):
            batch = sorted(grouped[ledger_id], key=lambda item: item[0].ts)
            for event, call, rule in batch:
                signer = self.signers[rule.signer]
                tx = Transaction.build(
                    ledger_id, signer,
                    self._next_nonce(ledger_id, signer.address),
                    event.ts, call)
                try:
                    self.port.submit_transaction(ledger_id, tx)
                except FedLedgerError as exc:
                    report.failures.append({"key": event.idempotency_key,
                                            "reason": exc.code,
                                            "detail": exc.detail})
                    continue
                report.per_ledger[ledger_id] = report.per_ledger.get(ledger_id, 0) + 1
                report.submitted.append({"key": event.idempotency_key,
                                         "ledger_id": ledger_id,
                                         "tx_id": tx.tx_id.hex(),
                                         "event": event})
        return report

    def ingest_and_flush(self, lines: Iterable[str]) -> Tuple[IngestReport, FlushReport]:
        ingest = self.ingest_lines(lines)
        return ingest, self.flush_batch(ingest.accepted)
