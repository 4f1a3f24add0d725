"""Farm-to-fork pilot: segment ledgers, consortium custody, end-to-end traces.

Five segments move a lot from farm to supermarket. Full sensor readings live
on each segment's own ledger; the shared consortium ledger holds compact
digests plus a custody token per lot. A custody transfer is a two-leg atomic
swap: the custody token moves on the consortium ledger if and only if a
handover record finalizes on the receiving segment's ledger.

Trace reports are assembled from consortium events only, with every cited
segment reading checked against its ledger by an inclusion proof; entries
that fail the proof are flagged unverifiable instead of being summarized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .adapter import FederationAdapter, SensorEvent
from .contracts import ContractCall
from .errors import (ContractFailure, LotNotFound, NoMatchingRule,
                     NotCurrentHolder, WrongSequence)
from .interledger import FaultSchedule, SwapCoordinator, SwapLeg, SwapStatus
from .ledger import verify_inclusion

SEGMENT_ORDER = ("SF", "TRA", "SDC", "TRB", "SM")
SEGMENT_KINDS = {"SF": "open", "TRA": "open", "SDC": "permissioned",
                 "TRB": "open", "SM": "permissioned"}

QR_SCHEME = "sofie://trace/"
QR_TIP_CHARS = 16

TIP_CURRENT = "current"
TIP_STALE = "stale"
TIP_DIVERGED = "diverged"


def next_segment(segment: str) -> Optional[str]:
    idx = SEGMENT_ORDER.index(segment)
    return SEGMENT_ORDER[idx + 1] if idx + 1 < len(SEGMENT_ORDER) else None


@dataclass(frozen=True)
class SegmentConfig:
    segment: str
    ledger_id: str
    operator: str  # actor name whose key signs for this segment


@dataclass(frozen=True)
class ConditionRule:
    """Closed-interval bound on a metric, fixed-point x1000."""

    metric: str
    min_value: int
    max_value: int
    segments: frozenset = frozenset()  # empty applies everywhere

    def __post_init__(self):
        if self.min_value > self.max_value:
            raise ValueError("rule min exceeds max")

    def applies(self, segment: str, metric: str) -> bool:
        if metric != self.metric:
            return False
        return not self.segments or segment in self.segments

    def to_obj(self) -> dict:
        return {"metric": self.metric, "min": self.min_value,
                "max": self.max_value, "segments": sorted(self.segments)}


def evaluate_conditions(readings: Sequence[dict],
                        rules: Sequence[ConditionRule]) -> List[dict]:
    """One violation per reading outside an applicable [min, max] interval."""
    violations = []
    for reading in readings:
        value = reading.get("value")
        if value is None:
            continue
        for rule in rules:
            if not rule.applies(reading["segment"], reading["metric"]):
                continue
            if value < rule.min_value or value > rule.max_value:
                violations.append({
                    "segment": reading["segment"],
                    "metric": reading["metric"],
                    "value": value,
                    "ts": reading.get("ts", 0),
                    "rule": rule.to_obj(),
                })
    return violations


@dataclass
class TraceReport:
    lot: str
    custody_chain: List[str]
    handovers: List[dict]
    events: List[dict]
    summaries: Dict[str, dict]
    violations: List[dict]
    unverifiable: List[dict]
    verdict: str
    canonical_order_ok: bool
    tip_hash: str
    flags: List[str] = field(default_factory=list)

    def to_obj(self) -> dict:
        return {
            "lot": self.lot,
            "custody_chain": self.custody_chain,
            "handovers": self.handovers,
            "events": self.events,
            "summaries": self.summaries,
            "violations": self.violations,
            "unverifiable": self.unverifiable,
            "verdict": self.verdict,
            "canonical_order_ok": self.canonical_order_ok,
            "tip_hash": self.tip_hash,
            "flags": self.flags,
        }


class FoodchainPilot:
    def __init__(self, deployment, coordinator: SwapCoordinator,
                 adapter: FederationAdapter, consortium_id: str,
                 segments: Dict[str, SegmentConfig],
                 condition_rules: Sequence[ConditionRule] = ()):
        self.dep = deployment
        self.coordinator = coordinator
        self.adapter = adapter
        self.consortium_id = consortium_id
        self.segments = dict(segments)
        self.condition_rules = list(condition_rules)
        self._ledger_to_segment = {cfg.ledger_id: cfg.segment
                                   for cfg in segments.values()}

    # -- helpers ------------------------------------------------------------

    def _operator(self, segment: str):
        return self.dep.keyring.get(self.segments[segment].operator)

    def _consortium(self):
        return self.dep.ledger(self.consortium_id)

    def _lot_record(self, lot: str) -> dict:
        record = self._consortium().state.provenance["lots"].get(lot)
        if record is None:
            raise LotNotFound(lot)
        return record

    def holder_of(self, lot: str) -> Tuple[str, str]:
        """(segment, holder address) for a registered lot."""
        record = self._lot_record(lot)
        return record["segment"], record["holder"]

    # -- operations ----------------------------------------------------------

    def register_lot(self, lot: str) -> str:
        """Create the lot's custody token, held by the farm segment."""
        operator = self._operator("SF")
        call = ContractCall("provenance", "register_lot", {
            "lot": lot, "holder": operator.address, "segment": "SF"})
        tx, _, status = self.dep.submit_and_seal(self.consortium_id, operator, call)
        if status != "ok":
            raise ContractFailure(status, lot)
        return tx.tx_id.hex()

    def record_observation(self, event: SensorEvent) -> dict:
        """Full reading on the segment ledger, digest on the consortium."""
        ledger_id, _, _ = self.adapter.map_event(event)
        segment = self._ledger_to_segment.get(ledger_id)
        if segment is None:
            raise NoMatchingRule(f"{ledger_id} is not a segment ledger")
        flush = self.adapter.flush_batch([event])
        if flush.failures:
            failure = flush.failures[0]
            raise ContractFailure(failure["reason"], failure["detail"])
        seg_tx_hex = flush.submitted[0]["tx_id"]
        self.dep.seal_block(ledger_id)

        operator = self._operator(segment)
        digest_call = ContractCall("provenance", "record_digest", {
            "lot": event.lot or "",
            "segment": segment,
            "seg_ledger": ledger_id,
            "seg_tx": seg_tx_hex,
            "metric": event.metric,
            "ts": event.ts,
        })
        digest_tx, _, status = self.dep.submit_and_seal(
            self.consortium_id, operator, digest_call)
        if status != "ok":
            raise ContractFailure(status, "digest rejected")
        return {"segment": segment, "segment_ledger": ledger_id,
                "segment_tx": seg_tx_hex, "digest_tx": digest_tx.tx_id.hex()}

    def transfer_custody(self, lot: str, from_segment: str, to_segment: str,
                         schedule: Optional[FaultSchedule] = None) -> SwapStatus:
        """Atomic handover to the next segment in canonical order."""
        if from_segment not in SEGMENT_ORDER or to_segment not in SEGMENT_ORDER:
            raise WrongSequence(f"{from_segment} -> {to_segment}")
        if next_segment(from_segment) != to_segment:
            raise WrongSequence(f"{from_segment} -> {to_segment}")
        record = self._lot_record(lot)
        from_op = self._operator(from_segment)
        to_op = self._operator(to_segment)
        if record["segment"] != from_segment or record["holder"] != from_op.address:
            raise NotCurrentHolder(
                f"{lot} held by {record['holder']} at {record['segment']}")
        if record["escrow"]:
            raise NotCurrentHolder(f"{lot} custody is already in escrow")

        memo = (("lot", lot), ("from_segment", from_segment),
                ("to_segment", to_segment))
        plan = self.coordinator.make_plan(
            f"custody-{lot}-{from_segment}-{to_segment}-{self.dep.clock.now}",
            SwapLeg(self.consortium_id, from_op.address, to_op.address, 1,
                    asset=f"custody:{lot}", memo=memo),
            SwapLeg(self.segments[to_segment].ledger_id, to_op.address,
                    from_op.address, 1, asset=f"handover:{lot}", memo=memo),
            secret_holder=from_op.address)
        return self.coordinator.run_swap(plan, schedule)

    # -- trace assembly --------------------------------------------------------

    def trace_lot(self, lot: str) -> TraceReport:
        consortium = self._consortium()
        if lot not in consortium.state.provenance["lots"]:
            raise LotNotFound(lot)

        events: List[dict] = []
        handovers: List[dict] = []
        digests: List[dict] = []
        escrows = consortium.state.escrows

        for block in consortium.chain:
            for tx, status in zip(block.transactions, block.statuses):
                if status != "ok":
                    continue
                call = tx.call
                if call.contract == "provenance" \
                        and call.method == "register_lot" \
                        and call.args.get("lot") == lot:
                    events.append({"kind": "registered", "segment": "SF",
                                   "ts": block.sealed_at,
                                   "tx_id": tx.tx_id.hex()})
                elif call.contract == "provenance" \
                        and call.method == "record_digest" \
                        and call.args.get("lot") == lot:
                    digests.append(dict(call.args, tx_id=tx.tx_id.hex(),
                                        sealed_at=block.sealed_at))
                elif call.contract == "htlc" and call.method == "claim":
                    escrow = escrows.get(call.args.get("escrow_id", ""))
                    if escrow and escrow["asset"] == f"custody:{lot}":
                        handover = {
                            "from": escrow["memo"].get("from_segment", ""),
                            "to": escrow["memo"].get("to_segment", ""),
                            "ts": block.sealed_at,
                            "escrow_id": call.args["escrow_id"],
                            "tx_id": tx.tx_id.hex(),
                        }
                        handovers.append(handover)
                        events.append({"kind": "custody_out",
                                       "segment": handover["from"],
                                       "ts": block.sealed_at,
                                       "tx_id": tx.tx_id.hex()})
                        events.append({"kind": "custody_in",
                                       "segment": handover["to"],
                                       "ts": block.sealed_at,
                                       "tx_id": tx.tx_id.hex()})

        custody_chain = ["SF"] + [h["to"] for h in handovers]
        canonical_ok = tuple(custody_chain) == SEGMENT_ORDER[:len(custody_chain)]

        readings, unverifiable = self._verify_digests(digests)
        for reading in readings:
            events.append({"kind": "reading", "segment": reading["segment"],
                           "ts": reading["ts"], "tx_id": reading["seg_tx"],
                           "metric": reading["metric"]})
        events.sort(key=lambda e: (e["ts"], e["tx_id"]))

        summaries = self._summarize(readings)
        violations = evaluate_conditions(readings, self.condition_rules)
        flags = []
        if not canonical_ok:
            flags.append("custody order violates canonical segment order")
        if unverifiable:
            flags.append(f"{len(unverifiable)} reading(s) unverifiable")
        return TraceReport(
            lot=lot,
            custody_chain=custody_chain,
            handovers=handovers,
            events=events,
            summaries=summaries,
            violations=violations,
            unverifiable=unverifiable,
            verdict="clean" if not violations else "violations",
            canonical_order_ok=canonical_ok,
            tip_hash=consortium.tip_hash.hex(),
            flags=flags,
        )

    def _verify_digests(self, digests: List[dict]) -> Tuple[List[dict], List[dict]]:
        readings: List[dict] = []
        unverifiable: List[dict] = []
        for digest in digests:
            why = None
            reading = None
            try:
                ledger = self.dep.ledger(digest["seg_ledger"])
                tx_id = bytes.fromhex(digest["seg_tx"])
                proof = ledger.inclusion_proof(tx_id)
                block = ledger.chain[proof.block_height]
                if not verify_inclusion(proof, block):
                    why = "inclusion proof failed"
                else:
                    idx = proof.leaf_index
                    tx = block.transactions[idx]
                    if block.statuses[idx] != "ok":
                        why = f"segment tx status {block.statuses[idx]}"
                    else:
                        args = tx.call.args
                        reading = {
                            "segment": digest["segment"],
                            "metric": args.get("metric", digest["metric"]),
                            "value": args.get("value"),
                            "lat": args.get("lat"),
                            "lon": args.get("lon"),
                            "unit": args.get("unit", ""),
                            "ts": args.get("ts", digest["ts"]),
                            "seg_ledger": digest["seg_ledger"],
                            "seg_tx": digest["seg_tx"],
                        }
            except Exception as exc:  # missing ledger, unknown tx, bad hex
                why = getattr(exc, "code", type(exc).__name__)
            if reading is not None:
                readings.append(reading)
            else:
                unverifiable.append(dict(digest, reason=why or "unknown"))
        return readings, unverifiable

    @staticmethod
    def _summarize(readings: List[dict]) -> Dict[str, dict]:
        summaries: Dict[str, dict] = {}
        for reading in readings:
            segment = summaries.setdefault(reading["segment"], {})
            metric = segment.setdefault(
                reading["metric"], {"count": 0, "min": None, "max": None})
            metric["count"] += 1
            value = reading.get("value")
            if value is not None:
                metric["min"] = value if metric["min"] is None \
                    else min(metric["min"], value)
                metric["max"] = value if metric["max"] is None \
                    else max(metric["max"], value)
        return summaries

    # -- QR labels ---------------------------------------------------------

    def generate_qr_payload(self, lot: str) -> str:
        self._lot_record(lot)
        tip = self._consortium().tip_hash.hex()
        return f"{QR_SCHEME}{lot}?tip={tip[:QR_TIP_CHARS]}"

    def resolve_qr(self, payload: str) -> Tuple[TraceReport, str]:
        """Trace the lot named by a label and classify its pinned tip.

        ``current``: pin matches the tip; ``stale``: pin is an ancestor of the
        tip (new unrelated blocks since labeling); ``diverged``: pin matches
        no block in history, so history changed after the label was printed.
        """
        if not payload.startswith(QR_SCHEME) or "?tip=" not in payload:
            raise ValueError(f"not a trace payload: {payload!r}")
        rest = payload[len(QR_SCHEME):]
        lot, _, pin = rest.partition("?tip=")
        report = self.trace_lot(lot)
        consortium = self._consortium()
        if consortium.tip_hash.hex().startswith(pin):
            status = TIP_CURRENT
        elif any(block.block_hash().hex().startswith(pin)
                 for block in consortium.chain):
            status = TIP_STALE
            report.flags.append("tip pin is older than current history")
        else:
            status = TIP_DIVERGED
            report.flags.append("history diverged from tip pin")
        return report, status
