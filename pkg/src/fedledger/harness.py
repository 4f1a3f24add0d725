"""Deterministic scenario driver: scripted pilots, fault injection, reports.

A scenario is a JSON document naming actors, ledgers, adapter rules, pilot
wiring, and a time-ordered action script. Runs use logical time only and a
seeded RNG, so a (scenario, seed) pair fully determines the report bytes.

Faults are injected from the scenario's fault list: swap-step crashes and
delays attach to the matching script action, event drops thin ingest streams
through the seeded RNG, and block tampering flips bytes in the persisted
chain files (never through the ledger interface).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .adapter import AdapterRule, FederationAdapter, METRIC_UNITS
from .codec import canonical_json
from .contracts import ContractCall
from .deployment import Clock, Deployment, verify_chain_dir
from .energy import EnergyConfig, EnergyPilot
from .errors import (AssertionFailed, BadTarget, FedLedgerError, NothingNew,
                     SchemaError)
from .foodchain import (ConditionRule, FoodchainPilot, SEGMENT_ORDER,
                        SegmentConfig)
from .interledger import (AnchorAgent, FaultSchedule, SwapCoordinator, SwapLeg,
                          read_checkpoints, verify_anchor_blocks,
                          verify_anchors)
from .ledger import (Block, Ledger, LedgerConfig, Transaction,
                     parse_chain_file)
from .market import PowerForecast, EvProfile

FAULT_KINDS = ("crash_coordinator_at_step", "delay_message", "drop_events",
               "tamper_block")

ACTIONS = (
    "advance", "mint", "transfer", "seal", "update_membership",
    "register_lot", "ingest", "transfer_custody", "configure_market",
    "upsert_ev", "post_request", "plan_day_ahead", "post_offer",
    "close_auction", "accept_assignment", "record_delivery", "settle",
    "anchor", "anchor_if_due", "swap", "persist", "verify_files",
    "verify_chain", "verify_anchors", "trace", "qr", "assert",
)


@dataclass
class Scenario:
    name: str
    seed: int
    delta_ms: int
    start_time: int
    actors: List[dict]
    ledgers: List[dict]
    adapter_rules: List[dict]
    foodchain: Optional[dict]
    energy: Optional[dict]
    lots: List[str]
    setup: List[dict]
    script: List[dict]
    faults: List[dict]
    source_path: Optional[str] = None

    def actor_names(self) -> set:
        return {a["name"] for a in self.actors}

    def ledger_ids(self) -> set:
        return {l["ledger_id"] for l in self.ledgers}


def _ensure(cond: bool, where: str, message: str) -> None:
    if not cond:
        raise SchemaError(f"{where}: {message}")


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")
    scenario = parse_scenario(raw, source_path=str(path))
    return scenario


def parse_scenario(raw: dict, source_path: Optional[str] = None) -> Scenario:
    _ensure(isinstance(raw, dict), "scenario", "top level must be an object")
    for key in ("name", "seed", "ledgers", "actors"):
        _ensure(key in raw, "scenario", f"missing required key '{key}'")
    scenario = Scenario(
        name=str(raw["name"]),
        seed=int(raw["seed"]),
        delta_ms=int(raw.get("delta_ms", 2000)),
        start_time=int(raw.get("start_time", 0)),
        actors=list(raw["actors"]),
        ledgers=list(raw["ledgers"]),
        adapter_rules=list(raw.get("adapter_rules", [])),
        foodchain=raw.get("foodchain"),
        energy=raw.get("energy"),
        lots=list(raw.get("lots", [])),
        setup=list(raw.get("setup", [])),
        script=list(raw.get("script", [])),
        faults=list(raw.get("faults", [])),
        source_path=source_path,
    )
    validate_scenario(scenario)
    return scenario


def validate_scenario(s: Scenario) -> None:
    names = set()
    for i, actor in enumerate(s.actors):
        where = f"actors[{i}]"
        _ensure(isinstance(actor, dict) and actor.get("name"), where,
                "actor needs a name")
        _ensure(actor["name"] not in names, where,
                f"duplicate actor '{actor['name']}'")
        names.add(actor["name"])

    ledger_ids = set()
    for i, cfg in enumerate(s.ledgers):
        where = f"ledgers[{i}]"
        _ensure(isinstance(cfg, dict) and cfg.get("ledger_id"), where,
                "ledger needs a ledger_id")
        _ensure(cfg["ledger_id"] not in ledger_ids, where,
                f"duplicate ledger '{cfg['ledger_id']}'")
        ledger_ids.add(cfg["ledger_id"])
        _ensure(cfg.get("kind") in ("open", "permissioned", "anchor_only"),
                where, f"unknown kind '{cfg.get('kind')}'")
        for member in cfg.get("members", []):
            _ensure(member in names, where, f"undeclared member '{member}'")
        for key in ("authority", "token_authority"):
            if cfg.get(key):
                _ensure(cfg[key] in names, where,
                        f"undeclared {key} '{cfg[key]}'")
        if cfg["kind"] == "permissioned":
            _ensure(bool(cfg.get("members")), where,
                    "permissioned ledger needs members")
            _ensure(bool(cfg.get("authority")), where,
                    "permissioned ledger needs an authority")

    for i, rule in enumerate(s.adapter_rules):
        where = f"adapter_rules[{i}]"
        _ensure(rule.get("ledger_id") in ledger_ids, where,
                f"undeclared ledger '{rule.get('ledger_id')}'")
        _ensure(rule.get("signer") in names, where,
                f"undeclared signer '{rule.get('signer')}'")
        for metric in rule.get("metrics", []):
            _ensure(metric in METRIC_UNITS, where, f"unknown metric '{metric}'")

    if s.foodchain:
        where = "foodchain"
        _ensure(s.foodchain.get("consortium") in ledger_ids, where,
                "undeclared consortium ledger")
        segments = s.foodchain.get("segments", {})
        for seg, cfg in segments.items():
            _ensure(seg in SEGMENT_ORDER, where, f"unknown segment '{seg}'")
            _ensure(cfg.get("ledger_id") in ledger_ids, where,
                    f"undeclared ledger for segment {seg}")
            _ensure(cfg.get("operator") in names, where,
                    f"undeclared operator for segment {seg}")

    if s.energy:
        where = "energy"
        for key in ("market_ledger", "reward_ledger", "public_ledger"):
            _ensure(s.energy.get(key) in ledger_ids, where,
                    f"undeclared {key}")
        _ensure(s.energy.get("dso") in names, where, "undeclared dso")
        if s.energy.get("anchor_agent"):
            _ensure(s.energy["anchor_agent"] in names, where,
                    "undeclared anchor agent")

    needs_foodchain = {"register_lot", "transfer_custody", "trace", "qr"}
    needs_energy = {"configure_market", "upsert_ev", "post_request",
                    "plan_day_ahead", "post_offer", "close_auction",
                    "accept_assignment", "record_delivery", "settle",
                    "anchor_if_due"}
    last_t = None
    for section, actions in (("setup", s.setup), ("script", s.script)):
        for i, action in enumerate(actions):
            where = f"{section}[{i}]"
            _ensure(isinstance(action, dict), where, "action must be an object")
            kind = action.get("action")
            _ensure(kind in ACTIONS, where, f"unknown action '{kind}'")
            if section == "script" and "t" in action:
                t = int(action["t"])
                _ensure(last_t is None or t >= last_t, where,
                        "script times must be non-decreasing")
                last_t = t
            lot = action.get("lot")
            if lot is not None:
                _ensure(lot in s.lots, where, f"undeclared lot id '{lot}'")
            if kind in needs_foodchain:
                _ensure(s.foodchain is not None, where,
                        f"'{kind}' needs a foodchain section")
            if kind in needs_energy:
                _ensure(s.energy is not None, where,
                        f"'{kind}' needs an energy section")
            if kind == "ingest":
                _ensure(bool(s.adapter_rules), where,
                        "'ingest' needs adapter_rules")

    for i, fault in enumerate(s.faults):
        where = f"faults[{i}]"
        _ensure(fault.get("kind") in FAULT_KINDS, where,
                f"unknown fault kind '{fault.get('kind')}'")
        _ensure(bool(fault.get("target")), where, "fault needs a target")


def inject_fault(scenario: Scenario, fault: dict) -> Scenario:
    """Insert a fault spec; validates kind and target shape."""
    if fault.get("kind") not in FAULT_KINDS:
        raise BadTarget(f"unknown fault kind '{fault.get('kind')}'")
    target = fault.get("target", "")
    if not isinstance(target, str) or ":" not in target:
        raise BadTarget(f"malformed target '{target}'")
    prefix = target.split(":", 1)[0]
    if prefix not in ("transfer", "settle", "swap", "platform", "ledger"):
        raise BadTarget(f"unknown target kind '{prefix}'")
    if prefix == "ledger":
        ledger_id = target.split(":", 1)[1]
        if ledger_id not in scenario.ledger_ids():
            raise BadTarget(f"undeclared ledger '{ledger_id}'")
    scenario.faults.append(dict(fault))
    return scenario


# --- runtime -------------------------------------------------------------

@dataclass
class RunContext:
    scenario: Scenario
    dep: Deployment
    coordinator: SwapCoordinator
    adapter: Optional[FederationAdapter]
    foodchain: Optional[FoodchainPilot]
    energy: Optional[EnergyPilot]
    tokens: Dict[str, str]            # bearer token -> actor name
    roles: Dict[str, str]             # actor name -> role
    chains_dir: Optional[Path] = None

    def actor_address(self, name: str) -> str:
        return self.dep.keyring.address_of(name)

    def name_for(self, address: str) -> str:
        for name, kp in self.dep.keyring.by_name.items():
            if kp.address == address:
                return name
        return address


def build_context(scenario: Scenario,
                  chains_dir: Optional[Path] = None) -> RunContext:
    dep = Deployment(master_seed=scenario.seed,
                     clock=Clock(scenario.start_time))
    tokens: Dict[str, str] = {}
    roles: Dict[str, str] = {}
    for actor in scenario.actors:
        keypair = dep.actor(actor["name"])
        roles[actor["name"]] = actor.get("role", "auditor")
        token = actor.get("token") or f"tok-{actor['name']}"
        tokens[token] = actor["name"]
        del keypair

    def addr(name: Optional[str]) -> Optional[str]:
        return dep.keyring.address_of(name) if name else None

    for cfg in scenario.ledgers:
        dep.create_ledger(LedgerConfig(
            ledger_id=cfg["ledger_id"],
            kind=cfg["kind"],
            members=frozenset(addr(m) for m in cfg.get("members", [])),
            authority=addr(cfg.get("authority")),
            token_authority=addr(cfg.get("token_authority")),
            restricted_read=bool(cfg.get("restricted_read", False)),
        ))

    adapter = None
    if scenario.adapter_rules:
        rules = []
        signers = {}
        for rule in scenario.adapter_rules:
            rules.append(AdapterRule(
                platform=rule["platform"],
                metrics=frozenset(rule.get("metrics", [])),
                ledger_id=rule["ledger_id"],
                contract=rule.get("contract", "provenance"),
                method=rule.get("method", "record"),
                signer=rule["signer"],
            ))
            signers[rule["signer"]] = dep.keyring.get(rule["signer"])
        adapter = FederationAdapter(rules, signers, dep)

    coordinator = SwapCoordinator(dep, delta_ms=scenario.delta_ms)

    foodchain = None
    if scenario.foodchain:
        segments = {
            seg: SegmentConfig(segment=seg, ledger_id=cfg["ledger_id"],
                               operator=cfg["operator"])
            for seg, cfg in scenario.foodchain.get("segments", {}).items()
        }
        rules = [ConditionRule(
            metric=r["metric"], min_value=r["min"], max_value=r["max"],
            segments=frozenset(r.get("segments", [])))
            for r in scenario.foodchain.get("condition_rules", [])]
        foodchain = FoodchainPilot(dep, coordinator, adapter,
                                   scenario.foodchain["consortium"],
                                   segments, rules)

    energy = None
    if scenario.energy:
        e = scenario.energy
        energy = EnergyPilot(dep, coordinator, EnergyConfig(
            market_ledger=e["market_ledger"],
            reward_ledger=e["reward_ledger"],
            public_ledger=e["public_ledger"],
            dso=e["dso"],
            anchor_agent=e.get("anchor_agent", e["dso"]),
            tolerance_pct=int(e.get("tolerance_pct", 5)),
            reward_share_pct=int(e.get("reward_share_pct", 10)),
            lead_time_ms=int(e.get("lead_time_ms", 1_800_000)),
            anchor_every_blocks=int(e.get("anchor_every_blocks", 5)),
        ))

    return RunContext(scenario=scenario, dep=dep, coordinator=coordinator,
                      adapter=adapter, foodchain=foodchain, energy=energy,
                      tokens=tokens, roles=roles, chains_dir=chains_dir)


class ScenarioRunner:
    """Executes scenario actions against a built context."""

    def __init__(self, ctx: RunContext):
        self.ctx = ctx
        self.scenario = ctx.scenario
        self.dep = ctx.dep
        self.rng = random.Random(f"fedledger:{self.scenario.seed}")
        self.events: List[dict] = []
        self.assertions: List[dict] = []
        self.traces: Dict[str, dict] = {}
        self.settlements: Dict[str, dict] = {}
        self.swaps: Dict[str, dict] = {}
        self.anchors: List[dict] = []
        self.anchor_verifications: List[dict] = []
        self.chain_verifications: Dict[str, dict] = {}
        self.file_verifications: Dict[str, dict] = {}
        self.qr_payloads: Dict[str, dict] = {}
        self.invariant_checks = 0
        self.invariant_failures: List[dict] = []
        self._tampers_applied: set = set()
        self._spent_faults: set = set()
        self.dep.seal_hooks.append(self._post_seal_invariants)

    # -- invariants after every seal -----------------------------------------

    def _post_seal_invariants(self, ledger: Ledger, block: Block) -> None:
        self.invariant_checks += 1
        problems = []
        if not ledger.state.conservation_holds():
            problems.append("token conservation violated")
        if block.height > 0:
            prev = ledger.chain[block.height - 1]
            if block.prev_hash != prev.block_hash():
                problems.append("hash link broken")
        elif block.prev_hash != b"\x00" * 32:
            problems.append("genesis prev_hash not zero")
        if block.state_root != ledger.state.state_root():
            problems.append("state root does not match live state")
        for problem in problems:
            self.invariant_failures.append({
                "ledger": ledger.config.ledger_id,
                "height": block.height,
                "problem": problem,
            })

    # -- fault helpers --------------------------------------------------------

    def _schedule_for(self, target: str) -> Optional[FaultSchedule]:
        # crash/delay faults are one-shot: a retried action runs clean
        delays = [0, 0, 0, 0]
        crash_step = None
        crash_party = None
        recovery = 3 * self.scenario.delta_ms
        found = False
        for idx, fault in enumerate(self.scenario.faults):
            if fault.get("target") != target or idx in self._spent_faults:
                continue
            if fault["kind"] in ("crash_coordinator_at_step", "delay_message"):
                self._spent_faults.add(idx)
            if fault["kind"] == "crash_coordinator_at_step":
                crash_step = int(fault.get("step", 1))
                crash_party = fault.get("party", "payer_a")
                recovery = int(fault.get("recovery_lag",
                                         3 * self.scenario.delta_ms))
                found = True
            elif fault["kind"] == "delay_message":
                step = int(fault.get("step", 1))
                delays[step - 1] += int(fault.get("magnitude",
                                                  self.scenario.delta_ms))
                found = True
        if not found:
            return None
        return FaultSchedule(delays=tuple(delays), crash_step=crash_step,
                             crash_party=crash_party,
                             recovery_lag=recovery if crash_step else 0)

    def _drop_rate(self, platform: str) -> float:
        for fault in self.scenario.faults:
            if fault["kind"] == "drop_events" \
                    and fault["target"] == f"platform:{platform}":
                return float(fault.get("magnitude", 0.0))
        return 0.0

    def _apply_due_tampers(self) -> None:
        for idx, fault in enumerate(self.scenario.faults):
            if fault["kind"] != "tamper_block" or idx in self._tampers_applied:
                continue
            if int(fault.get("at", 0)) > self.dep.clock.now:
                continue
            self._tampers_applied.add(idx)
            self._tamper_block(fault)

    def _tamper_block(self, fault: dict) -> None:
        if self.ctx.chains_dir is None:
            raise BadTarget("tamper_block needs persisted chains; add a "
                            "'persist' action first")
        ledger_id = fault["target"].split(":", 1)[1]
        path = self.ctx.chains_dir / f"{ledger_id}.chain"
        if not path.exists():
            raise BadTarget(f"no persisted chain for '{ledger_id}'")
        data = bytearray(path.read_bytes())
        height = int(fault.get("height", 0))
        frames, _ = parse_chain_file(bytes(data))
        if height >= len(frames):
            raise BadTarget(f"height {height} beyond persisted chain")
        # locate the chosen block's payload region inside the file
        start = sum(4 + len(frames[i]) for i in range(height)) + 4
        offset = int(fault.get("offset", len(frames[height]) // 2))
        pos = start + min(offset, len(frames[height]) - 1)
        data[pos] ^= 0xFF
        path.write_bytes(bytes(data))
        self._note("tamper_block", ledger=ledger_id, height=height,
                   byte_offset=pos)

    # -- event helpers ------------------------------------------------------

    def _note(self, action: str, **detail) -> None:
        self.events.append({"t": self.dep.clock.now, "action": action,
                            **detail})

    def _lines_for_ingest(self, action: dict) -> List[str]:
        if "file" in action:
            base = Path(self.scenario.source_path).parent \
                if self.scenario.source_path else Path(".")
            return (base / action["file"]).read_text().splitlines()
        if "ndjson" in action:
            return list(action["ndjson"])
        lines = []
        for obj in action.get("events", []):
            lines.append(json.dumps(obj, sort_keys=True))
        for series in action.get("series", []):
            ts = int(series["start_ts"])
            step = int(series.get("step_ms", 1000))
            for value in series["values"]:
                obj = {
                    "platform": series["platform"],
                    "device": series["device"],
                    "metric": series["metric"],
                    "unit": series.get("unit",
                                       METRIC_UNITS[series["metric"]]),
                    "ts": ts,
                }
                if series["metric"] == "gps":
                    obj["lat"], obj["lon"] = value
                else:
                    obj["value"] = value
                if series.get("lot"):
                    obj["lot"] = series["lot"]
                lines.append(json.dumps(obj, sort_keys=True))
                ts += step
        return lines

    # -- action dispatch ---------------------------------------------------

    def run_actions(self, actions: List[dict]) -> None:
        for action in actions:
            if "t" in action:
                self.dep.clock.advance_to(int(action["t"]))
            self._apply_due_tampers()
            handler = getattr(self, f"_do_{action['action']}")
            handler(action)
        self._apply_due_tampers()

    def _signer(self, name: str):
        return self.dep.keyring.get(name)

    def _do_advance(self, a: dict) -> None:
        self.dep.clock.advance(int(a["ms"]))

    def _do_seal(self, a: dict) -> None:
        block = self.dep.seal_block(a["ledger"])
        self._note("seal", ledger=a["ledger"], height=block.height)

    def _do_mint(self, a: dict) -> None:
        ledger = self.dep.ledger(a["ledger"])
        authority_addr = ledger.config.token_authority
        signer = self.dep.keyring.get(authority_addr)
        to = self.ctx.actor_address(a["to"])
        _, _, status = self.dep.submit_and_seal(
            a["ledger"], signer,
            ContractCall("token", "mint", {"to": to, "amount": int(a["amount"])}))
        self._note("mint", ledger=a["ledger"], to=a["to"],
                   amount=int(a["amount"]), status=status)

    def _do_transfer(self, a: dict) -> None:
        _, _, status = self.dep.submit_and_seal(
            a["ledger"], self._signer(a["from"]),
            ContractCall("token", "transfer",
                         {"to": self.ctx.actor_address(a["to"]),
                          "amount": int(a["amount"])}))
        self._note("transfer", ledger=a["ledger"], status=status)

    def _do_update_membership(self, a: dict) -> None:
        ledger = self.dep.ledger(a["ledger"])
        authority = self.dep.keyring.get(ledger.config.authority)
        members = self.dep.update_membership(
            a["ledger"], authority, a["change"],
            self.ctx.actor_address(a["member"]))
        self.dep.seal_block(a["ledger"])
        self._note("update_membership", ledger=a["ledger"],
                   member=a["member"], members=len(members))

    def _do_register_lot(self, a: dict) -> None:
        tx = self.ctx.foodchain.register_lot(a["lot"])
        self._note("register_lot", lot=a["lot"], tx_id=tx)

    def _do_ingest(self, a: dict) -> None:
        lines = self._lines_for_ingest(a)
        platform = a.get("platform", "")
        drop = self._drop_rate(platform) if platform else 0.0
        if drop > 0:
            kept = [l for l in lines if self.rng.random() >= drop]
            dropped = len(lines) - len(kept)
            lines = kept
        else:
            dropped = 0
        assert self.ctx.adapter is not None, "scenario has no adapter rules"
        ingest = self.ctx.adapter.ingest_lines(lines)
        observed = 0
        flushed: Dict[str, int] = {}
        segment_ledgers = set()
        if self.ctx.foodchain:
            segment_ledgers = {cfg.ledger_id for cfg
                               in self.ctx.foodchain.segments.values()}
        passthrough = []
        for event in ingest.accepted:
            ledger_id, _, _ = self.ctx.adapter.map_event(event)
            if ledger_id in segment_ledgers:
                self.ctx.foodchain.record_observation(event)
                observed += 1
            else:
                passthrough.append(event)
        if passthrough:
            flush = self.ctx.adapter.flush_batch(passthrough)
            flushed = flush.per_ledger
            for ledger_id in sorted(flush.per_ledger):
                self.dep.seal_block(ledger_id)
        self._note("ingest", platform=platform, lines=len(lines),
                   accepted=len(ingest.accepted), rejected=len(ingest.rejected),
                   dropped=dropped, observations=observed, flushed=flushed)

    def _do_transfer_custody(self, a: dict) -> None:
        target = f"transfer:{a['lot']}:{a['from']}:{a['to']}"
        schedule = self._schedule_for(target)
        status = self.ctx.foodchain.transfer_custody(
            a["lot"], a["from"], a["to"], schedule)
        self.swaps[target] = status.to_obj()
        self._note("transfer_custody", lot=a["lot"], frm=a["from"],
                   to=a["to"], phase=status.phase,
                   faulted=schedule is not None)

    def _do_configure_market(self, a: dict) -> None:
        self.ctx.energy.configure()
        self._note("configure_market")

    def _do_upsert_ev(self, a: dict) -> None:
        profile = EvProfile(
            ev=a["ev"], user_type=a.get("user_type", "commuter"),
            lat=int(a["lat"]), lon=int(a["lon"]),
            residual_autonomy_m=int(a["residual_autonomy_m"]),
            status=a.get("status", "idle"),
            battery_capacity_wh=int(a.get("battery_capacity_wh", 50_000_000)),
            owner=self.ctx.actor_address(a["owner"]))
        self.ctx.energy.upsert_ev(self._signer(a["signer"]), profile)
        self._note("upsert_ev", ev=a["ev"])

    def _do_post_request(self, a: dict) -> None:
        fields = dict(a["request"])
        request_id = self.ctx.energy.post_request(fields)
        self._note("post_request", request_id=request_id)

    def _do_plan_day_ahead(self, a: dict) -> None:
        f = a["forecast"]
        day_start = f["day_start"]
        if day_start == "next_midnight":
            from .market import DAY_MS
            day_start = (self.dep.clock.now // DAY_MS + 1) * DAY_MS
        forecast = PowerForecast(day_start=int(day_start),
                                 slot_ms=int(f["slot_ms"]),
                                 production_wh=list(f["production_wh"]),
                                 consumption_wh=list(f["consumption_wh"]))
        zone = a["zone"]
        ids = self.ctx.energy.plan_and_post_day_ahead(
            forecast, int(zone["lat"]), int(zone["lon"]),
            int(zone.get("radius_m", 5000)),
            int(a.get("rate_tokens", 1)), int(a.get("rate_per_wh", 1000)))
        self._note("plan_day_ahead", request_ids=ids)

    def _do_post_offer(self, a: dict) -> None:
        self.ctx.energy.post_offer(self._signer(a["fleet"]), a["request_id"],
                                   int(a["price_tokens"]),
                                   int(a["committed_wh"]))
        self._note("post_offer", request_id=a["request_id"],
                   fleet=a["fleet"], price=int(a["price_tokens"]))

    def _do_close_auction(self, a: dict) -> None:
        result = self.ctx.energy.close_auction(a["request_id"])
        detail = {"request_id": a["request_id"], "status": result["status"]}
        if result.get("award"):
            detail["winner"] = self.ctx.name_for(
                result["award"]["fleet_manager"])
            detail["price"] = result["award"]["price_tokens"]
        self._note("close_auction", **detail)

    def _do_accept_assignment(self, a: dict) -> None:
        self.ctx.energy.accept_assignment(
            self._signer(a["owner"]), a["request_id"], a["ev"], a["station"])
        self._note("accept_assignment", request_id=a["request_id"], ev=a["ev"])

    def _do_record_delivery(self, a: dict) -> None:
        record = self.ctx.energy.record_delivery(a["request_id"],
                                                 a.get("station"))
        self._note("record_delivery", request_id=a["request_id"],
                   delivered_wh=record["delivered_wh"])

    def _do_settle(self, a: dict) -> None:
        schedule = self._schedule_for(f"settle:{a['request_id']}")
        report = self.ctx.energy.settle_request(a["request_id"], schedule)
        self.settlements[a["request_id"]] = {
            **report.to_obj(),
            "fleet_manager": self.ctx.name_for(report.fleet_manager),
            "reward_payee": self.ctx.name_for(report.reward_payee),
        }
        self._note("settle", request_id=a["request_id"],
                   outcome=report.outcome, swap_phase=report.swap.phase)

    def _do_anchor(self, a: dict) -> None:
        if self.ctx.energy and not a.get("agent"):
            agent = self.ctx.energy.anchor
        else:
            agent = AnchorAgent(self.dep, self._signer(a["agent"]),
                                a["source"], a["public"])
        try:
            cp = agent.checkpoint()
            self.anchors.append(cp.to_obj())
            self._note("anchor", source=cp.source_ledger, height=cp.height)
        except NothingNew as exc:
            self._note("anchor", source=a.get("source", ""), skipped=exc.code)

    def _do_anchor_if_due(self, a: dict) -> None:
        cp = self.ctx.energy.anchor_if_due()
        if cp is not None:
            self.anchors.append(cp.to_obj())
            self._note("anchor", source=cp.source_ledger, height=cp.height)

    def _do_swap(self, a: dict) -> None:
        def leg(spec: dict) -> SwapLeg:
            return SwapLeg(spec["ledger"],
                           self.ctx.actor_address(spec["payer"]),
                           self.ctx.actor_address(spec["payee"]),
                           int(spec["amount"]))

        plan = self.ctx.coordinator.make_plan(
            a["id"], leg(a["leg_a"]), leg(a["leg_b"]),
            self.ctx.actor_address(a["secret_holder"]))
        schedule = self._schedule_for(f"swap:{a['id']}")
        status = self.ctx.coordinator.run_swap(plan, schedule)
        self.swaps[f"swap:{a['id']}"] = status.to_obj()
        self._note("swap", swap_id=a["id"], phase=status.phase)

    def _do_persist(self, a: dict) -> None:
        assert self.ctx.chains_dir is not None, "run has no chains directory"
        self.dep.save_all(self.ctx.chains_dir)
        # the report must not depend on where the run directory lives
        self._note("persist", ledgers=sorted(self.dep.ledgers))

    def _do_verify_files(self, a: dict) -> None:
        reports = verify_chain_dir(self.ctx.chains_dir)
        self.file_verifications = {lid: r.to_obj()
                                   for lid, r in sorted(reports.items())}
        self._note("verify_files",
                   ok=all(r.ok for r in reports.values()))

    def _do_verify_chain(self, a: dict) -> None:
        report = self.dep.verify_chain(a["ledger"])
        self.chain_verifications[a["ledger"]] = report.to_obj()
        self._note("verify_chain", ledger=a["ledger"], ok=report.ok)

    def _do_verify_anchors(self, a: dict) -> None:
        source = a["source"]
        public = a["public"]
        if a.get("from_files"):
            checkpoints = read_checkpoints(self.dep, source, public)
            path = self.ctx.chains_dir / f"{source}.chain"
            frames, _ = parse_chain_file(path.read_bytes())
            blocks = []
            for frame in frames:
                try:
                    blocks.append(Block.parse(frame))
                except Exception:
                    break
            report = verify_anchor_blocks(
                self.dep.ledger(source).config, blocks, checkpoints,
                self.dep.runtime)
        else:
            report = verify_anchors(self.dep, source, public)
        entry = {"source": source, "public": public,
                 "from_files": bool(a.get("from_files")), **report.to_obj()}
        self.anchor_verifications.append(entry)
        self._note("verify_anchors", source=source, ok=report.ok)

    def _do_trace(self, a: dict) -> None:
        report = self.ctx.foodchain.trace_lot(a["lot"])
        self.traces[a["lot"]] = report.to_obj()
        self._note("trace", lot=a["lot"], verdict=report.verdict,
                   violations=len(report.violations))

    def _do_qr(self, a: dict) -> None:
        payload = self.ctx.foodchain.generate_qr_payload(a["lot"])
        entry = {"payload": payload}
        if a.get("resolve", True):
            report, tip_status = self.ctx.foodchain.resolve_qr(payload)
            entry["tip_status"] = tip_status
            entry["verdict"] = report.verdict
        self.qr_payloads[a["lot"]] = entry
        self._note("qr", lot=a["lot"], payload=payload)

    # -- assertions -------------------------------------------------------

    def _do_assert(self, a: dict) -> None:
        check = a["check"]
        ok, detail = getattr(self, f"_check_{check}")(a)
        self.assertions.append({"check": check, "ok": ok, "detail": detail,
                                "args": {k: v for k, v in a.items()
                                         if k not in ("action", "check", "t")}})
        self._note("assert", check=check, ok=ok)

    def _check_balance(self, a: dict) -> Tuple[bool, str]:
        state = self.dep.ledger(a["ledger"]).state
        actual = state.balance(self.ctx.actor_address(a["actor"]))
        return actual == int(a["expect"]), f"balance {actual}"

    def _check_chain_ok(self, a: dict) -> Tuple[bool, str]:
        report = self.dep.verify_chain(a["ledger"])
        return report.ok == a.get("expect", True), report.detail or "ok"

    def _check_file_chain_ok(self, a: dict) -> Tuple[bool, str]:
        report = self.file_verifications.get(a["ledger"])
        if report is None:
            return False, "verify_files has not run"
        ok = report["ok"] == a.get("expect", True)
        if "expect_first_bad" in a and a["expect_first_bad"] is not None:
            ok = ok and report["first_bad_height"] == a["expect_first_bad"]
        return ok, report["detail"] or "ok"

    def _check_settlement(self, a: dict) -> Tuple[bool, str]:
        record = self.settlements.get(a["request_id"])
        if record is None:
            return False, "no settlement recorded"
        return record["outcome"] == a["expect"], record["outcome"]

    def _check_request_status(self, a: dict) -> Tuple[bool, str]:
        req = self.ctx.energy.request(a["request_id"])
        return req["status"] == a["expect"], req["status"]

    def _check_trace_verdict(self, a: dict) -> Tuple[bool, str]:
        trace = self.traces.get(a["lot"])
        if trace is None:
            return False, "no trace recorded"
        ok = trace["verdict"] == a["expect"]
        if "violations" in a:
            ok = ok and len(trace["violations"]) == int(a["violations"])
        if a.get("all_verified"):
            ok = ok and not trace["unverifiable"]
        return ok, trace["verdict"]

    def _check_custody_chain(self, a: dict) -> Tuple[bool, str]:
        trace = self.traces.get(a["lot"])
        if trace is None:
            trace = self.ctx.foodchain.trace_lot(a["lot"]).to_obj()
        return trace["custody_chain"] == a["expect"], \
            "->".join(trace["custody_chain"])

    def _check_holder_segment(self, a: dict) -> Tuple[bool, str]:
        segment, _ = self.ctx.foodchain.holder_of(a["lot"])
        return segment == a["expect"], segment

    def _check_anchors_ok(self, a: dict) -> Tuple[bool, str]:
        for entry in reversed(self.anchor_verifications):
            if entry["source"] == a["source"]:
                ok = entry["ok"] == a.get("expect", True)
                if "expect_height" in a and a["expect_height"] is not None:
                    ok = ok and entry["first_divergent_height"] == a["expect_height"]
                return ok, entry["detail"] or "ok"
        return False, "verify_anchors has not run"

    def _check_swap_phase(self, a: dict) -> Tuple[bool, str]:
        record = self.swaps.get(a["target"])
        if record is None:
            return False, "no swap recorded"
        return record["phase"] == a["expect"], record["phase"]

    def _check_readings_count(self, a: dict) -> Tuple[bool, str]:
        trace = self.traces.get(a["lot"])
        if trace is None:
            trace = self.ctx.foodchain.trace_lot(a["lot"]).to_obj()
        count = sum(m["count"]
                    for seg, metrics in trace["summaries"].items()
                    if "segment" not in a or seg == a["segment"]
                    for m in metrics.values())
        if "expect" in a:
            return count == int(a["expect"]), f"count {count}"
        return count >= int(a.get("min", 0)), f"count {count}"

    def _check_invariants_clean(self, a: dict) -> Tuple[bool, str]:
        return not self.invariant_failures, \
            f"{len(self.invariant_failures)} failures"

    # -- report ---------------------------------------------------------------

    def build_report(self) -> dict:
        balances = {}
        minted = {}
        heights = {}
        for ledger_id in sorted(self.dep.ledgers):
            ledger = self.dep.ledgers[ledger_id]
            named = {self.ctx.name_for(addr): amount
                     for addr, amount in ledger.state.token["balances"].items()}
            balances[ledger_id] = dict(sorted(named.items()))
            minted[ledger_id] = ledger.state.token["total_minted"]
            heights[ledger_id] = ledger.height
        return {
            "scenario": self.scenario.name,
            "seed": self.scenario.seed,
            "clock_end": self.dep.clock.now,
            "heights": heights,
            "balances": balances,
            "total_minted": minted,
            "traces": self.traces,
            "settlements": self.settlements,
            "swaps": self.swaps,
            "anchors": self.anchors,
            "anchor_verifications": self.anchor_verifications,
            "chain_verifications": self.chain_verifications,
            "file_verifications": self.file_verifications,
            "qr": self.qr_payloads,
            "invariants": {
                "checks": self.invariant_checks,
                "failures": self.invariant_failures,
            },
            "assertions": self.assertions,
            "events": self.events,
            "ok": (all(a["ok"] for a in self.assertions)
                   and not self.invariant_failures),
        }


@dataclass
class RunResult:
    report: dict

    @property
    def ok(self) -> bool:
        return bool(self.report["ok"])

    def report_bytes(self) -> bytes:
        return (canonical_json(self.report) + "\n").encode("utf-8")


def run(scenario: Scenario, chains_dir: Optional[Path] = None) -> RunResult:
    """Execute setup and script; returns the machine-readable run report."""
    ctx = build_context(scenario, chains_dir=chains_dir)
    runner = ScenarioRunner(ctx)
    runner.run_actions(scenario.setup)
    runner.run_actions(scenario.script)
    report = runner.build_report()
    return RunResult(report=report)


def emit_report(result: RunResult, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(result.report_bytes())
    return out_path


def summarize(report: dict) -> str:
    lines = [f"scenario {report['scenario']} (seed {report['seed']}): "
             f"{'ok' if report['ok'] else 'FAILED'}"]
    for ledger_id, height in report["heights"].items():
        lines.append(f"  {ledger_id}: height {height}")
    for request_id, record in report["settlements"].items():
        lines.append(f"  settlement {request_id}: {record['outcome']}")
    for lot, trace in report["traces"].items():
        lines.append(f"  trace {lot}: {trace['verdict']} "
                     f"({len(trace['violations'])} violations)")
    failures = [a for a in report["assertions"] if not a["ok"]]
    lines.append(f"  assertions: {len(report['assertions']) - len(failures)}"
                 f"/{len(report['assertions'])} passed")
    for failure in failures:
        lines.append(f"    FAILED {failure['check']}: {failure['detail']}")
    if report["invariants"]["failures"]:
        lines.append(f"  INVARIANT FAILURES: {report['invariants']['failures']}")
    return "\n".join(lines)


# --- history rewrite (fault tooling, not part of the ledger surface) --------

def rewrite_history(dep: Deployment, ledger_id: str, height: int,
                    tx_index: int, new_args: dict) -> Ledger:
    """Rebuild a ledger with one transaction's args altered from ``height``.

    Models an insider rewriting their own chain: every block from genesis is
    re-signed and re-sealed, so the result is internally consistent and only
    checkpoint anchoring can expose it.
    """
    old = dep.ledger(ledger_id)
    fresh = Ledger(old.config, dep.runtime, dep.registry)
    for block in old.chain:
        for idx, tx in enumerate(block.transactions):
            call = tx.call
            if block.height == height and idx == tx_index:
                call = ContractCall(call.contract, call.method,
                                    {**call.args, **new_args})
            keypair = dep.keyring.get(tx.submitter)
            fresh.submit(Transaction.build(ledger_id, keypair, tx.nonce,
                                           tx.timestamp, call))
        fresh.seal(block.sealed_at)
    dep.ledgers[ledger_id] = fresh
    return fresh


def stress_exercise(dep: Deployment, ledger_id: str, submitters: list,
                    tx_per_submitter: int = 25, seal_every: int = 10) -> None:
    """Concurrent submissions through the per-ledger queue (invariants only).

    Each thread drives one submitter; a dedicated thread seals periodically.
    Final state equality with any particular serial order is not asserted.
    """
    import threading

    ledger = dep.ledger(ledger_id)
    stop = threading.Event()
    errors: List[str] = []

    def submit_loop(keypair):
        for i in range(tx_per_submitter):
            call = ContractCall("token", "transfer",
                                {"to": keypair.address, "amount": 0})
            with ledger._lock:
                nonce = ledger.next_nonce(keypair.address)
                tx = Transaction.build(ledger_id, keypair, nonce,
                                       dep.clock.now, call)
                try:
                    ledger.submit(tx)
                except FedLedgerError as exc:
                    errors.append(exc.code)

    def seal_loop():
        while not stop.is_set():
            dep.seal_block(ledger_id)
            stop.wait(0.001)

    sealer = threading.Thread(target=seal_loop)
    sealer.start()
    threads = [threading.Thread(target=submit_loop, args=(kp,))
               for kp in submitters]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stop.set()
    sealer.join()
    dep.seal_block(ledger_id)
    if errors:
        raise AssertionFailed(f"stress submissions rejected: {errors[:3]}")
