"""Grid-flexibility marketplace: pure decision rules and the market contract.

The decision rules (surplus detection, day-ahead planning, lowest-bid
selection, EV candidate matching) are pure functions so they can be called
anywhere and checked against brute-force oracles. The contract handler wires
the same rules into chain state so that winner, assignment, delivery, and
settlement outcome are all reproducible from ledger contents alone.

Units are integers throughout: energy in Wh, distances in metres, coordinates
in micro-degrees, time in logical milliseconds, prices in whole tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

from .contracts import (ContractRuntime, ContractState, ExecContext,
                        need_int, need_str)
from .crypto import sha256
from .errors import ContractFailure

DAY_MS = 86_400_000
EARTH_RADIUS_M = 6_371_000

SCENARIO_DAY_AHEAD = "day_ahead"
SCENARIO_INTRADAY = "intraday"

EV_STATUSES = ("idle", "charging", "driving")
USER_TYPES = ("commuter", "fleet", "casual")

REQ_OPEN = "open"
REQ_CLOSED = "closed"
REQ_ASSIGNED = "assigned"
REQ_SETTLED = "settled"
REQ_EXPIRED = "expired"


def haversine_m(lat_a: int, lon_a: int, lat_b: int, lon_b: int) -> int:
    """Great-circle distance in metres between micro-degree coordinates."""
    phi_a = math.radians(lat_a / 1e6)
    phi_b = math.radians(lat_b / 1e6)
    dphi = math.radians((lat_b - lat_a) / 1e6)
    dlam = math.radians((lon_b - lon_a) / 1e6)
    a = (math.sin(dphi / 2) ** 2
         + math.cos(phi_a) * math.cos(phi_b) * math.sin(dlam / 2) ** 2)
    return int(round(2 * EARTH_RADIUS_M * math.asin(math.sqrt(a))))


@dataclass(frozen=True)
class PowerForecast:
    """Per-slot production/consumption series for one grid zone."""

    day_start: int
    slot_ms: int
    production_wh: Sequence[int]
    consumption_wh: Sequence[int]

    def validate(self) -> None:
        if len(self.production_wh) != len(self.consumption_wh):
            raise ValueError("forecast series must have equal length")
        if any(v < 0 for v in self.production_wh) \
                or any(v < 0 for v in self.consumption_wh):
            raise ValueError("forecast entries must be non-negative")
        if self.slot_ms <= 0:
            raise ValueError("slot_ms must be positive")


@dataclass(frozen=True)
class EvProfile:
    ev: str
    user_type: str
    lat: int
    lon: int
    residual_autonomy_m: int
    status: str
    battery_capacity_wh: int
    owner: str

    def to_state(self) -> dict:
        return {
            "ev": self.ev, "user_type": self.user_type,
            "lat": self.lat, "lon": self.lon,
            "residual_autonomy_m": self.residual_autonomy_m,
            "status": self.status,
            "battery_capacity_wh": self.battery_capacity_wh,
            "owner": self.owner,
        }


def detect_reverse_power_flow(forecast: PowerForecast) -> List[dict]:
    """Slots where local production strictly exceeds consumption."""
    forecast.validate()
    surpluses = []
    for i, (prod, cons) in enumerate(zip(forecast.production_wh,
                                         forecast.consumption_wh)):
        if prod > cons:
            surpluses.append({"slot": i, "surplus_wh": prod - cons})
    return surpluses


def plan_day_ahead(forecast: PowerForecast, zone_lat: int, zone_lon: int,
                   radius_m: int, rate_tokens: int, rate_per_wh: int) -> List[dict]:
    """One request draft per strict-surplus slot, incentive rounded up.

    The incentive is ceil(surplus * rate_tokens / rate_per_wh) so a 1 Wh
    surplus still carries at least one token.
    """
    forecast.validate()
    if not forecast.production_wh:
        raise ContractFailure("EmptyForecast", "forecast has no slots")
    requests = []
    for item in detect_reverse_power_flow(forecast):
        slot = item["slot"]
        surplus = item["surplus_wh"]
        start = forecast.day_start + slot * forecast.slot_ms
        requests.append({
            "id": f"da-{forecast.day_start}-{slot}",
            "scenario": SCENARIO_DAY_AHEAD,
            "energy_wh": surplus,
            "start": start,
            "end": start + forecast.slot_ms,
            "lat": zone_lat,
            "lon": zone_lon,
            "radius_m": radius_m,
            "incentive_tokens": -(-surplus * rate_tokens // rate_per_wh),
        })
    return requests


def pick_winner(offers: Sequence[dict]) -> Optional[dict]:
    """Lowest price wins; ties break on earlier submission, then on address."""
    if not offers:
        return None
    return min(offers, key=lambda o: (o["price_tokens"], o["submitted_at"],
                                      o["fleet_manager"]))


def match_candidates(request: dict, evs: Sequence[dict]) -> List[dict]:
    """Idle EVs inside the request radius that can reach the location.

    Ranked by ascending distance, ties by EV id.
    """
    matched = []
    for ev in evs:
        if ev["status"] != "idle":
            continue
        distance = haversine_m(ev["lat"], ev["lon"],
                               request["lat"], request["lon"])
        if distance > request["radius_m"]:
            continue
        if ev["residual_autonomy_m"] < distance:
            continue
        matched.append({"ev": ev["ev"], "distance_m": distance})
    matched.sort(key=lambda m: (m["distance_m"], m["ev"]))
    return matched


def settlement_secret(seed_hex: str) -> bytes:
    return sha256(b"settle-secret:" + bytes.fromhex(seed_hex))


def delivery_meets_floor(delivered_wh: int, committed_wh: int,
                         tolerance_pct: int) -> bool:
    # integer comparison of delivered >= committed * (100 - tol) / 100
    return delivered_wh * 100 >= committed_wh * (100 - tolerance_pct)


# --- contract handler -------------------------------------------------------

def _cfg(state: ContractState) -> dict:
    cfg = state.market.get("config")
    if not cfg:
        raise ContractFailure("NotConfigured", "market contract not configured")
    return cfg


def _request(state: ContractState, request_id: str) -> dict:
    req = state.market["requests"].get(request_id)
    if req is None:
        raise ContractFailure("UnknownRequest", request_id)
    return req


def _market_configure(state: ContractState, args: dict, ctx: ExecContext):
    if state.market.get("config"):
        raise ContractFailure("AlreadyConfigured", "")
    state.market.update({
        "config": {
            "dso": need_str(args, "dso"),
            "tolerance_pct": need_int(args, "tolerance_pct"),
            "reward_share_pct": need_int(args, "reward_share_pct"),
            "lead_time_ms": need_int(args, "lead_time_ms"),
        },
        "requests": {},
        "offers": {},
        "evs": {},
        "assignments": {},
        "meters": [],
        "deliveries": {},
        "settlements": {},
    })
    return {"configured": True}


def _market_post_request(state: ContractState, args: dict, ctx: ExecContext):
    cfg = _cfg(state)
    if ctx.submitter != cfg["dso"]:
        raise ContractFailure("NotDso", ctx.submitter)
    request_id = need_str(args, "id")
    scenario = need_str(args, "scenario")
    energy_wh = need_int(args, "energy_wh")
    start = need_int(args, "start")
    end = need_int(args, "end")
    incentive = need_int(args, "incentive_tokens")
    if scenario not in (SCENARIO_DAY_AHEAD, SCENARIO_INTRADAY):
        raise ContractFailure("BadArgs", f"unknown scenario '{scenario}'")
    if energy_wh <= 0 or incentive <= 0:
        raise ContractFailure("BadAmount",
                              "energy and incentive must be positive")
    if start >= end:
        raise ContractFailure("BadTimeslot", "start must precede end")
    next_midnight = (ctx.now // DAY_MS + 1) * DAY_MS
    if scenario == SCENARIO_DAY_AHEAD and start < next_midnight:
        raise ContractFailure("BadTimeslot", "day-ahead slot must start tomorrow")
    if scenario == SCENARIO_INTRADAY \
            and not (start > ctx.now and end <= next_midnight):
        raise ContractFailure("BadTimeslot", "intraday slot must fall later today")
    if request_id in state.market["requests"]:
        raise ContractFailure("DuplicateRequest", request_id)
    state.market["requests"][request_id] = {
        "id": request_id,
        "scenario": scenario,
        "energy_wh": energy_wh,
        "start": start,
        "end": end,
        "lat": need_int(args, "lat"),
        "lon": need_int(args, "lon"),
        "radius_m": need_int(args, "radius_m"),
        "incentive_tokens": incentive,
        "status": REQ_OPEN,
        "issuer": ctx.submitter,
        "posted_at": ctx.now,
    }
    state.market["offers"][request_id] = []
    return {"id": request_id, "status": REQ_OPEN}


def _market_post_offer(state: ContractState, args: dict, ctx: ExecContext):
    _cfg(state)
    req = _request(state, need_str(args, "request_id"))
    price = need_int(args, "price_tokens")
    committed = need_int(args, "committed_wh")
    if req["status"] != REQ_OPEN:
        raise ContractFailure("RequestNotOpen", req["status"])
    if price < 0:
        raise ContractFailure("BadAmount", "price must be non-negative")
    if price > req["incentive_tokens"]:
        raise ContractFailure(
            "OverAsk", f"price {price} > incentive {req['incentive_tokens']}")
    if committed < req["energy_wh"]:
        raise ContractFailure(
            "UnderCommit", f"committed {committed} < requested {req['energy_wh']}")
    offer = {
        "request_id": req["id"],
        "fleet_manager": ctx.submitter,
        "price_tokens": price,
        "committed_wh": committed,
        "submitted_at": ctx.now,
    }
    state.market["offers"][req["id"]].append(offer)
    return offer


def _market_upsert_ev(state: ContractState, args: dict, ctx: ExecContext):
    _cfg(state)
    ev_id = need_str(args, "ev")
    status = need_str(args, "status")
    user_type = need_str(args, "user_type")
    autonomy = need_int(args, "residual_autonomy_m")
    if status not in EV_STATUSES:
        raise ContractFailure("BadArgs", f"unknown EV status '{status}'")
    if user_type not in USER_TYPES:
        raise ContractFailure("BadArgs", f"unknown user type '{user_type}'")
    if autonomy < 0:
        raise ContractFailure("BadAmount", "autonomy must be non-negative")
    state.market["evs"][ev_id] = {
        "ev": ev_id,
        "user_type": user_type,
        "lat": need_int(args, "lat"),
        "lon": need_int(args, "lon"),
        "residual_autonomy_m": autonomy,
        "status": status,
        "battery_capacity_wh": need_int(args, "battery_capacity_wh"),
        "owner": need_str(args, "owner"),
    }
    return {"ev": ev_id}


def _market_close(state: ContractState, args: dict, ctx: ExecContext):
    cfg = _cfg(state)
    req = _request(state, need_str(args, "request_id"))
    if req["status"] != REQ_OPEN:
        raise ContractFailure("RequestNotOpen", req["status"])
    deadline = req["start"] - cfg["lead_time_ms"]
    if ctx.now < deadline:
        raise ContractFailure("TooEarly",
                              f"bidding open until {deadline}, now {ctx.now}")
    offers = state.market["offers"][req["id"]]
    winner = pick_winner(offers)
    if winner is None:
        req["status"] = REQ_EXPIRED
        return {"id": req["id"], "status": REQ_EXPIRED, "award": None}

    secret = sha256(b"settle-secret:" + ctx.tx_id)
    assignment = {
        "request_id": req["id"],
        "fleet_manager": winner["fleet_manager"],
        "price_tokens": winner["price_tokens"],
        "committed_wh": winner["committed_wh"],
        "hashlock": sha256(secret).hex(),
        "secret_seed": ctx.tx_id.hex(),
        "ev": "",
        "station": "",
        "owner": "",
        "candidates": [],
        "assigned_at": ctx.now,
    }
    if req["scenario"] == SCENARIO_INTRADAY:
        req["status"] = REQ_CLOSED
        evs = [state.market["evs"][k] for k in sorted(state.market["evs"])]
        assignment["candidates"] = match_candidates(req, evs)
    else:
        req["status"] = REQ_ASSIGNED
    state.market["assignments"][req["id"]] = assignment
    return {"id": req["id"], "status": req["status"],
            "award": {"fleet_manager": winner["fleet_manager"],
                      "price_tokens": winner["price_tokens"]},
            "candidates": assignment["candidates"]}


def _market_accept(state: ContractState, args: dict, ctx: ExecContext):
    _cfg(state)
    req = _request(state, need_str(args, "request_id"))
    ev_id = need_str(args, "ev")
    station = need_str(args, "station")
    if req["scenario"] != SCENARIO_INTRADAY:
        raise ContractFailure("BadArgs", "only intraday requests take acceptances")
    if req["status"] in (REQ_ASSIGNED, REQ_SETTLED):
        raise ContractFailure("AlreadyAssigned", req["id"])
    if req["status"] != REQ_CLOSED:
        raise ContractFailure("RequestNotOpen", req["status"])
    assignment = state.market["assignments"][req["id"]]
    if ev_id not in [c["ev"] for c in assignment["candidates"]]:
        raise ContractFailure("NotACandidate", ev_id)
    ev = state.market["evs"][ev_id]
    if ev["owner"] != ctx.submitter:
        raise ContractFailure("NotACandidate",
                              f"{ctx.submitter} does not own {ev_id}")
    assignment["ev"] = ev_id
    assignment["station"] = station
    assignment["owner"] = ev["owner"]
    assignment["assigned_at"] = ctx.now
    req["status"] = REQ_ASSIGNED
    return {"id": req["id"], "ev": ev_id, "station": station}


def _market_meter(state: ContractState, args: dict, ctx: ExecContext):
    # accepts both native args and adapter-mapped sensor events, where the
    # reporting device is the station and the fixed-point value the increment
    _cfg(state)
    delta = need_int(args, "delta_wh" if "delta_wh" in args else "value")
    if delta < 0:
        raise ContractFailure("BadAmount", "meter increments must be non-negative")
    entry = {
        "station": need_str(args, "station" if "station" in args else "device"),
        "delta_wh": delta,
        "ts": need_int(args, "ts"),
        "tx_id": ctx.tx_id.hex(),
    }
    state.market["meters"].append(entry)
    return {"tx_id": entry["tx_id"]}


def _market_record_delivery(state: ContractState, args: dict, ctx: ExecContext):
    _cfg(state)
    req = _request(state, need_str(args, "request_id"))
    if req["status"] != REQ_ASSIGNED:
        raise ContractFailure("NotAssigned", req["status"])
    assignment = state.market["assignments"][req["id"]]
    station = str(args.get("station") or assignment["station"])
    delivered = 0
    refs = []
    for entry in state.market["meters"]:
        if station and entry["station"] != station:
            continue
        # in-slot window is half-open: [start, end)
        if not (req["start"] <= entry["ts"] < req["end"]):
            continue
        delivered += entry["delta_wh"]
        refs.append(entry["tx_id"])
    if not refs:
        raise ContractFailure("NoMeterData",
                              f"no meter events for '{station}' in slot")
    state.market["deliveries"][req["id"]] = {
        "request_id": req["id"],
        "ev": assignment["ev"],
        "station": station,
        "start": req["start"],
        "end": req["end"],
        "delivered_wh": delivered,
        "meter_refs": refs,
    }
    return {"id": req["id"], "delivered_wh": delivered}


def _market_settle(state: ContractState, args: dict, ctx: ExecContext):
    cfg = _cfg(state)
    req = _request(state, need_str(args, "request_id"))
    if req["status"] == REQ_SETTLED:
        raise ContractFailure("AlreadySettled", req["id"])
    if req["status"] != REQ_ASSIGNED:
        raise ContractFailure("NotAssigned", req["status"])
    if ctx.now < req["end"]:
        raise ContractFailure("NotEnded",
                              f"slot ends at {req['end']}, now {ctx.now}")
    assignment = state.market["assignments"][req["id"]]
    delivery = state.market["deliveries"].get(req["id"])
    delivered = delivery["delivered_wh"] if delivery else 0
    committed = assignment["committed_wh"]
    paid = delivery_meets_floor(delivered, committed, cfg["tolerance_pct"])
    settlement = {
        "request_id": req["id"],
        "outcome": "paid" if paid else "refunded",
        "delivered_wh": delivered,
        "committed_wh": committed,
        "tolerance_pct": cfg["tolerance_pct"],
        "secret": settlement_secret(assignment["secret_seed"]).hex() if paid else "",
        "settled_at": ctx.now,
    }
    state.market["settlements"][req["id"]] = settlement
    req["status"] = REQ_SETTLED
    return {"id": req["id"], "outcome": settlement["outcome"]}


def register_market(runtime: ContractRuntime) -> ContractRuntime:
    runtime.register("market", "configure", _market_configure)
    runtime.register("market", "post_request", _market_post_request)
    runtime.register("market", "post_offer", _market_post_offer)
    runtime.register("market", "upsert_ev", _market_upsert_ev)
    runtime.register("market", "close", _market_close)
    runtime.register("market", "accept", _market_accept)
    runtime.register("market", "meter", _market_meter)
    runtime.register("market", "record_delivery", _market_record_delivery)
    runtime.register("market", "settle", _market_settle)
    return runtime
