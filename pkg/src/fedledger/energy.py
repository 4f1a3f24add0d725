"""EV grid-balancing pilot driver over the market, reward, and public ledgers.

The market ledger carries requests, offers, EV profiles, meter readings, and
the on-chain auction/settlement decisions. At assignment time the issuer
locks two escrows under one hashlock: the winning price on the market ledger
and the user reward on the reward ledger. The settle call releases the
preimage only when delivered energy reaches the committed floor, after which
both escrows are claimable; on shortfall both expire and refund. The market
ledger is periodically anchored onto the public ledger.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .contracts import ContractCall
from .errors import ContractFailure
from .interledger import (AnchorAgent, FaultSchedule, SwapCoordinator, SwapLeg,
                          SwapPlan, SwapStatus)
from .market import (EvProfile, PowerForecast, detect_reverse_power_flow,
                     match_candidates, pick_winner, plan_day_ahead,
                     settlement_secret)

__all__ = [
    "EnergyConfig", "EnergyPilot", "EvProfile", "PowerForecast",
    "detect_reverse_power_flow", "plan_day_ahead", "match_candidates",
    "pick_winner",
]


@dataclass(frozen=True)
class EnergyConfig:
    market_ledger: str
    reward_ledger: str
    public_ledger: str
    dso: str  # actor name
    anchor_agent: str = "anchor-agent"
    tolerance_pct: int = 5
    reward_share_pct: int = 10
    lead_time_ms: int = 1_800_000
    anchor_every_blocks: int = 5
    # settlement escrows stay claimable this long past the timeslot end, so
    # the settle call does not have to land within a few protocol deltas
    settle_window_ms: int = 1_800_000


@dataclass
class SettlementReport:
    request_id: str
    outcome: str
    delivered_wh: int
    committed_wh: int
    price_tokens: int
    reward_tokens: int
    fleet_manager: str
    reward_payee: str
    swap: SwapStatus

    def to_obj(self) -> dict:
        return {
            "request_id": self.request_id,
            "outcome": self.outcome,
            "delivered_wh": self.delivered_wh,
            "committed_wh": self.committed_wh,
            "price_tokens": self.price_tokens,
            "reward_tokens": self.reward_tokens,
            "fleet_manager": self.fleet_manager,
            "reward_payee": self.reward_payee,
            "swap": self.swap.to_obj(),
        }


class EnergyPilot:
    def __init__(self, deployment, coordinator: SwapCoordinator,
                 config: EnergyConfig):
        self.dep = deployment
        self.coordinator = coordinator
        self.cfg = config
        self.dso = deployment.keyring.get(config.dso)
        self.anchor = AnchorAgent(deployment, deployment.keyring.get(
            config.anchor_agent), config.market_ledger, config.public_ledger)
        self._escrows: Dict[str, Tuple[str, str]] = {}

    # -- state access ---------------------------------------------------------

    def market_state(self) -> dict:
        return self.dep.ledger(self.cfg.market_ledger).state.market

    def request(self, request_id: str) -> dict:
        req = self.market_state().get("requests", {}).get(request_id)
        if req is None:
            raise ContractFailure("UnknownRequest", request_id)
        return req

    def offers(self, request_id: str) -> List[dict]:
        return list(self.market_state().get("offers", {}).get(request_id, []))

    def assignment(self, request_id: str) -> Optional[dict]:
        return self.market_state().get("assignments", {}).get(request_id)

    def settlement(self, request_id: str) -> Optional[dict]:
        return self.market_state().get("settlements", {}).get(request_id)

    def candidates(self, request_id: str) -> List[dict]:
        assignment = self.assignment(request_id)
        if assignment and assignment["candidates"]:
            return assignment["candidates"]
        req = self.request(request_id)
        evs_map = self.market_state().get("evs", {})
        evs = [evs_map[k] for k in sorted(evs_map)]
        return match_candidates(req, evs)

    # -- market calls -----------------------------------------------------------

    def _call(self, signer, method: str, args: dict) -> Tuple[str, dict]:
        call = ContractCall("market", method, args)
        tx, _, status = self.dep.submit_and_seal(
            self.cfg.market_ledger, signer, call)
        if status != "ok":
            raise ContractFailure(status, f"market.{method}")
        return tx.tx_id.hex(), args

    def configure(self) -> None:
        self._call(self.dso, "configure", {
            "dso": self.dso.address,
            "tolerance_pct": self.cfg.tolerance_pct,
            "reward_share_pct": self.cfg.reward_share_pct,
            "lead_time_ms": self.cfg.lead_time_ms,
        })

    def post_request(self, fields: dict, issuer=None) -> str:
        signer = issuer or self.dso
        self._call(signer, "post_request", fields)
        return fields["id"]

    def plan_and_post_day_ahead(self, forecast: PowerForecast, zone_lat: int,
                                zone_lon: int, radius_m: int, rate_tokens: int,
                                rate_per_wh: int) -> List[str]:
        drafts = plan_day_ahead(forecast, zone_lat, zone_lon, radius_m,
                                rate_tokens, rate_per_wh)
        return [self.post_request(draft) for draft in drafts]

    def post_offer(self, fleet, request_id: str, price_tokens: int,
                   committed_wh: int) -> dict:
        _, args = self._call(fleet, "post_offer", {
            "request_id": request_id,
            "price_tokens": price_tokens,
            "committed_wh": committed_wh,
        })
        return args

    def upsert_ev(self, fleet, profile: EvProfile) -> None:
        self._call(fleet, "upsert_ev", profile.to_state())

    def close_auction(self, request_id: str) -> dict:
        """Close bidding on-chain; lock settlement escrows on a direct award."""
        self._call(self.dso, "close", {"request_id": request_id})
        req = self.request(request_id)
        result = {"id": request_id, "status": req["status"]}
        assignment = self.assignment(request_id)
        if assignment:
            result["award"] = {"fleet_manager": assignment["fleet_manager"],
                               "price_tokens": assignment["price_tokens"]}
            result["candidates"] = assignment["candidates"]
            if req["status"] == "assigned":  # day-ahead assigns at close
                self._lock_settlement_escrows(request_id)
        return result

    def accept_assignment(self, owner, request_id: str, ev: str,
                          station: str) -> dict:
        self._call(owner, "accept", {"request_id": request_id, "ev": ev,
                                     "station": station})
        self._lock_settlement_escrows(request_id)
        return {"id": request_id, "ev": ev, "station": station}

    def record_delivery(self, request_id: str,
                        station: Optional[str] = None) -> dict:
        args = {"request_id": request_id}
        if station:
            args["station"] = station
        self._call(self.dso, "record_delivery", args)
        return dict(self.market_state()["deliveries"][request_id])

    # -- settlement -----------------------------------------------------------

    def reward_amount(self, request_id: str) -> int:
        req = self.request(request_id)
        return req["incentive_tokens"] * self.cfg.reward_share_pct // 100

    def reward_payee(self, request_id: str) -> str:
        assignment = self.assignment(request_id)
        # intraday rewards go to the accepting EV's owner; day-ahead awards
        # have no bound EV, so the winning fleet takes the user pool share
        return assignment["owner"] or assignment["fleet_manager"]

    def _settlement_plan(self, request_id: str) -> SwapPlan:
        req = self.request(request_id)
        assignment = self.assignment(request_id)
        if assignment is None:
            raise ContractFailure("NotAssigned", request_id)
        delta = self.coordinator.delta
        timelock_b = req["end"] + max(self.cfg.settle_window_ms, 10 * delta)
        timelock_a = timelock_b + 2 * delta
        return SwapPlan(
            swap_id=f"settle-{request_id}",
            leg_a=SwapLeg(self.cfg.market_ledger, self.dso.address,
                          assignment["fleet_manager"],
                          assignment["price_tokens"]),
            leg_b=SwapLeg(self.cfg.reward_ledger, self.dso.address,
                          self.reward_payee(request_id),
                          self.reward_amount(request_id)),
            secret_holder=self.dso.address,
            secret=settlement_secret(assignment["secret_seed"]),
            hashlock=bytes.fromhex(assignment["hashlock"]),
            timelock_a=timelock_a,
            timelock_b=timelock_b,
        )

    def _lock_settlement_escrows(self, request_id: str) -> Tuple[str, str]:
        plan = self._settlement_plan(request_id)
        escrow_a, escrow_b = self.coordinator.lock_settlement_legs(plan)
        self._escrows[request_id] = (escrow_a, escrow_b)
        return escrow_a, escrow_b

    def _find_escrows(self, request_id: str) -> Tuple[str, str]:
        if request_id in self._escrows:
            return self._escrows[request_id]
        assignment = self.assignment(request_id)
        hashlock = assignment["hashlock"]

        def scan(ledger_id: str) -> str:
            escrows = self.dep.ledger(ledger_id).state.escrows
            for escrow_id in sorted(escrows):
                if escrows[escrow_id]["hashlock"] == hashlock:
                    return escrow_id
            return ""

        return scan(self.cfg.market_ledger), scan(self.cfg.reward_ledger)

    def settle_request(self, request_id: str,
                       schedule: Optional[FaultSchedule] = None) -> SettlementReport:
        """Decide the outcome on-chain, then complete or unwind the escrows."""
        self._call(self.dso, "settle", {"request_id": request_id})
        settlement = self.settlement(request_id)
        assignment = self.assignment(request_id)
        plan = self._settlement_plan(request_id)
        escrow_a, escrow_b = self._find_escrows(request_id)

        def reveal() -> Optional[bytes]:
            record = self.settlement(request_id)
            if record and record["secret"]:
                return bytes.fromhex(record["secret"])
            return None

        swap = self.coordinator.drive_claims(plan, escrow_a, escrow_b,
                                             reveal, schedule)
        return SettlementReport(
            request_id=request_id,
            outcome=settlement["outcome"],
            delivered_wh=settlement["delivered_wh"],
            committed_wh=settlement["committed_wh"],
            price_tokens=assignment["price_tokens"],
            reward_tokens=plan.leg_b.amount,
            fleet_manager=assignment["fleet_manager"],
            reward_payee=plan.leg_b.payee,
            swap=swap,
        )

    # -- anchoring ---------------------------------------------------------

    def anchor_if_due(self):
        return self.anchor.checkpoint_if_due(self.cfg.anchor_every_blocks)
