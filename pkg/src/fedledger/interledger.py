"""Cross-ledger coordination: two-leg atomic swaps and checkpoint anchoring.

The swap protocol is the classic hash time-locked sequence

    lock(A) -> lock(B) -> claim(B, s) -> claim(A, s)

where the secret holder reveals the preimage ``s`` by claiming on ledger B,
and the counterparty then claims on ledger A. The coordinator only drives
party behaviour; it can crash or be delayed at any step, and safety must come
from the timelocks plus each party's local guards:

* the B-side locker locks only after checking the A-side escrow matches,
* the secret holder claims B only while enough margin remains for the
  counterparty's worst-case lag before ``timelock_a``,
* payers refund their own escrows once expired.

Under those guards every enumerated crash/delay schedule terminates with both
legs claimed or both legs refunded, never mixed.

Anchoring commits (source ledger, height, state root) records onto a public
ledger; ``verify_anchors`` replays the source chain from genesis and flags the
first checkpoint whose recomputed root differs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from .contracts import ContractCall, escrow_id_for
from .crypto import sha256
from .errors import (FedLedgerError, InsufficientFunds, NoCheckpoints,
                     NothingNew, PublicLedgerRejected)
from .ledger import Block, LedgerConfig, replay_blocks

PHASE_INIT = "init"
PHASE_A_LOCKED = "a_locked"
PHASE_B_LOCKED = "b_locked"
PHASE_B_CLAIMED = "b_claimed"
PHASE_COMPLETE = "complete"
PHASE_REFUNDING = "refunding"
PHASE_REFUNDED = "refunded"
PHASE_MIXED = "mixed"  # must never terminate here; asserted by tests

LEG_UNLOCKED = "unlocked"

ROLE_PAYER_A = "payer_a"
ROLE_PAYER_B = "payer_b"
ROLE_PAYEE_A = "payee_a"
ROLE_PAYEE_B = "payee_b"


@dataclass(frozen=True)
class SwapLeg:
    ledger_id: str
    payer: str
    payee: str
    amount: int
    asset: str = "token"
    memo: tuple = ()  # ((key, value), ...) pairs carried into the escrow

    def memo_dict(self) -> dict:
        return {k: v for k, v in self.memo}


@dataclass
class SwapPlan:
    swap_id: str
    leg_a: SwapLeg
    leg_b: SwapLeg
    secret_holder: str
    secret: bytes
    hashlock: bytes
    timelock_a: int
    timelock_b: int

    def validate(self, delta_ms: int) -> None:
        if self.leg_a.ledger_id == self.leg_b.ledger_id:
            raise ValueError("swap legs must reference distinct ledgers")
        if self.timelock_a < self.timelock_b + 2 * delta_ms:
            raise ValueError("timelock_a must trail timelock_b by at least 2 delta")


@dataclass
class SwapStatus:
    swap_id: str
    phase: str
    leg_a_state: str
    leg_b_state: str
    escrow_a: str = ""
    escrow_b: str = ""
    revealed_preimage: str = ""
    note: str = ""

    def to_obj(self) -> dict:
        return {
            "swap_id": self.swap_id,
            "phase": self.phase,
            "leg_a_state": self.leg_a_state,
            "leg_b_state": self.leg_b_state,
            "escrow_a": self.escrow_a,
            "escrow_b": self.escrow_b,
            "revealed_preimage": self.revealed_preimage,
            "note": self.note,
        }


@dataclass(frozen=True)
class FaultSchedule:
    """Crash/delay injection for the four protocol steps.

    ``delays[k]`` stalls step k+1 by that many ms before it runs. A crash
    takes ``crash_party`` down when step ``crash_step`` is reached; the party
    recovers ``recovery_lag`` ms later and then performs whatever safe action
    is still pending.
    """

    delays: Tuple[int, int, int, int] = (0, 0, 0, 0)
    crash_step: Optional[int] = None
    crash_party: Optional[str] = None
    recovery_lag: int = 0

    def describe(self) -> str:
        crash = (f" crash={self.crash_party}@{self.crash_step}"
                 f"+{self.recovery_lag}" if self.crash_step else "")
        return f"delays={list(self.delays)}{crash}"


class SwapCoordinator:
    """Drives swap parties against a deployment's ledgers.

    ``claim_margin`` is the secret holder's reveal guard: it claims on B only
    while ``now + claim_margin < timelock_a``, covering one propagation delta
    plus the counterparty's worst-case stall (injected delay or crash
    recovery, both bounded by 3 delta in the fault model).
    """

    def __init__(self, deployment, delta_ms: int = 2000,
                 claim_margin: Optional[int] = None):
        self.dep = deployment
        self.delta = delta_ms
        self.claim_margin = 4 * delta_ms if claim_margin is None else claim_margin

    # -- plan construction ---------------------------------------------------

    def make_plan(self, swap_id: str, leg_a: SwapLeg, leg_b: SwapLeg,
                  secret_holder: str, secret: Optional[bytes] = None,
                  timelock_a: Optional[int] = None,
                  timelock_b: Optional[int] = None) -> SwapPlan:
        if secret is None:
            secret = sha256(b"swap-secret:"
                            + self.dep.master_seed.to_bytes(8, "big", signed=True)
                            + swap_id.encode("utf-8"))
        if timelock_b is None:
            timelock_b = self.dep.clock.now + 6 * self.delta
        if timelock_a is None:
            timelock_a = timelock_b + 2 * self.delta
        plan = SwapPlan(swap_id=swap_id, leg_a=leg_a, leg_b=leg_b,
                        secret_holder=secret_holder, secret=secret,
                        hashlock=sha256(secret), timelock_a=timelock_a,
                        timelock_b=timelock_b)
        plan.validate(self.delta)
        return plan

    # -- protocol ---------------------------------------------------------

    def run_swap(self, plan: SwapPlan,
                 schedule: Optional[FaultSchedule] = None) -> SwapStatus:
        """Drive a swap to a terminal state (complete or refunded)."""
        self._precheck_funds(plan)
        return self._drive(plan, schedule, lock_phase=True,
                           reveal=lambda: plan.secret)

    def lock_settlement_legs(self, plan: SwapPlan) -> Tuple[str, str]:
        """Lock both escrows up front (used at assignment time)."""
        self._precheck_funds(plan)
        escrow_a = self._lock(plan.leg_a, plan.timelock_a, plan)
        if escrow_a is None:
            raise InsufficientFunds(f"lock failed on {plan.leg_a.ledger_id}")
        escrow_b = self._lock(plan.leg_b, plan.timelock_b, plan)
        if escrow_b is None:
            raise InsufficientFunds(f"lock failed on {plan.leg_b.ledger_id}")
        return escrow_a, escrow_b

    def drive_claims(self, plan: SwapPlan, escrow_a: str, escrow_b: str,
                     reveal: Callable[[], Optional[bytes]],
                     schedule: Optional[FaultSchedule] = None) -> SwapStatus:
        """Complete or unwind a swap whose escrows were locked earlier."""
        return self._drive(plan, schedule, lock_phase=False, reveal=reveal,
                           escrow_a=escrow_a, escrow_b=escrow_b)

    # -- internals ----------------------------------------------------------

    def _precheck_funds(self, plan: SwapPlan) -> None:
        for leg in (plan.leg_a, plan.leg_b):
            state = self.dep.ledger(leg.ledger_id).state
            if leg.asset == "token":
                if state.balance(leg.payer) < leg.amount:
                    raise InsufficientFunds(
                        f"{leg.payer} holds {state.balance(leg.payer)} "
                        f"< {leg.amount} on {leg.ledger_id}")
            elif leg.asset.startswith("custody:"):
                lot = leg.asset.split(":", 1)[1]
                record = state.provenance["lots"].get(lot)
                if record is None or record["holder"] != leg.payer \
                        or record["escrow"]:
                    raise InsufficientFunds(f"{leg.payer} does not hold {lot}")

    def _signer(self, address: str):
        return self.dep.keyring.get(address)

    def _escrow(self, ledger_id: str, escrow_id: str) -> Optional[dict]:
        if not escrow_id:
            return None
        return self.dep.ledger(ledger_id).state.escrows.get(escrow_id)

    def _submit(self, ledger_id: str, signer_addr: str, call: ContractCall):
        tx, _, status = self.dep.submit_and_seal(
            ledger_id, self._signer(signer_addr), call)
        return tx, status

    def _lock(self, leg: SwapLeg, timelock: int, plan: SwapPlan) -> Optional[str]:
        call = ContractCall("htlc", "lock", {
            "payee": leg.payee,
            "amount": leg.amount,
            "hashlock": plan.hashlock.hex(),
            "timelock": timelock,
            "asset": leg.asset,
            "memo": leg.memo_dict(),
        })
        tx, status = self._submit(leg.ledger_id, leg.payer, call)
        if status != "ok":
            return None
        return escrow_id_for(tx.tx_id)

    def _claim(self, leg: SwapLeg, escrow_id: str, preimage: bytes,
               claimer: str) -> bool:
        call = ContractCall("htlc", "claim", {
            "escrow_id": escrow_id,
            "preimage": preimage.hex(),
        })
        _, status = self._submit(leg.ledger_id, claimer, call)
        return status == "ok"

    def _refund(self, leg: SwapLeg, escrow_id: str) -> bool:
        call = ContractCall("htlc", "refund", {"escrow_id": escrow_id})
        _, status = self._submit(leg.ledger_id, leg.payer, call)
        return status == "ok"

    def _drive(self, plan: SwapPlan, schedule: Optional[FaultSchedule],
               lock_phase: bool, reveal: Callable[[], Optional[bytes]],
               escrow_a: str = "", escrow_b: str = "") -> SwapStatus:
        clock = self.dep.clock
        down: Dict[str, int] = {}
        role_addr = {
            ROLE_PAYER_A: plan.leg_a.payer,
            ROLE_PAYER_B: plan.leg_b.payer,
            ROLE_PAYEE_A: plan.leg_a.payee,
            ROLE_PAYEE_B: plan.leg_b.payee,
        }

        def wait_for(actor: str) -> None:
            until = down.get(actor, 0)
            if until > clock.now:
                clock.advance_to(until)

        def step_prologue(k: int) -> None:
            if schedule is None:
                return
            if schedule.crash_step == k and schedule.crash_party:
                addr = role_addr[schedule.crash_party]
                down[addr] = max(down.get(addr, 0),
                                 clock.now + schedule.recovery_lag)
            clock.advance(schedule.delays[k - 1])

        note = ""

        # steps 1 and 2: escrow locks
        if lock_phase:
            step_prologue(1)
            wait_for(plan.leg_a.payer)
            escrow_a = self._lock(plan.leg_a, plan.timelock_a, plan) or ""
            clock.advance(self.delta)

            step_prologue(2)
            wait_for(plan.leg_b.payer)
            if escrow_a:
                seen = self._escrow(plan.leg_a.ledger_id, escrow_a)
                # B-side party locks only after auditing the A-side escrow
                sound = (seen is not None
                         and seen["status"] == "locked"
                         and seen["hashlock"] == plan.hashlock.hex()
                         and seen["timelock"] >= plan.timelock_b + 2 * self.delta)
                if sound:
                    escrow_b = self._lock(plan.leg_b, plan.timelock_b, plan) or ""
                else:
                    note = "a-side escrow failed audit"
            else:
                note = "a-side lock failed"
            clock.advance(self.delta)
        else:
            step_prologue(1)
            step_prologue(2)

        # step 3: secret holder claims on B, revealing the preimage
        step_prologue(3)
        wait_for(plan.secret_holder)
        if escrow_b:
            secret = reveal()
            esc_b = self._escrow(plan.leg_b.ledger_id, escrow_b)
            safe = (secret is not None
                    and esc_b is not None and esc_b["status"] == "locked"
                    and clock.now < plan.timelock_b
                    and clock.now + self.claim_margin < plan.timelock_a)
            if safe:
                self._claim(plan.leg_b, escrow_b, secret, plan.secret_holder)
            elif secret is None:
                note = note or "secret withheld"
            else:
                note = note or "reveal window closed"
        clock.advance(self.delta)

        # step 4: counterparty claims on A with the revealed preimage
        step_prologue(4)
        wait_for(plan.leg_a.payee)
        esc_b = self._escrow(plan.leg_b.ledger_id, escrow_b)
        if escrow_a and esc_b is not None and esc_b["status"] == "claimed":
            revealed = bytes.fromhex(esc_b["preimage"])
            esc_a = self._escrow(plan.leg_a.ledger_id, escrow_a)
            if esc_a is not None and esc_a["status"] == "locked":
                self._claim(plan.leg_a, escrow_a, revealed, plan.leg_a.payee)

        # unwind: once past both timelocks, payers refund anything still locked
        horizon = max(plan.timelock_a, plan.timelock_b) + self.delta
        for leg, escrow_id in ((plan.leg_a, escrow_a), (plan.leg_b, escrow_b)):
            esc = self._escrow(leg.ledger_id, escrow_id)
            if esc is not None and esc["status"] == "locked":
                clock.advance_to(horizon)
                wait_for(leg.payer)
                self._refund(leg, escrow_id)
                note = note or "timed out; refunded after expiry"

        return self._status(plan, escrow_a, escrow_b, note)

    def _status(self, plan: SwapPlan, escrow_a: str, escrow_b: str,
                note: str = "") -> SwapStatus:
        def leg_state(leg: SwapLeg, escrow_id: str) -> str:
            esc = self._escrow(leg.ledger_id, escrow_id)
            return esc["status"] if esc is not None else LEG_UNLOCKED

        state_a = leg_state(plan.leg_a, escrow_a)
        state_b = leg_state(plan.leg_b, escrow_b)
        claimed = [s == "claimed" for s in (state_a, state_b)]
        if all(claimed):
            phase = PHASE_COMPLETE
        elif not any(claimed):
            phase = PHASE_REFUNDED
        else:
            phase = PHASE_MIXED
        preimage = ""
        esc_b = self._escrow(plan.leg_b.ledger_id, escrow_b)
        if esc_b is not None and esc_b.get("preimage"):
            preimage = esc_b["preimage"]
        return SwapStatus(swap_id=plan.swap_id, phase=phase,
                          leg_a_state=state_a, leg_b_state=state_b,
                          escrow_a=escrow_a, escrow_b=escrow_b,
                          revealed_preimage=preimage, note=note)


def enumerate_fault_schedules(delta_ms: int,
                              delay_steps: Tuple[int, ...] = (0, 1, 2, 3),
                              recovery_lag_steps: int = 3) -> List[FaultSchedule]:
    """Full crash/delay grid used by the atomicity suite.

    Every combination of per-step delays in ``delay_steps`` (in delta units)
    crossed with no-crash plus a crash of either side's party at each step.
    """
    crash_options: List[Tuple[Optional[int], Optional[str]]] = [(None, None)]
    for step, roles in ((1, (ROLE_PAYER_A, ROLE_PAYER_B)),
                        (2, (ROLE_PAYER_B, ROLE_PAYEE_B)),
                        (3, (ROLE_PAYEE_B, ROLE_PAYEE_A)),
                        (4, (ROLE_PAYEE_A, ROLE_PAYER_A))):
        for role in roles:
            crash_options.append((step, role))
    schedules = []
    lag = recovery_lag_steps * delta_ms
    for d1 in delay_steps:
        for d2 in delay_steps:
            for d3 in delay_steps:
                for d4 in delay_steps:
                    delays = (d1 * delta_ms, d2 * delta_ms,
                              d3 * delta_ms, d4 * delta_ms)
                    for crash_step, crash_party in crash_options:
                        schedules.append(FaultSchedule(
                            delays=delays, crash_step=crash_step,
                            crash_party=crash_party,
                            recovery_lag=lag if crash_step else 0))
    return schedules


# --- checkpoint anchoring --------------------------------------------------

@dataclass(frozen=True)
class AnchorCheckpoint:
    source_ledger: str
    height: int
    state_root: str
    block_hash: str
    public_ledger: str
    tx_id: str
    anchored_at: int

    def to_obj(self) -> dict:
        return {
            "source_ledger": self.source_ledger,
            "height": self.height,
            "state_root": self.state_root,
            "block_hash": self.block_hash,
            "public_ledger": self.public_ledger,
            "tx_id": self.tx_id,
            "anchored_at": self.anchored_at,
        }


@dataclass
class AnchorReport:
    ok: bool
    first_divergent_height: Optional[int] = None
    first_divergent_index: Optional[int] = None
    checkpoints: int = 0
    detail: str = ""

    def to_obj(self) -> dict:
        return {
            "ok": self.ok,
            "first_divergent_height": self.first_divergent_height,
            "first_divergent_index": self.first_divergent_index,
            "checkpoints": self.checkpoints,
            "detail": self.detail,
        }


def read_checkpoints(deployment, source_id: str,
                     public_id: str) -> List[AnchorCheckpoint]:
    public = deployment.ledger(public_id)
    out = []
    for entry in public.state.anchors:
        if entry["source"] == source_id:
            out.append(AnchorCheckpoint(
                source_ledger=source_id, height=entry["height"],
                state_root=entry["state_root"],
                block_hash=entry.get("block_hash", ""),
                public_ledger=public_id,
                tx_id=entry["tx_id"], anchored_at=entry["anchored_at"]))
    return out


class AnchorAgent:
    """Periodically commits a source ledger's tip state root to a public one."""

    def __init__(self, deployment, signer, source_id: str, public_id: str):
        self.dep = deployment
        self.signer = signer
        self.source_id = source_id
        self.public_id = public_id

    def last_anchored_height(self) -> int:
        cps = read_checkpoints(self.dep, self.source_id, self.public_id)
        return cps[-1].height if cps else -1

    def checkpoint(self) -> AnchorCheckpoint:
        source = self.dep.ledger(self.source_id)
        height = source.height
        if height <= self.last_anchored_height():
            raise NothingNew(
                f"{self.source_id} at height {height}, nothing to anchor")
        tip = source.chain[height]
        call = ContractCall("anchor", "commit", {
            "source": self.source_id,
            "height": height,
            "state_root": tip.state_root.hex(),
            "block_hash": tip.block_hash().hex(),
        })
        try:
            tx, _, status = self.dep.submit_and_seal(
                self.public_id, self.signer, call)
        except FedLedgerError as exc:
            raise PublicLedgerRejected(str(exc)) from exc
        if status != "ok":
            raise PublicLedgerRejected(status)
        return AnchorCheckpoint(
            source_ledger=self.source_id, height=height,
            state_root=tip.state_root.hex(),
            block_hash=tip.block_hash().hex(),
            public_ledger=self.public_id, tx_id=tx.tx_id.hex(),
            anchored_at=self.dep.clock.now)

    def checkpoint_if_due(self, every_blocks: int) -> Optional[AnchorCheckpoint]:
        source = self.dep.ledger(self.source_id)
        if source.height - self.last_anchored_height() >= every_blocks:
            return self.checkpoint()
        return None


def verify_anchor_blocks(config: LedgerConfig, blocks: List[Block],
                         checkpoints: List[AnchorCheckpoint],
                         runtime) -> AnchorReport:
    """Compare checkpoints against roots and hashes replayed from ``blocks``.

    The state root is recomputed by replaying every transaction from genesis;
    the block hash is recomputed from the current bytes. Either mismatch marks
    the checkpoint divergent, so both semantic rewrites and state-preserving
    history edits are caught.
    """
    if not checkpoints:
        raise NoCheckpoints(config.ledger_id)
    roots: Dict[int, str] = {}
    for height, _, state_root, _ in replay_blocks(config, blocks, runtime):
        roots[height] = state_root.hex()
    hashes = {block.height: block.block_hash().hex() for block in blocks}
    for index, cp in enumerate(checkpoints):
        recomputed_root = roots.get(cp.height)
        recomputed_hash = hashes.get(cp.height)
        root_ok = recomputed_root == cp.state_root
        hash_ok = not cp.block_hash or recomputed_hash == cp.block_hash
        if not (root_ok and hash_ok):
            what = "state root" if not root_ok else "block hash"
            return AnchorReport(
                ok=False, first_divergent_height=cp.height,
                first_divergent_index=index, checkpoints=len(checkpoints),
                detail=(f"checkpoint {index} at height {cp.height}: "
                        f"{what} diverged from anchored value"))
    return AnchorReport(ok=True, checkpoints=len(checkpoints))


def verify_anchors(deployment, source_id: str, public_id: str) -> AnchorReport:
    """Read-only audit of a source ledger against its anchored checkpoints."""
    checkpoints = read_checkpoints(deployment, source_id, public_id)
    source = deployment.ledger(source_id)
    return verify_anchor_blocks(source.config, list(source.chain),
                                checkpoints, deployment.runtime)
