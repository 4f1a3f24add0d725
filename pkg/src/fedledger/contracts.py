"""Deterministic contract state machines executed while sealing blocks.

The runtime dispatches calls to native handlers: a fungible token contract,
hash time-locked escrows, membership administration, checkpoint anchoring,
and provenance records. Handlers are pure functions of (state, args, ctx);
they validate every precondition before mutating anything, so a raised
ContractFailure leaves the state untouched and is recorded as the
transaction's status.

Escrows are generic over an asset:

* ``token``          — fungible units moved between balances,
* ``custody:<lot>``  — the right to hold a provenance lot,
* ``handover:<lot>`` — a provisional handover record that a claim finalizes.

All state is built from ints and strings only; digests appear as lowercase
hex. The state root is the hash of the canonical encoding of the whole state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional

from .codec import encode_value, enc_str
from .crypto import sha256
from .errors import ContractFailure

PREIMAGE_LEN = 32

STATUS_LOCKED = "locked"
STATUS_CLAIMED = "claimed"
STATUS_REFUNDED = "refunded"


@dataclass(frozen=True)
class ContractCall:
    """A (contract, method, args) triple; args mirror the gateway JSON."""

    contract: str
    method: str
    args: Dict[str, Any] = field(default_factory=dict)

    def canonical_bytes(self) -> bytes:
        return enc_str(self.contract) + enc_str(self.method) + encode_value(self.args)

    def to_obj(self) -> dict:
        return {"contract": self.contract, "method": self.method, "args": self.args}

    @classmethod
    def from_obj(cls, obj: dict) -> "ContractCall":
        return cls(contract=obj["contract"], method=obj["method"],
                   args=dict(obj.get("args", {})))


@dataclass(frozen=True)
class ExecContext:
    """Execution environment a sealed transaction runs under."""

    submitter: str
    now: int
    tx_id: bytes
    ledger_kind: str = "open"
    ledger_authority: Optional[str] = None


@dataclass
class ContractState:
    """All mutable chain state of one ledger, canonically encodable."""

    token: dict = field(default_factory=dict)
    escrows: dict = field(default_factory=dict)
    members: list = field(default_factory=list)
    anchors: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    market: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, token_authority: Optional[str] = None,
                members: Optional[list] = None) -> "ContractState":
        return cls(
            token={"authority": token_authority or "", "balances": {},
                   "total_minted": 0},
            escrows={},
            members=sorted(members) if members else [],
            anchors=[],
            provenance={"lots": {}, "digests": [], "readings": [], "handovers": []},
            market={},
        )

    def to_obj(self) -> dict:
        return {
            "token": self.token,
            "escrows": self.escrows,
            "members": self.members,
            "anchors": self.anchors,
            "provenance": self.provenance,
            "market": self.market,
        }

    def state_root(self) -> bytes:
        return sha256(b"ST\x01" + encode_value(self.to_obj()))

    def balance(self, address: str) -> int:
        return self.token["balances"].get(address, 0)

    def locked_token_total(self) -> int:
        return sum(e["amount"] for e in self.escrows.values()
                   if e["asset"] == "token" and e["status"] == STATUS_LOCKED)

    def conservation_holds(self) -> bool:
        total = sum(self.token["balances"].values()) + self.locked_token_total()
        return total == self.token["total_minted"]


Handler = Callable[[ContractState, dict, ExecContext], Any]


class ContractRuntime:
    """Registry and dispatcher for contract handlers."""

    def __init__(self):
        self._handlers: Dict[str, Dict[str, Handler]] = {}

    def register(self, contract: str, method: str, fn: Handler) -> None:
        self._handlers.setdefault(contract, {})[method] = fn

    def execute(self, state: ContractState, call: ContractCall,
                ctx: ExecContext) -> Any:
        methods = self._handlers.get(call.contract)
        if methods is None:
            raise ContractFailure("UnknownContract", call.contract)
        fn = methods.get(call.method)
        if fn is None:
            raise ContractFailure("UnknownMethod", f"{call.contract}.{call.method}")
        return fn(state, call.args, ctx)


# --- argument helpers ------------------------------------------------------

def need_str(args: dict, key: str) -> str:
    v = args.get(key)
    if not isinstance(v, str) or not v:
        raise ContractFailure("BadArgs", f"missing or invalid '{key}'")
    return v


def need_int(args: dict, key: str) -> int:
    v = args.get(key)
    if not isinstance(v, int) or isinstance(v, bool):
        raise ContractFailure("BadArgs", f"missing or invalid '{key}'")
    return v


def need_digest_hex(args: dict, key: str) -> str:
    v = need_str(args, key)
    try:
        raw = bytes.fromhex(v)
    except ValueError:
        raise ContractFailure("BadArgs", f"'{key}' is not hex")
    if len(raw) != 32:
        raise ContractFailure("BadArgs", f"'{key}' must be 32 bytes of hex")
    return v.lower()


# --- token -----------------------------------------------------------------

def _token_mint(state: ContractState, args: dict, ctx: ExecContext):
    to = need_str(args, "to")
    amount = need_int(args, "amount")
    if amount < 0:
        raise ContractFailure("NegativeAmount", str(amount))
    if not state.token["authority"] or ctx.submitter != state.token["authority"]:
        raise ContractFailure("NotTokenAuthority", ctx.submitter)
    balances = state.token["balances"]
    balances[to] = balances.get(to, 0) + amount
    state.token["total_minted"] += amount
    return {"to": to, "balance": balances[to]}


def _token_transfer(state: ContractState, args: dict, ctx: ExecContext):
    to = need_str(args, "to")
    amount = need_int(args, "amount")
    if amount < 0:
        raise ContractFailure("NegativeAmount", str(amount))
    balances = state.token["balances"]
    if balances.get(ctx.submitter, 0) < amount:
        raise ContractFailure(
            "InsufficientBalance",
            f"{ctx.submitter} has {balances.get(ctx.submitter, 0)}, needs {amount}")
    balances[ctx.submitter] = balances.get(ctx.submitter, 0) - amount
    balances[to] = balances.get(to, 0) + amount
    if balances[ctx.submitter] == 0:
        del balances[ctx.submitter]
    return {"from": ctx.submitter, "to": to, "amount": amount}


def _token_balance_of(state: ContractState, args: dict, ctx: ExecContext):
    addr = need_str(args, "address")
    return {"address": addr, "balance": state.balance(addr)}


# --- hash time-locked escrows ------------------------------------------------

def escrow_id_for(tx_id: bytes) -> str:
    return sha256(b"escrow:" + tx_id).hex()


def _lot_of(asset: str) -> str:
    return asset.split(":", 1)[1]


def _htlc_lock(state: ContractState, args: dict, ctx: ExecContext):
    payee = need_str(args, "payee")
    amount = need_int(args, "amount") if "amount" in args else 0
    hashlock = need_digest_hex(args, "hashlock")
    timelock = need_int(args, "timelock")
    asset = args.get("asset", "token")
    memo = args.get("memo", {})
    if not isinstance(memo, dict):
        raise ContractFailure("BadArgs", "memo must be a map")
    if timelock <= ctx.now:
        raise ContractFailure("TimelockInPast", f"timelock {timelock} <= now {ctx.now}")
    if amount < 0:
        raise ContractFailure("NegativeAmount", str(amount))

    payer = ctx.submitter
    if asset == "token":
        balances = state.token["balances"]
        if balances.get(payer, 0) < amount:
            raise ContractFailure(
                "InsufficientBalance",
                f"{payer} has {balances.get(payer, 0)}, needs {amount}")
    elif asset.startswith("custody:"):
        lot = _lot_of(asset)
        record = state.provenance["lots"].get(lot)
        if record is None:
            raise ContractFailure("LotNotFound", lot)
        if record["holder"] != payer:
            raise ContractFailure("NotCurrentHolder",
                                  f"{lot} held by {record['holder']}")
        if record["escrow"]:
            raise ContractFailure("NotCurrentHolder", f"{lot} already in escrow")
    elif asset.startswith("handover:"):
        pass  # the lock itself creates the provisional record
    else:
        raise ContractFailure("BadArgs", f"unknown asset '{asset}'")

    escrow_id = escrow_id_for(ctx.tx_id)
    if escrow_id in state.escrows:
        raise ContractFailure("BadArgs", "duplicate escrow id")

    if asset == "token":
        balances = state.token["balances"]
        balances[payer] = balances.get(payer, 0) - amount
        if balances[payer] == 0:
            del balances[payer]
    elif asset.startswith("custody:"):
        state.provenance["lots"][_lot_of(asset)]["escrow"] = escrow_id
    elif asset.startswith("handover:"):
        state.provenance["handovers"].append({
            "lot": _lot_of(asset),
            "from_segment": str(memo.get("from_segment", "")),
            "to_segment": str(memo.get("to_segment", "")),
            "escrow": escrow_id,
            "status": "pending",
        })

    state.escrows[escrow_id] = {
        "payer": payer,
        "payee": payee,
        "amount": amount,
        "hashlock": hashlock,
        "timelock": timelock,
        "status": STATUS_LOCKED,
        "asset": asset,
        "memo": {str(k): str(v) for k, v in memo.items()},
        "preimage": "",
    }
    return {"escrow_id": escrow_id}


def _find_handover(state: ContractState, escrow_id: str) -> dict:
    for rec in state.provenance["handovers"]:
        if rec["escrow"] == escrow_id:
            return rec
    raise ContractFailure("NotLocked", f"no handover for escrow {escrow_id}")


def _htlc_claim(state: ContractState, args: dict, ctx: ExecContext):
    escrow_id = need_str(args, "escrow_id")
    preimage_hex = need_str(args, "preimage")
    escrow = state.escrows.get(escrow_id)
    if escrow is None or escrow["status"] != STATUS_LOCKED:
        raise ContractFailure("NotLocked", escrow_id)
    try:
        preimage = bytes.fromhex(preimage_hex)
    except ValueError:
        raise ContractFailure("WrongPreimage", "preimage is not hex")
    if len(preimage) != PREIMAGE_LEN:
        raise ContractFailure("WrongPreimage",
                              f"preimage must be {PREIMAGE_LEN} bytes")
    if sha256(preimage).hex() != escrow["hashlock"]:
        raise ContractFailure("WrongPreimage", escrow_id)
    # half-open claim window: a claim exactly at the deadline is expired
    if ctx.now >= escrow["timelock"]:
        raise ContractFailure("Expired",
                              f"now {ctx.now} >= timelock {escrow['timelock']}")

    asset = escrow["asset"]
    if asset == "token":
        balances = state.token["balances"]
        balances[escrow["payee"]] = balances.get(escrow["payee"], 0) + escrow["amount"]
    elif asset.startswith("custody:"):
        lot = _lot_of(asset)
        record = state.provenance["lots"][lot]
        record["holder"] = escrow["payee"]
        record["escrow"] = ""
        if escrow["memo"].get("to_segment"):
            record["segment"] = escrow["memo"]["to_segment"]
    elif asset.startswith("handover:"):
        _find_handover(state, escrow_id)["status"] = "final"

    escrow["status"] = STATUS_CLAIMED
    escrow["preimage"] = preimage_hex.lower()  # reveal: readable from chain state
    return {"escrow_id": escrow_id, "preimage": escrow["preimage"]}


def _htlc_refund(state: ContractState, args: dict, ctx: ExecContext):
    escrow_id = need_str(args, "escrow_id")
    escrow = state.escrows.get(escrow_id)
    if escrow is None or escrow["status"] != STATUS_LOCKED:
        raise ContractFailure("NotLocked", escrow_id)
    if ctx.now < escrow["timelock"]:
        raise ContractFailure("NotYetExpired",
                              f"now {ctx.now} < timelock {escrow['timelock']}")

    asset = escrow["asset"]
    if asset == "token":
        balances = state.token["balances"]
        balances[escrow["payer"]] = balances.get(escrow["payer"], 0) + escrow["amount"]
    elif asset.startswith("custody:"):
        state.provenance["lots"][_lot_of(asset)]["escrow"] = ""
    elif asset.startswith("handover:"):
        _find_handover(state, escrow_id)["status"] = "cancelled"

    escrow["status"] = STATUS_REFUNDED
    return {"escrow_id": escrow_id}


# --- membership ----------------------------------------------------------

def _membership_update(state: ContractState, args: dict, ctx: ExecContext):
    action = need_str(args, "action")
    member = need_str(args, "member")
    if ctx.ledger_kind != "permissioned":
        raise ContractFailure("NotPermissioned", ctx.ledger_kind)
    if ctx.submitter != (ctx.ledger_authority or ""):
        raise ContractFailure("NotAuthority", ctx.submitter)
    if action == "add":
        if member in state.members:
            raise ContractFailure("AlreadyMember", member)
        state.members.append(member)
    elif action == "revoke":
        if member not in state.members:
            raise ContractFailure("NotAMember", member)
        state.members.remove(member)
    else:
        raise ContractFailure("BadArgs", f"unknown action '{action}'")
    return {"members": list(state.members)}


# --- anchoring -----------------------------------------------------------

def _anchor_commit(state: ContractState, args: dict, ctx: ExecContext):
    source = need_str(args, "source")
    height = need_int(args, "height")
    state_root = need_digest_hex(args, "state_root")
    # the block hash binds the whole history up to the anchored height, so
    # even state-preserving rewrites below a checkpoint are detectable
    block_hash = need_digest_hex(args, "block_hash")
    last = max((a["height"] for a in state.anchors if a["source"] == source),
               default=-1)
    if height <= last:
        raise ContractFailure("StaleAnchor",
                              f"height {height} <= last anchored {last}")
    state.anchors.append({
        "source": source,
        "height": height,
        "state_root": state_root,
        "block_hash": block_hash,
        "tx_id": ctx.tx_id.hex(),
        "anchored_at": ctx.now,
    })
    return {"source": source, "height": height}


# --- provenance ------------------------------------------------------------

def _provenance_register_lot(state: ContractState, args: dict, ctx: ExecContext):
    lot = need_str(args, "lot")
    holder = need_str(args, "holder")
    segment = need_str(args, "segment")
    if lot in state.provenance["lots"]:
        raise ContractFailure("DuplicateLot", lot)
    state.provenance["lots"][lot] = {"holder": holder, "segment": segment,
                                     "escrow": ""}
    return {"lot": lot, "holder": holder}


def _provenance_record(state: ContractState, args: dict, ctx: ExecContext):
    # full sensor reading, stored on the segment's own ledger
    entry = {
        "platform": need_str(args, "platform"),
        "device": need_str(args, "device"),
        "metric": need_str(args, "metric"),
        "unit": need_str(args, "unit"),
        "ts": need_int(args, "ts"),
        "lot": str(args.get("lot") or ""),
        "tx_id": ctx.tx_id.hex(),
    }
    if "value" in args:
        entry["value"] = need_int(args, "value")
    else:
        entry["lat"] = need_int(args, "lat")
        entry["lon"] = need_int(args, "lon")
    state.provenance["readings"].append(entry)
    return {"tx_id": entry["tx_id"]}


def _provenance_record_digest(state: ContractState, args: dict, ctx: ExecContext):
    # compact pointer on the consortium ledger to a sealed segment reading
    entry = {
        "lot": str(args.get("lot") or ""),
        "segment": need_str(args, "segment"),
        "seg_ledger": need_str(args, "seg_ledger"),
        "seg_tx": need_digest_hex(args, "seg_tx"),
        "metric": need_str(args, "metric"),
        "ts": need_int(args, "ts"),
        "tx_id": ctx.tx_id.hex(),
    }
    state.provenance["digests"].append(entry)
    return {"tx_id": entry["tx_id"]}


def register_builtin(runtime: ContractRuntime) -> ContractRuntime:
    runtime.register("token", "mint", _token_mint)
    runtime.register("token", "transfer", _token_transfer)
    runtime.register("token", "balance_of", _token_balance_of)
    runtime.register("htlc", "lock", _htlc_lock)
    runtime.register("htlc", "claim", _htlc_claim)
    runtime.register("htlc", "refund", _htlc_refund)
    runtime.register("membership", "update", _membership_update)
    runtime.register("anchor", "commit", _anchor_commit)
    runtime.register("provenance", "register_lot", _provenance_register_lot)
    runtime.register("provenance", "record", _provenance_record)
    runtime.register("provenance", "record_digest", _provenance_record_digest)
    return runtime
