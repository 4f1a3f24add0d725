"""Emulated append-only ledgers: admission, sealing, proofs, persistence.

Each ledger is a hash-linked chain of Merkle-rooted blocks over a
deterministic contract state. There is no consensus simulation: a single
sequencer seals the pending queue on demand, and determinism comes from the
canonical encoding plus the pure contract runtime.

A transaction's identity and signature cover (submitter, nonce, timestamp,
payload) but not the ledger binding; the block header carries the ledger id.
Two ledgers sealing identical queues from identical state therefore produce
byte-identical blocks except for the ledger id field.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .codec import (CodecError, Reader, enc_bytes, enc_i64, enc_str,
                    enc_u32)
from .contracts import ContractCall, ContractRuntime, ContractState, ExecContext
from .crypto import (DIGEST_LEN, ZERO_DIGEST, fold_proof, merkle_root,
                     merkle_siblings, sha256, verify_signature)
from .errors import (BadSignature, ContractFailure, NotAMember, NotAuthority,
                     NotMember, NotPermissioned, AlreadyMember, StaleNonce,
                     TxNotFound, TxPendingNotSealed, WrongPayloadKind)

KIND_OPEN = "open"
KIND_PERMISSIONED = "permissioned"
KIND_ANCHOR_ONLY = "anchor_only"

STATUS_OK = "ok"

_TX_DOMAIN = b"TX\x01"
_BLOCK_DOMAIN = b"BK\x01"


@dataclass(frozen=True)
class LedgerConfig:
    ledger_id: str
    kind: str
    members: frozenset = frozenset()
    authority: Optional[str] = None
    token_authority: Optional[str] = None
    restricted_read: bool = False

    def validate(self) -> None:
        if self.kind not in (KIND_OPEN, KIND_PERMISSIONED, KIND_ANCHOR_ONLY):
            raise ValueError(f"unknown ledger kind '{self.kind}'")
        if self.kind == KIND_PERMISSIONED:
            if not self.members:
                raise ValueError("permissioned ledger needs a nonempty member set")
            if not self.authority:
                raise ValueError("permissioned ledger needs an authority")

    def to_sidecar(self, tip_hash: bytes, height: int) -> dict:
        return {
            "ledger_id": self.ledger_id,
            "kind": self.kind,
            "members": sorted(self.members),
            "authority": self.authority,
            "token_authority": self.token_authority,
            "restricted_read": self.restricted_read,
            "tip_hash": tip_hash.hex(),
            "height": height,
        }

    @classmethod
    def from_sidecar(cls, obj: dict) -> "LedgerConfig":
        return cls(
            ledger_id=obj["ledger_id"],
            kind=obj["kind"],
            members=frozenset(obj.get("members") or []),
            authority=obj.get("authority"),
            token_authority=obj.get("token_authority"),
            restricted_read=bool(obj.get("restricted_read", False)),
        )


@dataclass(frozen=True)
class Transaction:
    ledger_id: str
    submitter: str
    nonce: int
    timestamp: int
    call: ContractCall
    signature: bytes
    tx_id: bytes

    @staticmethod
    def signing_bytes(submitter: str, nonce: int, timestamp: int,
                      call: ContractCall) -> bytes:
        return (_TX_DOMAIN + enc_str(submitter) + enc_i64(nonce)
                + enc_i64(timestamp) + call.canonical_bytes())

    @classmethod
    def build(cls, ledger_id: str, keypair, nonce: int, timestamp: int,
              call: ContractCall) -> "Transaction":
        payload = cls.signing_bytes(keypair.address, nonce, timestamp, call)
        return cls(
            ledger_id=ledger_id,
            submitter=keypair.address,
            nonce=nonce,
            timestamp=timestamp,
            call=call,
            signature=keypair.sign(payload),
            tx_id=sha256(payload),
        )

    def record_bytes(self) -> bytes:
        return (enc_str(self.submitter) + enc_i64(self.nonce)
                + enc_i64(self.timestamp) + self.call.canonical_bytes()
                + enc_bytes(self.signature))

    @classmethod
    def parse_record(cls, raw: bytes, ledger_id: str) -> "Transaction":
        r = Reader(raw)
        submitter = r.read_str()
        nonce = r.read_i64()
        timestamp = r.read_i64()
        contract = r.read_str()
        method = r.read_str()
        args = r.read_value()
        signature = r.read_bytes()
        if not r.at_end():
            raise CodecError("trailing bytes in transaction record")
        if not isinstance(args, dict):
            raise CodecError("transaction args must be a map")
        call = ContractCall(contract=contract, method=method, args=args)
        payload = cls.signing_bytes(submitter, nonce, timestamp, call)
        return cls(ledger_id=ledger_id, submitter=submitter, nonce=nonce,
                   timestamp=timestamp, call=call, signature=signature,
                   tx_id=sha256(payload))

    def to_obj(self) -> dict:
        return {
            "tx_id": self.tx_id.hex(),
            "ledger_id": self.ledger_id,
            "submitter": self.submitter,
            "nonce": self.nonce,
            "timestamp": self.timestamp,
            "call": self.call.to_obj(),
        }


@dataclass(frozen=True)
class Block:
    ledger_id: str
    height: int
    prev_hash: bytes
    tx_root: bytes
    state_root: bytes
    sealed_at: int
    transactions: Tuple[Transaction, ...]
    statuses: Tuple[str, ...]

    def canonical_bytes(self) -> bytes:
        out = (_BLOCK_DOMAIN + enc_str(self.ledger_id) + enc_i64(self.height)
               + enc_bytes(self.prev_hash) + enc_bytes(self.tx_root)
               + enc_bytes(self.state_root) + enc_i64(self.sealed_at)
               + enc_u32(len(self.transactions)))
        for tx, status in zip(self.transactions, self.statuses):
            out += enc_bytes(tx.record_bytes()) + enc_str(status)
        return out

    def block_hash(self) -> bytes:
        return sha256(self.canonical_bytes())

    @classmethod
    def parse(cls, raw: bytes) -> "Block":
        r = Reader(raw)
        if r._take(len(_BLOCK_DOMAIN)) != _BLOCK_DOMAIN:
            raise CodecError("bad block domain tag")
        ledger_id = r.read_str()
        height = r.read_i64()
        prev_hash = r.read_bytes()
        tx_root = r.read_bytes()
        state_root = r.read_bytes()
        sealed_at = r.read_i64()
        count = r.read_u32()
        txs: List[Transaction] = []
        statuses: List[str] = []
        for _ in range(count):
            txs.append(Transaction.parse_record(r.read_bytes(), ledger_id))
            statuses.append(r.read_str())
        if not r.at_end():
            raise CodecError("trailing bytes in block")
        if len(prev_hash) != DIGEST_LEN or len(tx_root) != DIGEST_LEN \
                or len(state_root) != DIGEST_LEN:
            raise CodecError("bad digest length in block header")
        return cls(ledger_id=ledger_id, height=height, prev_hash=prev_hash,
                   tx_root=tx_root, state_root=state_root, sealed_at=sealed_at,
                   transactions=tuple(txs), statuses=tuple(statuses))

    def to_obj(self) -> dict:
        return {
            "ledger_id": self.ledger_id,
            "height": self.height,
            "hash": self.block_hash().hex(),
            "prev_hash": self.prev_hash.hex(),
            "tx_root": self.tx_root.hex(),
            "state_root": self.state_root.hex(),
            "sealed_at": self.sealed_at,
            "transactions": [
                dict(tx.to_obj(), status=status)
                for tx, status in zip(self.transactions, self.statuses)
            ],
        }


@dataclass(frozen=True)
class Receipt:
    accepted: bool
    queue_position: int


@dataclass(frozen=True)
class InclusionProof:
    tx_id: bytes
    leaf_index: int
    siblings: Tuple[bytes, ...]
    block_height: int
    ledger_id: str

    def to_obj(self) -> dict:
        return {
            "tx_id": self.tx_id.hex(),
            "leaf_index": self.leaf_index,
            "siblings": [s.hex() for s in self.siblings],
            "block_height": self.block_height,
            "ledger_id": self.ledger_id,
        }


def verify_inclusion(proof: InclusionProof, block: Block) -> bool:
    if proof.ledger_id != block.ledger_id or proof.block_height != block.height:
        return False
    return fold_proof(proof.tx_id, proof.leaf_index, proof.siblings) == block.tx_root


@dataclass
class VerifyReport:
    ok: bool
    first_bad_height: Optional[int] = None
    detail: str = ""

    def to_obj(self) -> dict:
        return {"ok": self.ok, "first_bad_height": self.first_bad_height,
                "detail": self.detail}


class KeyRegistry:
    """Maps addresses to raw public keys for signature checks."""

    def __init__(self):
        self._keys: Dict[str, bytes] = {}

    def register(self, address: str, public_bytes: bytes) -> None:
        self._keys[address] = public_bytes

    def public_key(self, address: str) -> Optional[bytes]:
        return self._keys.get(address)


class Ledger:
    """One emulated ledger; all mutations serialize through a per-ledger lock."""

    def __init__(self, config: LedgerConfig, runtime: ContractRuntime,
                 registry: KeyRegistry):
        config.validate()
        self.config = config
        self.runtime = runtime
        self.registry = registry
        self.chain: List[Block] = []
        self.state = ContractState.initial(
            token_authority=config.token_authority,
            members=list(config.members) if config.kind == KIND_PERMISSIONED else None,
        )
        self.pending: List[Transaction] = []
        self.tip_hash: bytes = ZERO_DIGEST
        self._nonces: Dict[str, int] = {}
        self._tx_index: Dict[bytes, Tuple[int, int]] = {}
        self._lock = threading.RLock()

    # -- admission ---------------------------------------------------------

    def current_members(self) -> set:
        """Sealed member set with pending membership changes applied."""
        members = set(self.state.members)
        for tx in self.pending:
            if tx.call.contract == "membership" and tx.call.method == "update":
                member = tx.call.args.get("member")
                if tx.call.args.get("action") == "add":
                    members.add(member)
                elif tx.call.args.get("action") == "revoke":
                    members.discard(member)
        return members

    def next_nonce(self, address: str) -> int:
        with self._lock:
            return self._nonces.get(address, -1) + 1

    def submit(self, tx: Transaction) -> Receipt:
        with self._lock:
            if tx.ledger_id != self.config.ledger_id:
                raise ValueError(
                    f"transaction bound to '{tx.ledger_id}' submitted to "
                    f"'{self.config.ledger_id}'")
            public = self.registry.public_key(tx.submitter)
            payload = Transaction.signing_bytes(tx.submitter, tx.nonce,
                                                tx.timestamp, tx.call)
            if public is None or sha256(payload) != tx.tx_id \
                    or not verify_signature(public, payload, tx.signature):
                raise BadSignature(tx.submitter)
            last = self._nonces.get(tx.submitter, -1)
            if tx.nonce <= last:
                raise StaleNonce(f"nonce {tx.nonce} <= last accepted {last}")
            if self.config.kind == KIND_PERMISSIONED:
                is_membership_admin = (tx.submitter == self.config.authority
                                       and tx.call.contract == "membership")
                if tx.submitter not in self.current_members() \
                        and not is_membership_admin:
                    raise NotMember(tx.submitter)
            if self.config.kind == KIND_ANCHOR_ONLY \
                    and tx.call.contract != "anchor":
                raise WrongPayloadKind(tx.call.contract)
            self._nonces[tx.submitter] = tx.nonce
            self.pending.append(tx)
            return Receipt(accepted=True, queue_position=len(self.pending) - 1)

    # -- sealing -------------------------------------------------------------

    def seal(self, now: int) -> Block:
        with self._lock:
            txs = tuple(self.pending)
            self.pending = []
            statuses: List[str] = []
            for tx in txs:
                ctx = ExecContext(submitter=tx.submitter, now=now,
                                  tx_id=tx.tx_id, ledger_kind=self.config.kind,
                                  ledger_authority=self.config.authority)
                try:
                    self.runtime.execute(self.state, tx.call, ctx)
                    statuses.append(STATUS_OK)
                except ContractFailure as failure:
                    statuses.append(failure.code)
            block = Block(
                ledger_id=self.config.ledger_id,
                height=len(self.chain),
                prev_hash=self.tip_hash,
                tx_root=merkle_root([tx.tx_id for tx in txs]),
                state_root=self.state.state_root(),
                sealed_at=now,
                transactions=txs,
                statuses=tuple(statuses),
            )
            for idx, tx in enumerate(txs):
                self._tx_index[tx.tx_id] = (block.height, idx)
            self.chain.append(block)
            self.tip_hash = block.block_hash()
            return block

    # -- queries ---------------------------------------------------------

    @property
    def height(self) -> int:
        return len(self.chain) - 1

    def find_tx(self, tx_id: bytes) -> Tuple[Block, int]:
        with self._lock:
            loc = self._tx_index.get(tx_id)
            if loc is None:
                if any(tx.tx_id == tx_id for tx in self.pending):
                    raise TxPendingNotSealed(tx_id.hex())
                raise TxNotFound(tx_id.hex())
            height, idx = loc
            return self.chain[height], idx

    def tx_status(self, tx_id: bytes) -> str:
        block, idx = self.find_tx(tx_id)
        return block.statuses[idx]

    def inclusion_proof(self, tx_id: bytes) -> InclusionProof:
        block, idx = self.find_tx(tx_id)
        leaves = [tx.tx_id for tx in block.transactions]
        return InclusionProof(
            tx_id=tx_id,
            leaf_index=idx,
            siblings=tuple(merkle_siblings(leaves, idx)),
            block_height=block.height,
            ledger_id=self.config.ledger_id,
        )

    def update_membership(self, authority_keypair, action: str,
                          member: str, timestamp: int) -> set:
        """Validate a membership change and queue its audit transaction.

        The change takes effect immediately for admission purposes (it is part
        of ``current_members``) and is applied to sealed state when the queued
        transaction seals.
        """
        with self._lock:
            if self.config.kind != KIND_PERMISSIONED:
                raise NotPermissioned(self.config.ledger_id)
            if authority_keypair.address != self.config.authority:
                raise NotAuthority(authority_keypair.address)
            members = self.current_members()
            if action == "add" and member in members:
                raise AlreadyMember(member)
            if action == "revoke" and member not in members:
                raise NotAMember(member)
            call = ContractCall("membership", "update",
                                {"action": action, "member": member})
            tx = Transaction.build(self.config.ledger_id, authority_keypair,
                                   self.next_nonce(authority_keypair.address),
                                   timestamp, call)
            self.submit(tx)
            return self.current_members()

    # -- verification ---------------------------------------------------------

    def verify(self) -> VerifyReport:
        with self._lock:
            raw = [b.canonical_bytes() for b in self.chain]
            return verify_raw_chain(self.config, raw, self.runtime,
                                    expected_tip=self.tip_hash)

    # -- persistence ------------------------------------------------------------

    def save(self, directory) -> Tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        chain_path = directory / f"{self.config.ledger_id}.chain"
        sidecar_path = directory / f"{self.config.ledger_id}.json"
        with self._lock:
            with open(chain_path, "wb") as fh:
                for block in self.chain:
                    fh.write(enc_bytes(block.canonical_bytes()))
            sidecar = self.config.to_sidecar(self.tip_hash, self.height)
            sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        return chain_path, sidecar_path


def parse_chain_file(data: bytes) -> Tuple[List[bytes], Optional[str]]:
    """Split a chain file into raw block payloads.

    Returns (payloads, error). On a framing error the payloads parsed so far
    are returned along with a description; verification treats the first
    unparseable record as the first bad height.
    """
    r = Reader(data)
    blocks: List[bytes] = []
    while not r.at_end():
        try:
            blocks.append(r.read_bytes())
        except CodecError as exc:
            return blocks, str(exc)
    return blocks, None


def replay_blocks(config: LedgerConfig, blocks: List[Block],
                  runtime: ContractRuntime):
    """Re-execute a chain from genesis, yielding per-height results.

    Yields (height, statuses, state_root, state) after each block.
    """
    state = ContractState.initial(
        token_authority=config.token_authority,
        members=list(config.members) if config.kind == KIND_PERMISSIONED else None,
    )
    for block in blocks:
        statuses: List[str] = []
        for tx in block.transactions:
            ctx = ExecContext(submitter=tx.submitter, now=block.sealed_at,
                              tx_id=tx.tx_id, ledger_kind=config.kind,
                              ledger_authority=config.authority)
            try:
                runtime.execute(state, tx.call, ctx)
                statuses.append(STATUS_OK)
            except ContractFailure as failure:
                statuses.append(failure.code)
        yield block.height, statuses, state.state_root(), state


def verify_raw_chain(config: LedgerConfig, raw_blocks: List[bytes],
                     runtime: ContractRuntime,
                     expected_tip: Optional[bytes] = None,
                     parse_error_at: Optional[int] = None) -> VerifyReport:
    """Full chain audit: linkage, roots, statuses, and replayed state.

    ``raw_blocks`` are canonical block payloads in height order. Any
    discrepancy reports the lowest inconsistent height.
    """
    blocks: List[Block] = []
    bad: Optional[Tuple[int, str]] = None

    for i, raw in enumerate(raw_blocks):
        try:
            block = Block.parse(raw)
        except CodecError as exc:
            bad = (i, f"unparseable block: {exc}")
            break
        blocks.append(block)

    prev_hash = ZERO_DIGEST
    for i, block in enumerate(blocks):
        if bad is not None and i >= bad[0]:
            break
        problems = []
        if block.ledger_id != config.ledger_id:
            problems.append("ledger id mismatch")
        if block.height != i:
            problems.append(f"height {block.height} at position {i}")
        if block.prev_hash != prev_hash:
            problems.append("broken hash link")
        if block.tx_root != merkle_root([tx.tx_id for tx in block.transactions]):
            problems.append("tx root mismatch")
        if len(block.statuses) != len(block.transactions):
            problems.append("status count mismatch")
        if problems:
            bad = _lower(bad, (i, "; ".join(problems)))
            break
        prev_hash = sha256(raw_blocks[i])

    if bad is None or bad[0] > 0:
        limit = bad[0] if bad is not None else len(blocks)
        for height, statuses, state_root, _ in replay_blocks(
                config, blocks[:limit], runtime):
            block = blocks[height]
            if tuple(statuses) != block.statuses:
                bad = _lower(bad, (height, "execution status mismatch"))
                break
            if state_root != block.state_root:
                bad = _lower(bad, (height, "state root mismatch"))
                break

    if bad is None and parse_error_at is not None:
        bad = (parse_error_at, "unreadable chain file record")

    if bad is None and expected_tip is not None:
        actual_tip = sha256(raw_blocks[-1]) if raw_blocks else ZERO_DIGEST
        if actual_tip != expected_tip:
            bad = (max(len(raw_blocks) - 1, 0), "tip hash mismatch")

    if bad is None:
        return VerifyReport(ok=True)
    return VerifyReport(ok=False, first_bad_height=bad[0], detail=bad[1])


def _lower(current: Optional[Tuple[int, str]],
           candidate: Tuple[int, str]) -> Tuple[int, str]:
    if current is None or candidate[0] < current[0]:
        return candidate
    return current


def verify_chain_file(chain_path, sidecar_path,
                      runtime: ContractRuntime) -> VerifyReport:
    """Audit a persisted chain using only its file and sidecar."""
    data = Path(chain_path).read_bytes()
    sidecar = json.loads(Path(sidecar_path).read_text())
    config = LedgerConfig.from_sidecar(sidecar)
    raw_blocks, parse_error = parse_chain_file(data)
    expected_tip = bytes.fromhex(sidecar["tip_hash"])
    report = verify_raw_chain(
        config, raw_blocks, runtime, expected_tip=expected_tip,
        parse_error_at=len(raw_blocks) if parse_error else None)
    return report


def load_chain_file(chain_path, sidecar_path, runtime: ContractRuntime,
                    registry: KeyRegistry) -> Ledger:
    """Rebuild a live ledger from its persisted form (assumed intact)."""
    data = Path(chain_path).read_bytes()
    sidecar = json.loads(Path(sidecar_path).read_text())
    config = LedgerConfig.from_sidecar(sidecar)
    raw_blocks, parse_error = parse_chain_file(data)
    if parse_error:
        raise CodecError(f"corrupt chain file {chain_path}: {parse_error}")
    ledger = Ledger(config, runtime, registry)
    blocks = [Block.parse(raw) for raw in raw_blocks]
    final_state = None
    for _, _, _, state in replay_blocks(config, blocks, runtime):
        final_state = state
    if final_state is not None:
        ledger.state = final_state
    ledger.chain = blocks
    ledger.tip_hash = sha256(raw_blocks[-1]) if raw_blocks else ZERO_DIGEST
    for block in blocks:
        for idx, tx in enumerate(block.transactions):
            ledger._tx_index[tx.tx_id] = (block.height, idx)
            last = ledger._nonces.get(tx.submitter, -1)
            ledger._nonces[tx.submitter] = max(last, tx.nonce)
    return ledger
