"""A deployment bundles ledgers, actor keys, and the shared logical clock.

Core modules never read the wall clock; every timestamp comes from the
deployment's logical clock, which only the harness (or the gateway's explicit
step endpoint) advances.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional

from .contracts import ContractCall, ContractRuntime, register_builtin
from .crypto import KeyRing, Keypair
from .errors import UnknownLedger
from .ledger import (Block, KeyRegistry, Ledger, LedgerConfig, Receipt,
                     Transaction, VerifyReport, load_chain_file,
                     verify_chain_file)
from .market import register_market


def build_runtime() -> ContractRuntime:
    """Runtime with every contract registered; replay uses the same one."""
    return register_market(register_builtin(ContractRuntime()))


class Clock:
    """Monotonic logical milliseconds."""

    def __init__(self, start: int = 0):
        self.now = start

    def advance(self, ms: int) -> int:
        if ms < 0:
            raise ValueError("clock cannot go backwards")
        self.now += ms
        return self.now

    def advance_to(self, t: int) -> int:
        if t > self.now:
            self.now = t
        return self.now


class Deployment:
    """All ledgers of one scenario plus the actors that can sign for them."""

    def __init__(self, master_seed: int = 0, clock: Optional[Clock] = None,
                 keyring: Optional[KeyRing] = None):
        self.master_seed = master_seed
        self.clock = clock or Clock()
        self.runtime = build_runtime()
        self.registry = KeyRegistry()
        self.keyring = keyring or KeyRing()
        self.ledgers: Dict[str, Ledger] = {}
        self.seal_hooks: list = []  # callables (ledger, block) run after each seal

    # -- setup -------------------------------------------------------------

    def actor(self, name: str) -> Keypair:
        keypair = self.keyring.derive(self.master_seed, name)
        self.registry.register(keypair.address, keypair.public_bytes)
        return keypair

    def create_ledger(self, config: LedgerConfig) -> Ledger:
        if config.ledger_id in self.ledgers:
            raise ValueError(f"duplicate ledger id '{config.ledger_id}'")
        ledger = Ledger(config, self.runtime, self.registry)
        self.ledgers[config.ledger_id] = ledger
        return ledger

    # -- access ----------------------------------------------------------

    def ledger(self, ledger_id: str) -> Ledger:
        ledger = self.ledgers.get(ledger_id)
        if ledger is None:
            raise UnknownLedger(ledger_id)
        return ledger

    # -- transactions -----------------------------------------------------

    def compose(self, ledger_id: str, signer: Keypair, call: ContractCall,
                timestamp: Optional[int] = None) -> Transaction:
        ledger = self.ledger(ledger_id)
        return Transaction.build(
            ledger_id, signer, ledger.next_nonce(signer.address),
            self.clock.now if timestamp is None else timestamp, call)

    def submit_transaction(self, ledger_id: str, tx: Transaction) -> Receipt:
        return self.ledger(ledger_id).submit(tx)

    def submit_call(self, ledger_id: str, signer: Keypair,
                    call: ContractCall) -> Transaction:
        tx = self.compose(ledger_id, signer, call)
        self.submit_transaction(ledger_id, tx)
        return tx

    def seal_block(self, ledger_id: str) -> Block:
        ledger = self.ledger(ledger_id)
        block = ledger.seal(self.clock.now)
        for hook in self.seal_hooks:
            hook(ledger, block)
        return block

    def submit_and_seal(self, ledger_id: str, signer: Keypair,
                        call: ContractCall) -> tuple:
        """Submit one call, seal, and return (tx, block, status)."""
        tx = self.submit_call(ledger_id, signer, call)
        block = self.seal_block(ledger_id)
        idx = next(i for i, t in enumerate(block.transactions)
                   if t.tx_id == tx.tx_id)
        return tx, block, block.statuses[idx]

    def verify_chain(self, ledger_id: str) -> VerifyReport:
        return self.ledger(ledger_id).verify()

    def update_membership(self, ledger_id: str, authority: Keypair,
                          action: str, member: str) -> set:
        return self.ledger(ledger_id).update_membership(
            authority, action, member, self.clock.now)

    # -- persistence -------------------------------------------------------

    def save_all(self, directory) -> Path:
        directory = Path(directory)
        for ledger in self.ledgers.values():
            ledger.save(directory)
        return directory

    def load_ledger_from_files(self, directory, ledger_id: str) -> Ledger:
        directory = Path(directory)
        ledger = load_chain_file(directory / f"{ledger_id}.chain",
                                 directory / f"{ledger_id}.json",
                                 self.runtime, self.registry)
        self.ledgers[ledger_id] = ledger
        return ledger


def verify_chain_dir(directory) -> Dict[str, VerifyReport]:
    """Audit every persisted chain in a directory from files alone."""
    directory = Path(directory)
    runtime = build_runtime()
    reports: Dict[str, VerifyReport] = {}
    for sidecar_path in sorted(directory.glob("*.json")):
        try:
            ledger_id = json.loads(sidecar_path.read_text())["ledger_id"]
        except (json.JSONDecodeError, KeyError):
            continue
        chain_path = directory / f"{ledger_id}.chain"
        if not chain_path.exists():
            continue
        reports[ledger_id] = verify_chain_file(chain_path, sidecar_path, runtime)
    return reports
