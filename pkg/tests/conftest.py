import pytest

from fedledger.contracts import ContractCall
from fedledger.crypto import KeyRing
from fedledger.deployment import Clock, Deployment
from fedledger.ledger import LedgerConfig


@pytest.fixture(scope="session")
def shared_keyring():
    """Ed25519 derivation is the slow part; share keypairs across tests."""
    return KeyRing()


@pytest.fixture
def dep(shared_keyring):
    return Deployment(master_seed=7, keyring=shared_keyring)


@pytest.fixture
def open_ledger(dep):
    mint = dep.actor("mint")
    dep.create_ledger(LedgerConfig(ledger_id="main", kind="open",
                                   token_authority=mint.address))
    return dep.ledger("main")


def fund(dep, ledger_id, actor_name, amount):
    ledger = dep.ledger(ledger_id)
    authority = dep.keyring.get(ledger.config.token_authority)
    to = dep.actor(actor_name)
    _, _, status = dep.submit_and_seal(
        ledger_id, authority,
        ContractCall("token", "mint", {"to": to.address, "amount": amount}))
    assert status == "ok"
    return to


def two_ledger_swap_fixture(keyring, amount_a=100, amount_b=40):
    """Fresh two-ledger deployment with funded counterparties."""
    dep = Deployment(master_seed=7, keyring=keyring, clock=Clock(0))
    alice = dep.actor("alice")
    bob = dep.actor("bob")
    mint = dep.actor("mint")
    for ledger_id in ("chain-a", "chain-b"):
        dep.create_ledger(LedgerConfig(ledger_id=ledger_id, kind="open",
                                       token_authority=mint.address))
    dep.submit_and_seal("chain-a", mint, ContractCall(
        "token", "mint", {"to": alice.address, "amount": 1000}))
    dep.submit_and_seal("chain-b", mint, ContractCall(
        "token", "mint", {"to": bob.address, "amount": 1000}))
    return dep, alice, bob
