import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedledger.contracts import (ContractCall, ContractState, ExecContext,
                                 escrow_id_for)
from fedledger.crypto import sha256
from fedledger.deployment import build_runtime
from fedledger.errors import ContractFailure

AUTH = "aa" * 32
ALICE = "ab" * 32
BOB = "ac" * 32

runtime = build_runtime()


def fresh_state():
    return ContractState.initial(token_authority=AUTH)


def call(state, contract, method, args, submitter=ALICE, now=0, tag=b"t0"):
    ctx = ExecContext(submitter=submitter, now=now, tx_id=sha256(tag))
    return runtime.execute(state, ContractCall(contract, method, args), ctx)


def mint(state, to, amount, tag=b"mint"):
    return call(state, "token", "mint", {"to": to, "amount": amount},
                submitter=AUTH, tag=tag)


# --- token -------------------------------------------------------------

def test_mint_and_transfer():
    state = fresh_state()
    mint(state, ALICE, 1000)
    call(state, "token", "transfer", {"to": BOB, "amount": 100})
    assert state.balance(ALICE) == 900
    assert state.balance(BOB) == 100
    assert state.conservation_holds()


def test_transfer_zero_is_noop():
    state = fresh_state()
    mint(state, ALICE, 100)
    call(state, "token", "transfer", {"to": BOB, "amount": 0})
    assert state.balance(ALICE) == 100
    assert state.balance(BOB) == 0


def test_transfer_insufficient():
    state = fresh_state()
    mint(state, ALICE, 100)
    with pytest.raises(ContractFailure) as e:
        call(state, "token", "transfer", {"to": BOB, "amount": 101})
    assert e.value.code == "InsufficientBalance"
    assert state.balance(ALICE) == 100


def test_negative_amount_rejected():
    state = fresh_state()
    mint(state, ALICE, 100)
    for method, args in (("transfer", {"to": BOB, "amount": -1}),
                         ("mint", {"to": BOB, "amount": -5})):
        with pytest.raises(ContractFailure) as e:
            call(state, "token", method, args, submitter=AUTH)
        assert e.value.code == "NegativeAmount"


def test_mint_requires_authority():
    state = fresh_state()
    with pytest.raises(ContractFailure) as e:
        call(state, "token", "mint", {"to": ALICE, "amount": 10},
             submitter=ALICE)
    assert e.value.code == "NotTokenAuthority"


def test_balance_of_is_read_only():
    state = fresh_state()
    mint(state, ALICE, 42)
    before = state.state_root()
    result = call(state, "token", "balance_of", {"address": ALICE})
    assert result == {"address": ALICE, "balance": 42}
    assert state.state_root() == before


# --- dispatch ------------------------------------------------------------

def test_unknown_contract_and_method_leave_state_unchanged():
    state = fresh_state()
    mint(state, ALICE, 10)
    before = state.state_root()
    with pytest.raises(ContractFailure) as e:
        call(state, "token", "frobnicate", {})
    assert e.value.code == "UnknownMethod"
    with pytest.raises(ContractFailure) as e:
        call(state, "warp", "go", {})
    assert e.value.code == "UnknownContract"
    assert state.state_root() == before


def test_execution_is_deterministic():
    roots = []
    for _ in range(2):
        state = fresh_state()
        mint(state, ALICE, 500)
        call(state, "token", "transfer", {"to": BOB, "amount": 123},
             tag=b"t1")
        lock_escrow(state, amount=50, tag=b"t2")
        roots.append(state.state_root())
    assert roots[0] == roots[1]


# --- escrows -----------------------------------------------------------

SECRET = sha256(b"s1")
HASHLOCK = sha256(SECRET).hex()


def lock_escrow(state, amount=50, timelock=10_000, now=0, tag=b"lock",
                payer=ALICE):
    result = call(state, "htlc", "lock",
                  {"payee": BOB, "amount": amount, "hashlock": HASHLOCK,
                   "timelock": timelock},
                  submitter=payer, now=now, tag=tag)
    return result["escrow_id"]


def test_lock_moves_funds_into_escrow():
    state = fresh_state()
    mint(state, ALICE, 100)
    escrow_id = lock_escrow(state, amount=50)
    assert state.balance(ALICE) == 50
    assert state.escrows[escrow_id]["status"] == "locked"
    assert state.conservation_holds()
    assert escrow_id == escrow_id_for(sha256(b"lock"))


def test_lock_with_timelock_now_rejected():
    state = fresh_state()
    mint(state, ALICE, 100)
    with pytest.raises(ContractFailure) as e:
        lock_escrow(state, timelock=500, now=500)
    assert e.value.code == "TimelockInPast"


def test_two_locks_exceeding_balance():
    state = fresh_state()
    mint(state, ALICE, 80)
    lock_escrow(state, amount=50, tag=b"l1")
    with pytest.raises(ContractFailure) as e:
        lock_escrow(state, amount=50, tag=b"l2")
    assert e.value.code == "InsufficientBalance"
    assert state.conservation_holds()


def test_claim_with_correct_preimage():
    state = fresh_state()
    mint(state, ALICE, 100)
    escrow_id = lock_escrow(state)
    call(state, "htlc", "claim",
         {"escrow_id": escrow_id, "preimage": SECRET.hex()},
         submitter=BOB, now=5000, tag=b"claim")
    escrow = state.escrows[escrow_id]
    assert escrow["status"] == "claimed"
    assert escrow["preimage"] == SECRET.hex()  # revealed on chain
    assert state.balance(BOB) == 50
    assert state.conservation_holds()


def test_claim_at_deadline_is_expired():
    state = fresh_state()
    mint(state, ALICE, 100)
    escrow_id = lock_escrow(state, timelock=10_000)
    with pytest.raises(ContractFailure) as e:
        call(state, "htlc", "claim",
             {"escrow_id": escrow_id, "preimage": SECRET.hex()},
             submitter=BOB, now=10_000, tag=b"claim")
    assert e.value.code == "Expired"
    assert state.escrows[escrow_id]["status"] == "locked"


def test_claim_with_wrong_preimage():
    state = fresh_state()
    mint(state, ALICE, 100)
    escrow_id = lock_escrow(state)
    for bad in (sha256(b"nope").hex(), "ab" * 16 + "cd", "zz", "ab" * 31):
        with pytest.raises(ContractFailure) as e:
            call(state, "htlc", "claim",
                 {"escrow_id": escrow_id, "preimage": bad},
                 submitter=BOB, now=1, tag=b"claim")
        assert e.value.code == "WrongPreimage"
    assert state.escrows[escrow_id]["status"] == "locked"


def test_refund_at_deadline_succeeds():
    state = fresh_state()
    mint(state, ALICE, 100)
    escrow_id = lock_escrow(state, timelock=10_000)
    call(state, "htlc", "refund", {"escrow_id": escrow_id},
         now=10_000, tag=b"refund")
    assert state.escrows[escrow_id]["status"] == "refunded"
    assert state.balance(ALICE) == 100


def test_refund_before_deadline_rejected():
    state = fresh_state()
    mint(state, ALICE, 100)
    escrow_id = lock_escrow(state, timelock=10_000)
    with pytest.raises(ContractFailure) as e:
        call(state, "htlc", "refund", {"escrow_id": escrow_id},
             now=9_999, tag=b"refund")
    assert e.value.code == "NotYetExpired"


def test_settle_twice_rejected():
    state = fresh_state()
    mint(state, ALICE, 100)
    escrow_id = lock_escrow(state)
    call(state, "htlc", "claim",
         {"escrow_id": escrow_id, "preimage": SECRET.hex()},
         submitter=BOB, now=1, tag=b"claim")
    for method, args in (("refund", {"escrow_id": escrow_id}),
                         ("claim", {"escrow_id": escrow_id,
                                    "preimage": SECRET.hex()})):
        with pytest.raises(ContractFailure) as e:
            call(state, "htlc", method, args, now=20_000, tag=b"again")
        assert e.value.code == "NotLocked"


@st.composite
def escrow_ops(draw):
    ops = draw(st.lists(
        st.tuples(st.sampled_from(["lock", "claim", "refund", "transfer"]),
                  st.integers(min_value=0, max_value=120),
                  st.integers(min_value=0, max_value=20_000)),
        max_size=25))
    return ops


@given(escrow_ops())
@settings(max_examples=120, deadline=None)
def test_conservation_and_single_settlement_hold(ops):
    state = fresh_state()
    mint(state, ALICE, 200)
    mint(state, BOB, 200, tag=b"mint2")
    escrow_ids = []
    for i, (op, amount, now) in enumerate(ops):
        tag = b"op%d" % i
        try:
            if op == "lock":
                escrow_ids.append(lock_escrow(
                    state, amount=amount, timelock=now + 1 + amount,
                    now=now, tag=tag))
            elif op == "transfer":
                call(state, "token", "transfer",
                     {"to": BOB, "amount": amount}, now=now, tag=tag)
            elif escrow_ids:
                target = escrow_ids[amount % len(escrow_ids)]
                if op == "claim":
                    call(state, "htlc", "claim",
                         {"escrow_id": target, "preimage": SECRET.hex()},
                         submitter=BOB, now=now, tag=tag)
                else:
                    call(state, "htlc", "refund", {"escrow_id": target},
                         now=now, tag=tag)
        except ContractFailure:
            pass
        assert state.conservation_holds()
    statuses = [e["status"] for e in state.escrows.values()]
    assert all(s in ("locked", "claimed", "refunded") for s in statuses)
