"""Typed error hierarchy shared across the package.

Ledger-level rejections raise; contract-level failures are caught during
sealing and recorded as the transaction's status code instead.
"""

from __future__ import annotations


class FedLedgerError(Exception):
    """Base class; ``code`` is the stable machine-readable identifier."""

    code = "Error"

    def __init__(self, detail: str = ""):
        self.detail = detail
        super().__init__(f"{self.code}: {detail}" if detail else self.code)


# --- ledger admission ---------------------------------------------------

class UnknownLedger(FedLedgerError):
    code = "UnknownLedger"


class BadSignature(FedLedgerError):
    code = "BadSignature"


class StaleNonce(FedLedgerError):
    code = "StaleNonce"


class NotMember(FedLedgerError):
    code = "NotMember"


class WrongPayloadKind(FedLedgerError):
    code = "WrongPayloadKind"


# --- membership administration ------------------------------------------

class NotAuthority(FedLedgerError):
    code = "NotAuthority"


class NotPermissioned(FedLedgerError):
    code = "NotPermissioned"


class AlreadyMember(FedLedgerError):
    code = "AlreadyMember"


class NotAMember(FedLedgerError):
    code = "NotAMember"


# --- proofs ---------------------------------------------------------------

class TxNotFound(FedLedgerError):
    code = "TxNotFound"


class TxPendingNotSealed(FedLedgerError):
    code = "TxPendingNotSealed"


# --- contract execution ---------------------------------------------------

class ContractFailure(FedLedgerError):
    """Raised by contract handlers; sealing converts it into a tx status.

    Handlers must validate before mutating so a raised failure implies the
    state is untouched.
    """

    code = "ContractFailure"

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        super().__init__(detail)


# --- cross-ledger coordination --------------------------------------------

class InsufficientFunds(FedLedgerError):
    code = "InsufficientFunds"


class NothingNew(FedLedgerError):
    code = "NothingNew"


class PublicLedgerRejected(FedLedgerError):
    code = "PublicLedgerRejected"


class NoCheckpoints(FedLedgerError):
    code = "NoCheckpoints"


# --- adapter / pilots -------------------------------------------------------

class NoMatchingRule(FedLedgerError):
    code = "NoMatchingRule"


class LotNotFound(FedLedgerError):
    code = "LotNotFound"


class WrongSequence(FedLedgerError):
    code = "WrongSequence"


class NotCurrentHolder(FedLedgerError):
    code = "NotCurrentHolder"


# --- harness ----------------------------------------------------------------

class SchemaError(FedLedgerError):
    code = "SchemaError"


class AssertionFailed(FedLedgerError):
    code = "AssertionFailed"


class BadTarget(FedLedgerError):
    code = "BadTarget"


class PortInUse(FedLedgerError):
    code = "PortInUse"
