"""Hashing, deterministic keypairs, addresses, and Merkle trees.

One 256-bit hash (SHA-256) is used everywhere: transaction ids, block hashes,
state roots, hashlocks, and addresses. Keys are Ed25519, derived from 32-byte
seeds so that a seeded scenario reproduces the same identities and signatures
on every run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    PublicFormat,
)

DIGEST_LEN = 32
ZERO_DIGEST = b"\x00" * DIGEST_LEN


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


EMPTY_ROOT = sha256(b"")


def derive_address(public_bytes: bytes) -> str:
    """Address = lowercase hex of the 32-byte digest of the raw public key."""
    return sha256(public_bytes).hex()


@dataclass
class Keypair:
    """Ed25519 keypair with a digest-derived address."""

    private: Ed25519PrivateKey
    public_bytes: bytes
    address: str

    @classmethod
    def from_seed(cls, seed: bytes) -> "Keypair":
        if len(seed) != 32:
            raise ValueError("seed must be 32 bytes")
        private = Ed25519PrivateKey.from_private_bytes(seed)
        public_bytes = private.public_key().public_bytes(
            Encoding.Raw, PublicFormat.Raw
        )
        return cls(private=private, public_bytes=public_bytes,
                   address=derive_address(public_bytes))

    @classmethod
    def from_name(cls, master_seed: int, name: str) -> "Keypair":
        """Derive a stable keypair for a named actor under a scenario seed."""
        seed = sha256(b"fedledger-key:"
                      + master_seed.to_bytes(8, "big", signed=False)
                      + name.encode("utf-8"))
        return cls.from_seed(seed)

    def sign(self, message: bytes) -> bytes:
        return self.private.sign(message)


def verify_signature(public_bytes: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_bytes).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass
class KeyRing:
    """Name- and address-indexed collection of actor keypairs."""

    by_name: Dict[str, Keypair] = field(default_factory=dict)
    by_address: Dict[str, Keypair] = field(default_factory=dict)

    def add(self, name: str, keypair: Keypair) -> Keypair:
        self.by_name[name] = keypair
        self.by_address[keypair.address] = keypair
        return keypair

    def derive(self, master_seed: int, name: str) -> Keypair:
        if name in self.by_name:
            return self.by_name[name]
        return self.add(name, Keypair.from_name(master_seed, name))

    def get(self, name_or_address: str) -> Keypair:
        if name_or_address in self.by_name:
            return self.by_name[name_or_address]
        if name_or_address in self.by_address:
            return self.by_address[name_or_address]
        raise KeyError(name_or_address)

    def address_of(self, name: str) -> str:
        return self.by_name[name].address


# --- Merkle trees -------------------------------------------------------
#
# Leaves are 32-byte digests. Odd levels duplicate their last node. The
# empty tree's root is the hash of the empty string; a single-leaf tree's
# root is the leaf itself.

def _parent(left: bytes, right: bytes) -> bytes:
    return sha256(left + right)


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    if not leaves:
        return EMPTY_ROOT
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2 == 1:
            level.append(level[-1])
        level = [_parent(level[i], level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def merkle_siblings(leaves: Sequence[bytes], index: int) -> list:
    """Sibling digests from leaf level to just below the root."""
    if not 0 <= index < len(leaves):
        raise IndexError(f"leaf index {index} out of range for {len(leaves)} leaves")
    siblings = []
    level = list(leaves)
    pos = index
    while len(level) > 1:
        if len(level) % 2 == 1:
            level.append(level[-1])
        siblings.append(level[pos ^ 1])
        level = [_parent(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        pos //= 2
    return siblings


def fold_proof(leaf: bytes, index: int, siblings: Sequence[bytes]) -> bytes:
    """Recompute the root implied by a leaf and its sibling path."""
    node = leaf
    pos = index
    for sibling in siblings:
        if pos % 2 == 0:
            node = _parent(node, sibling)
        else:
            node = _parent(sibling, node)
        pos //= 2
    return node
