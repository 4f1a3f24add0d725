#!/usr/bin/env python3
"""Walk through the two tamper-detection layers on a private ledger.

1. Byte-level edits of the persisted chain file break the hash links and are
   caught by file verification alone.
2. A cleanly re-signed, re-sealed history rewrite passes file verification
   but diverges from the checkpoints anchored on the public ledger.

Usage: python scripts/tamper_demo.py
"""

import tempfile
from pathlib import Path

from fedledger.contracts import ContractCall
from fedledger.deployment import Deployment, build_runtime
from fedledger.harness import rewrite_history
from fedledger.interledger import AnchorAgent, verify_anchors
from fedledger.ledger import LedgerConfig, verify_chain_file


def main() -> int:
    dep = Deployment(master_seed=101)
    mint = dep.actor("mint")
    alice = dep.actor("alice")
    bob = dep.actor("bob")
    dep.create_ledger(LedgerConfig(ledger_id="private", kind="open",
                                   token_authority=mint.address))
    dep.create_ledger(LedgerConfig(ledger_id="public", kind="anchor_only"))
    agent = AnchorAgent(dep, dep.actor("agent"), "private", "public")

    dep.submit_and_seal("private", mint, ContractCall(
        "token", "mint", {"to": alice.address, "amount": 1000}))
    for i in range(9):
        dep.submit_call("private", alice, ContractCall(
            "token", "transfer", {"to": bob.address, "amount": i + 1}))
        dep.seal_block("private")
        if dep.ledger("private").height % 3 == 0:
            cp = agent.checkpoint()
            print(f"anchored height {cp.height} "
                  f"(state root {cp.state_root[:12]}…)")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        dep.save_all(tmp)
        runtime = build_runtime()

        print("\n-- layer 1: byte flip in the chain file --")
        chain_path = tmp / "private.chain"
        data = bytearray(chain_path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        chain_path.write_bytes(bytes(data))
        report = verify_chain_file(chain_path, tmp / "private.json", runtime)
        print(f"file verification: ok={report.ok} "
              f"first_bad_height={report.first_bad_height} ({report.detail})")

    print("\n-- layer 2: clean history rewrite --")
    rewrite_history(dep, "private", height=2, tx_index=0, new_args={"amount": 500})
    internal = dep.verify_chain("private")
    print(f"chain self-verification after rewrite: ok={internal.ok} "
          "(the rewrite is internally consistent)")
    anchored = verify_anchors(dep, "private", "public")
    print(f"anchor verification: ok={anchored.ok} first divergent checkpoint "
          f"at height {anchored.first_divergent_height}")
    return 0


if __name__ == "__main__":
    import sys
    sys.exit(main())
