#!/usr/bin/env python3
"""Sweep the swap protocol across the full crash/delay schedule grid.

Prints an outcome histogram grouped by injected fault and confirms that no
schedule produces a mixed terminal state. Useful for eyeballing how much of
the schedule space still completes versus safely refunding.

Usage: python scripts/swap_fault_sweep.py [delta_ms]
"""

import sys
import time
from collections import Counter

from fedledger.contracts import ContractCall
from fedledger.crypto import KeyRing
from fedledger.deployment import Clock, Deployment
from fedledger.interledger import (SwapCoordinator, SwapLeg,
                                   enumerate_fault_schedules)
from fedledger.ledger import LedgerConfig


def run_one(ring, delta, schedule, tag):
    dep = Deployment(master_seed=7, keyring=ring, clock=Clock(0))
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
    coordinator = SwapCoordinator(dep, delta_ms=delta)
    plan = coordinator.make_plan(
        f"sweep-{tag}",
        SwapLeg("chain-a", alice.address, bob.address, 100),
        SwapLeg("chain-b", bob.address, alice.address, 40),
        secret_holder=alice.address)
    status = coordinator.run_swap(plan, schedule)
    ok = all(dep.ledger(l).state.conservation_holds()
             for l in ("chain-a", "chain-b"))
    return status.phase, ok


def main() -> int:
    delta = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    ring = KeyRing()
    schedules = enumerate_fault_schedules(delta)
    started = time.monotonic()
    by_fault = Counter()
    phases = Counter()
    mixed = 0
    for i, schedule in enumerate(schedules):
        phase, conserved = run_one(ring, delta, schedule, i)
        assert conserved, schedule.describe()
        phases[phase] += 1
        if phase == "mixed":
            mixed += 1
            print("MIXED:", schedule.describe())
        key = ("no-crash" if schedule.crash_step is None
               else f"crash@{schedule.crash_step}")
        by_fault[(key, phase)] += 1
    elapsed = time.monotonic() - started

    print(f"{len(schedules)} schedules in {elapsed:.1f}s "
          f"(delta = {delta} ms)")
    print(f"outcomes: {dict(phases)}")
    print(f"mixed terminal states: {mixed}")
    print()
    print(f"{'fault':>10}  {'complete':>8}  {'refunded':>8}")
    keys = sorted({k for k, _ in by_fault})
    for key in keys:
        print(f"{key:>10}  {by_fault[(key, 'complete')]:>8}"
              f"  {by_fault[(key, 'refunded')]:>8}")
    return 0 if mixed == 0 else 2


if __name__ == "__main__":
    sys.exit(main())
