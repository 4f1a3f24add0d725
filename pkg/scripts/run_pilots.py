#!/usr/bin/env python3
"""Run both bundled pilot scenarios and write their reports.

Usage: python scripts/run_pilots.py [outdir]
"""

import sys
from pathlib import Path

from fedledger import harness
from fedledger.cli import resolve_scenario


def main() -> int:
    outdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("out")
    exit_code = 0
    for name in ("foodchain", "energy"):
        scenario = harness.load_scenario(resolve_scenario(name))
        result = harness.run(scenario, chains_dir=outdir / name / "chains")
        harness.emit_report(result, outdir / name / "report.json")
        print(harness.summarize(result.report))
        print(f"  report: {outdir / name / 'report.json'}")
        print(f"  chains: {outdir / name / 'chains'}")
        print()
        if not result.ok:
            exit_code = 2
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
