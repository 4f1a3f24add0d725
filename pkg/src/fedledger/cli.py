"""Command-line entry points: run scenarios, verify chains, ingest, trace, serve.

Exit codes: 0 success, 2 assertion or verification failure, 3 schema error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from . import harness
from .adapter import AdapterRule, FederationAdapter
from .deployment import Deployment, verify_chain_dir
from .errors import FedLedgerError, SchemaError
from .foodchain import ConditionRule, FoodchainPilot, SegmentConfig
from .interledger import SwapCoordinator
from .market import PowerForecast, plan_day_ahead

EXIT_OK = 0
EXIT_ASSERTION = 2
EXIT_SCHEMA = 3


def resolve_scenario(name_or_path: str) -> Path:
    """Accept a filesystem path or the name of a bundled scenario."""
    path = Path(name_or_path)
    if path.exists():
        return path
    bundled = Path(__file__).parent / "scenarios" / f"{name_or_path}.json"
    if bundled.exists():
        return bundled
    raise SchemaError(f"no such scenario file or bundled name: {name_or_path}")


@click.group()
def main():
    """Deterministic multi-ledger federation sandbox."""


@main.command()
@click.option("--scenario", "scenario_ref", required=True,
              help="Scenario file or bundled name (foodchain, energy).")
@click.option("--seed", type=int, default=None,
              help="Override the scenario seed.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the canonical JSON report here.")
@click.option("--chains-dir", type=click.Path(), default=None,
              help="Directory for persisted chains (default: ./chains).")
def run(scenario_ref, seed, out_path, chains_dir):
    """Run a scenario and emit its machine-readable report."""
    try:
        scenario = harness.load_scenario(resolve_scenario(scenario_ref))
    except SchemaError as exc:
        click.echo(f"schema error: {exc}", err=True)
        sys.exit(EXIT_SCHEMA)
    if seed is not None:
        scenario.seed = seed
    chains = Path(chains_dir) if chains_dir else Path("chains")
    try:
        result = harness.run(scenario, chains_dir=chains)
    except SchemaError as exc:
        click.echo(f"schema error: {exc}", err=True)
        sys.exit(EXIT_SCHEMA)
    if out_path:
        harness.emit_report(result, out_path)
    click.echo(harness.summarize(result.report))
    sys.exit(EXIT_OK if result.ok else EXIT_ASSERTION)


@main.command()
@click.option("--chain-dir", required=True, type=click.Path(exists=True),
              help="Directory holding <ledger>.chain / <ledger>.json pairs.")
def verify(chain_dir):
    """Audit persisted chains from their files alone."""
    reports = verify_chain_dir(chain_dir)
    if not reports:
        click.echo("no chains found", err=True)
        sys.exit(EXIT_SCHEMA)
    all_ok = True
    for ledger_id, report in sorted(reports.items()):
        if report.ok:
            click.echo(f"{ledger_id}: ok")
        else:
            all_ok = False
            click.echo(f"{ledger_id}: FAILED at height "
                       f"{report.first_bad_height} ({report.detail})")
    sys.exit(EXIT_OK if all_ok else EXIT_ASSERTION)


@main.command()
@click.option("--platform", required=True)
@click.option("--rules", "rules_path", required=True, type=click.Path(exists=True))
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=0, help="Key derivation seed.")
@click.option("--chain-dir", type=click.Path(exists=True), default=None,
              help="Submit to chains persisted here (and seal + save back).")
def ingest(platform, rules_path, in_path, seed, chain_dir):
    """Validate an NDJSON feed and map or submit it through adapter rules."""
    rule_specs = json.loads(Path(rules_path).read_text())
    dep = Deployment(master_seed=seed)
    rules = []
    signers = {}
    for spec in rule_specs:
        rules.append(AdapterRule(
            platform=spec["platform"],
            metrics=frozenset(spec.get("metrics", [])),
            ledger_id=spec["ledger_id"],
            contract=spec.get("contract", "provenance"),
            method=spec.get("method", "record"),
            signer=spec["signer"],
        ))
        signers[spec["signer"]] = dep.actor(spec["signer"])
    if chain_dir:
        for sidecar in sorted(Path(chain_dir).glob("*.json")):
            ledger_id = json.loads(sidecar.read_text())["ledger_id"]
            dep.load_ledger_from_files(chain_dir, ledger_id)
    adapter = FederationAdapter(rules, signers, dep)
    if chain_dir:
        for rule in rules:
            if rule.ledger_id in dep.ledgers:
                signer = signers[rule.signer]
                adapter.resume_nonce(
                    rule.ledger_id, signer.address,
                    dep.ledger(rule.ledger_id).next_nonce(signer.address) - 1)

    def on_platform(line: str) -> bool:
        try:
            return json.loads(line).get("platform") == platform
        except json.JSONDecodeError:
            return True  # keep it; ingestion reports the parse error

    lines = [l for l in Path(in_path).read_text().splitlines() if l.strip()]
    lines = [l for l in lines if on_platform(l)] or lines
    ingest_report = adapter.ingest_lines(lines)
    if chain_dir:
        flush = adapter.flush_batch(ingest_report.accepted)
        for ledger_id in sorted(flush.per_ledger):
            dep.seal_block(ledger_id)
        dep.save_all(chain_dir)
        click.echo(json.dumps({"ingest": ingest_report.to_obj(),
                               "flush": flush.to_obj()}, indent=2))
    else:
        mapped = {}
        for event in ingest_report.accepted:
            ledger_id, _, _ = adapter.map_event(event)
            mapped[ledger_id] = mapped.get(ledger_id, 0) + 1
        click.echo(json.dumps({"ingest": ingest_report.to_obj(),
                               "mapped_per_ledger": mapped}, indent=2))
    sys.exit(EXIT_OK)


@main.command()
@click.argument("lot")
@click.option("--chain-dir", required=True, type=click.Path(exists=True))
@click.option("--scenario", "scenario_ref", default="foodchain",
              help="Scenario supplying the pilot wiring.")
@click.option("--format", "fmt", type=click.Choice(["json", "text"]),
              default="text")
def trace(lot, chain_dir, scenario_ref, fmt):
    """Assemble a provenance report for LOT from persisted chains."""
    scenario = harness.load_scenario(resolve_scenario(scenario_ref))
    dep = Deployment(master_seed=scenario.seed)
    for actor in scenario.actors:
        dep.actor(actor["name"])
    for sidecar in sorted(Path(chain_dir).glob("*.json")):
        ledger_id = json.loads(sidecar.read_text())["ledger_id"]
        dep.load_ledger_from_files(chain_dir, ledger_id)
    segments = {seg: SegmentConfig(segment=seg, ledger_id=cfg["ledger_id"],
                                   operator=cfg["operator"])
                for seg, cfg in scenario.foodchain["segments"].items()}
    rules = [ConditionRule(metric=r["metric"], min_value=r["min"],
                           max_value=r["max"],
                           segments=frozenset(r.get("segments", [])))
             for r in scenario.foodchain.get("condition_rules", [])]
    pilot = FoodchainPilot(dep, SwapCoordinator(dep, scenario.delta_ms), None,
                           scenario.foodchain["consortium"], segments, rules)
    try:
        report = pilot.trace_lot(lot)
    except FedLedgerError as exc:
        click.echo(f"{exc.code}: {exc.detail}", err=True)
        sys.exit(EXIT_ASSERTION)
    if fmt == "json":
        click.echo(json.dumps(report.to_obj(), indent=2, sort_keys=True))
    else:
        click.echo(f"lot {report.lot}: {report.verdict}")
        click.echo(f"  custody: {' -> '.join(report.custody_chain)}")
        for segment, metrics in report.summaries.items():
            for metric, summary in metrics.items():
                click.echo(f"  {segment}/{metric}: n={summary['count']} "
                           f"min={summary['min']} max={summary['max']}")
        for violation in report.violations:
            click.echo(f"  VIOLATION {violation['segment']}/"
                       f"{violation['metric']} = {violation['value']} "
                       f"(allowed {violation['rule']['min']}.."
                       f"{violation['rule']['max']})")
        if report.unverifiable:
            click.echo(f"  unverifiable entries: {len(report.unverifiable)}")
        click.echo(f"  tip: {report.tip_hash[:16]}")
    sys.exit(EXIT_OK)


@main.command()
@click.option("--scenario", "scenario_ref", required=True)
@click.option("--port", type=int, default=8710)
@click.option("--host", default="127.0.0.1")
@click.option("--static", "static_dir", type=click.Path(), default=None,
              help="Directory with the operator console build.")
def serve(scenario_ref, port, host, static_dir):
    """Start the gateway for a scenario (setup actions applied, script not)."""
    from .gateway import start_service

    scenario = harness.load_scenario(resolve_scenario(scenario_ref))
    static = Path(static_dir) if static_dir else _default_console_dir()
    handle = start_service(scenario, port=port, host=host, static_dir=static)
    click.echo(f"gateway listening on {handle.url}")
    if static:
        click.echo(f"console served from {static}")
    click.echo("tokens: " + ", ".join(sorted(handle.service.ctx.tokens)))
    try:
        handle._thread.join()
    except KeyboardInterrupt:
        handle.stop()


def _default_console_dir():
    for candidate in (Path.cwd() / "frontend" / "dist",
                      Path(__file__).resolve().parents[2] / "frontend" / "dist"):
        if candidate.is_dir():
            return candidate
    return None


@main.group()
def market():
    """Marketplace helpers (planning locally, closing/settling via gateway)."""


@market.command("plan-day-ahead")
@click.option("--forecast", "forecast_path", required=True,
              type=click.Path(exists=True))
@click.option("--zone-lat", type=int, default=42_560_000)
@click.option("--zone-lon", type=int, default=12_646_000)
@click.option("--radius-m", type=int, default=5000)
@click.option("--rate-tokens", type=int, default=1)
@click.option("--rate-per-wh", type=int, default=1000)
def market_plan(forecast_path, zone_lat, zone_lon, radius_m, rate_tokens,
                rate_per_wh):
    """Turn a production/consumption forecast into request drafts."""
    raw = json.loads(Path(forecast_path).read_text())
    forecast = PowerForecast(day_start=int(raw["day_start"]),
                             slot_ms=int(raw["slot_ms"]),
                             production_wh=list(raw["production_wh"]),
                             consumption_wh=list(raw["consumption_wh"]))
    drafts = plan_day_ahead(forecast, zone_lat, zone_lon, radius_m,
                            rate_tokens, rate_per_wh)
    click.echo(json.dumps(drafts, indent=2))


def _gateway_post(url, token, path):
    import httpx

    response = httpx.post(f"{url}{path}", json={},
                          headers={"Authorization": f"Bearer {token}"},
                          timeout=30)
    click.echo(json.dumps(response.json(), indent=2, sort_keys=True))
    sys.exit(EXIT_OK if response.status_code < 400 else EXIT_ASSERTION)


@market.command("close")
@click.argument("request_id")
@click.option("--url", default="http://127.0.0.1:8710")
@click.option("--token", required=True)
def market_close(request_id, url, token):
    """Close bidding on a request through a running gateway."""
    _gateway_post(url, token, f"/api/requests/{request_id}/close")


@market.command("settle")
@click.argument("request_id")
@click.option("--url", default="http://127.0.0.1:8710")
@click.option("--token", required=True)
def market_settle(request_id, url, token):
    """Settle a request through a running gateway."""
    _gateway_post(url, token, f"/api/requests/{request_id}/settle")


if __name__ == "__main__":
    main()
