"""HTTP/JSON service over a scenario deployment, with a live event stream.

The gateway is a thin shell: every state-changing endpoint submits exactly
one primary transaction through the pilot drivers (protocol follow-ups such
as escrow locks are attributed to the initiating call in the audit log), and
no endpoint touches contract state directly. Reads mirror chain state as
JSON. Sealed blocks fan out as server-sent events with replayable sequence
numbers, and ledgers flagged restricted-read return 403 to non-members.

Sessions are static bearer tokens from the scenario's actor list. The
deterministic core is stepped only through the explicit sim endpoints.
"""

from __future__ import annotations

import json
import socket
import threading
import time as _time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional
from urllib.parse import unquote

from fastapi import Depends, FastAPI, Query, Request
from fastapi.responses import JSONResponse, StreamingResponse
from fastapi.staticfiles import StaticFiles

from .errors import ContractFailure, FedLedgerError, PortInUse
from .harness import RunContext, Scenario, ScenarioRunner, build_context
from .interledger import verify_anchors
from .ledger import Block, Ledger

ROLE_DSO = "dso"
ROLE_FLEET = "fleet_manager"
ROLE_EV_USER = "ev_user"
ROLE_AUDITOR = "auditor"

_STATUS_BY_CODE = {
    "BadArgs": 400, "BadAmount": 400, "BadTimeslot": 400, "OverAsk": 400,
    "UnderCommit": 400, "NegativeAmount": 400, "ParseError": 400,
    "UnknownMetric": 400, "SchemaError": 400, "EmptyForecast": 400,
    "DuplicateRequest": 400, "WrongPreimage": 400, "BadTarget": 400,
    "NotDso": 403, "NotMember": 403, "NotAuthority": 403,
    "NotTokenAuthority": 403, "NotPermissioned": 403, "BadSignature": 403,
    "UnknownLedger": 404, "UnknownRequest": 404, "LotNotFound": 404,
    "TxNotFound": 404, "NoMatchingRule": 404,
}
_DEFAULT_CONFLICT = 409  # state conflicts: RequestNotOpen, AlreadySettled, ...


def status_for_code(code: str) -> int:
    return _STATUS_BY_CODE.get(code, _DEFAULT_CONFLICT)


@dataclass(frozen=True)
class ApiSession:
    actor: str
    address: str
    role: str


class SimulationService:
    """Scenario deployment plus the event log the gateway publishes."""

    def __init__(self, scenario: Scenario, chains_dir: Optional[Path] = None):
        self.ctx: RunContext = build_context(scenario, chains_dir=chains_dir)
        self.runner = ScenarioRunner(self.ctx)
        self.lock = threading.RLock()
        self.events: List[dict] = []
        self.event_cond = threading.Condition(self.lock)
        self.audit_log: List[dict] = []
        self._current_api_call: Optional[dict] = None
        self.ctx.dep.seal_hooks.append(self._publish_block)
        self.runner.run_actions(scenario.setup)
        # scenario setup predates the API call log
        self.baseline_tx_count = self.total_tx_count()

    # -- event stream ---------------------------------------------------------

    def _emit(self, kind: str, payload: dict) -> None:
        with self.event_cond:
            envelope = {"seq": len(self.events) + 1, "kind": kind,
                        "payload": payload}
            self.events.append(envelope)
            self.event_cond.notify_all()

    def _publish_block(self, ledger: Ledger, block: Block) -> None:
        self._emit("block", {
            "ledger_id": ledger.config.ledger_id,
            "height": block.height,
            "hash": block.block_hash().hex(),
            "tx_count": len(block.transactions),
        })
        for tx, status in zip(block.transactions, block.statuses):
            if status != "ok":
                continue
            call = tx.call
            if call.contract == "market":
                self._emit_market_event(ledger, call)
            elif call.contract == "htlc":
                self._emit("escrow_updated", {
                    "ledger_id": ledger.config.ledger_id,
                    "method": call.method,
                    "escrow_id": call.args.get("escrow_id", ""),
                })
            elif call.contract == "anchor":
                self._emit("anchor_recorded", {
                    "public_ledger": ledger.config.ledger_id,
                    "source": call.args.get("source"),
                    "height": call.args.get("height"),
                })
            elif call.contract == "membership":
                self._emit("membership_updated", {
                    "ledger_id": ledger.config.ledger_id,
                    "action": call.args.get("action"),
                    "member": call.args.get("member"),
                })
            elif call.contract == "provenance" and call.method == "record_digest":
                self._emit("reading_recorded", {
                    "lot": call.args.get("lot", ""),
                    "segment": call.args.get("segment", ""),
                })

    def _emit_market_event(self, ledger: Ledger, call) -> None:
        market = ledger.state.market
        method = call.method
        request_id = call.args.get("request_id") or call.args.get("id")
        if method == "post_offer":
            self._emit("offer_posted", {"request_id": request_id})
        if method in ("post_request", "close", "accept", "settle"):
            request = market.get("requests", {}).get(request_id)
            if request:
                self._emit("request_updated",
                           {"id": request_id, "status": request["status"]})
        if method == "accept":
            self._emit("assignment_updated", {"request_id": request_id})
        if method == "settle":
            settlement = market.get("settlements", {}).get(request_id, {})
            self._emit("settlement", {"request_id": request_id,
                                      "outcome": settlement.get("outcome")})

    # -- sessions ----------------------------------------------------------

    def session_for(self, token: str) -> Optional[ApiSession]:
        actor = self.ctx.tokens.get(token)
        if actor is None:
            return None
        return ApiSession(actor=actor,
                          address=self.ctx.actor_address(actor),
                          role=self.ctx.roles.get(actor, ROLE_AUDITOR))

    # -- audit ------------------------------------------------------------

    def total_tx_count(self) -> int:
        return sum(len(block.transactions)
                   for ledger in self.ctx.dep.ledgers.values()
                   for block in ledger.chain) \
            + sum(len(ledger.pending)
                  for ledger in self.ctx.dep.ledgers.values())

    def record_call(self, endpoint: str, mutating: bool, before: int) -> None:
        self.audit_log.append({"endpoint": endpoint, "mutating": mutating,
                               "tx_delta": self.total_tx_count() - before})


def create_app(service: SimulationService,
               static_dir: Optional[Path] = None) -> FastAPI:
    app = FastAPI(title="fedledger gateway", docs_url=None, redoc_url=None)
    ctx = service.ctx
    dep = ctx.dep

    class BadToken(FedLedgerError):
        code = "BadToken"

    class BadRole(FedLedgerError):
        code = "BadRole"

    def need_session(request: Request) -> ApiSession:
        header = request.headers.get("authorization", "")
        token = header[7:] if header.lower().startswith("bearer ") else header
        sess = service.session_for(token) if token else None
        if sess is None:
            raise BadToken("missing or unknown bearer token")
        return sess

    def require_role(sess: ApiSession, *roles: str) -> None:
        if sess.role not in roles:
            raise BadRole(f"requires role in {roles}, session has {sess.role}")

    @app.exception_handler(FedLedgerError)
    def _fed_error(request: Request, exc: FedLedgerError):
        status = 403 if exc.code in ("BadToken", "BadRole") \
            else status_for_code(exc.code)
        return JSONResponse(status_code=status,
                            content={"error": exc.code, "detail": exc.detail})

    @app.exception_handler(ValueError)
    def _value_error(request: Request, exc: ValueError):
        return JSONResponse(status_code=400,
                            content={"error": "BadArgs", "detail": str(exc)})

    def guarded(endpoint: str, mutating: bool, fn):
        """Serialize against the deployment and keep the audit call log."""
        with service.lock:
            before = service.total_tx_count()
            try:
                return fn()
            finally:
                service.record_call(endpoint, mutating, before)

    # -- ledgers -----------------------------------------------------------

    @app.get("/api/ledgers")
    def list_ledgers(sess: ApiSession = Depends(need_session)):
        out = []
        for ledger_id in sorted(dep.ledgers):
            ledger = dep.ledgers[ledger_id]
            out.append({
                "ledger_id": ledger_id,
                "kind": ledger.config.kind,
                "height": ledger.height,
                "tip_hash": ledger.tip_hash.hex(),
                "restricted_read": ledger.config.restricted_read,
                "pending": len(ledger.pending),
            })
        return out

    @app.get("/api/ledgers/{ledger_id}/blocks")
    def ledger_blocks(ledger_id: str,
                      frm: int = Query(0, alias="from"),
                      sess: ApiSession = Depends(need_session)):
        ledger = dep.ledger(ledger_id)
        if ledger.config.restricted_read \
                and sess.address not in ledger.current_members() \
                and sess.address != (ledger.config.authority or ""):
            raise BadRole(f"ledger {ledger_id} is restricted to members")
        return [block.to_obj() for block in ledger.chain[max(frm, 0):]]

    # -- anchors ---------------------------------------------------------

    @app.get("/api/anchors")
    def list_anchors(sess: ApiSession = Depends(need_session)):
        out = []
        for ledger_id in sorted(dep.ledgers):
            for entry in dep.ledgers[ledger_id].state.anchors:
                out.append(dict(entry, public_ledger=ledger_id))
        return out

    @app.post("/api/anchors/verify")
    def anchors_verify(body: dict, sess: ApiSession = Depends(need_session)):
        report = guarded("anchors/verify", False, lambda: verify_anchors(
            dep, body["source"], body["public"]))
        return report.to_obj()

    # -- market -----------------------------------------------------------

    def need_energy():
        if ctx.energy is None:
            raise ContractFailure("UnknownRequest", "scenario has no marketplace")
        return ctx.energy

    def need_foodchain():
        if ctx.foodchain is None:
            raise ContractFailure("LotNotFound",
                                  "scenario has no provenance pilot")
        return ctx.foodchain

    def request_view(request_id: str) -> dict:
        energy = need_energy()
        req = dict(energy.request(request_id))
        req["offers"] = energy.offers(request_id)
        assignment = energy.assignment(request_id)
        if assignment:
            req["assignment"] = assignment
        settlement = energy.settlement(request_id)
        if settlement:
            req["settlement"] = settlement
        return req

    @app.get("/api/requests")
    def list_requests(sess: ApiSession = Depends(need_session)):
        if ctx.energy is None:
            return []
        requests = ctx.energy.market_state().get("requests", {})
        return [request_view(request_id) for request_id in sorted(requests)]

    @app.get("/api/requests/{request_id}")
    def get_request(request_id: str,
                    sess: ApiSession = Depends(need_session)):
        return request_view(request_id)

    @app.post("/api/requests")
    def post_request(body: dict, sess: ApiSession = Depends(need_session)):
        require_role(sess, ROLE_DSO)
        energy = need_energy()
        request_id = guarded("requests", True,
                             lambda: energy.post_request(dict(body)))
        return request_view(request_id)

    @app.post("/api/requests/{request_id}/offers")
    def post_offer(request_id: str, body: dict,
                   sess: ApiSession = Depends(need_session)):
        require_role(sess, ROLE_FLEET)
        energy = need_energy()
        fleet = dep.keyring.get(sess.actor)
        guarded("offers", True, lambda: energy.post_offer(
            fleet, request_id, int(body["price_tokens"]),
            int(body["committed_wh"])))
        return request_view(request_id)

    @app.post("/api/requests/{request_id}/close")
    def close_request(request_id: str,
                      sess: ApiSession = Depends(need_session)):
        require_role(sess, ROLE_DSO)
        energy = need_energy()
        result = guarded("close", True,
                         lambda: energy.close_auction(request_id))
        return {**result, "request": request_view(request_id)}

    @app.get("/api/requests/{request_id}/candidates")
    def request_candidates(request_id: str,
                           sess: ApiSession = Depends(need_session)):
        return need_energy().candidates(request_id)

    @app.post("/api/assignments/{request_id}/accept")
    def accept_assignment(request_id: str, body: dict,
                          sess: ApiSession = Depends(need_session)):
        require_role(sess, ROLE_EV_USER)
        energy = need_energy()
        owner = dep.keyring.get(sess.actor)
        result = guarded("accept", True, lambda: energy.accept_assignment(
            owner, request_id, body["ev"], body.get("station", "")))
        return {**result, "request": request_view(request_id)}

    @app.post("/api/requests/{request_id}/settle")
    def settle_request(request_id: str,
                       sess: ApiSession = Depends(need_session)):
        require_role(sess, ROLE_DSO)
        energy = need_energy()
        report = guarded("settle", True,
                         lambda: energy.settle_request(request_id))
        return report.to_obj()

    # -- provenance ---------------------------------------------------------

    @app.get("/api/trace/{lot}")
    def trace(lot: str, sess: ApiSession = Depends(need_session)):
        return need_foodchain().trace_lot(lot).to_obj()

    @app.get("/api/qr/{payload:path}")
    def resolve_qr(payload: str, sess: ApiSession = Depends(need_session)):
        report, tip_status = need_foodchain().resolve_qr(unquote(payload))
        return {"tip_status": tip_status, "report": report.to_obj()}

    # -- simulation control -------------------------------------------------

    @app.post("/api/sim/step")
    def sim_step(body: dict, sess: ApiSession = Depends(need_session)):
        if sess.role == ROLE_AUDITOR:
            raise BadRole("auditors are read-only")
        ticks = int(body.get("ticks", 1))
        guarded("sim/step", True, lambda: dep.clock.advance(ticks))
        return {"now": dep.clock.now}

    @app.post("/api/sim/seal")
    def sim_seal(body: dict, sess: ApiSession = Depends(need_session)):
        if sess.role == ROLE_AUDITOR:
            raise BadRole("auditors are read-only")
        block = guarded("sim/seal", True,
                        lambda: dep.seal_block(body["ledger"]))
        return {"ledger_id": body["ledger"], "height": block.height}

    @app.get("/api/sim/clock")
    def sim_clock(sess: ApiSession = Depends(need_session)):
        return {"now": dep.clock.now}

    @app.get("/api/session")
    def whoami(sess: ApiSession = Depends(need_session)):
        return {"actor": sess.actor, "role": sess.role,
                "address": sess.address}

    # -- events (SSE) ----------------------------------------------------------

    @app.get("/api/events")
    def events(since: int = 0, limit: int = 0, idle_ms: int = 0,
               sess: ApiSession = Depends(need_session)):
        def stream() -> Iterator[str]:
            cursor = since
            sent = 0
            idle_deadline = (_time.monotonic() + idle_ms / 1000.0
                             if idle_ms else None)
            while True:
                batch = []
                with service.lock:
                    if len(service.events) > cursor:
                        batch = service.events[cursor:]
                        cursor = len(service.events)
                    else:
                        service.event_cond.wait(timeout=0.25)
                        batch = service.events[cursor:]
                        cursor = len(service.events)
                for envelope in batch:
                    yield (f"id: {envelope['seq']}\n"
                           f"event: {envelope['kind']}\n"
                           f"data: {json.dumps(envelope)}\n\n")
                    sent += 1
                    if limit and sent >= limit:
                        return
                if batch:
                    idle_deadline = (_time.monotonic() + idle_ms / 1000.0
                                     if idle_ms else None)
                elif idle_deadline is not None \
                        and _time.monotonic() >= idle_deadline:
                    return
                elif not batch:
                    yield ": keepalive\n\n"

        return StreamingResponse(stream(), media_type="text/event-stream")

    if static_dir and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="console")

    return app


@dataclass
class ServiceHandle:
    service: SimulationService
    url: str
    _server: object
    _thread: threading.Thread

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10)


def start_service(scenario: Scenario, port: int,
                  host: str = "127.0.0.1",
                  static_dir: Optional[Path] = None,
                  chains_dir: Optional[Path] = None) -> ServiceHandle:
    """Bind, serve in a background thread, and return a stoppable handle."""
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((host, port))
    except OSError as exc:
        raise PortInUse(f"{host}:{port}: {exc}") from exc
    finally:
        probe.close()

    import uvicorn

    service = SimulationService(scenario, chains_dir=chains_dir)
    app = create_app(service, static_dir=static_dir)
    config = uvicorn.Config(app, host=host, port=port, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = _time.monotonic() + 10
    while not server.started:
        if _time.monotonic() > deadline:
            raise RuntimeError("gateway failed to start")
        _time.sleep(0.02)
    return ServiceHandle(service=service, url=f"http://{host}:{port}",
                         _server=server, _thread=thread)
