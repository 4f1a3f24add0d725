import { GatewayClient, GatewayError } from "./api.js";
import { EventFeed } from "./events.js";
import type {
  AnchorRow, Candidate, EventEnvelope, LedgerSummary, RequestFormFields,
  RequestView, SessionInfo, TraceReport,
} from "./types.js";

export interface ConsoleState {
  session: SessionInfo | null;
  clockNow: number;
  requests: RequestView[];
  anchors: AnchorRow[];
  ledgers: LedgerSummary[];
  candidates: Record<string, Candidate[]>;
  trace: TraceReport | null;
  traceError: string;
  formError: string;
  actionErrors: Record<string, string>;
  feedCursor: number;
  feedConnected: boolean;
}

type Listener = (state: ConsoleState) => void;

/**
 * Console state container. Tables are populated exclusively from gateway
 * responses; server-sent events only trigger refreshes of the affected
 * resources, so the view never contains anything the chain does not.
 */
export class ConsoleStore {
  readonly api: GatewayClient;
  state: ConsoleState = {
    session: null,
    clockNow: 0,
    requests: [],
    anchors: [],
    ledgers: [],
    candidates: {},
    trace: null,
    traceError: "",
    formError: "",
    actionErrors: {},
    feedCursor: 0,
    feedConnected: false,
  };
  // UX-only mirror of server validation; disabling it must change nothing
  // that persists, because the server remains the sole authority
  clientValidation = true;

  private listeners: Listener[] = [];
  private feed: EventFeed | null = null;

  constructor(private baseUrl: string, private token: string) {
    this.api = new GatewayClient(baseUrl, token);
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private notify(): void {
    for (const listener of this.listeners) listener(this.state);
  }

  private patch(partial: Partial<ConsoleState>): void {
    this.state = { ...this.state, ...partial };
    this.notify();
  }

  // -- lifecycle ------------------------------------------------------------

  async login(): Promise<SessionInfo> {
    const session = await this.api.session();
    this.patch({ session });
    await this.refreshAll();
    return session;
  }

  startFeed(): void {
    if (this.feed) return;
    this.feed = new EventFeed(
      this.baseUrl, this.token,
      (envelope) => this.handleEvent(envelope),
      (connected) => this.patch({ feedConnected: connected }));
    this.feed.start();
  }

  stopFeed(): void {
    this.feed?.stop();
    this.feed = null;
  }

  async refreshAll(): Promise<void> {
    const [requests, anchors, ledgers, clock] = await Promise.all([
      this.api.listRequests(),
      this.api.listAnchors(),
      this.api.listLedgers(),
      this.api.clock(),
    ]);
    this.patch({ requests, anchors, ledgers, clockNow: clock.now });
  }

  async handleEvent(envelope: EventEnvelope): Promise<void> {
    this.patch({ feedCursor: envelope.seq });
    switch (envelope.kind) {
      case "request_updated":
      case "offer_posted":
      case "assignment_updated":
      case "settlement": {
        const requests = await this.api.listRequests();
        this.patch({ requests });
        break;
      }
      case "anchor_recorded": {
        const anchors = await this.api.listAnchors();
        this.patch({ anchors });
        break;
      }
      case "block": {
        const [ledgers, clock] = await Promise.all([
          this.api.listLedgers(), this.api.clock()]);
        this.patch({ ledgers, clockNow: clock.now });
        break;
      }
      default:
        break;
    }
  }

  // -- helpers -------------------------------------------------------------

  request(id: string): RequestView | undefined {
    return this.state.requests.find((r) => r.id === id);
  }

  private async runAction(key: string, action: () => Promise<unknown>):
      Promise<boolean> {
    try {
      await action();
      this.patch({
        actionErrors: { ...this.state.actionErrors, [key]: "" },
      });
      return true;
    } catch (err) {
      const message = err instanceof GatewayError
        ? `${err.code}: ${err.detail}` : String(err);
      this.patch({
        actionErrors: { ...this.state.actionErrors, [key]: message },
      });
      return false;
    }
  }

  actionError(key: string): string {
    return this.state.actionErrors[key] ?? "";
  }

  // -- operator actions ---------------------------------------------------

  async submitRequestForm(fields: RequestFormFields): Promise<boolean> {
    if (this.clientValidation) {
      if (fields.energy_wh <= 0 || fields.incentive_tokens <= 0) {
        this.patch({ formError: "energy and incentive must be positive" });
        return false;
      }
      if (fields.start <= this.state.clockNow || fields.end <= fields.start) {
        this.patch({ formError: "timeslot must lie in the future" });
        return false;
      }
    }
    const ok = await this.runAction("post_request",
      () => this.api.postRequest(fields));
    this.patch({ formError: ok ? "" : this.actionError("post_request") });
    return ok;
  }

  async bid(requestId: string, priceTokens: number,
            committedWh: number): Promise<boolean> {
    return this.runAction(`bid:${requestId}`,
      () => this.api.postOffer(requestId, priceTokens, committedWh));
  }

  async closeAuction(requestId: string): Promise<boolean> {
    return this.runAction(`close:${requestId}`,
      () => this.api.closeRequest(requestId));
  }

  async loadCandidates(requestId: string): Promise<void> {
    const candidates = await this.api.candidates(requestId);
    this.patch({
      candidates: { ...this.state.candidates, [requestId]: candidates },
    });
  }

  async acceptAssignment(requestId: string, ev: string,
                         station: string): Promise<boolean> {
    return this.runAction(`accept:${requestId}`,
      () => this.api.acceptAssignment(requestId, ev, station));
  }

  async settle(requestId: string): Promise<boolean> {
    return this.runAction(`settle:${requestId}`,
      () => this.api.settle(requestId));
  }

  async traceLot(lot: string): Promise<boolean> {
    try {
      const trace = await this.api.trace(lot);
      this.patch({ trace, traceError: "" });
      return true;
    } catch (err) {
      const message = err instanceof GatewayError
        ? `${err.code}: ${err.detail}` : String(err);
      this.patch({ trace: null, traceError: message });
      return false;
    }
  }

  async stepClock(ticks: number): Promise<boolean> {
    const ok = await this.runAction("sim_step",
      () => this.api.simStep(ticks));
    if (ok) {
      const clock = await this.api.clock();
      this.patch({ clockNow: clock.now });
    }
    return ok;
  }
}
