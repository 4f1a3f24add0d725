import type {
  AnchorRow, Candidate, LedgerSummary, RequestFormFields, RequestView,
  SessionInfo, TraceReport,
} from "./types.js";

export class GatewayError extends Error {
  constructor(public status: number, public code: string, public detail: string) {
    super(`${code}: ${detail}`);
  }
}

/** Thin typed fetch wrapper; every write maps to one gateway endpoint. */
export class GatewayClient {
  constructor(private baseUrl: string, private token: string) {}

  private async call<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await fetch(this.baseUrl + path, {
      method,
      headers: {
        "Authorization": `Bearer ${this.token}`,
        ...(body !== undefined ? { "Content-Type": "application/json" } : {}),
      },
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const text = await response.text();
    const data = text ? JSON.parse(text) : null;
    if (!response.ok) {
      const code = data?.error ?? `HTTP${response.status}`;
      throw new GatewayError(response.status, code, data?.detail ?? "");
    }
    return data as T;
  }

  session(): Promise<SessionInfo> {
    return this.call("GET", "/api/session");
  }

  clock(): Promise<{ now: number }> {
    return this.call("GET", "/api/sim/clock");
  }

  listLedgers(): Promise<LedgerSummary[]> {
    return this.call("GET", "/api/ledgers");
  }

  listRequests(): Promise<RequestView[]> {
    return this.call("GET", "/api/requests");
  }

  getRequest(id: string): Promise<RequestView> {
    return this.call("GET", `/api/requests/${encodeURIComponent(id)}`);
  }

  postRequest(fields: RequestFormFields): Promise<RequestView> {
    return this.call("POST", "/api/requests", fields);
  }

  postOffer(requestId: string, priceTokens: number,
            committedWh: number): Promise<RequestView> {
    return this.call("POST",
      `/api/requests/${encodeURIComponent(requestId)}/offers`,
      { price_tokens: priceTokens, committed_wh: committedWh });
  }

  closeRequest(requestId: string): Promise<Record<string, unknown>> {
    return this.call("POST",
      `/api/requests/${encodeURIComponent(requestId)}/close`, {});
  }

  candidates(requestId: string): Promise<Candidate[]> {
    return this.call("GET",
      `/api/requests/${encodeURIComponent(requestId)}/candidates`);
  }

  acceptAssignment(requestId: string, ev: string,
                   station: string): Promise<Record<string, unknown>> {
    return this.call("POST",
      `/api/assignments/${encodeURIComponent(requestId)}/accept`,
      { ev, station });
  }

  settle(requestId: string): Promise<Record<string, unknown>> {
    return this.call("POST",
      `/api/requests/${encodeURIComponent(requestId)}/settle`, {});
  }

  listAnchors(): Promise<AnchorRow[]> {
    return this.call("GET", "/api/anchors");
  }

  trace(lot: string): Promise<TraceReport> {
    return this.call("GET", `/api/trace/${encodeURIComponent(lot)}`);
  }

  resolveQr(payload: string): Promise<{ tip_status: string; report: TraceReport }> {
    return this.call("GET", `/api/qr/${encodeURIComponent(payload)}`);
  }

  simStep(ticks: number): Promise<{ now: number }> {
    return this.call("POST", "/api/sim/step", { ticks });
  }

  simSeal(ledger: string): Promise<Record<string, unknown>> {
    return this.call("POST", "/api/sim/seal", { ledger });
  }
}
