// Shapes mirrored from the gateway's JSON bodies. The console renders these
// verbatim; it never derives auction or settlement outcomes on its own.

export interface SessionInfo {
  actor: string;
  role: "dso" | "fleet_manager" | "ev_user" | "auditor";
  address: string;
}

export interface Offer {
  request_id: string;
  fleet_manager: string;
  price_tokens: number;
  committed_wh: number;
  submitted_at: number;
}

export interface Assignment {
  request_id: string;
  fleet_manager: string;
  price_tokens: number;
  committed_wh: number;
  hashlock: string;
  ev: string;
  station: string;
  owner: string;
  candidates: Candidate[];
  assigned_at: number;
}

export interface Candidate {
  ev: string;
  distance_m: number;
}

export interface Settlement {
  request_id: string;
  outcome: "paid" | "refunded";
  delivered_wh: number;
  committed_wh: number;
  secret: string;
  settled_at: number;
}

export interface RequestView {
  id: string;
  scenario: "day_ahead" | "intraday";
  energy_wh: number;
  start: number;
  end: number;
  lat: number;
  lon: number;
  radius_m: number;
  incentive_tokens: number;
  status: "open" | "closed" | "assigned" | "settled" | "expired";
  issuer: string;
  offers: Offer[];
  assignment?: Assignment;
  settlement?: Settlement;
}

export interface LedgerSummary {
  ledger_id: string;
  kind: string;
  height: number;
  tip_hash: string;
  restricted_read: boolean;
  pending: number;
}

export interface AnchorRow {
  source: string;
  height: number;
  state_root: string;
  block_hash?: string;
  public_ledger: string;
  anchored_at: number;
}

export interface TraceViolation {
  segment: string;
  metric: string;
  value: number;
  rule: { metric: string; min: number; max: number };
}

export interface TraceReport {
  lot: string;
  custody_chain: string[];
  handovers: unknown[];
  summaries: Record<string, Record<string, { count: number; min: number | null; max: number | null }>>;
  violations: TraceViolation[];
  unverifiable: unknown[];
  verdict: "clean" | "violations";
  tip_hash: string;
  flags: string[];
}

export interface EventEnvelope {
  seq: number;
  kind: string;
  payload: Record<string, unknown>;
}

export interface RequestFormFields {
  id: string;
  scenario: "day_ahead" | "intraday";
  energy_wh: number;
  start: number;
  end: number;
  lat: number;
  lon: number;
  radius_m: number;
  incentive_tokens: number;
}
