import type { ConsoleStore } from "./store.js";
import type { Offer, RequestView } from "./types.js";

// Plain DOM rendering, no framework. Every render is a full redraw of the
// container from store state; interactive elements call back into the store.

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, attrs: Record<string, string> = {}, ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") node.className = value;
    else node.setAttribute(key, value);
  }
  for (const child of children) {
    node.append(child);
  }
  return node;
}

function inputValue(form: HTMLElement, name: string): string {
  const input = form.querySelector<HTMLInputElement>(`[name="${name}"]`);
  return input?.value ?? "";
}

function isWinner(request: RequestView, offer: Offer): boolean {
  // highlight comes from the on-chain award only, never from local sorting
  const award = request.assignment;
  return !!award && award.fleet_manager === offer.fleet_manager
    && award.price_tokens === offer.price_tokens;
}

function offerRows(store: ConsoleStore, request: RequestView): HTMLElement {
  const table = el("table", { class: "offers" });
  table.append(el("tr", {},
    el("th", {}, "fleet manager"), el("th", {}, "price"),
    el("th", {}, "committed Wh"), el("th", {}, "")));
  for (const offer of request.offers) {
    const winner = isWinner(request, offer);
    table.append(el("tr",
      { class: winner ? "offer winner" : "offer",
        "data-offer": `${request.id}:${offer.fleet_manager}` },
      el("td", {}, offer.fleet_manager.slice(0, 10)),
      el("td", { class: "price" }, String(offer.price_tokens)),
      el("td", {}, String(offer.committed_wh)),
      el("td", {}, winner ? "★ winner" : "")));
  }
  return table;
}

function requestCard(store: ConsoleStore, request: RequestView): HTMLElement {
  const session = store.state.session;
  const card = el("div",
    { class: `request status-${request.status}`, "data-request": request.id });
  card.append(el("h3", {},
    `${request.id} · ${request.scenario} · `,
    el("span", { class: "status" }, request.status)));
  card.append(el("p", {},
    `${request.energy_wh} Wh in [${request.start}, ${request.end}) · `
    + `incentive ${request.incentive_tokens} tokens`));
  card.append(offerRows(store, request));

  if (request.assignment?.ev) {
    card.append(el("p", { class: "assignment" },
      `assigned to ${request.assignment.ev} at `
      + `${request.assignment.station}`));
  }
  if (request.settlement) {
    card.append(el("p", { class: `settlement ${request.settlement.outcome}` },
      `settlement: ${request.settlement.outcome} `
      + `(${request.settlement.delivered_wh}/`
      + `${request.settlement.committed_wh} Wh)`));
  }

  if (session?.role === "fleet_manager" && request.status === "open") {
    const form = el("form", { class: "bid-form" },
      el("input", { name: "price", placeholder: "price tokens" }),
      el("input", { name: "committed", placeholder: "committed Wh" }),
      el("button", { type: "submit" }, "bid"));
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      void store.bid(request.id,
        Number(inputValue(form, "price")),
        Number(inputValue(form, "committed")));
    });
    card.append(form);
  }
  if (session?.role === "dso" && request.status === "open") {
    const button = el("button", { class: "close-btn" }, "close bidding");
    button.addEventListener("click", () => void store.closeAuction(request.id));
    card.append(button);
  }
  if (session?.role === "ev_user" && request.status === "closed") {
    const candidates = store.state.candidates[request.id] ?? [];
    const form = el("form", { class: "accept-form" },
      el("span", {},
        candidates.length
          ? `candidates: ${candidates.map((c) => c.ev).join(", ")}`
          : ""),
      el("input", { name: "ev", placeholder: "ev id" }),
      el("input", { name: "station", placeholder: "station" }),
      el("button", { type: "submit" }, "accept"));
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      void store.acceptAssignment(request.id,
        inputValue(form, "ev"), inputValue(form, "station"));
    });
    card.append(form);
  }
  if (session?.role === "dso" && request.status === "assigned") {
    const button = el("button", { class: "settle-btn" }, "settle");
    button.addEventListener("click", () => void store.settle(request.id));
    card.append(button);
  }
  for (const key of ["bid", "close", "accept", "settle"]) {
    const message = store.actionError(`${key}:${request.id}`);
    if (message) {
      card.append(el("p", { class: "error", "data-error-for": key }, message));
    }
  }
  return card;
}

function requestForm(store: ConsoleStore): HTMLElement {
  const session = store.state.session;
  const enabled = session?.role === "dso";
  const form = el("form", { class: "request-form", id: "request-form" });
  form.append(
    el("input", { name: "id", placeholder: "request id" }),
    el("select", { name: "scenario" },
      el("option", { value: "intraday" }, "intraday"),
      el("option", { value: "day_ahead" }, "day_ahead")),
    el("input", { name: "energy_wh", placeholder: "energy Wh" }),
    el("input", { name: "start", placeholder: "start (logical ms)" }),
    el("input", { name: "end", placeholder: "end (logical ms)" }),
    el("input", { name: "incentive", placeholder: "incentive tokens" }),
    el("input", { name: "lat", value: "42560000" }),
    el("input", { name: "lon", value: "12646000" }),
    el("input", { name: "radius", value: "1000" }),
    el("button", { type: "submit" }, "post request"));
  if (!enabled) {
    for (const element of form.querySelectorAll("input,select,button")) {
      element.setAttribute("disabled", "disabled");
    }
  }
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    void store.submitRequestForm({
      id: inputValue(form, "id"),
      scenario: inputValue(form, "scenario") as "intraday" | "day_ahead",
      energy_wh: Number(inputValue(form, "energy_wh")),
      start: Number(inputValue(form, "start")),
      end: Number(inputValue(form, "end")),
      incentive_tokens: Number(inputValue(form, "incentive")),
      lat: Number(inputValue(form, "lat")),
      lon: Number(inputValue(form, "lon")),
      radius_m: Number(inputValue(form, "radius")),
    });
  });
  const wrapper = el("div", { class: "panel" },
    el("h2", {}, "new flexibility request"), form);
  if (store.state.formError) {
    wrapper.append(el("p", { class: "error", id: "form-error" },
      store.state.formError));
  }
  return wrapper;
}

function tracePanel(store: ConsoleStore): HTMLElement {
  const panel = el("div", { class: "panel", id: "trace-panel" },
    el("h2", {}, "trace a lot"));
  const form = el("form", { id: "trace-form" },
    el("input", { name: "lot", placeholder: "lot id" }),
    el("button", { type: "submit" }, "trace"));
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    void store.traceLot(inputValue(form, "lot"));
  });
  panel.append(form);
  if (store.state.traceError) {
    panel.append(el("p", { class: "error" }, store.state.traceError));
  }
  const trace = store.state.trace;
  if (trace) {
    panel.append(el("p", { class: `verdict ${trace.verdict}` },
      `verdict: ${trace.verdict}`));
    panel.append(el("p", {}, `custody: ${trace.custody_chain.join(" → ")}`));
    for (const violation of trace.violations) {
      panel.append(el("p", { class: "violation" },
        `${violation.segment}/${violation.metric} = ${violation.value} `
        + `(allowed ${violation.rule.min}..${violation.rule.max})`));
    }
    if (trace.flags.length) {
      panel.append(el("p", { class: "flags" }, trace.flags.join("; ")));
    }
  }
  return panel;
}

function anchorsTable(store: ConsoleStore): HTMLElement {
  const table = el("table", { class: "anchors", id: "anchors" });
  table.append(el("tr", {},
    el("th", {}, "source"), el("th", {}, "height"),
    el("th", {}, "state root")));
  for (const anchor of store.state.anchors) {
    table.append(el("tr", {},
      el("td", {}, anchor.source),
      el("td", {}, String(anchor.height)),
      el("td", {}, anchor.state_root.slice(0, 16))));
  }
  return el("div", { class: "panel" }, el("h2", {}, "anchors"), table);
}

function simPanel(store: ConsoleStore): HTMLElement {
  const session = store.state.session;
  const panel = el("div", { class: "panel" },
    el("h2", {}, "simulation"),
    el("p", { id: "clock" }, `logical clock: ${store.state.clockNow} ms`),
    el("p", { id: "feed" },
      `event feed: seq ${store.state.feedCursor} `
      + `(${store.state.feedConnected ? "live" : "disconnected"})`));
  if (session && session.role !== "auditor") {
    const form = el("form", { id: "step-form" },
      el("input", { name: "ticks", value: "60000" }),
      el("button", { type: "submit" }, "advance clock"));
    form.addEventListener("submit", (event) => {
      event.preventDefault();
      void store.stepClock(Number(inputValue(form, "ticks")));
    });
    panel.append(form);
  }
  return panel;
}

export function renderConsole(root: HTMLElement, store: ConsoleStore): void {
  root.replaceChildren();
  const session = store.state.session;
  root.append(el("header", {},
    el("h1", {}, "federation operator console"),
    el("p", { id: "whoami" },
      session ? `${session.actor} (${session.role})` : "not signed in")));
  root.append(simPanel(store));
  root.append(requestForm(store));
  const requests = el("div", { class: "panel", id: "requests" },
    el("h2", {}, "flexibility requests"));
  for (const request of store.state.requests) {
    requests.append(requestCard(store, request));
  }
  root.append(requests);
  root.append(anchorsTable(store));
  root.append(tracePanel(store));
}

/** Re-render on every store change; returns the unsubscribe handle. */
export function mountConsole(root: HTMLElement, store: ConsoleStore): () => void {
  const unsubscribe = store.subscribe(() => renderConsole(root, store));
  renderConsole(root, store);
  return unsubscribe;
}
