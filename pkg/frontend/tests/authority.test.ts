// @vitest-environment jsdom
//
// The console's client-side validation is UX sugar only. With it switched
// off, invalid posts reach the gateway, are rejected there, and leave no
// trace in chain state.

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { mountConsole } from "../src/render.js";
import { ConsoleStore } from "../src/store.js";
import { startGateway, waitFor, type GatewayHandle } from "./gateway.js";

let gateway: GatewayHandle;
let store: ConsoleStore;
let root: HTMLElement;

beforeAll(async () => {
  gateway = await startGateway("energy");
  store = new ConsoleStore(gateway.url, "tok-dso");
  await store.login();
  root = document.createElement("div");
  document.body.append(root);
  mountConsole(root, store);
  store.startFeed();
}, 120_000);

afterAll(async () => {
  store?.stopFeed();
  await gateway?.stop();
});

// rejected calls are still sealed with a failure status, so the block count
// may grow; what must not change is the contract state behind each ledger
async function stateRoots(): Promise<Record<string, string>> {
  const out: Record<string, string> = {};
  for (const ledger of await store.api.listLedgers()) {
    const response = await fetch(
      `${gateway.url}/api/ledgers/${ledger.ledger_id}/blocks`,
      { headers: { Authorization: "Bearer tok-dso" } });
    const blocks = (await response.json()) as { state_root: string }[];
    out[ledger.ledger_id] =
      blocks.length ? blocks[blocks.length - 1].state_root : "";
  }
  return out;
}

function invalidFields(id: string) {
  return {
    id,
    scenario: "intraday" as const,
    energy_wh: 40_000,
    start: 0,  // in the past
    end: 10,
    lat: 42_560_000,
    lon: 12_646_000,
    radius_m: 1000,
    incentive_tokens: 40,
  };
}

describe("server remains the sole authority", () => {
  it("client validation off: the server rejects and state does not move", async () => {
    await store.stepClock(3_600_000);
    const before = await stateRoots();

    store.clientValidation = false;
    const ok = await store.submitRequestForm(invalidFields("bad-1"));
    expect(ok).toBe(false);
    // the server's reason is rendered inline, verbatim
    expect(store.state.formError).toContain("BadTimeslot");
    await waitFor(() => root.querySelector("#form-error") !== null,
      "inline error rendered");
    expect(root.querySelector("#form-error")?.textContent)
      .toContain("BadTimeslot");

    const negative = invalidFields("bad-2");
    negative.energy_wh = -5;
    negative.start = 10_800_000;
    negative.end = 14_400_000;
    expect(await store.submitRequestForm(negative)).toBe(false);
    expect(store.state.formError).toContain("BadAmount");

    expect(await stateRoots()).toEqual(before);
    expect(await store.api.listRequests()).toEqual([]);
  }, 60_000);

  it("client validation on: the same posts never reach the gateway", async () => {
    const before = await stateRoots();
    store.clientValidation = true;
    const ok = await store.submitRequestForm(invalidFields("bad-3"));
    expect(ok).toBe(false);
    expect(store.state.formError).toContain("future");
    expect(await stateRoots()).toEqual(before);
  }, 60_000);

  it("disabling validation changes no persisted outcome for valid posts", async () => {
    store.clientValidation = false;
    const valid = invalidFields("good-1");
    valid.start = 10_800_000;
    valid.end = 14_400_000;
    expect(await store.submitRequestForm(valid)).toBe(true);
    await waitFor(() => store.request("good-1") !== undefined,
      "valid request lands");
    expect(store.request("good-1")!.status).toBe("open");
  }, 60_000);
});
