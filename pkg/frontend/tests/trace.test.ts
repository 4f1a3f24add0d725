// @vitest-environment jsdom
//
// Trace panel against a provenance scenario whose lot completed the full
// journey cleanly: verdict renders green with all five segments listed.

import { fileURLToPath } from "node:url";
import { dirname, join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { mountConsole } from "../src/render.js";
import { ConsoleStore } from "../src/store.js";
import { startGateway, waitFor, type GatewayHandle } from "./gateway.js";

const here = dirname(fileURLToPath(import.meta.url));

let gateway: GatewayHandle;
let store: ConsoleStore;
let root: HTMLElement;

beforeAll(async () => {
  gateway = await startGateway(join(here, "fixtures", "trace-demo.json"));
  store = new ConsoleStore(gateway.url, "tok-sm-op");
  await store.login();
  root = document.createElement("div");
  document.body.append(root);
  mountConsole(root, store);
}, 120_000);

afterAll(async () => {
  await gateway?.stop();
});

describe("trace panel", () => {
  it("renders a clean verdict with all five segments", async () => {
    const form = root.querySelector<HTMLElement>("#trace-form")!;
    form.querySelector<HTMLInputElement>("[name=lot]")!.value = "LOT-001";
    form.dispatchEvent(new window.Event("submit",
      { bubbles: true, cancelable: true }));
    await waitFor(() => store.state.trace !== null, "trace loaded");

    const report = store.state.trace!;
    expect(report.verdict).toBe("clean");
    expect(report.custody_chain).toEqual(["SF", "TRA", "SDC", "TRB", "SM"]);
    const verdict = root.querySelector<HTMLElement>("#trace-panel .verdict")!;
    expect(verdict.classList.contains("clean")).toBe(true);
    expect(verdict.textContent).toContain("clean");
    const custody = root.querySelector<HTMLElement>("#trace-panel")!;
    expect(custody.textContent).toContain("SF → TRA → SDC → TRB → SM");
    expect(root.querySelectorAll("#trace-panel .violation")).toHaveLength(0);
  }, 60_000);

  it("matches the gateway's trace JSON exactly", async () => {
    await store.traceLot("LOT-001");
    const fresh = await store.api.trace("LOT-001");
    expect(store.state.trace).toEqual(fresh);
  }, 60_000);
});
