// @vitest-environment jsdom
import { beforeEach, describe, expect, it } from "vitest";

import { Client } from "../src/api.js";
import { PlannerController } from "../src/controller.js";
import { renderEffect, renderGrid, renderHistory, renderPinned, renderProposal, ViewHooks } from "../src/view.js";
import { FakeService } from "./fake_service.js";

const DEBOUNCE_MS = 20;

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

function setupDom(): void {
  document.body.innerHTML = `
    <div id="patients"></div><div id="history"></div><div id="grid"></div>
    <div id="effect"></div><div id="proposal-area"></div><div id="pinned"></div>`;
}

function makeController(service: FakeService): PlannerController {
  const client = new Client("", service.fetch);
  const hooks: ViewHooks = {
    onSelectPatient: (id) => void controller.choosePatient(id),
    onToggle: (k, c) => controller.toggle(k, c),
    onSuggest: () => void controller.suggestOptimal(),
    onAccept: () => controller.accept(),
    onDismiss: () => controller.dismiss(),
    onPin: () => controller.pin(),
  };
  const controller = new PlannerController(client, service.tau, service.dA, {
    debounceMs: DEBOUNCE_MS,
    onRender: (state, detail) => {
      renderHistory(document.getElementById("history")!, detail);
      renderGrid(document.getElementById("grid")!, state, hooks);
      renderEffect(document.getElementById("effect")!, state);
      renderProposal(document.getElementById("proposal-area")!, state, hooks);
      renderPinned(document.getElementById("pinned")!, state, hooks);
    },
  });
  return controller;
}

describe("planner round trip", () => {
  let service: FakeService;
  let controller: PlannerController;

  beforeEach(async () => {
    setupDom();
    service = new FakeService();
    controller = makeController(service);
    await controller.choosePatient("p1");
    await sleep(DEBOUNCE_MS + 15); // initial query settles
  });

  it("selection change fires exactly one detail fetch", () => {
    expect(service.calls["patient_detail"]).toBe(1);
  });

  it("toggling one cell fires exactly one cate call", async () => {
    const before = service.calls["cate"] ?? 0;
    controller.toggle(0, 0);
    await sleep(DEBOUNCE_MS + 15);
    expect(service.calls["cate"]).toBe(before + 1);
  });

  it("a burst of toggles still fires exactly one cate call", async () => {
    const before = service.calls["cate"] ?? 0;
    controller.toggle(0, 0);
    controller.toggle(1, 0);
    controller.toggle(2, 1);
    await sleep(DEBOUNCE_MS + 15);
    expect(service.calls["cate"]).toBe(before + 1);
  });

  it("rendered contributions sum to the rendered total", async () => {
    controller.toggle(0, 0);
    controller.toggle(2, 1);
    await sleep(DEBOUNCE_MS + 15);
    const totalText = document.getElementById("cate-total")!.textContent!;
    const total = parseFloat(totalText.split(":").pop()!);
    const bars = Array.from(document.querySelectorAll("#contribution-bars .bar-value"));
    const sum = bars.map((el) => parseFloat(el.textContent!)).reduce((a, b) => a + b, 0);
    expect(sum).toBeCloseTo(total, 3); // display rounding is 4 decimals
    expect(total).toBeCloseTo(0.75, 6);
  });

  it("equal grid and baseline render zero total and zero bars", async () => {
    const total = parseFloat(document.getElementById("cate-total")!.textContent!.split(":").pop()!);
    expect(total).toBe(0);
    const bars = Array.from(document.querySelectorAll("#contribution-bars .bar-value"));
    for (const bar of bars) expect(parseFloat(bar.textContent!)).toBe(0);
  });

  it("accepting the optimal suggestion reproduces the suggested effect on re-query", async () => {
    await controller.suggestOptimal();
    const suggested = controller.state.proposalCate!;
    controller.accept(); // grid := suggestion, re-query queued
    await sleep(DEBOUNCE_MS + 15);
    const rendered = parseFloat(document.getElementById("cate-total")!.textContent!.split(":").pop()!);
    expect(rendered).toBeCloseTo(suggested, 4);
    expect(controller.state.response!.cate).toBeCloseTo(suggested, 12);
  });

  it("dismissing the suggestion leaves the grid unchanged", async () => {
    const before = controller.state.grid.map((r) => [...r]);
    await controller.suggestOptimal();
    controller.dismiss();
    expect(controller.state.grid).toEqual(before);
    expect(controller.state.proposal).toBeNull();
  });

  it("stale responses never overwrite newer ones", async () => {
    // First edit's response is delayed past the second edit's response.
    service.delays = [60, 0];
    controller.toggle(0, 0); // cate becomes 0.5 eventually (slow)
    await sleep(DEBOUNCE_MS + 5); // let the slow request depart
    controller.toggle(1, 0); // now expects 0.8 (fast)
    await sleep(DEBOUNCE_MS + 100); // both responses resolved
    expect(controller.state.response!.cate).toBeCloseTo(0.8, 12);
  });

  it("toggle grid renders one button per slot", () => {
    const buttons = document.querySelectorAll("#toggle-grid button.cell");
    expect(buttons).toHaveLength((service.tau + 1) * service.dA);
  });

  it("history sparkline plots every observed step", () => {
    const points = document.querySelector("#history polyline")!.getAttribute("points")!.split(" ");
    expect(points).toHaveLength(12);
  });

  it("pinning adds an entry that survives later edits", async () => {
    controller.toggle(0, 0);
    await sleep(DEBOUNCE_MS + 15);
    controller.pin();
    controller.toggle(1, 1);
    await sleep(DEBOUNCE_MS + 15);
    const items = document.querySelectorAll("#pinned-list li");
    expect(items).toHaveLength(1);
    expect(items[0].textContent).toContain("0.5000");
  });
});
