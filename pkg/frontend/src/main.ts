// Bootstrap: fetch model dims, build the controller, mount the view.

import { Client } from "./api.js";
import { PlannerController } from "./controller.js";
import { renderEffect, renderGrid, renderHistory, renderPatientList, renderPinned, renderProposal, ViewHooks } from "./view.js";

function mount(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing mount point #${id}`);
  return el;
}

export async function boot(baseUrl?: string): Promise<PlannerController> {
  const params = new URLSearchParams(window.location.search);
  const client = new Client(baseUrl ?? params.get("api") ?? "");
  const info = await client.model();

  const hooks: ViewHooks = {
    onSelectPatient: (id) => void controller.choosePatient(id),
    onToggle: (k, c) => controller.toggle(k, c),
    onSuggest: () => void controller.suggestOptimal(),
    onAccept: () => controller.accept(),
    onDismiss: () => controller.dismiss(),
    onPin: () => controller.pin(),
  };

  const controller = new PlannerController(client, info.tau, info.d_a, {
    onRender: (state, detail) => {
      renderHistory(mount("history"), detail);
      renderGrid(mount("grid"), state, hooks);
      renderEffect(mount("effect"), state);
      renderProposal(mount("proposal-area"), state, hooks);
      renderPinned(mount("pinned"), state, hooks);
    },
  });

  const listing = await client.patients();
  renderPatientList(mount("patients"), listing.patients, hooks);
  return controller;
}

if (typeof document !== "undefined" && document.getElementById("patients")) {
  boot().catch((err) => {
    const banner = document.createElement("div");
    banner.className = "error";
    banner.textContent = `failed to reach the service: ${err}`;
    document.body.prepend(banner);
  });
}
