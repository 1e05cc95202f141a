// Vanilla-DOM rendering: history sparkline, toggle grid, contribution bars.

import { PlannerState, contributions, gridsEqual } from "./state.js";
import type { PatientDetail, PatientSummary } from "./types.js";

export interface ViewHooks {
  onSelectPatient: (id: string) => void;
  onToggle: (step: number, component: number) => void;
  onSuggest: () => void;
  onAccept: () => void;
  onDismiss: () => void;
  onPin: () => void;
}

const COMPONENT_NAMES = ["treatment A", "treatment B"];

export function renderPatientList(root: HTMLElement, patients: PatientSummary[], hooks: ViewHooks): void {
  const select = document.createElement("select");
  select.id = "patient-select";
  const placeholder = document.createElement("option");
  placeholder.textContent = "choose a patient";
  placeholder.value = "";
  select.appendChild(placeholder);
  for (const p of patients) {
    const opt = document.createElement("option");
    opt.value = p.id;
    opt.textContent = `${p.id} (${p.length} steps)`;
    select.appendChild(opt);
  }
  select.addEventListener("change", () => {
    if (select.value) hooks.onSelectPatient(select.value);
  });
  root.replaceChildren(select);
}

export function sparkline(values: number[], width = 360, height = 60): SVGSVGElement {
  const svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
  svg.setAttribute("width", String(width));
  svg.setAttribute("height", String(height));
  svg.setAttribute("class", "sparkline");
  if (values.length === 0) return svg;
  const min = Math.min(...values);
  const max = Math.max(...values);
  const span = max - min || 1;
  const step = values.length > 1 ? width / (values.length - 1) : 0;
  const points = values.map((v, i) => `${(i * step).toFixed(1)},${(height - ((v - min) / span) * (height - 4) - 2).toFixed(1)}`);
  const line = document.createElementNS("http://www.w3.org/2000/svg", "polyline");
  line.setAttribute("points", points.join(" "));
  line.setAttribute("fill", "none");
  line.setAttribute("stroke", "#2563eb");
  svg.appendChild(line);
  return svg;
}

export function renderHistory(root: HTMLElement, detail: PatientDetail | null): void {
  root.replaceChildren();
  if (!detail) {
    const placeholder = document.createElement("p");
    placeholder.className = "placeholder";
    placeholder.textContent = "no patient selected";
    root.appendChild(placeholder);
    return;
  }
  const title = document.createElement("h3");
  title.textContent = `${detail.id}: observed outcome (${detail.length} steps)`;
  root.appendChild(title);
  root.appendChild(sparkline(detail.outcomes));
}

export function renderGrid(root: HTMLElement, state: PlannerState, hooks: ViewHooks): void {
  const table = document.createElement("table");
  table.id = "toggle-grid";
  const header = document.createElement("tr");
  header.appendChild(document.createElement("th"));
  for (let k = 0; k <= state.tau; k++) {
    const th = document.createElement("th");
    th.textContent = `t+${k}`;
    header.appendChild(th);
  }
  table.appendChild(header);
  for (let c = 0; c < state.dA; c++) {
    const row = document.createElement("tr");
    const label = document.createElement("th");
    label.textContent = COMPONENT_NAMES[c] ?? `component ${c}`;
    row.appendChild(label);
    for (let k = 0; k <= state.tau; k++) {
      const cell = document.createElement("td");
      const button = document.createElement("button");
      button.dataset.step = String(k);
      button.dataset.component = String(c);
      button.className = state.grid[k][c] > 0 ? "cell on" : "cell off";
      button.textContent = state.grid[k][c] > 0 ? "on" : "off";
      button.addEventListener("click", () => hooks.onToggle(k, c));
      cell.appendChild(button);
      row.appendChild(cell);
    }
    table.appendChild(row);
  }
  root.replaceChildren(table);
}

export function renderEffect(root: HTMLElement, state: PlannerState): void {
  root.replaceChildren();
  const total = document.createElement("div");
  total.id = "cate-total";
  if (state.response) {
    total.textContent = `predicted effect vs baseline: ${state.response.cate.toFixed(4)}`;
  } else if (state.error) {
    total.textContent = `error: ${state.error}`;
    total.className = "error";
  } else {
    total.textContent = "waiting for server...";
  }
  root.appendChild(total);

  const bars = document.createElement("div");
  bars.id = "contribution-bars";
  const parts = contributions(state);
  const scale = Math.max(...parts.map(Math.abs), 1e-9);
  parts.forEach((value, k) => {
    const row = document.createElement("div");
    row.className = "bar-row";
    const label = document.createElement("span");
    label.textContent = `t+${k}`;
    const bar = document.createElement("span");
    bar.className = value >= 0 ? "bar pos" : "bar neg";
    bar.style.width = `${Math.abs(value) / scale * 160}px`;
    const amount = document.createElement("span");
    amount.className = "bar-value";
    amount.textContent = value.toFixed(4);
    row.append(label, bar, amount);
    bars.appendChild(row);
  });
  root.appendChild(bars);
}

export function renderProposal(root: HTMLElement, state: PlannerState, hooks: ViewHooks): void {
  root.replaceChildren();
  const suggest = document.createElement("button");
  suggest.id = "suggest-optimal";
  suggest.textContent = "suggest optimal sequence";
  suggest.addEventListener("click", hooks.onSuggest);
  root.appendChild(suggest);
  if (!state.proposal) return;

  const box = document.createElement("div");
  box.id = "proposal";
  const summary = document.createElement("p");
  const same = gridsEqual(state.proposal, state.grid);
  summary.textContent = `suggested effect vs baseline: ${state.proposalCate?.toFixed(4)}${same ? " (matches current grid)" : ""}`;
  box.appendChild(summary);
  const diff = document.createElement("p");
  diff.className = "diff";
  const changes: string[] = [];
  state.proposal.forEach((row, k) =>
    row.forEach((v, c) => {
      if (v !== state.grid[k][c]) changes.push(`t+${k} ${COMPONENT_NAMES[c] ?? c}: ${state.grid[k][c]} -> ${v}`);
    }),
  );
  diff.textContent = changes.length ? changes.join("; ") : "no changes";
  box.appendChild(diff);
  const accept = document.createElement("button");
  accept.id = "accept-proposal";
  accept.textContent = "accept";
  accept.addEventListener("click", hooks.onAccept);
  const dismiss = document.createElement("button");
  dismiss.id = "dismiss-proposal";
  dismiss.textContent = "dismiss";
  dismiss.addEventListener("click", hooks.onDismiss);
  box.append(accept, dismiss);
  root.appendChild(box);
}

export function renderPinned(root: HTMLElement, state: PlannerState, hooks: ViewHooks): void {
  root.replaceChildren();
  const pin = document.createElement("button");
  pin.id = "pin-current";
  pin.textContent = "pin current plan";
  pin.disabled = !state.response;
  pin.addEventListener("click", hooks.onPin);
  root.appendChild(pin);
  const list = document.createElement("ul");
  list.id = "pinned-list";
  for (const entry of state.pinned) {
    const item = document.createElement("li");
    item.textContent = `${entry.label}: effect ${entry.cate.toFixed(4)} (${entry.grid.flat().reduce((a, b) => a + b, 0)} treatments)`;
    list.appendChild(item);
  }
  root.appendChild(list);
}
