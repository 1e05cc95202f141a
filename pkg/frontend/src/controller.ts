// Wires state transitions to server queries: grid edits are local until the
// debounced query fires; stale responses are dropped by ticket.

import { Client, StaleGuard, debounce } from "./api.js";
import {
  PlannerState,
  acceptProposal,
  applyProposal,
  applyResponse,
  dismissProposal,
  initialState,
  pinCurrent,
  selectPatient,
  toggleCell,
} from "./state.js";
import type { PatientDetail } from "./types.js";

export interface ControllerOptions {
  debounceMs?: number;
  onRender: (state: PlannerState, detail: PatientDetail | null) => void;
}

export class PlannerController {
  state: PlannerState;
  detail: PatientDetail | null = null;
  private guard = new StaleGuard();
  private queueQuery: () => void;

  constructor(
    private client: Client,
    tau: number,
    dA: number,
    private options: ControllerOptions,
  ) {
    this.state = initialState(tau, dA);
    this.queueQuery = debounce(() => void this.fireQuery(), options.debounceMs ?? 150);
  }

  private render(): void {
    this.options.onRender(this.state, this.detail);
  }

  async choosePatient(patientId: string): Promise<void> {
    this.detail = await this.client.patientDetail(patientId);
    const cutoff = this.detail.length - 1;
    this.state = selectPatient(this.state, patientId, cutoff);
    this.render();
    this.queueQuery();
  }

  toggle(step: number, component: number): void {
    this.state = toggleCell(this.state, step, component);
    this.render();
    this.queueQuery();
  }

  private async fireQuery(): Promise<void> {
    if (!this.state.patientId) return;
    const ticket = this.guard.issue();
    const grid = this.state.grid;
    try {
      const response = await this.client.cate(this.state.patientId, this.state.cutoff, grid, this.state.baseline);
      if (!this.guard.accept(ticket)) return; // a newer edit superseded this answer
      this.state = applyResponse(this.state, response);
    } catch (err) {
      if (!this.guard.accept(ticket)) return;
      this.state = { ...this.state, error: String(err) };
    }
    this.render();
  }

  async suggestOptimal(): Promise<void> {
    if (!this.state.patientId) return;
    try {
      const resp = await this.client.optimal(this.state.patientId, this.state.cutoff, this.state.baseline, this.state.direction);
      this.state = applyProposal(this.state, resp.sequence, resp.cate_vs_baseline);
    } catch (err) {
      this.state = { ...this.state, error: String(err) };
    }
    this.render();
  }

  accept(): void {
    this.state = acceptProposal(this.state);
    this.render();
    this.queueQuery();
  }

  dismiss(): void {
    this.state = dismissProposal(this.state);
    this.render();
  }

  pin(): void {
    this.state = pinCurrent(this.state);
    this.render();
  }

  /** Test hook: resolve once the in-flight debounce window would have fired. */
  flushDelay(ms: number): Promise<void> {
    return new Promise((resolve) => setTimeout(resolve, ms));
  }
}
