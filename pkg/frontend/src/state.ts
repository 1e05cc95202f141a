// Pure planner state and transitions; no DOM, no network.

import type { CateResponse, Grid } from "./types.js";

export interface Pinned {
  label: string;
  grid: Grid;
  cate: number;
}

export interface PlannerState {
  patientId: string | null;
  cutoff: number | null; // history step the plan starts after
  tau: number;
  dA: number;
  grid: Grid;
  baseline: Grid;
  direction: "maximize" | "minimize";
  response: CateResponse | null; // last accepted server answer for the current grid
  proposal: Grid | null; // optimal suggestion awaiting accept/dismiss
  proposalCate: number | null;
  pinned: Pinned[];
  error: string | null;
}

export function zeros(tau: number, dA: number): Grid {
  return Array.from({ length: tau + 1 }, () => Array.from({ length: dA }, () => 0));
}

export function cloneGrid(grid: Grid): Grid {
  return grid.map((row) => [...row]);
}

export function initialState(tau: number, dA: number): PlannerState {
  return {
    patientId: null,
    cutoff: null,
    tau,
    dA,
    grid: zeros(tau, dA),
    baseline: zeros(tau, dA),
    direction: "maximize",
    response: null,
    proposal: null,
    proposalCate: null,
    pinned: [],
    error: null,
  };
}

export function selectPatient(state: PlannerState, patientId: string, cutoff: number): PlannerState {
  return {
    ...state,
    patientId,
    cutoff,
    grid: zeros(state.tau, state.dA),
    baseline: zeros(state.tau, state.dA),
    response: null,
    proposal: null,
    proposalCate: null,
    error: null,
  };
}

export function toggleCell(state: PlannerState, step: number, component: number): PlannerState {
  const grid = cloneGrid(state.grid);
  grid[step][component] = grid[step][component] > 0 ? 0 : 1;
  // The old response no longer corresponds to the displayed grid.
  return { ...state, grid, response: null, proposal: null, proposalCate: null };
}

export function applyResponse(state: PlannerState, response: CateResponse): PlannerState {
  return { ...state, response, error: null };
}

export function applyProposal(state: PlannerState, sequence: Grid, cate: number): PlannerState {
  return { ...state, proposal: sequence, proposalCate: cate };
}

export function acceptProposal(state: PlannerState): PlannerState {
  if (!state.proposal) return state;
  return {
    ...state,
    grid: cloneGrid(state.proposal),
    proposal: null,
    proposalCate: null,
    response: null,
  };
}

export function dismissProposal(state: PlannerState): PlannerState {
  return { ...state, proposal: null, proposalCate: null };
}

export function pinCurrent(state: PlannerState): PlannerState {
  if (!state.response) return state;
  const label = `plan ${state.pinned.length + 1}`;
  return {
    ...state,
    pinned: [...state.pinned, { label, grid: cloneGrid(state.grid), cate: state.response.cate }],
  };
}

/**
 * Per-step contributions of the displayed grid against the baseline, taken
 * from the server's coefficient matrix. The displayed total always comes
 * from the server's `cate` field; these bars are its decomposition.
 */
export function contributions(state: PlannerState): number[] {
  if (!state.response) return [];
  const out: number[] = [];
  for (let k = 0; k <= state.tau; k++) {
    let value = 0;
    for (let c = 0; c < state.dA; c++) {
      value += state.response.blip[k][c] * (state.grid[k][c] - state.baseline[k][c]);
    }
    out.push(value);
  }
  return out;
}

export function gridsEqual(a: Grid, b: Grid): boolean {
  return a.length === b.length && a.every((row, i) => row.every((v, j) => v === b[i][j]));
}
