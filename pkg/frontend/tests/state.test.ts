import { describe, expect, it } from "vitest";

import {
  acceptProposal,
  applyProposal,
  applyResponse,
  contributions,
  initialState,
  pinCurrent,
  selectPatient,
  toggleCell,
  zeros,
} from "../src/state.js";

const BLIP = [
  [0.5, -0.2],
  [0.3, 0.1],
  [-0.4, 0.25],
];

function ready() {
  let s = initialState(2, 2);
  s = selectPatient(s, "p1", 11);
  return s;
}

describe("planner state", () => {
  it("toggle flips a single cell and invalidates the displayed response", () => {
    let s = ready();
    s = applyResponse(s, { cate: 0, blip: BLIP });
    s = toggleCell(s, 1, 0);
    expect(s.grid[1][0]).toBe(1);
    expect(s.grid.flat().reduce((a, b) => a + b, 0)).toBe(1);
    expect(s.response).toBeNull();
    s = toggleCell(s, 1, 0);
    expect(s.grid[1][0]).toBe(0);
  });

  it("contributions decompose the server coefficients against the grid", () => {
    let s = ready();
    s = toggleCell(s, 0, 0);
    s = toggleCell(s, 2, 1);
    s = applyResponse(s, { cate: 0.75, blip: BLIP });
    const parts = contributions(s);
    expect(parts).toHaveLength(3);
    expect(parts[0]).toBeCloseTo(0.5, 12);
    expect(parts[1]).toBeCloseTo(0, 12);
    expect(parts[2]).toBeCloseTo(0.25, 12);
    expect(parts.reduce((a, b) => a + b, 0)).toBeCloseTo(0.75, 12);
  });

  it("equal grid and baseline give zero bars", () => {
    let s = ready();
    s = applyResponse(s, { cate: 0, blip: BLIP });
    expect(contributions(s)).toEqual([0, 0, 0]);
  });

  it("accepting a proposal replaces the grid and dismissing keeps it", () => {
    let s = ready();
    const proposal = [
      [1, 0],
      [1, 0],
      [0, 1],
    ];
    s = applyProposal(s, proposal, 1.05);
    const accepted = acceptProposal(s);
    expect(accepted.grid).toEqual(proposal);
    expect(accepted.proposal).toBeNull();
    const dismissed = { ...s, proposal: null, proposalCate: null };
    expect(dismissed.grid).toEqual(zeros(2, 2));
  });

  it("pinning freezes a copy of the grid", () => {
    let s = ready();
    s = toggleCell(s, 0, 1);
    s = applyResponse(s, { cate: -0.2, blip: BLIP });
    s = pinCurrent(s);
    const frozen = s.pinned[0].grid.map((r) => [...r]);
    s = toggleCell(s, 0, 1);
    expect(s.pinned[0].grid).toEqual(frozen);
    expect(s.pinned[0].cate).toBe(-0.2);
  });

  it("selecting a patient resets the plan", () => {
    let s = ready();
    s = toggleCell(s, 0, 0);
    s = selectPatient(s, "p2", 8);
    expect(s.grid).toEqual(zeros(2, 2));
    expect(s.patientId).toBe("p2");
    expect(s.cutoff).toBe(8);
  });
});
