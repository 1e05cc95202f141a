import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { ApiError, Client, StaleGuard, debounce } from "../src/api.js";
import { FakeService } from "./fake_service.js";

describe("debounce", () => {
  beforeEach(() => vi.useFakeTimers());
  afterEach(() => vi.useRealTimers());

  it("collapses a burst into one trailing call", () => {
    const calls: number[] = [];
    const fn = debounce((v: number) => calls.push(v), 100);
    fn(1);
    fn(2);
    fn(3);
    vi.advanceTimersByTime(99);
    expect(calls).toEqual([]);
    vi.advanceTimersByTime(2);
    expect(calls).toEqual([3]);
  });

  it("separate bursts fire separately", () => {
    const calls: number[] = [];
    const fn = debounce((v: number) => calls.push(v), 50);
    fn(1);
    vi.advanceTimersByTime(60);
    fn(2);
    vi.advanceTimersByTime(60);
    expect(calls).toEqual([1, 2]);
  });
});

describe("stale guard", () => {
  it("only the newest ticket is accepted", () => {
    const guard = new StaleGuard();
    const first = guard.issue();
    const second = guard.issue();
    expect(guard.accept(first)).toBe(false);
    expect(guard.accept(second)).toBe(true);
    const third = guard.issue();
    expect(guard.accept(second)).toBe(false);
    expect(guard.accept(third)).toBe(true);
  });
});

describe("client", () => {
  it("round-trips the cate call", async () => {
    const service = new FakeService();
    const client = new Client("", service.fetch);
    const a = [
      [1, 0],
      [0, 0],
      [0, 0],
    ];
    const b = [
      [0, 0],
      [0, 0],
      [0, 0],
    ];
    const resp = await client.cate("p1", 5, a, b);
    expect(resp.cate).toBeCloseTo(0.5, 12);
    expect(resp.blip).toHaveLength(3);
    expect(service.calls["cate"]).toBe(1);
  });

  it("maps error bodies to ApiError", async () => {
    const service = new FakeService();
    const client = new Client("", service.fetch);
    await expect(client.patientDetail("nope")).rejects.toThrowError(ApiError);
  });
});
