// In-memory stand-in for the inference service: linear effects from a fixed
// coefficient matrix, call counting per route, optional artificial delays.

import type { FetchLike } from "../src/api.js";
import type { Grid } from "../src/types.js";

export class FakeService {
  calls: Record<string, number> = {};
  delays: Array<number> = []; // per-cate-call delay in ms, consumed in order
  tau = 2;
  dA = 2;
  blip: number[][] = [
    [0.5, -0.2],
    [0.3, 0.1],
    [-0.4, 0.25],
  ];
  patients = [
    { id: "p1", length: 12, split: "test" },
    { id: "p2", length: 9, split: "test" },
  ];

  private count(route: string): void {
    this.calls[route] = (this.calls[route] ?? 0) + 1;
  }

  cateOf(a: Grid, b: Grid): number {
    let total = 0;
    for (let k = 0; k <= this.tau; k++) {
      for (let c = 0; c < this.dA; c++) {
        total += this.blip[k][c] * (a[k][c] - b[k][c]);
      }
    }
    return total;
  }

  fetch: FetchLike = async (url, init) => {
    const path = url.replace(/^https?:\/\/[^/]+/, "");
    const body = init?.body ? JSON.parse(String(init.body)) : null;
    const reply = (payload: unknown, status = 200) =>
      new Response(JSON.stringify(payload), { status, headers: { "content-type": "application/json" } });

    if (path === "/v1/model") {
      this.count("model");
      return reply({ tau: this.tau, d_a: this.dA, d_x: 3, input_width: 6, checksum: "abc", train_config_digest: "def" });
    }
    if (path === "/v1/patients") {
      this.count("patients");
      return reply({ patients: this.patients });
    }
    if (path.startsWith("/v1/patients/")) {
      this.count("patient_detail");
      const id = path.split("/").pop()!;
      const found = this.patients.find((p) => p.id === id);
      if (!found) return reply({ detail: "unknown patient" }, 404);
      return reply({
        id,
        length: found.length,
        outcomes: Array.from({ length: found.length }, (_, i) => Math.sin(i / 2) + 2),
        treatments: Array.from({ length: found.length }, () => [0, 0]),
        covariates: Array.from({ length: found.length }, () => [0, 0, 0]),
      });
    }
    if (path === "/v1/cate") {
      this.count("cate");
      const delay = this.delays.shift() ?? 0;
      if (delay > 0) await new Promise((resolve) => setTimeout(resolve, delay));
      return reply({ cate: this.cateOf(body.sequence_a, body.sequence_b), blip: this.blip });
    }
    if (path === "/v1/optimal") {
      this.count("optimal");
      const seq: Grid = this.blip.map((row) => row.map((v) => (body.direction === "minimize" ? (v < 0 ? 1 : 0) : v > 0 ? 1 : 0)));
      return reply({ sequence: seq, cate_vs_baseline: this.cateOf(seq, body.baseline) });
    }
    return reply({ detail: "not found" }, 404);
  };
}
