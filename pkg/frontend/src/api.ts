// Typed client for the inference service, with request debouncing and a
// sequence-number guard so out-of-order responses can never overwrite
// newer state.

import type { CateResponse, Grid, ModelInfo, OptimalResponse, PatientDetail, PatientSummary } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class Client {
  constructor(
    public baseUrl: string = "",
    private fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchImpl(this.baseUrl + path, init);
    const body = await resp.json();
    if (!resp.ok) {
      throw new ApiError(resp.status, body?.detail ?? `request failed (${resp.status})`);
    }
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  model(): Promise<ModelInfo> {
    return this.request<ModelInfo>("/v1/model");
  }

  patients(): Promise<{ patients: PatientSummary[] }> {
    return this.request<{ patients: PatientSummary[] }>("/v1/patients");
  }

  patientDetail(id: string): Promise<PatientDetail> {
    return this.request<PatientDetail>(`/v1/patients/${id}`);
  }

  cate(patientId: string, t: number | null, a: Grid, b: Grid): Promise<CateResponse> {
    return this.post<CateResponse>("/v1/cate", {
      patient_id: patientId,
      t,
      sequence_a: a,
      sequence_b: b,
    });
  }

  optimal(patientId: string, t: number | null, baseline: Grid, direction: string): Promise<OptimalResponse> {
    return this.post<OptimalResponse>("/v1/optimal", {
      patient_id: patientId,
      t,
      baseline,
      direction,
    });
  }
}

/** Trailing-edge debounce; each call resets the timer. */
export function debounce<A extends unknown[]>(fn: (...args: A) => void, waitMs: number): (...args: A) => void {
  let timer: ReturnType<typeof setTimeout> | undefined;
  return (...args: A) => {
    if (timer !== undefined) clearTimeout(timer);
    timer = setTimeout(() => fn(...args), waitMs);
  };
}

/**
 * Monotone ticket dispenser: issue() before each request, accept(ticket)
 * when the response lands. A response is applied only when no newer
 * request has been issued since.
 */
export class StaleGuard {
  private latest = 0;

  issue(): number {
    this.latest += 1;
    return this.latest;
  }

  accept(ticket: number): boolean {
    return ticket === this.latest;
  }
}
