// Wire types for the /v1 JSON contract.

export type Grid = number[][]; // (tau+1) x d_a of 0/1

export interface PatientSummary {
  id: string;
  length: number;
  split: string;
}

export interface PatientDetail {
  id: string;
  length: number;
  outcomes: number[];
  treatments: number[][];
  covariates: number[][];
}

export interface ModelInfo {
  tau: number;
  d_a: number;
  d_x: number;
  input_width: number;
  checksum: string;
  train_config_digest: string;
}

export interface CateResponse {
  cate: number;
  blip: number[][]; // (tau+1) x d_a coefficients
}

export interface OptimalResponse {
  sequence: Grid;
  cate_vs_baseline: number;
}

export interface ApiErrorBody {
  detail: string;
  errors?: { field: string; message: string }[];
}
