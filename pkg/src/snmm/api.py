"""JSON-over-HTTP inference service for a frozen coefficient model.

The service wraps one loaded checkpoint and one dataset snapshot, both
immutable after startup. Every endpoint is read-only and responses carry
no timestamps, so identical requests produce byte-identical bodies.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import blip
from .dataset import TrajectoryDataset, load_dataset
from .encoders import checkpoint_digest

__all__ = ["create_app", "ModelStore"]


class InlineHistory(BaseModel):
    covariates: list[list[float]]
    treatments: list[list[float]]
    outcomes: list[float]


class CateRequest(BaseModel):
    patient_id: str | None = None
    t: int | None = Field(default=None, description="history cutoff step; defaults to the last observed step")
    history: InlineHistory | None = None
    sequence_a: list[list[float]]
    sequence_b: list[list[float]]


class OptimalRequest(BaseModel):
    patient_id: str | None = None
    t: int | None = None
    history: InlineHistory | None = None
    baseline: list[list[float]]
    direction: str = "maximize"


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        self.status = status
        self.message = message
        super().__init__(message)


@dataclass
class ModelStore:
    """Immutable model + dataset snapshot served to all requests."""

    model: blip.BlipModel | None = None
    dataset: TrajectoryDataset | None = None
    checksum: str = ""
    config_digest: str = ""

    @classmethod
    def load(cls, model_path: str | None, dataset_path: str | None) -> "ModelStore":
        store = cls()
        if model_path:
            store.model = blip.load_blip_model(model_path)
            store.checksum = checkpoint_digest(model_path)
            raw = json.dumps({"tau": store.model.tau, "d_a": store.model.d_a, "seed": store.model.seed}, sort_keys=True)
            store.config_digest = hashlib.sha256(raw.encode()).hexdigest()[:16]
        if dataset_path:
            store.dataset = load_dataset(dataset_path)
        return store


def _require_model(store: ModelStore) -> blip.BlipModel:
    if store.model is None:
        raise ApiError(503, "no model loaded")
    return store.model


def _resolve_history(store: ModelStore, patient_id: str | None, t: int | None, inline: InlineHistory | None, model: blip.BlipModel) -> dict:
    if inline is not None:
        x = np.asarray(inline.covariates, dtype=float)
        a = np.asarray(inline.treatments, dtype=float)
        y = np.asarray(inline.outcomes, dtype=float)
        expected_d_x = model.input_width - model.d_a - 1
        if x.ndim != 2 or x.shape[1] != expected_d_x:
            raise ApiError(422, f"covariate rows must have width {expected_d_x}")
        if a.ndim != 2 or a.shape[1] != model.d_a or a.shape[0] != x.shape[0] or y.shape[0] != x.shape[0]:
            raise ApiError(422, "history arrays must agree on length and treatment width")
        return {"covariates": x, "treatments": a, "outcomes": y}
    if patient_id is None:
        raise ApiError(422, "provide either patient_id or an inline history")
    ds = store.dataset
    if ds is None:
        raise ApiError(503, "no dataset loaded")
    if not patient_id.startswith("p") or not patient_id[1:].isdigit():
        raise ApiError(404, f"unknown patient_id {patient_id!r}")
    idx = int(patient_id[1:])
    if idx < 0 or idx >= ds.n:
        raise ApiError(404, f"unknown patient_id {patient_id!r}")
    length = int(ds.lengths[idx])
    cutoff = length - 1 if t is None else t
    if not 0 <= cutoff < length:
        raise ApiError(422, f"t must lie in [0, {length - 1}]")
    return {
        "covariates": ds.covariates[idx, : cutoff + 1],
        "treatments": ds.treatments[idx, : cutoff + 1],
        "outcomes": ds.outcomes[idx, : cutoff + 1],
    }


def _check_sequence(seq: list[list[float]], model: blip.BlipModel, name: str) -> np.ndarray:
    arr = np.asarray(seq, dtype=float)
    if arr.shape != (model.tau + 1, model.d_a):
        raise ApiError(422, f"{name} must have shape ({model.tau + 1}, {model.d_a})")
    return arr


def create_app(model_path: str | None = None, dataset_path: str | None = None, cors_origins: list[str] | None = None) -> FastAPI:
    store = ModelStore.load(model_path, dataset_path)
    app = FastAPI(title="snmm what-if service", version="1")
    app.state.store = store
    app.add_middleware(
        CORSMiddleware,
        allow_origins=cors_origins or ["*"],
        allow_methods=["GET", "POST"],
        allow_headers=["*"],
    )

    @app.exception_handler(ApiError)
    async def api_error_handler(_req: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={"detail": exc.message})

    @app.exception_handler(RequestValidationError)
    async def validation_handler(_req: Request, exc: RequestValidationError):
        errors = [{"field": ".".join(str(p) for p in err["loc"]), "message": err["msg"]} for err in exc.errors()]
        return JSONResponse(status_code=400, content={"detail": "schema violation", "errors": errors})

    @app.post("/v1/cate")
    def cate(req: CateRequest):
        model = _require_model(store)
        history = _resolve_history(store, req.patient_id, req.t, req.history, model)
        a_star = _check_sequence(req.sequence_a, model, "sequence_a")
        b_star = _check_sequence(req.sequence_b, model, "sequence_b")
        coefs = model.predict_coefficients(history)
        return {
            "cate": float(np.sum(coefs * (a_star - b_star))),
            "blip": [[float(v) for v in row] for row in coefs],
        }

    @app.post("/v1/optimal")
    def optimal(req: OptimalRequest):
        model = _require_model(store)
        if req.direction not in ("maximize", "minimize"):
            raise ApiError(422, "direction must be 'maximize' or 'minimize'")
        history = _resolve_history(store, req.patient_id, req.t, req.history, model)
        baseline = _check_sequence(req.baseline, model, "baseline")
        seq, effect = blip.optimal_sequence(model, history, baseline, req.direction)
        return {
            "sequence": [[float(v) for v in row] for row in seq],
            "cate_vs_baseline": float(effect),
        }

    @app.get("/v1/patients")
    def patients():
        ds = store.dataset
        if ds is None:
            raise ApiError(503, "no dataset loaded")
        rows = [
            {"id": f"p{int(i)}", "length": int(ds.lengths[i]), "split": str(ds.split[i])}
            for i in ds.indices("test")
        ]
        return {"patients": rows}

    @app.get("/v1/patients/{patient_id}")
    def patient_detail(patient_id: str):
        ds = store.dataset
        if ds is None:
            raise ApiError(503, "no dataset loaded")
        model = _require_model(store)
        history = _resolve_history(store, patient_id, None, None, model)
        return {
            "id": patient_id,
            "length": len(history["outcomes"]),
            "outcomes": [float(v) for v in history["outcomes"]],
            "treatments": [[float(v) for v in row] for row in history["treatments"]],
            "covariates": [[float(v) for v in row] for row in history["covariates"]],
        }

    @app.get("/v1/model")
    def model_info():
        model = _require_model(store)
        return {
            "tau": model.tau,
            "d_a": model.d_a,
            "d_x": model.input_width - model.d_a - 1,
            "input_width": model.input_width,
            "checksum": store.checksum,
            "train_config_digest": store.config_digest,
        }

    return app
