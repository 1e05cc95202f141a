"""Variable-length history encoding and feed-forward prediction heads.

A single gated recurrent cell (input/forget/output gates, tanh cell update)
consumes per-step input vectors built from the trajectory data and emits a
fixed-width representation per step through an ELU-projected hidden state.
Representations at step t depend only on inputs up to t, so the encoder can
be shared by all sliding-window losses.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "EncoderConfig",
    "HistoryBatch",
    "RecurrentEncoder",
    "MLPHead",
    "init_matrix",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_digest",
]


@dataclass
class EncoderConfig:
    hidden: int = 32
    rep_width: int = 16
    layers: int = 1
    dropout: float = 0.0
    head_hidden: int = 32

    def __post_init__(self):
        if min(self.hidden, self.rep_width, self.layers, self.head_hidden) < 1:
            raise ValueError("all widths and the layer count must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class HistoryBatch:
    """Per-step input rows for a batch of trajectories.

    ``inputs`` has shape (n, T, d) where each row t concatenates
    (covariates_t, treatments_{t-1}, outcome_{t-1}); the first step
    zero-fills the treatment/outcome slots. ``mask`` flags real steps,
    padded steps beyond a patient's length are zero.
    """

    inputs: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_arrays(cls, covariates: np.ndarray, treatments: np.ndarray, outcomes: np.ndarray, lengths: np.ndarray) -> "HistoryBatch":
        n, horizon, d_x = covariates.shape
        d_a = treatments.shape[2]
        inputs = np.zeros((n, horizon, d_x + d_a + 1))
        inputs[:, :, :d_x] = covariates
        inputs[:, 1:, d_x : d_x + d_a] = treatments[:, :-1, :]
        inputs[:, 1:, d_x + d_a] = outcomes[:, :-1]
        mask = (np.arange(horizon)[None, :] < lengths[:, None]).astype(float)
        inputs *= mask[:, :, None]
        return cls(inputs=inputs, lengths=np.asarray(lengths), mask=mask)

    @property
    def width(self) -> int:
        return self.inputs.shape[2]


def init_matrix(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class RecurrentEncoder:
    """Gated recurrent encoder with an ELU representation projection.

    Gate layout along the 4h axis: input, forget, output, candidate.
    Dropout applies only on the hidden-to-representation path and only
    when a training rng is supplied.
    """

    def __init__(self, input_width: int, config: EncoderConfig, rng: np.random.Generator):
        self.input_width = input_width
        self.config = config
        h = config.hidden
        self.layers = []
        d_in = input_width
        for _ in range(config.layers):
            layer = {
                "w_x": T.parameter(init_matrix(rng, d_in, (d_in, 4 * h))),
                "w_h": T.parameter(init_matrix(rng, h, (h, 4 * h))),
                "b": T.parameter(np.zeros((1, 4 * h))),
            }
            self.layers.append(layer)
            d_in = h
        self.w_rep = T.parameter(init_matrix(rng, h, (h, config.rep_width)))
        self.b_rep = T.parameter(np.zeros((1, config.rep_width)))

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            params.extend(layer.values())
        params.extend([self.w_rep, self.b_rep])
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, layer in enumerate(self.layers):
            for key, p in layer.items():
                named[f"encoder.layer{i}.{key}"] = p
        named["encoder.w_rep"] = self.w_rep
        named["encoder.b_rep"] = self.b_rep
        return named

    def _cell(self, layer, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        h = self.config.hidden
        gates = T.add(T.add(T.matmul(x_t, layer["w_x"]), T.matmul(h_prev, layer["w_h"])), layer["b"])
        gate_in = T.sigmoid(T.slice_cols(gates, 0, h))
        gate_forget = T.sigmoid(T.slice_cols(gates, h, 2 * h))
        gate_out = T.sigmoid(T.slice_cols(gates, 2 * h, 3 * h))
        candidate = T.tanh(T.slice_cols(gates, 3 * h, 4 * h))
        c_t = T.add(T.mul(gate_forget, c_prev), T.mul(gate_in, candidate))
        h_t = T.mul(gate_out, T.tanh(c_t))
        return h_t, c_t

    def encode(self, batch: HistoryBatch, train_rng: np.random.Generator | None = None) -> list[Tensor]:
        """Unroll over time; returns one (n, rep_width) tensor per step."""
        if batch.width != self.input_width:
            raise T.ShapeError("encode", (batch.width,), (self.input_width,))
        n, horizon, _ = batch.inputs.shape
        h = self.config.hidden
        keep = 1.0 - self.config.dropout
        step_inputs = [T.tensor(batch.inputs[:, t, :]) for t in range(horizon)]
        for layer in self.layers:
            h_t = T.tensor(np.zeros((n, h)))
            c_t = T.tensor(np.zeros((n, h)))
            outputs = []
            for t in range(horizon):
                h_t, c_t = self._cell(layer, step_inputs[t], h_t, c_t)
                outputs.append(h_t)
            step_inputs = outputs
        reps = []
        for h_t in step_inputs:
            if train_rng is not None and self.config.dropout > 0.0:
                drop = (train_rng.random((n, h)) < keep) / keep
                h_t = T.mul(h_t, T.tensor(drop))
            reps.append(T.elu(T.add(T.matmul(h_t, self.w_rep), self.b_rep)))
        return reps


class MLPHead:
    """Two affine maps with a rectifier between; optional logistic output."""

    def __init__(self, input_width: int, hidden: int, output_width: int, rng: np.random.Generator, binary: bool = False):
        self.binary = binary
        self.output_width = output_width
        self.w1 = T.parameter(init_matrix(rng, input_width, (input_width, hidden)))
        self.b1 = T.parameter(np.zeros((1, hidden)))
        self.w2 = T.parameter(init_matrix(rng, hidden, (hidden, output_width)))
        self.b2 = T.parameter(np.zeros((1, output_width)))

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1, f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}

    def logits(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.w1.shape[0]:
            raise T.ShapeError("apply_head", z.shape, self.w1.shape)
        hidden = T.relu(T.add(T.matmul(z, self.w1), self.b1))
        return T.add(T.matmul(hidden, self.w2), self.b2)

    def __call__(self, z: Tensor) -> Tensor:
        out = self.logits(z)
        return T.sigmoid(out) if self.binary else out


# ---------------------------------------------------------------------------
# checkpoint format: versioned JSON header plus named row-major float64 blobs

CHECKPOINT_FORMAT = "snmm-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, named_params: dict[str, Tensor], meta: dict) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta,
        "params": {
            name: {
                "shape": list(p.values.shape),
                "data": base64.b64encode(np.ascontiguousarray(p.values).tobytes()).decode("ascii"),
            }
            for name, p in sorted(named_params.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a model checkpoint: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    params = {}
    for name, entry in payload["params"].items():
        arr = np.frombuffer(base64.b64decode(entry["data"]), dtype=np.float64).reshape(entry["shape"])
        params[name] = arr.copy()
    return params, payload["meta"]


def checkpoint_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
