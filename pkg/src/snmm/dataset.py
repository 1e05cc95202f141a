"""Trajectory dataset container and its columnar on-disk format.

The file layout is a single UTF-8 text file: line 1 is a JSON header with
counts, dimensions, the generator seed and parameters, and the per-patient
split tags and lengths; every following line is one (patient, step) row
``i,t,y,a_0..a_{da-1},x_0..x_{dx-1}`` with floats serialised via ``repr``
so the round-trip is exact and the byte output is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = ["TrajectoryDataset", "assign_splits", "save_dataset", "load_dataset"]

FORMAT_NAME = "snmm-trajectories"
FORMAT_VERSION = 1

SPLITS = ("train", "val", "test")


@dataclass
class TrajectoryDataset:
    """N patient trajectories of covariates, treatments and outcomes."""

    outcomes: np.ndarray  # (n, T)
    treatments: np.ndarray  # (n, T, d_a)
    covariates: np.ndarray  # (n, T, d_x)
    lengths: np.ndarray  # (n,)
    split: np.ndarray  # (n,) strings from SPLITS
    seed: int = 0
    params: dict = field(default_factory=dict)
    kind: str = "generic"

    def __post_init__(self):
        n, horizon = self.outcomes.shape
        if self.treatments.shape[:2] != (n, horizon) or self.covariates.shape[:2] != (n, horizon):
            raise ValueError("outcomes, treatments and covariates disagree on (n, T)")
        if np.any(self.lengths < 1) or np.any(self.lengths > horizon):
            raise ValueError("lengths must lie in [1, T]")
        if not np.all(np.isfinite(self.outcomes)):
            raise ValueError("outcomes contain non-finite values")

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def horizon(self) -> int:
        return self.outcomes.shape[1]

    @property
    def d_a(self) -> int:
        return self.treatments.shape[2]

    @property
    def d_x(self) -> int:
        return self.covariates.shape[2]

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.split == split)

    def subset(self, idx: np.ndarray) -> "TrajectoryDataset":
        return TrajectoryDataset(
            outcomes=self.outcomes[idx],
            treatments=self.treatments[idx],
            covariates=self.covariates[idx],
            lengths=self.lengths[idx],
            split=self.split[idx],
            seed=self.seed,
            params=self.params,
            kind=self.kind,
        )


def assign_splits(n: int, rng: np.random.Generator, fractions=(0.70, 0.15, 0.15)) -> np.ndarray:
    """Random split tags with the requested proportions (counts rounded down
    for val/test, remainder to train)."""
    n_val = int(n * fractions[1])
    n_test = int(n * fractions[2])
    tags = np.array(["train"] * (n - n_val - n_test) + ["val"] * n_val + ["test"] * n_test, dtype=object)
    rng.shuffle(tags)
    return tags


def save_dataset(path: str, ds: TrajectoryDataset) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": ds.kind,
        "n": ds.n,
        "T": ds.horizon,
        "d_x": ds.d_x,
        "d_a": ds.d_a,
        "seed": ds.seed,
        "params": ds.params,
        "lengths": ds.lengths.tolist(),
        "split": ds.split.tolist(),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(ds.n):
        for t in range(int(ds.lengths[i])):
            cells = [str(i), str(t), repr(float(ds.outcomes[i, t]))]
            cells += [repr(float(v)) for v in ds.treatments[i, t]]
            cells += [repr(float(v)) for v in ds.covariates[i, t]]
            lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str) -> TrajectoryDataset:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"not a trajectory dataset: {path}")
        n, horizon, d_x, d_a = header["n"], header["T"], header["d_x"], header["d_a"]
        outcomes = np.zeros((n, horizon))
        treatments = np.zeros((n, horizon, d_a))
        covariates = np.zeros((n, horizon, d_x))
        for line_no, line in enumerate(fh, start=2):
            cells = line.rstrip("\n").split(",")
            if len(cells) != 3 + d_a + d_x:
                raise ValueError(f"{path}:{line_no}: expected {3 + d_a + d_x} cells, got {len(cells)}")
            i, t = int(cells[0]), int(cells[1])
            outcomes[i, t] = float(cells[2])
            treatments[i, t] = [float(v) for v in cells[3 : 3 + d_a]]
            covariates[i, t] = [float(v) for v in cells[3 + d_a :]]
    return TrajectoryDataset(
        outcomes=outcomes,
        treatments=treatments,
        covariates=covariates,
        lengths=np.array(header["lengths"]),
        split=np.array(header["split"], dtype=object),
        seed=header["seed"],
        params=header["params"],
        kind=header["kind"],
    )
