"""Experiment orchestration: seeded runs, oracle-normalized metrics, sweeps,
runtime benchmarks and result export.

A run generates a dataset with its exact-counterfactual oracle, trains the
configured estimators, and scores each on sliding evaluation windows drawn
from the test split: per window a random binary sequence is compared
against the all-zeros baseline, and the error is taken against the oracle's
paired counterfactual difference. The reported figure is RMSE divided by
the standard deviation of the oracle effects on the same windows.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import baselines, blip, lingauss, nuisance, tumor, vitals
from .dataset import TrajectoryDataset, assign_splits
from .encoders import EncoderConfig
from .nuisance import ResidualSet, StageConfig

__all__ = [
    "ExperimentConfig",
    "MetricsReport",
    "run_experiment",
    "runtime_scaling",
    "export_results",
    "sweep_confounding",
    "generate_dataset",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1


def _default_nuisance_config() -> StageConfig:
    return StageConfig(
        encoder=EncoderConfig(hidden=32, rep_width=16, dropout=0.1, head_hidden=32),
        lr=5e-3,
        epochs=60,
        batch_size=128,
        patience=10,
    )


def _default_stage2_config() -> StageConfig:
    # No dropout here: the pseudo-target pass should match the live pass.
    return StageConfig(
        encoder=EncoderConfig(hidden=32, rep_width=16, dropout=0.0, head_hidden=32),
        lr=5e-3,
        epochs=80,
        batch_size=128,
        patience=12,
    )


def _default_ha_config() -> StageConfig:
    # The plug-in fits the full outcome surface; it needs a wider head and
    # a longer budget to converge than the residual stages.
    return StageConfig(
        encoder=EncoderConfig(hidden=32, rep_width=16, dropout=0.1, head_hidden=64),
        lr=1e-2,
        epochs=120,
        batch_size=128,
        patience=15,
    )


@dataclass
class ExperimentConfig:
    dataset: str = "tumor"  # tumor | vitals | lingauss
    n_patients: int = 1000
    horizon: int = 30
    tau: int = 2
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    estimators: list[str] = field(default_factory=lambda: ["blip_net", "ha_plugin"])
    n_folds: int = 3
    gamma_conf: float = 4.0  # tumor confounding strength
    d_x: int = 8  # vitals covariate channels
    nuisance: StageConfig = field(default_factory=_default_nuisance_config)
    stage2: StageConfig = field(default_factory=_default_stage2_config)
    ha: StageConfig = field(default_factory=_default_ha_config)
    eval_windows_per_patient: int = 4
    eval_max_patients: int = 60
    ridge: float = 1e-6
    ddml_window: int = 3
    oracle_residuals: bool = False  # lingauss only: skip stage 1
    output_dir: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        for key in ("nuisance", "stage2", "ha"):
            if key in raw and isinstance(raw[key], dict):
                sub = dict(raw[key])
                if "encoder" in sub and isinstance(sub["encoder"], dict):
                    sub["encoder"] = EncoderConfig(**sub["encoder"])
                raw[key] = StageConfig(**sub)
        return cls(**raw)


@dataclass
class EvalWindow:
    patient: int
    t: int
    a_star: np.ndarray
    b_star: np.ndarray
    history: dict
    oracle_cate: float
    oracle_blips: np.ndarray | None


@dataclass
class MetricsReport:
    config: dict
    rows: list[dict]
    aggregates: dict
    blip_histograms: dict
    normalizer: str = "std of oracle effects on the evaluation windows"
    schema_version: int = SCHEMA_VERSION

    def to_dict(self, include_timings: bool = True) -> dict:
        rows = self.rows
        if not include_timings:
            rows = [{k: v for k, v in row.items() if not k.endswith("_seconds")} for row in rows]
        return {
            "schema_version": self.schema_version,
            "normalizer": self.normalizer,
            "config": self.config,
            "rows": rows,
            "aggregates": self.aggregates,
            "blip_histograms": self.blip_histograms,
        }


# ---------------------------------------------------------------------------
# data generation and oracles


class _TumorAdapter:
    def __init__(self, oracle: tumor.TumorOracle):
        self.oracle = oracle

    def true_cate(self, i, t, a, b):
        return tumor.true_cate(self.oracle, i, t, a, b)

    def true_blips(self, i, t, tau):
        return tumor.true_blip_coefficients(self.oracle, i, t, tau)


class _VitalsAdapter:
    def __init__(self, oracle: vitals.VitalsOracle):
        self.oracle = oracle

    def true_cate(self, i, t, a, b):
        return vitals.true_cate(self.oracle, i, t, a, b)

    def true_blips(self, i, t, tau):
        return vitals.true_blip_coefficients(self.oracle, i, t, tau)


class _LinGaussAdapter:
    def __init__(self, oracle: lingauss.LinGaussOracle):
        self.oracle = oracle
        self.coefs = lingauss.true_coefficients(oracle)

    def true_cate(self, i, t, a, b):
        return float(np.sum(self.coefs * (np.asarray(a) - np.asarray(b))))

    def true_blips(self, i, t, tau):
        return self.coefs.copy()


def generate_dataset(config: ExperimentConfig, seed: int):
    """Build (dataset, oracle adapter, raw oracle) for the configured generator."""
    if config.dataset == "tumor":
        params = tumor.TumorParams(gamma_conf=config.gamma_conf)
        ds, oracle = tumor.simulate_factual(params, config.n_patients, config.horizon, seed)
        return ds, _TumorAdapter(oracle), oracle
    if config.dataset == "vitals":
        panel = vitals.synth_covariates(config.n_patients, config.horizon, config.d_x, seed)
        split = assign_splits(config.n_patients, np.random.default_rng(seed + 101))
        std_panel, _ = vitals.standardize_panel(panel, np.flatnonzero(split == "train"))
        ds, oracle = vitals.simulate_observed(std_panel, vitals.VitalsParams(), seed, split=split)
        return ds, _VitalsAdapter(oracle), oracle
    if config.dataset == "lingauss":
        params = lingauss.LinGaussParams(tau=config.tau)
        ds, oracle = lingauss.simulate(params, config.n_patients, config.horizon, seed)
        return ds, _LinGaussAdapter(oracle), oracle
    raise ValueError(f"unknown dataset kind {config.dataset!r}")


def sample_eval_windows(ds: TrajectoryDataset, adapter, config: ExperimentConfig, seed: int) -> list[EvalWindow]:
    rng = np.random.default_rng(seed + 7919)
    tau = config.tau
    test_idx = ds.indices("test")
    if test_idx.size > config.eval_max_patients:
        test_idx = rng.choice(test_idx, size=config.eval_max_patients, replace=False)
    windows = []
    for i in test_idx:
        t_max = int(ds.lengths[i]) - tau - 1
        if t_max < 1:
            continue
        starts = rng.choice(np.arange(1, t_max + 1), size=min(config.eval_windows_per_patient, t_max), replace=False)
        for t in sorted(int(s) for s in starts):
            a_star = rng.integers(0, 2, size=(tau + 1, ds.d_a)).astype(float)
            b_star = np.zeros((tau + 1, ds.d_a))
            history = {
                "covariates": ds.covariates[i, : t + 1],
                "treatments": ds.treatments[i, : t + 1],
                "outcomes": ds.outcomes[i, : t + 1],
            }
            try:
                blips = adapter.true_blips(int(i), t, tau)
            except NotImplementedError:
                blips = None
            windows.append(
                EvalWindow(
                    patient=int(i),
                    t=t,
                    a_star=a_star,
                    b_star=b_star,
                    history=history,
                    oracle_cate=adapter.true_cate(int(i), t, a_star, b_star),
                    oracle_blips=blips,
                )
            )
    if not windows:
        raise ValueError("no evaluation windows available; horizon too short for tau")
    return windows


# ---------------------------------------------------------------------------
# estimator registry


class _Run:
    """Mutable per-seed context shared by the estimators."""

    def __init__(self, config: ExperimentConfig, ds: TrajectoryDataset, adapter, seed: int):
        self.config = config
        self.ds = ds
        self.adapter = adapter
        self.seed = seed
        self.residuals: ResidualSet | None = None
        self.stage1_seconds = 0.0
        self.oracle_mean = 0.0

    def ensure_residuals(self, raw_oracle=None) -> ResidualSet:
        if self.residuals is None:
            start = time.perf_counter()
            if self.config.oracle_residuals:
                if not isinstance(self.adapter, _LinGaussAdapter):
                    raise ValueError("oracle residuals are only available for the lingauss generator")
                self.residuals = lingauss.oracle_residuals(self.adapter.oracle, self.ds, patients=self.ds.indices("train"))
            else:
                models, folds = nuisance.train_nuisance(self.ds, self.config.tau, self.config.n_folds, self.config.nuisance, self.seed)
                self.residuals = nuisance.compute_residuals(models, folds, self.ds, self.config.tau)
            self.stage1_seconds = time.perf_counter() - start
        return self.residuals


def _train_blip_net(run: _Run):
    rs = run.ensure_residuals()
    return blip.train_blip(rs, run.ds, run.config.stage2, run.seed)


def _train_blip_wdo(run: _Run):
    rs = run.ensure_residuals()
    return blip.train_blip(rs, run.ds, run.config.stage2, run.seed, double_opt=False)


def _train_seq_net(run: _Run):
    rs = run.ensure_residuals()
    return blip.train_blip_sequential(rs, run.ds, run.config.stage2, run.seed)


def _train_seq_dml(run: _Run):
    rs = run.ensure_residuals()
    # Both the flattened residual rows and the feature rows are patient-major.
    feats = baselines.window_features(run.ds, rs.patient_index, rs.tau, run.config.ddml_window)
    keep = rs.mask.astype(bool).ravel()
    solution = baselines.sequential_g_estimation(rs, ridge=run.config.ridge, features=feats[keep])
    return (solution, run.config.ddml_window)


def _cate_seq_dml(model, run: _Run, window: EvalWindow) -> float:
    solution, window_len = model
    ds = run.ds
    i, t = window.patient, window.t
    feats = [1.0]
    for back in range(window_len):
        s = t - back
        if s >= 0:
            feats.extend(ds.covariates[i, s])
            feats.append(ds.outcomes[i, s - 1] if s >= 1 else 0.0)
            feats.extend(ds.treatments[i, s - 1] if s >= 1 else np.zeros(ds.d_a))
        else:
            feats.extend(np.zeros(ds.d_x + ds.d_a + 1))
    coefs = solution.stacked(np.asarray(feats)[None, :])[0]
    return float(np.sum(coefs * (window.a_star - window.b_star)))


_ESTIMATORS = {
    "blip_net": {
        "train": _train_blip_net,
        "cate": lambda model, run, w: blip.predict_cate(model, w.history, w.a_star, w.b_star),
        "coefs": lambda model, run, w: model.predict_coefficients(w.history),
    },
    "blip_wdo": {
        "train": _train_blip_wdo,
        "cate": lambda model, run, w: blip.predict_cate(model, w.history, w.a_star, w.b_star),
        "coefs": lambda model, run, w: model.predict_coefficients(w.history),
    },
    "seq_net": {
        "train": _train_seq_net,
        "cate": lambda model, run, w: blip.predict_cate(model, w.history, w.a_star, w.b_star),
        "coefs": lambda model, run, w: model.predict_coefficients(w.history),
    },
    "seq_dml": {
        "train": _train_seq_dml,
        "cate": _cate_seq_dml,
        "coefs": None,
    },
    "ha_plugin": {
        "train": lambda run: baselines.train_ha_plugin(run.ds, run.config.tau, run.config.ha, run.seed),
        "cate": lambda model, run, w: model.cate(w.history, w.a_star, w.b_star),
        "coefs": None,
    },
    "oracle": {
        "train": lambda run: None,
        "cate": lambda model, run, w: w.oracle_cate,
        "coefs": None,
    },
    "oracle_mean": {
        # Constant predictor at the mean oracle effect; its normalized RMSE
        # is 1 by construction, anchoring the normalization.
        "train": lambda run: None,
        "cate": lambda model, run, w: run.oracle_mean,
        "coefs": None,
    },
    "zero": {
        "train": lambda run: None,
        "cate": lambda model, run, w: 0.0,
        "coefs": None,
    },
}


def estimator_names() -> list[str]:
    return sorted(_ESTIMATORS)


# ---------------------------------------------------------------------------
# experiment driver


def run_experiment(config: ExperimentConfig) -> MetricsReport:
    rows: list[dict] = []
    blip_errors: dict[str, list[np.ndarray]] = {}
    for seed in config.seeds:
        t_gen = time.perf_counter()
        ds, adapter, _raw = generate_dataset(config, seed)
        gen_seconds = time.perf_counter() - t_gen
        windows = sample_eval_windows(ds, adapter, config, seed)
        oracle_vals = np.array([w.oracle_cate for w in windows])
        scale = float(oracle_vals.std())
        run = _Run(config, ds, adapter, seed)
        run.oracle_mean = float(oracle_vals.mean())

        for name in config.estimators:
            spec = _ESTIMATORS.get(name)
            if spec is None:
                raise ValueError(f"unknown estimator {name!r}; known: {estimator_names()}")
            row = {"estimator": name, "seed": seed, "gen_seconds": round(gen_seconds, 4)}
            try:
                stage1_before = run.stage1_seconds
                t_train = time.perf_counter()
                model = spec["train"](run)
                stage1_delta = run.stage1_seconds - stage1_before
                row["stage1_seconds"] = round(run.stage1_seconds, 4)
                row["train_seconds"] = round(time.perf_counter() - t_train - stage1_delta, 4)
                t_eval = time.perf_counter()
                preds = np.array([spec["cate"](model, run, w) for w in windows])
                row["eval_seconds"] = round(time.perf_counter() - t_eval, 4)
                errors = preds - oracle_vals
                rmse = float(np.sqrt(np.mean(errors**2)))
                row["rmse"] = rmse
                row["normalized_rmse"] = rmse / scale if scale > 0 else float("nan")
                row["n_windows"] = len(windows)
                if spec["coefs"] is not None and windows[0].oracle_blips is not None:
                    diffs = np.array([spec["coefs"](model, run, w) - w.oracle_blips for w in windows])
                    blip_errors.setdefault(name, []).append(diffs)
            except Exception as exc:  # noqa: BLE001 - a failed estimator must not kill the sweep
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)

    aggregates = _aggregate(rows)
    histograms = {name: _histogram(np.concatenate(chunks, axis=0)) for name, chunks in blip_errors.items()}
    return MetricsReport(config=config.to_dict(), rows=rows, aggregates=aggregates, blip_histograms=histograms)


def _aggregate(rows: list[dict]) -> dict:
    agg: dict[str, dict] = {}
    by_name: dict[str, list[float]] = {}
    for row in rows:
        if "normalized_rmse" in row and np.isfinite(row["normalized_rmse"]):
            by_name.setdefault(row["estimator"], []).append(row["normalized_rmse"])
    for name, vals in sorted(by_name.items()):
        arr = np.asarray(vals)
        agg[name] = {
            "normalized_rmse_mean": float(arr.mean()),
            "normalized_rmse_std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            "n_runs": int(arr.size),
        }
    return agg


def _histogram(diffs: np.ndarray, bins: int = 20) -> dict:
    """Binned per-component coefficient-error distributions.

    ``diffs`` has shape (windows, tau + 1, d_a).
    """
    out = {}
    tau_p1, d_a = diffs.shape[1], diffs.shape[2]
    for k in range(tau_p1):
        for comp in range(d_a):
            vals = diffs[:, k, comp]
            counts, edges = np.histogram(vals, bins=bins)
            out[f"k{k}_a{comp}"] = {
                "mean": float(vals.mean()),
                "std": float(vals.std()),
                "counts": counts.tolist(),
                "bin_edges": [float(e) for e in edges],
            }
    return out


# ---------------------------------------------------------------------------
# runtime scaling


def runtime_scaling(config: ExperimentConfig, tau_values: list[int], estimators: list[str] | None = None, repeats: int = 3) -> dict:
    """Median stage-2 wall time per estimator per horizon, plus fitted slopes.

    Residuals come from the exact linear-Gaussian oracle so the measurement
    isolates the coefficient-learning stage.
    """
    if len(tau_values) < 3:
        raise ValueError("runtime scaling needs at least 3 horizon values")
    estimators = estimators or ["blip_net", "seq_net"]
    table = []
    for tau in sorted(tau_values):
        params = lingauss.LinGaussParams(tau=tau)
        ds, oracle = lingauss.simulate(params, config.n_patients, config.horizon, seed=config.seeds[0])
        rs = lingauss.oracle_residuals(oracle, ds, patients=ds.indices("train"))
        for name in estimators:
            times = []
            for rep in range(repeats):
                start = time.perf_counter()
                if name == "blip_net":
                    blip.train_blip(rs, ds, config.stage2, seed=rep)
                elif name == "seq_net":
                    blip.train_blip_sequential(rs, ds, config.stage2, seed=rep)
                else:
                    raise ValueError(f"runtime bench does not cover estimator {name!r}")
                times.append(time.perf_counter() - start)
            table.append({"estimator": name, "tau": tau, "median_seconds": float(np.median(times)), "repeats": repeats})
    result = {"schema_version": SCHEMA_VERSION, "rows": table, "slopes": {}, "ratios": {}}
    for name in estimators:
        pts = [(row["tau"], row["median_seconds"]) for row in table if row["estimator"] == name]
        taus = np.array([p[0] for p in pts], dtype=float)
        secs = np.array([p[1] for p in pts])
        result["slopes"][name] = float(np.polyfit(taus, secs, 1)[0])
        result["ratios"][name] = float(secs[np.argmax(taus)] / secs[np.argmin(taus)])
    return result


def sweep_confounding(config: ExperimentConfig, gamma_values: list[float]) -> dict[float, MetricsReport]:
    """Repeat the experiment across tumor confounding strengths."""
    reports = {}
    for gamma in gamma_values:
        cfg = ExperimentConfig.from_dict({**config.to_dict(), "gamma_conf": gamma})
        reports[gamma] = run_experiment(cfg)
    return reports


# ---------------------------------------------------------------------------
# export


_CSV_FIELDS = ["estimator", "seed", "rmse", "normalized_rmse", "n_windows", "gen_seconds", "stage1_seconds", "train_seconds", "eval_seconds", "error"]


def export_results(report: MetricsReport, out_dir: str, formats=("csv", "json")) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "json" in formats:
        path = os.path.join(out_dir, "metrics.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        written.append(path)
    if "csv" in formats:
        path = os.path.join(out_dir, "metrics.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS, extrasaction="ignore")
            writer.writeheader()
            for row in report.rows:
                writer.writerow(row)
        written.append(path)
    return written


def load_report(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def save_oracle_sidecar(path: str, kind: str, raw_oracle) -> None:
    if kind == "tumor":
        tumor.save_oracle(path, raw_oracle)
    elif kind == "vitals":
        vitals.save_oracle(path, raw_oracle)
    else:
        raise ValueError(f"no oracle sidecar format for dataset kind {kind!r}")


def load_oracle_adapter(path: str, kind: str):
    """Load a sidecar and wrap it in the evaluation adapter for its kind."""
    if kind == "tumor":
        return _TumorAdapter(tumor.load_oracle(path))
    if kind == "vitals":
        return _VitalsAdapter(vitals.load_oracle(path))
    raise ValueError(f"no oracle sidecar format for dataset kind {kind!r}")
