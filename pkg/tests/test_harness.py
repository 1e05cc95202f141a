import json
import math
from importlib import resources

import jsonschema
import numpy as np
import pytest

from snmm import harness
from snmm.encoders import EncoderConfig
from snmm.nuisance import StageConfig


def tiny_stage(epochs=4):
    return StageConfig(encoder=EncoderConfig(hidden=12, rep_width=8, dropout=0.0, head_hidden=12), lr=5e-3, epochs=epochs, batch_size=128)


def tiny_config(**overrides):
    base = dict(
        dataset="lingauss",
        n_patients=150,
        horizon=8,
        tau=2,
        seeds=[0],
        estimators=["oracle", "zero"],
        nuisance=tiny_stage(),
        stage2=tiny_stage(),
        eval_windows_per_patient=3,
        eval_max_patients=20,
        oracle_residuals=True,
    )
    base.update(overrides)
    return harness.ExperimentConfig(**base)


class TestRunExperiment:
    def test_oracle_estimator_zero_rmse(self):
        report = harness.run_experiment(tiny_config())
        oracle_rows = [r for r in report.rows if r["estimator"] == "oracle"]
        assert all(r["rmse"] == 0.0 for r in oracle_rows)
        assert all(r["normalized_rmse"] == 0.0 for r in oracle_rows)

    def test_oracle_mean_normalizes_to_one(self):
        report = harness.run_experiment(tiny_config(estimators=["oracle_mean"]))
        row = report.rows[0]
        assert row["normalized_rmse"] == pytest.approx(1.0, abs=1e-12)

    def test_zero_estimator_identity(self):
        # normalized rmse of the constant-zero predictor is
        # sqrt(1 + mean^2 / var) of the oracle effects.
        cfg = tiny_config()
        report = harness.run_experiment(cfg)
        ds, adapter, _ = harness.generate_dataset(cfg, 0)
        windows = harness.sample_eval_windows(ds, adapter, cfg, 0)
        vals = np.array([w.oracle_cate for w in windows])
        expected = math.sqrt(1.0 + vals.mean() ** 2 / vals.var())
        zero_row = [r for r in report.rows if r["estimator"] == "zero"][0]
        assert zero_row["normalized_rmse"] == pytest.approx(expected, rel=1e-9)

    def test_five_seed_bookkeeping(self):
        cfg = tiny_config(seeds=[0, 1, 2, 3, 4])
        report = harness.run_experiment(cfg)
        zero_rows = [r for r in report.rows if r["estimator"] == "zero"]
        assert len(zero_rows) == 5
        agg = report.aggregates["zero"]
        vals = [r["normalized_rmse"] for r in zero_rows]
        assert agg["n_runs"] == 5
        assert agg["normalized_rmse_mean"] == pytest.approx(np.mean(vals))
        assert agg["normalized_rmse_std"] == pytest.approx(np.std(vals, ddof=1))

    def test_determinism_modulo_timings(self):
        cfg = tiny_config(estimators=["blip_net"], seeds=[3])
        a = harness.run_experiment(cfg).to_dict(include_timings=False)
        b = harness.run_experiment(cfg).to_dict(include_timings=False)
        assert a == b

    def test_estimator_failure_recorded_not_fatal(self):
        cfg = tiny_config(dataset="lingauss", oracle_residuals=False, estimators=["blip_net", "zero"], n_patients=12)
        cfg.n_folds = 12  # folds larger than the train split can support
        report = harness.run_experiment(cfg)
        blip_row = [r for r in report.rows if r["estimator"] == "blip_net"][0]
        zero_row = [r for r in report.rows if r["estimator"] == "zero"][0]
        assert "error" in blip_row
        assert "rmse" in zero_row

    def test_unknown_estimator_rejected(self):
        with pytest.raises(ValueError, match="unknown estimator"):
            harness.run_experiment(tiny_config(estimators=["nope"]))

    def test_blip_histograms_collected(self):
        cfg = tiny_config(estimators=["blip_net"])
        report = harness.run_experiment(cfg)
        hist = report.blip_histograms["blip_net"]
        assert set(hist) == {f"k{k}_a{c}" for k in range(3) for c in range(2)}
        entry = hist["k0_a0"]
        assert sum(entry["counts"]) > 0
        assert len(entry["bin_edges"]) == len(entry["counts"]) + 1


class TestRuntimeScaling:
    def test_requires_three_taus(self):
        with pytest.raises(ValueError, match="3"):
            harness.runtime_scaling(tiny_config(), [2])

    def test_table_shape(self):
        cfg = tiny_config(n_patients=60, horizon=10, stage2=tiny_stage(epochs=1))
        result = harness.runtime_scaling(cfg, [1, 2, 3], repeats=1)
        assert len(result["rows"]) == 6
        assert set(result["ratios"]) == {"blip_net", "seq_net"}
        assert all(row["median_seconds"] > 0 for row in result["rows"])


class TestExport:
    def test_json_roundtrip_and_schema(self, tmp_path):
        report = harness.run_experiment(tiny_config(estimators=["blip_net", "zero"]))
        paths = harness.export_results(report, str(tmp_path))
        on_disk = harness.load_report(str(tmp_path / "metrics.json"))
        assert on_disk == report.to_dict()
        schema = json.loads(resources.files("snmm").joinpath("schemas/metrics_report.schema.json").read_text())
        jsonschema.validate(on_disk, schema)

    def test_empty_report_headers_only(self, tmp_path):
        report = harness.MetricsReport(config={}, rows=[], aggregates={}, blip_histograms={})
        harness.export_results(report, str(tmp_path))
        lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("estimator,seed")

    def test_csv_rows_match(self, tmp_path):
        report = harness.run_experiment(tiny_config())
        harness.export_results(report, str(tmp_path))
        lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + len(report.rows)


class TestConfigRoundtrip:
    def test_from_dict_nested(self):
        cfg = tiny_config()
        back = harness.ExperimentConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()
        assert isinstance(back.stage2, StageConfig)
        assert isinstance(back.stage2.encoder, EncoderConfig)
