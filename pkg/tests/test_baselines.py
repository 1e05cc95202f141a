import numpy as np
import pytest

from snmm import baselines, blip, lingauss, nuisance
from snmm.encoders import EncoderConfig
from snmm.nuisance import ResidualSet, StageConfig


def quick_config(epochs=10):
    return StageConfig(
        encoder=EncoderConfig(hidden=20, rep_width=10, dropout=0.0, head_hidden=20),
        lr=5e-3,
        epochs=epochs,
        batch_size=256,
    )


class TestSequentialGEstimation:
    def test_tau_zero_reduces_to_least_squares(self):
        rng = np.random.default_rng(0)
        s, d_a = 500, 2
        a = rng.normal(size=(s, 1, 1, 1, d_a))
        true = np.array([0.7, -0.4])
        y = (a[:, 0, 0, 0, :] @ true + rng.normal(0, 0.1, size=s)).reshape(s, 1, 1)
        rs = ResidualSet(y_res=y, a_res=a, mask=np.ones((s, 1)), tau=0, d_a=d_a, fold_of_patient=np.zeros(s, dtype=int), patient_index=np.arange(s))
        sol = baselines.sequential_g_estimation(rs, ridge=0.0)
        direct, *_ = np.linalg.lstsq(a[:, 0, 0, 0, :], y[:, 0, 0], rcond=None)
        np.testing.assert_allclose(sol.coefs[0][0], direct, atol=1e-8)

    def test_known_coefficients_recovered(self):
        params = lingauss.LinGaussParams(tau=2)
        ds, oracle = lingauss.simulate(params, 10000, 8, seed=1)
        rs = lingauss.oracle_residuals(oracle, ds)
        sol = baselines.sequential_g_estimation(rs, ridge=1e-6)
        est = np.concatenate(sol.coefs, axis=0)
        assert np.max(np.abs(est - lingauss.true_coefficients(oracle))) < 0.03

    def test_huge_ridge_shrinks_to_zero(self):
        params = lingauss.LinGaussParams(tau=1)
        ds, oracle = lingauss.simulate(params, 200, 6, seed=2)
        rs = lingauss.oracle_residuals(oracle, ds)
        sol = baselines.sequential_g_estimation(rs, ridge=1e9)
        assert np.max(np.abs(np.concatenate(sol.coefs))) < 1e-6

    def test_singular_gram_advises_ridge(self):
        s = 50
        rs = ResidualSet(
            y_res=np.random.default_rng(0).normal(size=(s, 1, 1)),
            a_res=np.zeros((s, 1, 1, 1, 2)),
            mask=np.ones((s, 1)),
            tau=0,
            d_a=2,
            fold_of_patient=np.zeros(s, dtype=int),
            patient_index=np.arange(s),
        )
        with pytest.raises(np.linalg.LinAlgError, match="ridge > 0"):
            baselines.sequential_g_estimation(rs, ridge=0.0)

    def test_condition_numbers_reported(self):
        params = lingauss.LinGaussParams(tau=1)
        ds, oracle = lingauss.simulate(params, 300, 6, seed=3)
        rs = lingauss.oracle_residuals(oracle, ds)
        sol = baselines.sequential_g_estimation(rs)
        assert len(sol.condition_numbers) == 2
        assert all(c >= 1.0 for c in sol.condition_numbers)


class TestOperatorT:
    def setup_method(self):
        params = lingauss.LinGaussParams(tau=3)
        ds, oracle = lingauss.simulate(params, 1000, 10, seed=4)
        self.rs = lingauss.oracle_residuals(oracle, ds)

    def solution(self, value):
        return baselines.LinearBlipSolution(coefs=[np.full((1, 2), value) for _ in range(4)], tau=3, d_a=2, ridge=1e-6)

    def test_anchor_step_input_independent(self):
        out_a = baselines.operator_T_apply(self.solution(123.0), self.rs)
        out_b = baselines.operator_T_apply(self.solution(-55.0), self.rs)
        np.testing.assert_array_equal(out_a.coefs[3], out_b.coefs[3])

    def test_convergence_in_tau_plus_one_applications(self):
        sol_a, sol_b = self.solution(9.0), self.solution(-2.0)
        for _ in range(4):
            sol_a = baselines.operator_T_apply(sol_a, self.rs)
            sol_b = baselines.operator_T_apply(sol_b, self.rs)
        for k in range(4):
            np.testing.assert_allclose(sol_a.coefs[k], sol_b.coefs[k], atol=1e-8)

    def test_fixed_point_equals_sequential(self):
        seq = baselines.sequential_g_estimation(self.rs, ridge=1e-6)
        sol = self.solution(0.0)
        for _ in range(4):
            sol = baselines.operator_T_apply(sol, self.rs)
        for k in range(4):
            np.testing.assert_allclose(sol.coefs[k], seq.coefs[k], atol=1e-8)


class TestErrorBound:
    def setup_method(self):
        params = lingauss.LinGaussParams(tau=2)
        ds, oracle = lingauss.simulate(params, 1500, 8, seed=5)
        self.rs = lingauss.oracle_residuals(oracle, ds)

    def test_bound_holds_on_well_conditioned_instance(self):
        report = baselines.verify_error_bound(self.rs, trials=100, seed=0)
        assert report.holds
        assert report.violations == 0
        assert report.worst_ratio <= 1.0

    def test_anchor_step_never_moves(self):
        report = baselines.verify_error_bound(self.rs, trials=20, seed=1)
        assert report.violations == 0

    def test_zero_input_zero_output(self):
        y_flat, a_flat, _ = self.rs.flat()
        s = y_flat.shape[0]
        cov = a_flat[:, 0, 0, :].T @ a_flat[:, 0, 0, :] / s
        acc = np.zeros(2)
        for j in range(1, 3):
            cross = a_flat[:, 0, 0, :].T @ a_flat[:, j, 0, :] / s
            acc += cross @ np.zeros(2)
        delta_out = -np.linalg.inv(cov + 1e-9 * np.eye(2)) @ acc
        np.testing.assert_array_equal(delta_out, 0.0)

    def test_degenerate_overlap_flags_vacuous(self):
        rs = ResidualSet(
            y_res=self.rs.y_res.copy(),
            a_res=np.zeros_like(self.rs.a_res),
            mask=self.rs.mask.copy(),
            tau=self.rs.tau,
            d_a=self.rs.d_a,
            fold_of_patient=self.rs.fold_of_patient,
            patient_index=self.rs.patient_index,
        )
        report = baselines.verify_error_bound(rs, trials=5, seed=2)
        assert report.vacuous
        assert not report.holds


class TestHAPlugin:
    def test_equal_sequences_zero(self):
        params = lingauss.LinGaussParams(tau=1)
        ds, _ = lingauss.simulate(params, 150, 6, seed=6)
        model = baselines.train_ha_plugin(ds, tau=1, config=quick_config(epochs=3), seed=6)
        hist = {"covariates": ds.covariates[0, :3], "treatments": ds.treatments[0, :3], "outcomes": ds.outcomes[0, :3]}
        a = np.ones((2, 2))
        assert model.cate(hist, a, a) == 0.0

    def test_unconfounded_estimators_agree(self):
        # Without confounding all three routes target the same quantity;
        # their test-window errors against the exact effects must be small
        # and mutually close.
        params = lingauss.LinGaussParams(tau=1, confound=(0.0, 0.0), outcome_confound=0.3, noise_y=0.2)
        ds, oracle = lingauss.simulate(params, 1200, 8, seed=7)
        true = lingauss.true_coefficients(oracle)
        rs = lingauss.oracle_residuals(oracle, ds)

        blip_model = blip.train_blip(rs, ds, quick_config(epochs=12), seed=7)
        seq_sol = baselines.sequential_g_estimation(rs, ridge=1e-6)
        ha_model = baselines.train_ha_plugin(ds, tau=1, config=quick_config(epochs=12), seed=7)

        rng = np.random.default_rng(0)
        test_idx = ds.indices("test")
        errors = {"blip": [], "seq": [], "ha": []}
        for _ in range(150):
            i = int(rng.choice(test_idx))
            t = int(rng.integers(0, ds.horizon - 1))
            hist = {"covariates": ds.covariates[i, : t + 1], "treatments": ds.treatments[i, : t + 1], "outcomes": ds.outcomes[i, : t + 1]}
            a = rng.integers(0, 2, size=(2, 2)).astype(float)
            b = np.zeros((2, 2))
            truth = float(np.sum(true * (a - b)))
            errors["blip"].append(blip.predict_cate(blip_model, hist, a, b) - truth)
            errors["seq"].append(float(np.sum(seq_sol.stacked(np.ones((1, 1)))[0] * (a - b))) - truth)
            errors["ha"].append(ha_model.cate(hist, a, b) - truth)
        rmses = {k: float(np.sqrt(np.mean(np.square(v)))) for k, v in errors.items()}
        scale = float(np.abs(true).sum())
        for k, rmse in rmses.items():
            assert rmse < 0.35 * scale, f"{k} rmse {rmse} vs scale {scale}"
        vals = sorted(rmses.values())
        assert vals[-1] - vals[0] < 0.25 * scale


class TestWindowFeatures:
    def test_shape_and_intercept(self):
        params = lingauss.LinGaussParams(tau=1)
        ds, _ = lingauss.simulate(params, 10, 6, seed=8)
        feats = baselines.window_features(ds, np.arange(10), tau=1, window_len=2)
        t_eff = ds.horizon - 1
        per_step = ds.d_x + ds.d_a + 1
        assert feats.shape == (10 * t_eff, 1 + 2 * per_step)
        np.testing.assert_array_equal(feats[:, 0], 1.0)
