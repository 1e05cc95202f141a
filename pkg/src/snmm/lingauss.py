"""Linear-Gaussian benchmark process with analytically exact nuisances.

A scalar AR(1) confounder drives continuous treatments, and the outcome is
a linear combination of the last few treatments plus the confounder. Every
conditional mean needed for residualization is available in closed form,
so the process serves as the ground-truth instrument for the moment-based
estimators: the per-step effect coefficients are known constants, and
oracle residuals can be handed to downstream stages without any fitting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import TrajectoryDataset, assign_splits
from .nuisance import ResidualSet

__all__ = ["LinGaussParams", "LinGaussOracle", "simulate", "oracle_residuals", "true_coefficients"]


@dataclass
class LinGaussParams:
    tau: int = 2
    d_a: int = 2
    ar_coef: float = 0.7
    confound: tuple[float, ...] = (0.8, -0.6)  # per-component loading of X on A
    noise_a: float = 0.7
    noise_y: float = 0.3
    outcome_confound: float = 1.0
    intercept: float = 0.5
    # effect of the treatment applied m steps before the outcome, m = 0..tau
    effect_lags: np.ndarray | None = None

    def effects(self) -> np.ndarray:
        if self.effect_lags is not None:
            return np.asarray(self.effect_lags, dtype=float)
        rng = np.random.default_rng(12345)
        return rng.uniform(-1.0, 1.0, size=(self.tau + 1, self.d_a)).round(2)


@dataclass
class LinGaussOracle:
    params: LinGaussParams
    x: np.ndarray  # (n, T)
    effects: np.ndarray  # (tau+1, d_a) lag-indexed


def simulate(params: LinGaussParams, n: int, horizon: int, seed: int, split_fractions=(0.70, 0.15, 0.15)) -> tuple[TrajectoryDataset, LinGaussOracle]:
    if horizon <= params.tau:
        raise ValueError("horizon must exceed tau")
    rng = np.random.default_rng(seed)
    phi = params.ar_coef
    x = np.zeros((n, horizon))
    x[:, 0] = rng.normal(size=n)
    for t in range(1, horizon):
        x[:, t] = phi * x[:, t - 1] + np.sqrt(1.0 - phi**2) * rng.normal(size=n)

    gamma = np.asarray(params.confound[: params.d_a], dtype=float)
    treatments = gamma[None, None, :] * x[:, :, None] + rng.normal(0.0, params.noise_a, size=(n, horizon, params.d_a))

    effects = params.effects()
    outcomes = np.full((n, horizon), params.intercept)
    for m in range(params.tau + 1):
        contrib = np.einsum("ntc,c->nt", treatments, effects[m])
        outcomes[:, m:] += contrib[:, : horizon - m] if m > 0 else contrib
    outcomes += params.outcome_confound * x + rng.normal(0.0, params.noise_y, size=(n, horizon))

    ds = TrajectoryDataset(
        outcomes=outcomes,
        treatments=treatments,
        covariates=x[:, :, None],
        lengths=np.full(n, horizon),
        split=assign_splits(n, rng, split_fractions),
        seed=seed,
        params={"tau": params.tau},
        kind="lingauss",
    )
    return ds, LinGaussOracle(params=params, x=x, effects=effects)


def true_coefficients(oracle: LinGaussOracle) -> np.ndarray:
    """Per-step effect coefficients, shape (tau+1, d_a): step k carries the
    effect of the treatment applied tau - k steps before the outcome."""
    return oracle.effects[::-1].copy()


def conditional_treatment_mean(oracle: LinGaussOracle, x_anchor: np.ndarray, lead: int) -> np.ndarray:
    """E[A_s | history up to the anchor] where lead = s - anchor >= 0."""
    p = oracle.params
    gamma = np.asarray(p.confound[: p.d_a], dtype=float)
    return (p.ar_coef**lead) * x_anchor[:, None] * gamma[None, :]


def oracle_residuals(oracle: LinGaussOracle, ds: TrajectoryDataset, patients: np.ndarray | None = None) -> ResidualSet:
    """Exact residuals from the closed-form conditional means.

    For the window starting at t with offset k, the anchor is X at t + k;
    treatments before the anchor are observed, later ones are projected
    through the AR chain; the outcome projection substitutes those means.
    """
    p = oracle.params
    tau = p.tau
    if patients is None:
        patients = np.arange(ds.n)
    x = oracle.x[patients]
    a = ds.treatments[patients]
    y = ds.outcomes[patients]
    n, horizon = x.shape
    t_eff = horizon - tau
    effects = oracle.effects

    y_res = np.zeros((n, t_eff, tau + 1))
    a_res = np.zeros((n, t_eff, tau + 1, tau + 1, p.d_a))
    for t in range(t_eff):
        for k in range(tau + 1):
            anchor = x[:, t + k]
            y_hat = np.full(n, p.intercept) + p.outcome_confound * (p.ar_coef ** (tau - k)) * anchor
            for m in range(tau + 1):
                s = t + tau - m  # absolute time of the treatment with lag m
                if s <= t + k - 1:
                    a_s = a[:, s, :]
                else:
                    a_s = conditional_treatment_mean(oracle, anchor, s - (t + k))
                y_hat += a_s @ effects[m]
            y_res[:, t, k] = y[:, t + tau] - y_hat
            for j in range(k, tau + 1):
                a_res[:, t, j, k, :] = a[:, t + j, :] - conditional_treatment_mean(oracle, anchor, j - k)

    return ResidualSet(
        y_res=y_res,
        a_res=a_res,
        mask=np.ones((n, t_eff)),
        tau=tau,
        d_a=p.d_a,
        fold_of_patient=np.full(n, -1),
        patient_index=np.asarray(patients),
    )


def residual_probe_generator(oracle: LinGaussOracle, ds: TrajectoryDataset, center: bool = True):
    """Closure feeding the nuisance-sensitivity probe.

    Returns flattened oracle residuals with every conditional-mean function
    shifted by eps times a sampled constant direction, plus the raw
    treatments inside each window. ``center`` demeans the unperturbed
    residual columns so the probe measures pure curvature.
    """
    p = oracle.params
    tau = p.tau
    rs = oracle_residuals(oracle, ds)
    y0, a0, _ = rs.flat()
    if center:
        y0 = y0 - y0.mean(axis=0, keepdims=True)
        a0 = a0 - a0.mean(axis=0, keepdims=True)
    t_eff = ds.horizon - tau
    a_raw = np.zeros((ds.n * t_eff, tau + 1, p.d_a))
    row = 0
    for i in range(ds.n):
        for t in range(t_eff):
            a_raw[row] = ds.treatments[i, t : t + tau + 1, :]
            row += 1

    def generate(eps: float, directions):
        if eps == 0.0 or directions is None:
            return y0.copy(), a0.copy(), a_raw.copy()
        y_eps = y0 - eps * directions["y"][None, :]
        a_eps = a0 - eps * directions["a"][None, :, :, :]
        return y_eps, a_eps, a_raw.copy()

    return generate
