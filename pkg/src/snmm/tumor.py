"""Pharmacokinetic tumor-growth simulator with an exact counterfactual oracle.

Outcome dynamics per step combine a logistic growth term driven by a lagged
running mean of past volumes with additive chemo/radio treatment terms:

    Y[j] = Y[j-1] + (rho * log(K / m_j) + eps_j) * m_j
                  + m_j * (alpha_c * c_j + alpha_r * d_j + beta_r * d_j**2)

where ``m_j`` is the running mean of outcomes up to j - lag (falling back to
the initial volume near the boundary). Because the lag exceeds every
supported prediction horizon, ``m_j`` is invariant under interventions inside
a horizon window, so the growth term cancels in paired counterfactuals and
the effect of a treatment change has the closed form implemented by
:func:`true_cate`.

Treatments are binary indicators applied as unit doses; the quadratic radio
term then collapses into a per-treatment constant, keeping the implied blip
coefficients linear in the treatment vector.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .dataset import TrajectoryDataset, assign_splits

__all__ = [
    "TumorParams",
    "TumorOracle",
    "simulate_factual",
    "simulate_counterfactual",
    "true_cate",
    "true_blip_coefficients",
    "save_oracle",
    "load_oracle",
]


@dataclass
class TumorParams:
    rho: float = 0.1
    K: float = 10.0
    alpha_c: float = 0.5
    alpha_r: float = 0.2
    beta_r: float = 0.05
    lag: int = 12
    gamma_conf: float = 4.0
    d_max: float = 10.0
    noise_sigma: float = 0.3
    window: int = 15
    y0_min: float = 1.0
    y0_max: float = 3.0
    # Lower bound applied to the lagged running mean before it enters the
    # growth log and the treatment terms; keeps the dynamics finite when
    # noisy outcomes dip toward zero. The floored value is what the oracle
    # stores, so counterfactual algebra is unaffected.
    mean_floor: float = 0.25
    # Observation stops once the outcome crosses this level (patient death);
    # None keeps every trajectory at full length. Values are never clipped,
    # so counterfactual replay inside the observed range stays exact.
    death_threshold: float | None = 13.0

    def __post_init__(self):
        if self.K <= 0 or self.d_max <= 0:
            raise ValueError("K and d_max must be positive")
        if self.lag < 1:
            raise ValueError("lag must be >= 1")
        if self.gamma_conf < 0 or self.noise_sigma < 0:
            raise ValueError("gamma_conf and noise_sigma must be >= 0")


@dataclass
class TumorOracle:
    """Everything needed to replay counterfactual trajectories exactly."""

    params: TumorParams
    y0: np.ndarray  # (n,)
    noise: np.ndarray  # (n, T)
    lagged_means: np.ndarray  # (n, T), m_j per step
    assign_probs: np.ndarray  # (n, T)
    outcomes: np.ndarray  # (n, T) factual, kept for replay checks
    lengths: np.ndarray


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _step(prev: float, m: float, eps: float, c: float, d: float, p: TumorParams) -> float:
    growth = (p.rho * np.log(p.K / m) + eps) * m
    effect = m * (p.alpha_c * c + p.alpha_r * d + p.beta_r * d * d)
    return prev + growth + effect


def simulate_factual(params: TumorParams, n: int, horizon: int, seed: int, split_fractions=(0.70, 0.15, 0.15)) -> tuple[TrajectoryDataset, TumorOracle]:
    """Simulate n confounded trajectories of the given length.

    Treatment assignment at step j is Bernoulli with logit
    ``gamma_conf / d_max * (window mean of recent outcomes - d_max / 2)``,
    both treatment channels sharing the probability but drawn independently.
    """
    if n < 1 or horizon < 1:
        raise ValueError("n and horizon must be >= 1")
    rng = np.random.default_rng(seed)
    y0 = rng.uniform(params.y0_min, params.y0_max, size=n)
    noise = rng.normal(0.0, params.noise_sigma, size=(n, horizon))
    assign_draws = rng.random(size=(n, horizon, 2))

    outcomes = np.zeros((n, horizon))
    treatments = np.zeros((n, horizon, 2))
    lagged_means = np.zeros((n, horizon))
    probs = np.zeros((n, horizon))
    lengths = np.full(n, horizon)

    for i in range(n):
        prev = y0[i]
        for j in range(horizon):
            if j == 0:
                recent = y0[i]
            else:
                recent = outcomes[i, max(0, j - params.window) : j].mean()
            prob = float(_sigmoid(params.gamma_conf / params.d_max * (recent - params.d_max / 2.0)))
            probs[i, j] = prob
            a = (assign_draws[i, j] < prob).astype(float)
            treatments[i, j] = a

            m = y0[i] if j - params.lag < 1 else outcomes[i, : j - params.lag].mean()
            m = max(m, params.mean_floor)
            lagged_means[i, j] = m
            prev = _step(prev, m, noise[i, j], a[0], a[1], params)
            outcomes[i, j] = prev
            if params.death_threshold is not None and prev > params.death_threshold:
                lengths[i] = j + 1
                break
    valid = np.arange(horizon)[None, :] < lengths[:, None]
    treatments *= valid[:, :, None]
    covariates = np.repeat((y0 / params.K)[:, None, None], horizon, axis=1)
    covariates *= valid[:, :, None]
    ds = TrajectoryDataset(
        outcomes=outcomes,
        treatments=treatments,
        covariates=covariates,
        lengths=lengths,
        split=assign_splits(n, rng, split_fractions),
        seed=seed,
        params=asdict(params),
        kind="tumor",
    )
    oracle = TumorOracle(params=params, y0=y0, noise=noise, lagged_means=lagged_means, assign_probs=probs, outcomes=outcomes, lengths=lengths)
    return ds, oracle


def _check_window(oracle: TumorOracle, i: int, t: int, tau: int) -> None:
    if tau < 0 or t < 0:
        raise ValueError("window indices must be non-negative")
    if t + tau > int(oracle.lengths[i]) - 1:
        raise ValueError(f"window [{t}, {t + tau}] overruns trajectory of length {int(oracle.lengths[i])}")
    if oracle.params.lag <= tau:
        raise ValueError(f"lag {oracle.params.lag} must exceed horizon {tau} for the oracle to be exact")


def simulate_counterfactual(oracle: TumorOracle, i: int, t: int, a_star: np.ndarray) -> float:
    """Outcome at t + tau when treatments in [t, t + tau] are forced to a_star.

    Replays the stored noise and lagged means, so forcing the observed
    treatments reproduces the factual outcome bit for bit.
    """
    a_star = np.asarray(a_star, dtype=float)
    tau = a_star.shape[0] - 1
    _check_window(oracle, i, t, tau)
    p = oracle.params
    prev = oracle.y0[i] if t == 0 else oracle.outcomes[i, t - 1]
    for r in range(tau + 1):
        j = t + r
        prev = _step(prev, oracle.lagged_means[i, j], oracle.noise[i, j], a_star[r, 0], a_star[r, 1], p)
    return float(prev)


def true_cate(oracle: TumorOracle, i: int, t: int, a_star: np.ndarray, b_star: np.ndarray) -> float:
    """Closed-form difference between the two counterfactual outcomes.

    The growth terms are shared by both arms and cancel; only re-weighted
    treatment terms remain.
    """
    a_star = np.asarray(a_star, dtype=float)
    b_star = np.asarray(b_star, dtype=float)
    if a_star.shape != b_star.shape:
        raise ValueError("treatment matrices must share a shape")
    tau = a_star.shape[0] - 1
    _check_window(oracle, i, t, tau)
    p = oracle.params
    total = 0.0
    for r in range(tau + 1):
        m = oracle.lagged_means[i, t + r]
        dc = a_star[r, 0] - b_star[r, 0]
        dd = a_star[r, 1] - b_star[r, 1]
        dd2 = a_star[r, 1] ** 2 - b_star[r, 1] ** 2
        total += m * (p.alpha_c * dc + p.alpha_r * dd + p.beta_r * dd2)
    return float(total)


def save_oracle(path: str, oracle: TumorOracle) -> None:
    np.savez_compressed(
        path,
        kind="tumor",
        params=json.dumps(asdict(oracle.params), sort_keys=True),
        y0=oracle.y0,
        noise=oracle.noise,
        lagged_means=oracle.lagged_means,
        assign_probs=oracle.assign_probs,
        outcomes=oracle.outcomes,
        lengths=oracle.lengths,
    )


def load_oracle(path: str) -> TumorOracle:
    with np.load(path) as data:
        if str(data["kind"]) != "tumor":
            raise ValueError(f"{path} is not a tumor oracle sidecar")
        return TumorOracle(
            params=TumorParams(**json.loads(str(data["params"]))),
            y0=data["y0"],
            noise=data["noise"],
            lagged_means=data["lagged_means"],
            assign_probs=data["assign_probs"],
            outcomes=data["outcomes"],
            lengths=data["lengths"],
        )


def true_blip_coefficients(oracle: TumorOracle, i: int, t: int, tau: int) -> np.ndarray:
    """Ground-truth per-step effect coefficients, shape (tau + 1, 2).

    With unit binary doses the radio channel's quadratic term folds into
    its linear coefficient.
    """
    _check_window(oracle, i, t, tau)
    p = oracle.params
    coefs = np.zeros((tau + 1, 2))
    for r in range(tau + 1):
        m = oracle.lagged_means[i, t + r]
        coefs[r, 0] = m * p.alpha_c
        coefs[r, 1] = m * (p.alpha_r + p.beta_r)
    return coefs
