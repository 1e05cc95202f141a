"""Covariate-driven semi-synthetic outcome generator with a counterfactual oracle.

Untreated outcomes mix a shared cubic-spline trend, a per-patient Gaussian
process realised through random Fourier features with the Matern-3/2
spectral density, and a fixed random-feature map of the covariates.
Binary treatments are assigned from a logistic model on recent outcomes
and covariates, and add heterogeneous effects that decay with the inverse
square root of elapsed time inside a finite window. Because the untreated
path never depends on treatments, counterfactuals only re-accumulate the
effect term, which gives closed-form treatment-effect differences.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .dataset import TrajectoryDataset, assign_splits

__all__ = [
    "VitalsParams",
    "CovariatePanel",
    "VitalsOracle",
    "load_covariates",
    "synth_covariates",
    "standardize_panel",
    "simulate_untreated",
    "simulate_observed",
    "counterfactual_outcome",
    "true_cate",
    "true_blip_coefficients",
    "matern_kernel",
    "save_oracle",
    "load_oracle",
]


@dataclass
class VitalsParams:
    alpha_spline: float = 1.0
    alpha_gp: float = 1.0
    alpha_feat: float = 1.0
    gamma_a: tuple[float, float] = (2.5, 2.0)
    gamma_x: tuple[float, float] = (1.0, 0.25)
    bias: tuple[float, float] = (-3.5, -1.75)
    beta: tuple[float, float] = (0.5, 0.25)
    omega: np.ndarray | None = None  # (2, d_x), at most 3 nonzeros per row; drawn when None
    effect_window: int = 5
    assign_window: int = 5
    matern_lengthscale: float = 2.0
    noise_sigma: float = 0.005
    rff_dim: int = 64

    def __post_init__(self):
        if self.effect_window < 1 or self.assign_window < 1:
            raise ValueError("windows must be >= 1")
        if self.omega is not None:
            omega = np.asarray(self.omega, dtype=float)
            if np.count_nonzero(omega, axis=1).max() > 3:
                raise ValueError("omega rows may have at most 3 nonzero entries")
            self.omega = omega


@dataclass
class CovariatePanel:
    values: np.ndarray  # (n, T, d_x)
    lengths: np.ndarray  # (n,)
    source: str = "synthetic"
    columns: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def horizon(self) -> int:
        return self.values.shape[1]

    @property
    def d_x(self) -> int:
        return self.values.shape[2]


class CovariateParseError(ValueError):
    pass


def load_covariates(path: str) -> CovariatePanel:
    """Read a covariate CSV: header ``patient_id,t,<channels...>``.

    Missing cells are forward- then backward-filled per patient and channel;
    a channel that is empty for a whole patient is an error.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CovariateParseError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "patient_id" or header[1] != "t":
            raise CovariateParseError(f"{path}: header must start with patient_id,t")
        channels = header[2:]
        rows: dict[str, dict[int, list[float | None]]] = {}
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CovariateParseError(f"{path}:{row_no}: expected {len(header)} cells, got {len(row)}")
            pid = row[0]
            try:
                t = int(row[1])
            except ValueError:
                raise CovariateParseError(f"{path}:{row_no}: non-integer time index {row[1]!r}") from None
            cells: list[float | None] = []
            for name, cell in zip(channels, row[2:]):
                if cell.strip() == "":
                    cells.append(None)
                    continue
                try:
                    cells.append(float(cell))
                except ValueError:
                    raise CovariateParseError(f"{path}:{row_no}: non-numeric value {cell!r} in column {name}") from None
            rows.setdefault(pid, {})[t] = cells

    if not rows:
        raise CovariateParseError(f"{path}: no data rows")
    patients = sorted(rows)
    lengths = []
    for pid in patients:
        steps = sorted(rows[pid])
        if steps != list(range(steps[0], steps[0] + len(steps))):
            raise CovariateParseError(f"{path}: patient {pid} has non-contiguous time steps")
        lengths.append(len(steps))
    horizon = max(lengths)
    values = np.zeros((len(patients), horizon, len(channels)))
    for p_idx, pid in enumerate(patients):
        steps = sorted(rows[pid])
        for c_idx, name in enumerate(channels):
            col = [rows[pid][t][c_idx] for t in steps]
            filled = _fill_column(col)
            if filled is None:
                raise CovariateParseError(f"{path}: patient {pid} column {name} has no observed values")
            values[p_idx, : len(filled), c_idx] = filled
    return CovariatePanel(values=values, lengths=np.array(lengths), source="csv", columns=channels)


def _fill_column(col: list[float | None]) -> list[float] | None:
    if all(v is None for v in col):
        return None
    out = list(col)
    last = None
    for i, v in enumerate(out):
        if v is None:
            out[i] = last
        else:
            last = v
    nxt = None
    for i in range(len(out) - 1, -1, -1):
        if out[i] is None:
            out[i] = nxt
        else:
            nxt = out[i]
    return out  # type: ignore[return-value]


def synth_covariates(n: int, horizon: int, d_x: int, seed: int) -> CovariatePanel:
    """Stationary AR(1) channels with random cross-correlated innovations."""
    if min(n, horizon, d_x) < 1:
        raise ValueError("n, horizon and d_x must be >= 1")
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0.2, 0.9, size=d_x)
    mix = rng.normal(size=(d_x, d_x)) / np.sqrt(d_x)
    chol = np.linalg.cholesky(mix @ mix.T + 0.1 * np.eye(d_x))
    values = np.zeros((n, horizon, d_x))
    state = (chol @ rng.normal(size=(d_x, n))).T / np.sqrt(1.0 - phi**2)
    for t in range(horizon):
        innov = (chol @ rng.normal(size=(d_x, n))).T
        state = phi * state + np.sqrt(1.0 - phi**2) * innov
        values[:, t, :] = state
    return CovariatePanel(values=values, lengths=np.full(n, horizon), source="synthetic", columns=[f"ch{i}" for i in range(d_x)])


def standardize_panel(panel: CovariatePanel, train_idx: np.ndarray) -> tuple[CovariatePanel, dict]:
    """Standardize continuous channels to train-split mean 0 and variance 1.

    Channels whose observed values are all in {0, 1} are treated as one-hot
    indicators and left untouched.
    """
    values = panel.values.copy()
    stats = {"mean": np.zeros(panel.d_x), "std": np.ones(panel.d_x)}
    train_rows = []
    for i in train_idx:
        train_rows.append(panel.values[i, : panel.lengths[i]])
    train_block = np.concatenate(train_rows, axis=0)
    for c in range(panel.d_x):
        col = train_block[:, c]
        if np.all(np.isin(col, (0.0, 1.0))):
            continue
        mu, sd = col.mean(), col.std()
        if sd == 0.0:
            sd = 1.0
        stats["mean"][c] = mu
        stats["std"][c] = sd
        values[:, :, c] = (values[:, :, c] - mu) / sd
    return CovariatePanel(values=values, lengths=panel.lengths, source=panel.source, columns=panel.columns), stats


# ---------------------------------------------------------------------------
# random-feature machinery


class RandomFeatureMap:
    """sqrt(2/R) * w . cos(Omega x + phase): a draw from an RBF-kernel GP."""

    def __init__(self, d_x: int, rff_dim: int, rng: np.random.Generator, lengthscale: float | None = None):
        scale = lengthscale if lengthscale is not None else np.sqrt(d_x)
        self.freqs = rng.normal(size=(rff_dim, d_x)) / scale
        self.phases = rng.uniform(0.0, 2.0 * np.pi, size=rff_dim)
        self.weights = rng.normal(size=rff_dim)
        self.rff_dim = rff_dim

    def __call__(self, x: np.ndarray) -> np.ndarray:
        # x: (..., d_x) -> (...)
        proj = x @ self.freqs.T + self.phases
        return np.sqrt(2.0 / self.rff_dim) * (np.cos(proj) @ self.weights)


def _matern_gp_sample(grid: np.ndarray, lengthscale: float, rff_dim: int, rng: np.random.Generator) -> np.ndarray:
    """One GP path on ``grid`` with the Matern-3/2 kernel via spectral sampling.

    Frequencies follow a Student-t with 2*nu = 3 degrees of freedom scaled by
    the inverse length-scale, which is the Matern-3/2 spectral density.
    """
    freqs = rng.standard_t(3.0, size=rff_dim) / lengthscale
    phases = rng.uniform(0.0, 2.0 * np.pi, size=rff_dim)
    weights = rng.normal(size=rff_dim)
    proj = np.outer(grid, freqs) + phases
    return np.sqrt(2.0 / rff_dim) * (np.cos(proj) @ weights)


def matern_kernel(r: np.ndarray, lengthscale: float) -> np.ndarray:
    """Analytic Matern-3/2 correlation at distance r."""
    z = np.sqrt(3.0) * np.abs(r) / lengthscale
    return (1.0 + z) * np.exp(-z)


def _spline_trend(horizon: int, rng: np.random.Generator, interior_knots: int = 8) -> np.ndarray:
    degree = 3
    interior = np.linspace(1.0, float(horizon), interior_knots + 2)[1:-1]
    knots = np.r_[[1.0] * (degree + 1), interior, [float(horizon)] * (degree + 1)]
    coefs = rng.normal(size=interior_knots + degree + 1)
    spline = BSpline(knots, coefs, degree, extrapolate=True)
    return spline(np.arange(1, horizon + 1, dtype=float))


# ---------------------------------------------------------------------------
# generation


@dataclass
class VitalsOracle:
    """Stored draws and untreated paths for exact counterfactual evaluation."""

    params: VitalsParams
    untreated: np.ndarray  # (n, T) Z, noise included
    effects: np.ndarray  # (n, T) E as realised
    kappa: np.ndarray  # (n, T, 2) heterogeneity multipliers
    assign_probs: np.ndarray  # (n, T, 2)
    omega: np.ndarray  # (2, d_x)
    covariates: np.ndarray  # (n, T, d_x), post-standardization
    treatments: np.ndarray  # (n, T, 2) observed
    lengths: np.ndarray


def simulate_untreated(panel: CovariatePanel, params: VitalsParams, seed) -> np.ndarray:
    """Z[i, t] = a_s * spline(t) + a_g * gp_i(t) + a_f * f(X[i, t]) + noise."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    spline_rng, gp_rng, feat_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    n, horizon = panel.n, panel.horizon
    trend = _spline_trend(horizon, spline_rng)
    feat_map = RandomFeatureMap(panel.d_x, params.rff_dim, feat_rng)
    grid = np.arange(1, horizon + 1, dtype=float)
    z = np.zeros((n, horizon))
    for i in range(n):
        gp = _matern_gp_sample(grid, params.matern_lengthscale, params.rff_dim, gp_rng)
        z[i] = params.alpha_spline * trend + params.alpha_gp * gp + params.alpha_feat * feat_map(panel.values[i])
    z += noise_rng.normal(0.0, params.noise_sigma, size=(n, horizon))
    return z


def _effect_at(t: int, treatments: np.ndarray, kappa: np.ndarray, beta: tuple[float, float], window: int) -> float:
    total = 0.0
    for s in range(max(0, t - window), t + 1):
        decay = np.sqrt(t - s + 1.0)
        for comp in range(2):
            total += beta[comp] * treatments[s, comp] * kappa[s, comp] / decay
    return total


def simulate_observed(panel: CovariatePanel, params: VitalsParams, seed: int, split_fractions=(0.70, 0.15, 0.15), split: np.ndarray | None = None) -> tuple[TrajectoryDataset, VitalsOracle]:
    """Sequential generation: treatments react to past outcomes, outcomes add
    the treatment effect on top of the untreated path."""
    ss = np.random.SeedSequence(seed)
    z_seed, omega_seed, fx_seed, assign_seed, split_seed = ss.spawn(5)
    z = simulate_untreated(panel, params, seed=z_seed)
    n, horizon, d_x = panel.n, panel.horizon, panel.d_x

    omega_rng = np.random.default_rng(omega_seed)
    if params.omega is not None:
        omega = np.asarray(params.omega, dtype=float)
    else:
        omega = np.zeros((2, d_x))
        for comp in range(2):
            support = omega_rng.choice(d_x, size=min(3, d_x), replace=False)
            omega[comp, support] = omega_rng.normal(size=len(support))
    kappa = np.tanh(panel.values @ omega.T) + 1.0  # (n, T, 2)

    fx_rng = np.random.default_rng(fx_seed)
    fx_maps = [RandomFeatureMap(d_x, params.rff_dim, fx_rng) for _ in range(2)]
    fx_vals = np.stack([fx_maps[c](panel.values) for c in range(2)], axis=-1)  # (n, T, 2)

    assign_rng = np.random.default_rng(assign_seed)
    draws = assign_rng.random(size=(n, horizon, 2))

    treatments = np.zeros((n, horizon, 2))
    outcomes = np.zeros((n, horizon))
    effects = np.zeros((n, horizon))
    probs = np.zeros((n, horizon, 2))
    gamma_a, gamma_x, bias = params.gamma_a, params.gamma_x, params.bias
    for i in range(n):
        for t in range(int(panel.lengths[i])):
            recent = outcomes[i, max(0, t - params.assign_window) : t]
            m_prev = float(recent.mean()) if recent.size else 0.0
            for comp in range(2):
                logit = gamma_a[comp] * m_prev + gamma_x[comp] * fx_vals[i, t, comp] + bias[comp]
                p = 1.0 / (1.0 + np.exp(-logit)) if logit >= 0 else np.exp(logit) / (1.0 + np.exp(logit))
                probs[i, t, comp] = p
                treatments[i, t, comp] = float(draws[i, t, comp] < p)
            effects[i, t] = _effect_at(t, treatments[i], kappa[i], params.beta, params.effect_window)
            outcomes[i, t] = z[i, t] + effects[i, t]

    if split is None:
        split = assign_splits(n, np.random.default_rng(split_seed), split_fractions)
    ds = TrajectoryDataset(
        outcomes=outcomes,
        treatments=treatments,
        covariates=panel.values.copy(),
        lengths=panel.lengths.copy(),
        split=np.asarray(split, dtype=object),
        seed=seed,
        params={"kind": "vitals", "beta": list(params.beta), "effect_window": params.effect_window},
        kind="vitals",
    )
    oracle = VitalsOracle(
        params=params,
        untreated=z,
        effects=effects,
        kappa=kappa,
        assign_probs=probs,
        omega=omega,
        covariates=panel.values.copy(),
        treatments=treatments.copy(),
        lengths=panel.lengths.copy(),
    )
    return ds, oracle


def replay_outcomes(oracle: VitalsOracle, treatments: np.ndarray) -> np.ndarray:
    """Rebuild outcomes from the stored untreated paths under given treatments."""
    n, horizon = oracle.untreated.shape
    out = np.zeros((n, horizon))
    for i in range(n):
        for t in range(int(oracle.lengths[i])):
            out[i, t] = oracle.untreated[i, t] + _effect_at(t, treatments[i], oracle.kappa[i], oracle.params.beta, oracle.params.effect_window)
    return out


def save_oracle(path: str, oracle: VitalsOracle) -> None:
    p = oracle.params
    meta = {
        "alpha_spline": p.alpha_spline,
        "alpha_gp": p.alpha_gp,
        "alpha_feat": p.alpha_feat,
        "gamma_a": list(p.gamma_a),
        "gamma_x": list(p.gamma_x),
        "bias": list(p.bias),
        "beta": list(p.beta),
        "effect_window": p.effect_window,
        "assign_window": p.assign_window,
        "matern_lengthscale": p.matern_lengthscale,
        "noise_sigma": p.noise_sigma,
        "rff_dim": p.rff_dim,
    }
    np.savez_compressed(
        path,
        kind="vitals",
        params=json.dumps(meta, sort_keys=True),
        untreated=oracle.untreated,
        effects=oracle.effects,
        kappa=oracle.kappa,
        assign_probs=oracle.assign_probs,
        omega=oracle.omega,
        covariates=oracle.covariates,
        treatments=oracle.treatments,
        lengths=oracle.lengths,
    )


def load_oracle(path: str) -> VitalsOracle:
    with np.load(path) as data:
        if str(data["kind"]) != "vitals":
            raise ValueError(f"{path} is not a vitals oracle sidecar")
        meta = json.loads(str(data["params"]))
        meta["gamma_a"] = tuple(meta["gamma_a"])
        meta["gamma_x"] = tuple(meta["gamma_x"])
        meta["bias"] = tuple(meta["bias"])
        meta["beta"] = tuple(meta["beta"])
        return VitalsOracle(
            params=VitalsParams(**meta),
            untreated=data["untreated"],
            effects=data["effects"],
            kappa=data["kappa"],
            assign_probs=data["assign_probs"],
            omega=data["omega"],
            covariates=data["covariates"],
            treatments=data["treatments"],
            lengths=data["lengths"],
        )


def _check_window(oracle: VitalsOracle, i: int, t: int, tau: int) -> None:
    if t < 0 or tau < 0:
        raise ValueError("window indices must be non-negative")
    if t + tau > int(oracle.lengths[i]) - 1:
        raise ValueError(f"window [{t}, {t + tau}] overruns trajectory of length {int(oracle.lengths[i])}")


def counterfactual_outcome(oracle: VitalsOracle, i: int, t: int, a_star: np.ndarray) -> float:
    """Outcome at t + tau with treatments in [t, t + tau] forced to a_star."""
    a_star = np.asarray(a_star, dtype=float)
    tau = a_star.shape[0] - 1
    _check_window(oracle, i, t, tau)
    merged = oracle.treatments[i].copy()
    merged[t : t + tau + 1] = a_star
    eff = _effect_at(t + tau, merged, oracle.kappa[i], oracle.params.beta, oracle.params.effect_window)
    return float(oracle.untreated[i, t + tau] + eff)


def true_cate(oracle: VitalsOracle, i: int, t: int, a_star: np.ndarray, b_star: np.ndarray) -> float:
    """Closed-form paired difference: the untreated path drops out."""
    a_star = np.asarray(a_star, dtype=float)
    b_star = np.asarray(b_star, dtype=float)
    if a_star.shape != b_star.shape:
        raise ValueError("treatment matrices must share a shape")
    tau = a_star.shape[0] - 1
    _check_window(oracle, i, t, tau)
    p = oracle.params
    total = 0.0
    horizon_end = t + tau
    for s in range(max(t, horizon_end - p.effect_window), horizon_end + 1):
        decay = np.sqrt(horizon_end - s + 1.0)
        for comp in range(2):
            delta = a_star[s - t, comp] - b_star[s - t, comp]
            total += p.beta[comp] * delta * oracle.kappa[i, s, comp] / decay
    return float(total)


def true_blip_coefficients(oracle: VitalsOracle, i: int, t: int, tau: int) -> np.ndarray:
    """Realised per-step effect coefficients at evaluation time t + tau."""
    _check_window(oracle, i, t, tau)
    p = oracle.params
    coefs = np.zeros((tau + 1, 2))
    for k in range(tau + 1):
        if tau - k > p.effect_window:
            continue
        decay = np.sqrt(tau - k + 1.0)
        for comp in range(2):
            coefs[k, comp] = p.beta[comp] * oracle.kappa[i, t + k, comp] / decay
    return coefs
