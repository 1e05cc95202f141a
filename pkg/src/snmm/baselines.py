"""Reference estimators and the theoretical-property harness.

``sequential_g_estimation`` solves the moment equations backwards from the
last step with exact ridge normal equations; ``operator_T_apply`` performs
one synchronous application of the same per-step solve against a frozen
input, whose fixed point coincides with the sequential solution. The
error-propagation verifier bounds how input coefficient perturbations move
the operator output, with the constant estimated from the residual moments.
The history-adjusted plug-in learner regresses the window-end outcome on
the encoded history plus the future treatment block and differences two
plug-in predictions; it shares the recurrent backbone of the main stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import TrajectoryDataset
from .encoders import MLPHead, RecurrentEncoder
from .nuisance import InputStats, ResidualSet, StageConfig, compute_input_stats, encode_history, normalized_batch

__all__ = [
    "LinearBlipSolution",
    "constant_features",
    "window_features",
    "sequential_g_estimation",
    "operator_T_apply",
    "ErrorBoundReport",
    "verify_error_bound",
    "HAPluginModel",
    "train_ha_plugin",
]


# ---------------------------------------------------------------------------
# linear solvers


@dataclass
class LinearBlipSolution:
    """Per-step linear coefficient maps psi_k(h) = features(h)' theta_k.

    ``coefs[k]`` has shape (n_features, d_a); with constant features the
    solution reduces to one coefficient vector per step. Solved strictly
    from k = tau down to 0.
    """

    coefs: list[np.ndarray]
    tau: int
    d_a: int
    ridge: float
    condition_numbers: list[float] = field(default_factory=list)

    def evaluate(self, k: int, features: np.ndarray) -> np.ndarray:
        return features @ self.coefs[k]

    def stacked(self, features: np.ndarray) -> np.ndarray:
        """(S, tau+1, d_a) coefficient predictions for every step."""
        return np.stack([self.evaluate(k, features) for k in range(self.tau + 1)], axis=1)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "d_a": self.d_a,
            "ridge": self.ridge,
            "coefs": [c.tolist() for c in self.coefs],
            "condition_numbers": self.condition_numbers,
        }


def constant_features(n_samples: int) -> np.ndarray:
    return np.ones((n_samples, 1))


def window_features(ds: TrajectoryDataset, patients: np.ndarray, tau: int, window_len: int = 3) -> np.ndarray:
    """Flattened fixed-length history window per (patient, t) sample row.

    Row layout matches the flattened residual rows: t-major within patient
    blocks handled by the caller; here rows are (patient, t) in patient-major
    order. The window covers the ``window_len`` steps ending at t, zero
    padded at the start, of covariates, previous treatments and outcomes.
    """
    t_eff = ds.horizon - tau
    rows = []
    for p in patients:
        x, a, y = ds.covariates[p], ds.treatments[p], ds.outcomes[p]
        for t in range(t_eff):
            feats = [1.0]
            for back in range(window_len):
                s = t - back
                if s >= 0:
                    feats.extend(x[s])
                    feats.append(y[s - 1] if s >= 1 else 0.0)
                    feats.extend(a[s - 1] if s >= 1 else np.zeros(ds.d_a))
                else:
                    feats.extend(np.zeros(ds.d_x + ds.d_a + 1))
            rows.append(feats)
    return np.array(rows)


def _solve_step(y_target: np.ndarray, a_kk: np.ndarray, features: np.ndarray, ridge: float) -> tuple[np.ndarray, float]:
    """Ridge least squares of y on (a_kk kron features); returns (F, d_a) coefs."""
    s, d_a = a_kk.shape
    n_feat = features.shape[1]
    design = (a_kk[:, :, None] * features[:, None, :]).reshape(s, d_a * n_feat)
    gram = design.T @ design / s
    rhs = design.T @ y_target / s
    if ridge > 0.0:
        gram = gram + ridge * np.eye(gram.shape[0])
    cond = float(np.linalg.cond(gram))
    if ridge == 0.0 and (not np.isfinite(cond) or cond > 1e12):
        raise np.linalg.LinAlgError("singular Gram matrix; pass ridge > 0 to regularize")
    beta = np.linalg.solve(gram, rhs)
    return beta.reshape(d_a, n_feat).T, cond


def sequential_g_estimation(rs: ResidualSet, ridge: float = 1e-6, features: np.ndarray | None = None) -> LinearBlipSolution:
    """Backward per-step least squares with already-solved future steps substituted."""
    y_flat, a_flat, _ = rs.flat()
    s = y_flat.shape[0]
    if features is None:
        features = constant_features(s)
    if features.shape[0] != s:
        raise ValueError(f"features rows {features.shape[0]} != samples {s}")
    if s < rs.d_a * features.shape[1]:
        raise ValueError("fewer samples than coefficients to solve")
    coefs: list[np.ndarray | None] = [None] * (rs.tau + 1)
    conds = [0.0] * (rs.tau + 1)
    for k in range(rs.tau, -1, -1):
        target = y_flat[:, k].copy()
        for j in range(k + 1, rs.tau + 1):
            psi_j = features @ coefs[j]
            target -= np.sum(psi_j * a_flat[:, j, k, :], axis=1)
        coefs[k], conds[k] = _solve_step(target, a_flat[:, k, k, :], features, ridge)
    return LinearBlipSolution(coefs=list(coefs), tau=rs.tau, d_a=rs.d_a, ridge=ridge, condition_numbers=conds)


def operator_T_apply(solution_old: LinearBlipSolution, rs: ResidualSet, ridge: float | None = None, features: np.ndarray | None = None) -> LinearBlipSolution:
    """One synchronous solve of every step against the frozen input solution."""
    y_flat, a_flat, _ = rs.flat()
    s = y_flat.shape[0]
    if features is None:
        features = constant_features(s)
    lam = solution_old.ridge if ridge is None else ridge
    coefs = []
    conds = []
    for k in range(rs.tau + 1):
        target = y_flat[:, k].copy()
        for j in range(k + 1, rs.tau + 1):
            psi_j = features @ solution_old.coefs[j]
            target -= np.sum(psi_j * a_flat[:, j, k, :], axis=1)
        c, cond = _solve_step(target, a_flat[:, k, k, :], features, lam)
        coefs.append(c)
        conds.append(cond)
    return LinearBlipSolution(coefs=coefs, tau=rs.tau, d_a=rs.d_a, ridge=lam, condition_numbers=conds)


# ---------------------------------------------------------------------------
# error-propagation bound


@dataclass
class ErrorBoundReport:
    constant: float
    sigma_min_sq: float
    moment_bound_sq: float
    trials: int
    violations: int
    vacuous: bool
    worst_ratio: float

    @property
    def holds(self) -> bool:
        return self.violations == 0 and not self.vacuous


def verify_error_bound(rs: ResidualSet, trials: int = 100, seed: int = 0, ridge: float = 1e-9, overlap_floor: float = 1e-6) -> ErrorBoundReport:
    """Monte-Carlo check of the operator's error-propagation inequality.

    Random constant input perturbations are pushed through one operator
    application in closed form; each output step's squared movement must
    stay below C times the summed squared input movements with
    C = tau * M^2 / sigma_min^4 measured from the residual moments.
    """
    y_flat, a_flat, _ = rs.flat()
    s = y_flat.shape[0]
    tau, d_a = rs.tau, rs.d_a

    covs = [a_flat[:, k, k, :].T @ a_flat[:, k, k, :] / s for k in range(tau + 1)]
    sigma_min_sq = min(float(np.linalg.eigvalsh(c)[0]) for c in covs)
    m_sq = 0.0
    for k in range(tau + 1):
        for j in range(k + 1, tau + 1):
            norms = np.linalg.norm(a_flat[:, k, k, :], axis=1) * np.linalg.norm(a_flat[:, j, k, :], axis=1)
            m_sq = max(m_sq, float(np.mean(norms**2)))
    vacuous = sigma_min_sq < overlap_floor
    constant = tau * m_sq / sigma_min_sq**2 if not vacuous else np.inf

    rng = np.random.default_rng(seed)
    violations = 0
    worst = 0.0
    inv = [np.linalg.inv(c + ridge * np.eye(d_a)) for c in covs]
    for _ in range(trials):
        delta_in = rng.normal(size=(tau + 1, d_a))
        for k in range(tau + 1):
            acc = np.zeros(d_a)
            for j in range(k + 1, tau + 1):
                cross = a_flat[:, k, k, :].T @ a_flat[:, j, k, :] / s
                acc += cross @ delta_in[j]
            delta_out = -inv[k] @ acc
            lhs = float(delta_out @ delta_out)
            rhs_inputs = float(sum(delta_in[j] @ delta_in[j] for j in range(k + 1, tau + 1)))
            if k == tau:
                if lhs != 0.0:
                    violations += 1
                continue
            bound = constant * rhs_inputs
            worst = max(worst, lhs / bound if bound > 0 else 0.0)
            if lhs > bound:
                violations += 1
    return ErrorBoundReport(
        constant=constant,
        sigma_min_sq=sigma_min_sq,
        moment_bound_sq=m_sq,
        trials=trials,
        violations=violations,
        vacuous=vacuous,
        worst_ratio=worst,
    )


# ---------------------------------------------------------------------------
# history-adjusted plug-in learner


class HAPluginModel:
    """Plug-in regression of the window-end outcome on (history, future treatments)."""

    def __init__(self, tau: int, input_width: int, d_a: int, config: StageConfig, stats: InputStats, rng: np.random.Generator):
        self.tau = tau
        self.d_a = d_a
        self.config = config
        self.stats = stats
        self.encoder = RecurrentEncoder(input_width, config.encoder, rng)
        rep = config.encoder.rep_width
        block = (tau + 1) * d_a
        self.head = MLPHead(rep + block, config.encoder.head_hidden, 1, rng)

    def parameters(self) -> list[T.Tensor]:
        return self.encoder.parameters() + self.head.parameters()

    def snapshot(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), snap):
            p.values[:] = v

    def _predict(self, z: T.Tensor, a_block: np.ndarray) -> T.Tensor:
        return self.head(T.concat([z, T.tensor(a_block)], axis=1))

    def _window_loss(self, ds: TrajectoryDataset, idx: np.ndarray, train_rng=None) -> T.Tensor:
        batch = normalized_batch(ds, idx, self.stats)
        reps = self.encoder.encode(batch, train_rng=train_rng)
        t_eff = ds.horizon - self.tau
        lengths = ds.lengths[idx]
        w_mask = (np.arange(t_eff)[:, None] + self.tau < lengths[None, :]).astype(float)
        z_all = T.concat(reps[:t_eff], axis=0)
        a = ds.treatments[idx]
        a_block = np.concatenate([np.stack([a[:, t + j, :] for t in range(t_eff)], axis=0).reshape(t_eff * idx.size, self.d_a) for j in range(self.tau + 1)], axis=1)
        pred = self._predict(z_all, a_block)
        y = ds.outcomes[idx]
        y_target = np.stack([y[:, t + self.tau] for t in range(t_eff)], axis=0).reshape(t_eff * idx.size, 1)
        y_target = (y_target - self.stats.y_mean) / self.stats.y_std
        mask_flat = T.tensor(w_mask.reshape(t_eff * idx.size, 1))
        denom = float(w_mask.sum()) or 1.0
        sq = T.mul(T.square(T.sub(pred, T.tensor(y_target))), mask_flat)
        return T.scale(T.tsum(sq), 1.0 / denom)

    def predict_outcome(self, history: dict, treatments: np.ndarray) -> float:
        """Plug-in E[Y | history, future treatment block] in raw units."""
        z = encode_history(self.encoder, self.stats, history)
        a_block = np.asarray(treatments, dtype=float).reshape(1, -1)
        return float(self._predict(z, a_block).values[0, 0] * self.stats.y_std + self.stats.y_mean)

    def cate(self, history: dict, a_star: np.ndarray, b_star: np.ndarray) -> float:
        return self.predict_outcome(history, a_star) - self.predict_outcome(history, b_star)


def train_ha_plugin(ds: TrajectoryDataset, tau: int, config: StageConfig, seed: int) -> HAPluginModel:
    """Fit on the train split with early stopping on the validation split."""
    train_idx = ds.indices("train")
    val_idx = ds.indices("val")
    if val_idx.size == 0:
        rng_split = np.random.default_rng(seed)
        shuffled = train_idx.copy()
        rng_split.shuffle(shuffled)
        n_val = max(1, int(config.val_fraction * train_idx.size))
        val_idx, train_idx = shuffled[:n_val], shuffled[n_val:]
    rng = np.random.default_rng(seed)
    stats = compute_input_stats(ds, train_idx)
    model = HAPluginModel(tau, ds.d_x + ds.d_a + 1, ds.d_a, config, stats, rng)
    params = model.parameters()
    opt = T.make_optimizer(params, T.OptimConfig(rule=config.optimizer, lr=config.lr, clip_norm=config.clip_norm))
    best_val, best_snap, stale = np.inf, None, 0
    for _ in range(config.epochs):
        order = train_idx.copy()
        rng.shuffle(order)
        for start in range(0, order.size, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            if batch_idx.size < 2:
                continue
            loss = model._window_loss(ds, batch_idx, train_rng=rng)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
        val_loss = model._window_loss(ds, val_idx).item()
        if val_loss < best_val - 1e-9:
            best_val, best_snap, stale = val_loss, model.snapshot(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_snap is not None:
        model.restore(best_snap)
    return model
