"""Stage 1: cross-fitted nuisance regressions and residual extraction.

One recurrent encoder feeds two families of prediction heads: for every
step offset k an outcome head regresses the window-end outcome on the
representation at t + k, and for every pair k <= j a treatment head
regresses the treatment at t + j on the same representation. Patients are
partitioned into folds; each fold's residuals come from the model trained
on the complementary folds, so no residual ever sees its own sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import TrajectoryDataset
from .encoders import EncoderConfig, HistoryBatch, MLPHead, RecurrentEncoder

__all__ = [
    "StageConfig",
    "InputStats",
    "ResidualSet",
    "NuisanceModel",
    "train_nuisance",
    "compute_residuals",
    "corrupt_residuals",
    "save_residuals",
    "load_residuals",
    "head_count",
    "encode_history",
]


@dataclass
class StageConfig:
    """Training configuration shared by the network stages."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lr: float = 5e-3
    epochs: int = 30
    batch_size: int = 128
    clip_norm: float = 1.0
    optimizer: str = "adam"
    val_fraction: float = 0.1
    patience: int = 5
    # Early stopping is ignored before this many epochs: the simultaneous
    # coefficient training needs its backward pseudo-target buildup to
    # finish before the validation loss is a useful stopping signal.
    min_epochs: int = 0


def head_count(tau: int) -> int:
    return (tau + 1) + (tau + 1) * (tau + 2) // 2


# ---------------------------------------------------------------------------
# input/target normalization


@dataclass
class InputStats:
    mean: np.ndarray
    std: np.ndarray
    y_mean: float
    y_std: float

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "y_mean": self.y_mean, "y_std": self.y_std}

    @classmethod
    def from_dict(cls, d: dict) -> "InputStats":
        return cls(np.array(d["mean"]), np.array(d["std"]), d["y_mean"], d["y_std"])


def compute_input_stats(ds: TrajectoryDataset, idx: np.ndarray) -> InputStats:
    batch = HistoryBatch.from_arrays(ds.covariates[idx], ds.treatments[idx], ds.outcomes[idx], ds.lengths[idx])
    rows = batch.inputs[batch.mask.astype(bool)]
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    for c in range(rows.shape[1]):
        if np.all(np.isin(rows[:, c], (0.0, 1.0))) or std[c] == 0.0:
            mean[c], std[c] = 0.0, 1.0
    ys = np.concatenate([ds.outcomes[i, : ds.lengths[i]] for i in idx])
    y_std = ys.std()
    return InputStats(mean=mean, std=std, y_mean=float(ys.mean()), y_std=float(y_std if y_std > 0 else 1.0))


def normalized_batch(ds: TrajectoryDataset, idx: np.ndarray, stats: InputStats) -> HistoryBatch:
    batch = HistoryBatch.from_arrays(ds.covariates[idx], ds.treatments[idx], ds.outcomes[idx], ds.lengths[idx])
    batch.inputs[:] = (batch.inputs - stats.mean) / stats.std
    batch.inputs *= batch.mask[:, :, None]
    return batch


def detect_binary_components(ds: TrajectoryDataset) -> np.ndarray:
    flags = np.zeros(ds.d_a, dtype=bool)
    for c in range(ds.d_a):
        flags[c] = bool(np.all(np.isin(ds.treatments[:, :, c], (0.0, 1.0))))
    return flags


def encode_history(encoder: RecurrentEncoder, stats: InputStats, history: dict) -> T.Tensor:
    """Encode one raw history dict {covariates (t+1, d_x), treatments, outcomes}
    and return the final-step representation."""
    x = np.asarray(history["covariates"], dtype=float)
    a = np.asarray(history["treatments"], dtype=float)
    y = np.asarray(history["outcomes"], dtype=float)
    steps = x.shape[0]
    batch = HistoryBatch.from_arrays(x[None], a[None], y[None], np.array([steps]))
    batch.inputs[:] = (batch.inputs - stats.mean) / stats.std
    reps = encoder.encode(batch)
    return reps[steps - 1]


# ---------------------------------------------------------------------------
# residual container


@dataclass
class ResidualSet:
    """Out-of-fold residuals indexed by (patient, window start t, j, k).

    ``y_res[i, t, k]`` is the outcome residual for the window starting at t
    with representation offset k; ``a_res[i, t, j, k, :]`` the treatment
    residual of the treatment at t + j against the offset-k conditional
    mean (defined for k <= j). ``mask`` flags valid window starts and
    ``fold_of_patient`` records provenance (-1 denotes oracle residuals).
    """

    y_res: np.ndarray
    a_res: np.ndarray
    mask: np.ndarray
    tau: int
    d_a: int
    fold_of_patient: np.ndarray
    patient_index: np.ndarray

    @property
    def n(self) -> int:
        return self.y_res.shape[0]

    @property
    def n_windows(self) -> int:
        return self.y_res.shape[1]

    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Valid rows flattened to (S, ...) arrays: y (S, tau+1), a (S, tau+1, tau+1, d_a)."""
        keep = self.mask.astype(bool)
        return self.y_res[keep], self.a_res[keep], keep

    def validate_provenance(self, fold_assignment: dict[int, int]) -> None:
        """Assert no residual was produced by a model trained on its fold."""
        for local, patient in enumerate(self.patient_index):
            expected = fold_assignment.get(int(patient))
            if expected is None:
                continue
            if int(self.fold_of_patient[local]) != expected:
                raise AssertionError(f"patient {patient}: residuals from fold {self.fold_of_patient[local]}, expected fold {expected}")


def save_residuals(path: str, rs: ResidualSet) -> None:
    np.savez_compressed(
        path,
        y_res=rs.y_res,
        a_res=rs.a_res,
        mask=rs.mask,
        tau=rs.tau,
        d_a=rs.d_a,
        fold_of_patient=rs.fold_of_patient,
        patient_index=rs.patient_index,
    )


def load_residuals(path: str) -> ResidualSet:
    with np.load(path) as data:
        return ResidualSet(
            y_res=data["y_res"],
            a_res=data["a_res"],
            mask=data["mask"],
            tau=int(data["tau"]),
            d_a=int(data["d_a"]),
            fold_of_patient=data["fold_of_patient"],
            patient_index=data["patient_index"],
        )


# ---------------------------------------------------------------------------
# model


class NuisanceModel:
    def __init__(self, tau: int, input_width: int, d_a: int, binary: np.ndarray, config: StageConfig, stats: InputStats, rng: np.random.Generator, fold: int = 0):
        self.tau = tau
        self.d_a = d_a
        self.binary = binary
        self.config = config
        self.stats = stats
        self.fold = fold
        self.encoder = RecurrentEncoder(input_width, config.encoder, rng)
        width = config.encoder.rep_width
        hidden = config.encoder.head_hidden
        self.outcome_heads = [MLPHead(width, hidden, 1, rng) for _ in range(tau + 1)]
        self.treatment_heads = {(j, k): MLPHead(width, hidden, d_a, rng) for k in range(tau + 1) for j in range(k, tau + 1)}

    def parameters(self) -> list[T.Tensor]:
        params = self.encoder.parameters()
        for head in self.outcome_heads:
            params.extend(head.parameters())
        for head in self.treatment_heads.values():
            params.extend(head.parameters())
        return params

    def snapshot(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), snap):
            p.values[:] = v

    def predict_treatment_mean(self, z: T.Tensor, j: int, k: int) -> np.ndarray:
        """Conditional-mean prediction in raw treatment units."""
        logits = self.treatment_heads[(j, k)].logits(z).values
        out = logits.copy()
        for c in range(self.d_a):
            if self.binary[c]:
                out[:, c] = 1.0 / (1.0 + np.exp(-np.clip(logits[:, c], -500, 500)))
        return out

    def predict_outcome_mean(self, z: T.Tensor, k: int) -> np.ndarray:
        return self.outcome_heads[k](z).values[:, 0] * self.stats.y_std + self.stats.y_mean


@dataclass
class _WindowTensors:
    """Per-offset gathered representations and aligned targets for one batch."""

    z: list  # z[k]: Tensor of gathered reps, rows ordered t-major
    y_target: np.ndarray  # (T_eff, B) standardized outcome at window end
    a_target: np.ndarray  # (T_eff_full...) raw treatments per j: (tau+1, T_eff, B, d_a)
    w_mask: np.ndarray  # (T_eff, B)


def _gather_windows(reps: list[T.Tensor], ds: TrajectoryDataset, idx: np.ndarray, tau: int, stats: InputStats) -> _WindowTensors:
    horizon = ds.horizon
    t_eff = horizon - tau
    if t_eff < 1:
        raise ValueError(f"horizon {horizon} too short for tau={tau}")
    lengths = ds.lengths[idx]
    w_mask = (np.arange(t_eff)[:, None] + tau < lengths[None, :]).astype(float)
    z = [T.concat(reps[k : k + t_eff], axis=0) for k in range(tau + 1)]
    y = ds.outcomes[idx]
    y_target = np.stack([y[:, t + tau] for t in range(t_eff)], axis=0)
    y_target = (y_target - stats.y_mean) / stats.y_std
    a = ds.treatments[idx]
    a_target = np.stack([np.stack([a[:, t + j, :] for t in range(t_eff)], axis=0) for j in range(tau + 1)], axis=0)
    return _WindowTensors(z=z, y_target=y_target, a_target=a_target, w_mask=w_mask)


def _nuisance_loss(model: NuisanceModel, win: _WindowTensors, tau: int, d_a: int) -> tuple[T.Tensor, dict]:
    """Weighted stage-1 loss and its per-head decomposition.

    Total = L_p + (1/d_a) sum_i L_{q,i} with L_p averaging the outcome heads
    with weight 1/(tau+1) and each treatment component averaging its heads
    with weight 2/((tau+1)(tau+2)).
    """
    t_eff, b = win.w_mask.shape
    mask_flat = T.tensor(win.w_mask.reshape(t_eff * b, 1))
    denom = float(win.w_mask.sum()) or 1.0
    per_head = {"p": {}, "q": {}}

    y_flat = T.tensor(win.y_target.reshape(t_eff * b, 1))
    loss_p = None
    for k in range(tau + 1):
        pred = model.outcome_heads[k](win.z[k])
        sq = T.mul(T.square(T.sub(pred, y_flat)), mask_flat)
        head_loss = T.scale(T.tsum(sq), 1.0 / denom)
        per_head["p"][k] = head_loss
        loss_p = head_loss if loss_p is None else loss_p + head_loss
    loss_p = T.scale(loss_p, 1.0 / (tau + 1))

    q_weight = 2.0 / ((tau + 1) * (tau + 2))
    loss_q_total = None
    for comp in range(d_a):
        comp_loss = None
        for k in range(tau + 1):
            for j in range(k, tau + 1):
                logits = model.treatment_heads[(j, k)].logits(win.z[k])
                target = T.tensor(win.a_target[j][:, :, comp].reshape(t_eff * b, 1))
                logit_c = T.slice_cols(logits, comp, comp + 1)
                if model.binary[comp]:
                    err = T.logistic_loss(logit_c, target)
                else:
                    err = T.square(T.sub(logit_c, target))
                head_loss = T.scale(T.tsum(T.mul(err, mask_flat)), 1.0 / denom)
                per_head["q"][(j, k, comp)] = head_loss
                comp_loss = head_loss if comp_loss is None else comp_loss + head_loss
        comp_loss = T.scale(comp_loss, q_weight)
        per_head[f"q_comp{comp}"] = comp_loss
        loss_q_total = comp_loss if loss_q_total is None else loss_q_total + comp_loss

    total = loss_p + T.scale(loss_q_total, 1.0 / d_a)
    per_head["loss_p"] = loss_p
    return total, per_head


def _fold_assignment(train_idx: np.ndarray, n_folds: int, rng: np.random.Generator) -> dict[int, int]:
    order = train_idx.copy()
    rng.shuffle(order)
    return {int(p): i % n_folds for i, p in enumerate(order)}


def train_nuisance(ds: TrajectoryDataset, tau: int, n_folds: int, config: StageConfig, seed: int) -> tuple[list[NuisanceModel], dict[int, int]]:
    """Cross-fitted stage-1 training over the train split.

    Returns one model per fold plus the patient-to-fold assignment. Each
    model trains on the other folds, with an internal 10% holdout for early
    stopping on the stage loss.
    """
    if n_folds < 2:
        raise ValueError("need at least 2 folds for cross-fitting")
    train_idx = ds.indices("train")
    if train_idx.size == 0:
        raise ValueError("train split is empty")
    rng = np.random.default_rng(seed)
    folds = _fold_assignment(train_idx, n_folds, rng)
    binary = detect_binary_components(ds)
    stats = compute_input_stats(ds, train_idx)
    input_width = ds.d_x + ds.d_a + 1

    models = []
    for w in range(n_folds):
        fit_pool = np.array([p for p in train_idx if folds[int(p)] != w])
        if fit_pool.size < 2:
            raise ValueError(f"fold {w}: too few patients to train on")
        model_rng = np.random.default_rng(seed * 1000 + w)
        model = NuisanceModel(tau, input_width, ds.d_a, binary, config, stats, model_rng, fold=w)
        n_val = max(1, int(config.val_fraction * fit_pool.size))
        shuffled = fit_pool.copy()
        model_rng.shuffle(shuffled)
        val_idx, fit_idx = shuffled[:n_val], shuffled[n_val:]
        if fit_idx.size < config.batch_size // 8:
            raise ValueError(f"fold {w}: fit pool smaller than a usable batch")
        _fit_nuisance(model, ds, fit_idx, val_idx, config, model_rng)
        models.append(model)
    return models, folds


def _fit_nuisance(model: NuisanceModel, ds: TrajectoryDataset, fit_idx: np.ndarray, val_idx: np.ndarray, config: StageConfig, rng: np.random.Generator) -> None:
    params = model.parameters()
    opt = T.make_optimizer(params, T.OptimConfig(rule=config.optimizer, lr=config.lr, clip_norm=config.clip_norm))
    best_val, best_snap, stale = np.inf, None, 0
    for _ in range(config.epochs):
        order = fit_idx.copy()
        rng.shuffle(order)
        for start in range(0, order.size, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            if batch_idx.size < 2:
                continue
            batch = normalized_batch(ds, batch_idx, model.stats)
            reps = model.encoder.encode(batch, train_rng=rng)
            win = _gather_windows(reps, ds, batch_idx, model.tau, model.stats)
            loss, _ = _nuisance_loss(model, win, model.tau, model.d_a)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
        val_loss = nuisance_validation_loss(model, ds, val_idx)
        if val_loss < best_val - 1e-9:
            best_val, best_snap, stale = val_loss, model.snapshot(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_snap is not None:
        model.restore(best_snap)


def nuisance_validation_loss(model: NuisanceModel, ds: TrajectoryDataset, idx: np.ndarray) -> float:
    batch = normalized_batch(ds, idx, model.stats)
    reps = model.encoder.encode(batch)
    win = _gather_windows(reps, ds, idx, model.tau, model.stats)
    loss, _ = _nuisance_loss(model, win, model.tau, model.d_a)
    return loss.item()


def compute_residuals(models: list[NuisanceModel], folds: dict[int, int], ds: TrajectoryDataset, tau: int, patients: np.ndarray | None = None) -> ResidualSet:
    """Out-of-fold residuals for the given patients (default: train split)."""
    if patients is None:
        patients = ds.indices("train")
    by_fold: dict[int, list[int]] = {}
    for p in patients:
        w = folds.get(int(p))
        if w is None:
            raise ValueError(f"patient {p} has no fold assignment")
        by_fold.setdefault(w, []).append(int(p))

    t_eff = ds.horizon - tau
    n = len(patients)
    pos = {int(p): i for i, p in enumerate(patients)}
    y_res = np.zeros((n, t_eff, tau + 1))
    a_res = np.zeros((n, t_eff, tau + 1, tau + 1, ds.d_a))
    mask = np.zeros((n, t_eff))
    fold_of = np.zeros(n, dtype=int)

    for w, plist in sorted(by_fold.items()):
        model = models[w]
        idx = np.array(plist)
        batch = normalized_batch(ds, idx, model.stats)
        reps = model.encoder.encode(batch)
        lengths = ds.lengths[idx]
        w_mask = np.arange(t_eff)[:, None] + tau < lengths[None, :]
        for k in range(tau + 1):
            z_k = T.concat(reps[k : k + t_eff], axis=0)
            p_hat = model.predict_outcome_mean(z_k, k).reshape(t_eff, idx.size)
            for local, p in enumerate(plist):
                row = pos[p]
                y_res[row, :, k] = ds.outcomes[p, tau:] - p_hat[:, local]
            for j in range(k, tau + 1):
                q_hat = model.predict_treatment_mean(z_k, j, k).reshape(t_eff, idx.size, ds.d_a)
                for local, p in enumerate(plist):
                    row = pos[p]
                    a_res[row, :, j, k, :] = ds.treatments[p, j : j + t_eff, :] - q_hat[:, local, :]
        for local, p in enumerate(plist):
            row = pos[p]
            mask[row] = w_mask[:, local].astype(float)
            fold_of[row] = w

    rs = ResidualSet(y_res=y_res, a_res=a_res, mask=mask, tau=tau, d_a=ds.d_a, fold_of_patient=fold_of, patient_index=np.array([int(p) for p in patients]))
    rs.y_res *= rs.mask[:, :, None]
    rs.a_res *= rs.mask[:, :, None, None, None]
    return rs


def corrupt_residuals(rs: ResidualSet, scale: float, seed: int) -> ResidualSet:
    """Shift residual columns by fixed offsets: a deliberately wrong nuisance."""
    rng = np.random.default_rng(seed)
    y_shift = rng.normal(scale=scale, size=rs.tau + 1)
    a_shift = rng.normal(scale=scale, size=(rs.tau + 1, rs.tau + 1, rs.d_a))
    out = ResidualSet(
        y_res=rs.y_res + y_shift,
        a_res=rs.a_res + a_shift,
        mask=rs.mask,
        tau=rs.tau,
        d_a=rs.d_a,
        fold_of_patient=rs.fold_of_patient,
        patient_index=rs.patient_index,
    )
    out.y_res *= out.mask[:, :, None]
    out.a_res *= out.mask[:, :, None, None, None]
    return out
