"""Stage 2: simultaneous learning of all per-step effect coefficients.

Training minimizes the residual moment loss for every step at once. Each
update makes two forward passes through the current parameters; the second
pass is detached and its outputs stand in for the future-step coefficients
inside each step's loss, so gradients flow only through the first pass's
own-step term. The converged heads map an encoded history to one
coefficient vector per future step, from which treatment-sequence effects
are linear read-outs: a single encoder pass prices every candidate
sequence, and componentwise extremization yields the best one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataset import TrajectoryDataset
from .encoders import MLPHead, RecurrentEncoder, load_checkpoint, save_checkpoint
from .nuisance import InputStats, ResidualSet, StageConfig, compute_input_stats, encode_history, normalized_batch

__all__ = [
    "BlipModel",
    "BlipLossReport",
    "blip_loss",
    "train_blip",
    "train_blip_sequential",
    "predict_cate",
    "optimal_sequence",
    "orthogonality_probe",
    "ProbeResult",
    "save_blip_model",
    "load_blip_model",
]


class BlipModel:
    """Encoder plus tau+1 coefficient heads, one per step in the window.

    Training happens against outcome residuals divided by ``y_scale`` (their
    train-split standard deviation); predictions multiply back, so the
    reported coefficients are always in raw outcome units.
    """

    def __init__(self, tau: int, input_width: int, d_a: int, config: StageConfig, stats: InputStats, rng: np.random.Generator, y_scale: float = 1.0):
        self.tau = tau
        self.d_a = d_a
        self.input_width = input_width
        self.config = config
        self.stats = stats
        self.y_scale = y_scale
        self.encoder = RecurrentEncoder(input_width, config.encoder, rng)
        width, hidden = config.encoder.rep_width, config.encoder.head_hidden
        self.heads = [MLPHead(width, hidden, d_a, rng) for _ in range(tau + 1)]
        self.loss_curve: list[float] = []
        self.seed: int | None = None

    def parameters(self) -> list[T.Tensor]:
        params = self.encoder.parameters()
        for head in self.heads:
            params.extend(head.parameters())
        return params

    def named_parameters(self) -> dict[str, T.Tensor]:
        named = self.encoder.named_parameters()
        for k, head in enumerate(self.heads):
            named.update(head.named_parameters(f"coef_head{k}"))
        return named

    def predict_coefficients(self, history: dict) -> np.ndarray:
        """One encoder pass; returns the (tau+1, d_a) coefficient matrix."""
        z = encode_history(self.encoder, self.stats, history)
        return self.y_scale * np.concatenate([head(z).values for head in self.heads], axis=0)


@dataclass
class BlipLossReport:
    per_step: list[float]
    total: float


def _assert_detached(tensors) -> None:
    for t in tensors:
        if t is not None and t.on_graph:
            raise ValueError("pseudo-target coefficients must be detached from the graph")


def blip_loss(rs: ResidualSet, psi1_k: T.Tensor, psi2_all: list[T.Tensor | None], t: int, k: int) -> T.Tensor:
    """Moment loss for window start t and step k over all valid patients.

    ``psi1_k`` carries gradient; ``psi2_all[j]`` are detached pseudo-targets
    for the future steps (entries with j <= k are ignored). Both are aligned
    with the residual set's patient axis.
    """
    _assert_detached(psi2_all[k + 1 :])
    rows = np.flatnonzero(rs.mask[:, t])
    if rows.size == 0:
        raise ValueError(f"no valid samples at window start {t}")
    y_k = T.tensor(rs.y_res[rows, t, k].reshape(-1, 1))
    term = y_k
    for j in range(k + 1, rs.tau + 1):
        a_jk = T.tensor(rs.a_res[rows, t, j, k, :])
        psi_j = psi2_all[j] if rows.size == psi2_all[j].shape[0] else T.tensor(psi2_all[j].values[rows])
        term = T.sub(term, _rowdot(psi_j, a_jk))
    a_kk = T.tensor(rs.a_res[rows, t, k, k, :])
    psi1_sel = psi1_k if rows.size == psi1_k.shape[0] else _select_rows(psi1_k, rows)
    term = T.sub(term, _rowdot(psi1_sel, a_kk))
    return T.mean(T.square(term))


def _select_rows(x: T.Tensor, rows: np.ndarray) -> T.Tensor:
    """Gather of non-contiguous rows (loops over contiguous runs)."""
    pieces = []
    start = 0
    while start < rows.size:
        stop = start
        while stop + 1 < rows.size and rows[stop + 1] == rows[stop] + 1:
            stop += 1
        pieces.append(T.slice_rows(x, int(rows[start]), int(rows[stop]) + 1))
        start = stop + 1
    return pieces[0] if len(pieces) == 1 else T.concat(pieces, axis=0)


def _rowdot(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    return T.reshape(T.tsum(T.mul(a, b), axis=1), (-1, 1))


def _vectorized_losses(rs: ResidualSet, psi1: list[T.Tensor], psi2: list[T.Tensor | None], rows: np.ndarray, window_starts: np.ndarray, mask_flat: np.ndarray) -> list[T.Tensor]:
    """Per-step masked losses over all (patient, t) rows at once.

    ``psi1``/``psi2`` rows are aligned with the flattened (t-major) window
    ordering used by the caller.
    """
    losses = []
    denom = float(mask_flat.sum()) or 1.0
    mask_t = T.tensor(mask_flat.reshape(-1, 1))
    for k in range(rs.tau + 1):
        y_k = T.tensor(rs.y_res[rows, window_starts, k].reshape(-1, 1))
        term = y_k
        for j in range(k + 1, rs.tau + 1):
            a_jk = T.tensor(rs.a_res[rows, window_starts, j, k, :])
            term = T.sub(term, _rowdot(psi2[j], a_jk))
        a_kk = T.tensor(rs.a_res[rows, window_starts, k, k, :])
        term = T.sub(term, _rowdot(psi1[k], a_kk))
        losses.append(T.scale(T.tsum(T.mul(T.square(term), mask_t)), 1.0 / denom))
    return losses


def _flatten_windows(rs: ResidualSet, local_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(rows, window_starts, mask) for the t-major flattening of a patient batch."""
    t_eff = rs.n_windows
    rows = np.repeat(np.arange(t_eff), local_idx.size), np.tile(local_idx, t_eff)
    window_starts = rows[0]
    patients = rows[1]
    mask = rs.mask[patients, window_starts]
    return patients, window_starts, mask


def train_blip(
    rs: ResidualSet,
    ds: TrajectoryDataset,
    config: StageConfig,
    seed: int,
    double_opt: bool = True,
    report_hook=None,
) -> BlipModel:
    """Fit the coefficient network on frozen residuals.

    ``double_opt=False`` is the ablation: a single pass whose outputs feed
    both the own-step and the future-step terms, leaving the future terms
    on the gradient path.
    """
    tau = rs.tau
    if ds.horizon - tau != rs.n_windows:
        raise ValueError("residual set and dataset disagree on the horizon")
    patients = rs.patient_index
    rng = np.random.default_rng(seed)
    stats = compute_input_stats(ds, patients)
    y_std = float(rs.y_res[rs.mask.astype(bool)].std())
    y_scale = y_std if y_std > 0 else 1.0
    rs = ResidualSet(
        y_res=rs.y_res / y_scale,
        a_res=rs.a_res,
        mask=rs.mask,
        tau=rs.tau,
        d_a=rs.d_a,
        fold_of_patient=rs.fold_of_patient,
        patient_index=rs.patient_index,
    )
    model = BlipModel(tau, ds.d_x + ds.d_a + 1, rs.d_a, config, stats, rng, y_scale=y_scale)
    model.seed = seed
    params = model.parameters()
    opt = T.make_optimizer(params, T.OptimConfig(rule=config.optimizer, lr=config.lr, clip_norm=config.clip_norm))

    local_all = np.arange(patients.size)
    holdout = np.array([], dtype=int)
    if config.val_fraction > 0 and patients.size >= 20:
        shuffled = local_all.copy()
        rng.shuffle(shuffled)
        n_val = max(2, int(config.val_fraction * patients.size))
        holdout, local_all = shuffled[:n_val], shuffled[n_val:]
    best_val, best_snap, stale = np.inf, None, 0

    for epoch in range(config.epochs):
        order = local_all.copy()
        rng.shuffle(order)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, order.size, config.batch_size):
            local_idx = order[start : start + config.batch_size]
            if local_idx.size < 2:
                continue
            batch = normalized_batch(ds, patients[local_idx], stats)
            t_eff = rs.n_windows

            reps1 = model.encoder.encode(batch, train_rng=rng)
            z1 = T.concat(reps1[:t_eff], axis=0)
            psi1 = [head(z1) for head in model.heads]
            if double_opt:
                reps2 = model.encoder.encode(batch, train_rng=rng)
                z2 = T.concat(reps2[:t_eff], axis=0)
                psi2 = [T.detach(head(z2)) for head in model.heads]
            else:
                psi2 = psi1

            p_rows, starts, mask_flat = _flatten_windows(rs, local_idx)
            losses = _vectorized_losses(rs, psi1, psi2, p_rows, starts, mask_flat)
            total = losses[0]
            for lk in losses[1:]:
                total = total + lk
            total = T.scale(total, 1.0 / (tau + 1))
            opt.zero_grad()
            T.backward(total)
            opt.step()
            epoch_loss += total.item()
            n_batches += 1
        model.loss_curve.append(epoch_loss / max(n_batches, 1))
        if holdout.size and epoch + 1 >= config.min_epochs:
            val_loss = _holdout_loss(model, rs, ds, holdout)
            if val_loss < best_val - 1e-12:
                best_val, stale = val_loss, 0
                best_snap = [p.values.copy() for p in params]
            else:
                stale += 1
                if stale >= config.patience:
                    break
        if report_hook is not None:
            report_hook(epoch, model)
    if best_snap is not None:
        for p, v in zip(params, best_snap):
            p.values[:] = v
    return model


def _holdout_loss(model: BlipModel, rs: ResidualSet, ds: TrajectoryDataset, local_idx: np.ndarray) -> float:
    batch = normalized_batch(ds, rs.patient_index[local_idx], model.stats)
    reps = model.encoder.encode(batch)
    t_eff = rs.n_windows
    z = T.concat(reps[:t_eff], axis=0)
    psi = [T.detach(head(z)) for head in model.heads]
    p_rows, starts, mask_flat = _flatten_windows(rs, local_idx)
    losses = _vectorized_losses(rs, psi, psi, p_rows, starts, mask_flat)
    return float(sum(l.item() for l in losses))


def evaluate_blip_loss(model: BlipModel, rs: ResidualSet, ds: TrajectoryDataset) -> BlipLossReport:
    """Inference-mode loss decomposition over all residual samples (raw units)."""
    patients = rs.patient_index
    batch = normalized_batch(ds, patients, model.stats)
    reps = model.encoder.encode(batch)
    t_eff = rs.n_windows
    z = T.concat(reps[:t_eff], axis=0)
    psi = [T.detach(T.scale(head(z), model.y_scale)) for head in model.heads]
    p_rows, starts, mask_flat = _flatten_windows(rs, np.arange(patients.size))
    losses = _vectorized_losses(rs, psi, psi, p_rows, starts, mask_flat)
    per_step = [l.item() for l in losses]
    return BlipLossReport(per_step=per_step, total=float(sum(per_step)))


def train_blip_sequential(rs: ResidualSet, ds: TrajectoryDataset, config: StageConfig, seed: int) -> "SequentialBlipModel":
    """Backward per-step training: a separate network per step, each fitted
    against the already-trained later steps. Cost scales with tau + 1."""
    tau = rs.tau
    patients = rs.patient_index
    stats = compute_input_stats(ds, patients)
    y_std = float(rs.y_res[rs.mask.astype(bool)].std())
    y_scale = y_std if y_std > 0 else 1.0
    rs = ResidualSet(
        y_res=rs.y_res / y_scale,
        a_res=rs.a_res,
        mask=rs.mask,
        tau=rs.tau,
        d_a=rs.d_a,
        fold_of_patient=rs.fold_of_patient,
        patient_index=rs.patient_index,
    )
    stages: list[BlipModel] = []
    future_terms = np.zeros((rs.n, rs.n_windows, tau + 1))  # psi_j . a_res[j, k] summed over solved j, per k

    for k in range(tau, -1, -1):
        rng = np.random.default_rng(seed * 100 + k)
        sub = BlipModel(0, ds.d_x + ds.d_a + 1, rs.d_a, config, stats, rng, y_scale=y_scale)
        opt = T.make_optimizer(sub.parameters(), T.OptimConfig(rule=config.optimizer, lr=config.lr, clip_norm=config.clip_norm))
        local_all = np.arange(patients.size)
        for _ in range(config.epochs):
            order = local_all.copy()
            rng.shuffle(order)
            for start in range(0, order.size, config.batch_size):
                local_idx = order[start : start + config.batch_size]
                if local_idx.size < 2:
                    continue
                batch = normalized_batch(ds, patients[local_idx], stats)
                reps = sub.encoder.encode(batch, train_rng=rng)
                t_eff = rs.n_windows
                z = T.concat(reps[:t_eff], axis=0)
                psi_k = sub.heads[0](z)
                p_rows, starts, mask_flat = _flatten_windows(rs, local_idx)
                y_k = rs.y_res[p_rows, starts, k] - future_terms[p_rows, starts, k]
                a_kk = T.tensor(rs.a_res[p_rows, starts, k, k, :])
                term = T.sub(T.tensor(y_k.reshape(-1, 1)), _rowdot(psi_k, a_kk))
                denom = float(mask_flat.sum()) or 1.0
                loss = T.scale(T.tsum(T.mul(T.square(term), T.tensor(mask_flat.reshape(-1, 1)))), 1.0 / denom)
                opt.zero_grad()
                T.backward(loss)
                opt.step()
        stages.insert(0, sub)
        # Freeze this step's predictions into the future terms of earlier steps.
        batch = normalized_batch(ds, patients, stats)
        reps = sub.encoder.encode(batch)
        t_eff = rs.n_windows
        z = T.concat(reps[:t_eff], axis=0)
        psi_vals = sub.heads[0](z).values.reshape(t_eff, patients.size, rs.d_a).transpose(1, 0, 2)
        for kk in range(k):
            future_terms[:, :, kk] += np.sum(psi_vals * rs.a_res[:, :, k, kk, :], axis=2)
    return SequentialBlipModel(stages=stages, tau=tau, d_a=rs.d_a, stats=stats)


@dataclass
class SequentialBlipModel:
    stages: list[BlipModel]
    tau: int
    d_a: int
    stats: InputStats

    def predict_coefficients(self, history: dict) -> np.ndarray:
        rows = []
        for sub in self.stages:
            z = encode_history(sub.encoder, self.stats, history)
            rows.append(sub.y_scale * sub.heads[0](z).values)
        return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# inference


def predict_cate(model, history: dict, a_star: np.ndarray, b_star: np.ndarray) -> float:
    """Single encoder pass: sum_k coef_k . (a*_k - b*_k)."""
    a_star = np.asarray(a_star, dtype=float)
    b_star = np.asarray(b_star, dtype=float)
    tau, d_a = model.tau, model.d_a
    if a_star.shape != (tau + 1, d_a) or b_star.shape != (tau + 1, d_a):
        raise ValueError(f"sequences must have shape {(tau + 1, d_a)}")
    coefs = model.predict_coefficients(history)
    return float(np.sum(coefs * (a_star - b_star)))


def optimal_sequence(model, history: dict, baseline: np.ndarray, direction: str = "maximize") -> tuple[np.ndarray, float]:
    """Componentwise extremization of the linear effect form.

    A slot is switched on only when its coefficient strictly improves the
    objective; ties stay at no-treatment. Returns (sequence, effect vs
    baseline).
    """
    if direction not in ("maximize", "minimize"):
        raise ValueError("direction must be 'maximize' or 'minimize'")
    baseline = np.asarray(baseline, dtype=float)
    coefs = model.predict_coefficients(history)
    if direction == "maximize":
        seq = (coefs > 0.0).astype(float)
    else:
        seq = (coefs < 0.0).astype(float)
    effect = float(np.sum(coefs * (seq - baseline)))
    return seq, effect


# ---------------------------------------------------------------------------
# orthogonality probe


@dataclass
class ProbeResult:
    epsilons: list[float]
    moment_grad_deltas: list[float]
    plugin_grad_deltas: list[float]
    moment_slope: float
    plugin_slope: float


def orthogonality_probe(coefs: np.ndarray, generator, epsilons=None, seed: int = 0) -> ProbeResult:
    """Numeric decay-rate probe of nuisance sensitivity at convergence.

    ``generator(eps, directions)`` must return (y_res (S, tau+1),
    a_res (S, tau+1, tau+1, d_a), a_raw (S, tau+1, d_a)) with the nuisance
    functions shifted by eps times the sampled unit-scale directions. The
    moment loss's gradient displacement is fitted against eps on a log-log
    scale (orthogonal: slope 2); a plug-in regression on raw treatments is
    the first-order-sensitive control (slope 1).
    """
    if epsilons is None:
        epsilons = [10.0 ** (-3 + 0.5 * i) for i in range(5)]
    rng = np.random.default_rng(seed)
    coefs = np.asarray(coefs, dtype=float)
    tau = coefs.shape[0] - 1

    y0, a0, raw = generator(0.0, None)
    d_a = a0.shape[-1]
    directions = {
        "y": rng.normal(size=tau + 1),
        "a": rng.normal(size=(tau + 1, tau + 1, d_a)),
    }
    directions["y"] /= np.abs(directions["y"]).max()
    directions["a"] /= np.abs(directions["a"]).max()

    def moment_grad(y_res, a_res):
        grads = []
        for k in range(tau + 1):
            term = y_res[:, k].copy()
            for j in range(k + 1, tau + 1):
                term -= a_res[:, j, k, :] @ coefs[j]
            term -= a_res[:, k, k, :] @ coefs[k]
            grads.append(-2.0 * np.mean(term[:, None] * a_res[:, k, k, :], axis=0))
        return np.concatenate(grads)

    def plugin_grad(y_res, a_raw, theta):
        grads = []
        for k in range(tau + 1):
            term = y_res[:, k] - a_raw[:, k, :] @ theta[k]
            grads.append(-2.0 * np.mean(term[:, None] * a_raw[:, k, :], axis=0))
        return np.concatenate(grads)

    # Control coefficients: plain least squares of the outcome residual on raw treatments.
    theta = []
    for k in range(tau + 1):
        gram = raw[:, k, :].T @ raw[:, k, :] / raw.shape[0]
        rhs = raw[:, k, :].T @ y0[:, k] / raw.shape[0]
        theta.append(np.linalg.solve(gram + 1e-9 * np.eye(d_a), rhs))

    g_moment_0 = moment_grad(y0, a0)
    g_plugin_0 = plugin_grad(y0, raw, theta)
    moment_deltas, plugin_deltas = [], []
    for eps in epsilons:
        y_eps, a_eps, raw_eps = generator(float(eps), directions)
        moment_deltas.append(float(np.linalg.norm(moment_grad(y_eps, a_eps) - g_moment_0)))
        plugin_deltas.append(float(np.linalg.norm(plugin_grad(y_eps, raw_eps, theta) - g_plugin_0)))

    log_eps = np.log(np.asarray(epsilons))
    moment_slope = float(np.polyfit(log_eps, np.log(np.maximum(moment_deltas, 1e-300)), 1)[0])
    plugin_slope = float(np.polyfit(log_eps, np.log(np.maximum(plugin_deltas, 1e-300)), 1)[0])
    return ProbeResult(
        epsilons=list(map(float, epsilons)),
        moment_grad_deltas=moment_deltas,
        plugin_grad_deltas=plugin_deltas,
        moment_slope=moment_slope,
        plugin_slope=plugin_slope,
    )


# ---------------------------------------------------------------------------
# persistence


def save_blip_model(path: str, model: BlipModel, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "blip",
        "tau": model.tau,
        "d_a": model.d_a,
        "input_width": model.input_width,
        "encoder": {
            "hidden": model.config.encoder.hidden,
            "rep_width": model.config.encoder.rep_width,
            "layers": model.config.encoder.layers,
            "dropout": model.config.encoder.dropout,
            "head_hidden": model.config.encoder.head_hidden,
        },
        "stats": model.stats.to_dict(),
        "y_scale": model.y_scale,
        "seed": model.seed,
        "loss_curve": model.loss_curve,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, model.named_parameters(), meta)


def load_blip_model(path: str) -> BlipModel:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "blip":
        raise ValueError(f"checkpoint at {path} is not a coefficient model")
    from .encoders import EncoderConfig

    enc = meta["encoder"]
    config = StageConfig(encoder=EncoderConfig(hidden=enc["hidden"], rep_width=enc["rep_width"], layers=enc["layers"], dropout=enc["dropout"], head_hidden=enc["head_hidden"]))
    stats = InputStats.from_dict(meta["stats"])
    model = BlipModel(meta["tau"], meta["input_width"], meta["d_a"], config, stats, np.random.default_rng(0), y_scale=meta.get("y_scale", 1.0))
    model.seed = meta.get("seed")
    model.loss_curve = list(meta.get("loss_curve", []))
    named = model.named_parameters()
    for name, arr in arrays.items():
        named[name].values[:] = arr
    return model
