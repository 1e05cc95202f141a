"""Command-line entry points: dataset generation, training, evaluation,
sweeps, runtime benchmarks and the inference service.

Config files are plain JSON mirroring the ExperimentConfig fields; the
output root defaults to $SNMM_OUTPUT_ROOT (falling back to ./runs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


def _output_root() -> str:
    return os.environ.get("SNMM_OUTPUT_ROOT", "runs")


def _load_config(path: str | None, overrides: dict):
    from .harness import ExperimentConfig

    raw = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(raw)


def cmd_gen(args) -> int:
    from . import lingauss, tumor, vitals
    from .dataset import save_dataset
    from .harness import save_oracle_sidecar

    if args.dataset == "tumor":
        params = tumor.TumorParams(gamma_conf=args.gamma)
        ds, oracle = tumor.simulate_factual(params, args.n, args.horizon, args.seed)
    elif args.dataset == "vitals":
        from .dataset import assign_splits

        panel = vitals.synth_covariates(args.n, args.horizon, args.d_x, args.seed)
        split = assign_splits(args.n, np.random.default_rng(args.seed + 101))
        std_panel, _ = vitals.standardize_panel(panel, np.flatnonzero(split == "train"))
        ds, oracle = vitals.simulate_observed(std_panel, vitals.VitalsParams(), args.seed, split=split)
    elif args.dataset == "lingauss":
        ds, oracle = lingauss.simulate(lingauss.LinGaussParams(tau=args.tau), args.n, args.horizon, args.seed)
    else:
        raise SystemExit(f"unknown dataset {args.dataset}")

    save_dataset(args.out, ds)
    print(f"wrote {args.out} ({ds.n} patients x {ds.horizon} steps)")
    if args.dataset in ("tumor", "vitals"):
        sidecar = args.out + ".oracle.npz"
        save_oracle_sidecar(sidecar, args.dataset, oracle)
        print(f"wrote {sidecar}")
    return 0


def cmd_train(args) -> int:
    from .blip import save_blip_model, train_blip
    from .dataset import load_dataset
    from .encoders import EncoderConfig
    from .nuisance import StageConfig, compute_residuals, save_residuals, train_nuisance

    ds = load_dataset(args.data)
    cfg = StageConfig(
        encoder=EncoderConfig(hidden=args.hidden, rep_width=args.rep_width, dropout=args.dropout, head_hidden=args.hidden),
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
    )
    print(f"stage 1: {args.folds}-fold nuisance training (tau={args.tau})")
    models, folds = train_nuisance(ds, args.tau, args.folds, cfg, args.seed)
    residuals = compute_residuals(models, folds, ds, args.tau)
    if args.residuals_out:
        save_residuals(args.residuals_out, residuals)
        print(f"wrote {args.residuals_out}")
    print("stage 2: coefficient network training")
    model = train_blip(residuals, ds, cfg, args.seed, double_opt=not args.no_double_opt)
    save_blip_model(args.out, model, extra_meta={"dataset": args.data, "folds": args.folds})
    print(f"wrote {args.out} (final loss {model.loss_curve[-1]:.6f})")
    return 0


def cmd_eval(args) -> int:
    from .blip import load_blip_model, predict_cate
    from .dataset import load_dataset
    from .harness import ExperimentConfig, load_oracle_adapter, sample_eval_windows

    ds = load_dataset(args.data)
    sidecar = args.oracle or args.data + ".oracle.npz"
    adapter = load_oracle_adapter(sidecar, ds.kind)
    model = load_blip_model(args.model)
    cfg = ExperimentConfig(
        dataset=ds.kind,
        tau=model.tau,
        eval_windows_per_patient=args.windows_per_patient,
        eval_max_patients=args.max_patients,
        seeds=[args.seed],
    )
    windows = sample_eval_windows(ds, adapter, cfg, args.seed)
    preds = np.array([predict_cate(model, w.history, w.a_star, w.b_star) for w in windows])
    truth = np.array([w.oracle_cate for w in windows])
    rmse = float(np.sqrt(np.mean((preds - truth) ** 2)))
    scale = float(truth.std())
    print(f"windows: {len(windows)}")
    print(f"rmse: {rmse:.6f}")
    print(f"normalized_rmse: {rmse / scale:.6f}" if scale > 0 else "normalized_rmse: nan")
    return 0


def cmd_sweep(args) -> int:
    from .harness import export_results, run_experiment, sweep_confounding

    cfg = _load_config(args.config, {"output_dir": args.out})
    out_dir = cfg.output_dir or os.path.join(_output_root(), "sweep")
    if args.gammas:
        gammas = [float(g) for g in args.gammas.split(",")]
        reports = sweep_confounding(cfg, gammas)
        for gamma, report in reports.items():
            sub = os.path.join(out_dir, f"gamma_{gamma:g}")
            export_results(report, sub)
            for name, agg in report.aggregates.items():
                print(f"gamma={gamma:g} {name}: {agg['normalized_rmse_mean']:.4f} +/- {agg['normalized_rmse_std']:.4f}")
    else:
        report = run_experiment(cfg)
        export_results(report, out_dir)
        for name, agg in report.aggregates.items():
            print(f"{name}: {agg['normalized_rmse_mean']:.4f} +/- {agg['normalized_rmse_std']:.4f}")
    print(f"results in {out_dir}")
    return 0


def cmd_bench(args) -> int:
    from .harness import runtime_scaling

    cfg = _load_config(args.config, {})
    taus = [int(v) for v in args.taus.split(",")]
    result = runtime_scaling(cfg, taus, repeats=args.repeats)
    out_dir = cfg.output_dir or os.path.join(_output_root(), "bench")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "runtime.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, sort_keys=True, indent=1)
    for row in result["rows"]:
        print(f"{row['estimator']} tau={row['tau']}: {row['median_seconds']:.3f}s")
    for name, ratio in result["ratios"].items():
        print(f"{name}: time(tau_max)/time(tau_min) = {ratio:.2f}")
    print(f"wrote {path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .api import create_app

    app = create_app(model_path=args.model, dataset_path=args.dataset)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snmm", description="treatment-effect estimation over time")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset plus oracle sidecar")
    p.add_argument("--dataset", choices=["tumor", "vitals", "lingauss"], default="tumor")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--horizon", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=4.0, help="tumor confounding strength")
    p.add_argument("--d-x", dest="d_x", type=int, default=8, help="vitals covariate channels")
    p.add_argument("--tau", type=int, default=2, help="lingauss effect horizon")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="two-stage training on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=int, default=2)
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--rep-width", dest="rep_width", type=int, default=16)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=128)
    p.add_argument("--no-double-opt", action="store_true", help="ablation: single forward pass")
    p.add_argument("--residuals-out", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained model against the oracle sidecar")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--oracle", default=None, help="sidecar path; defaults to <data>.oracle.npz")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--windows-per-patient", dest="windows_per_patient", type=int, default=4)
    p.add_argument("--max-patients", dest="max_patients", type=int, default=60)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a config-driven experiment (optionally over confounding levels)")
    p.add_argument("--config", default=None, help="JSON file of ExperimentConfig fields")
    p.add_argument("--gammas", default=None, help="comma-separated confounding strengths (tumor)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="stage-2 runtime scaling over horizons")
    p.add_argument("--config", default=None)
    p.add_argument("--taus", default="2,4,6")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the what-if inference service")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
