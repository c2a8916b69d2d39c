"""Command-line pipeline: data generation, training, episodes, campaigns.

Every subcommand reads one YAML config (defaults are the bundled linear
benchmark) plus a master seed; flags override file values. Exit codes:
0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evaluation as ev
from . import forecaster as fc
from . import plant as pl
from . import training as tr
from .config import ConfigError, load_config, seed_stream


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _derived_seed(master: int, name: str, index: int) -> int:
    return int(seed_stream(master, name, index).integers(2**31 - 1))


def _load_cfg(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
    return cfg


def _forecaster_config(cfg) -> fc.ForecasterConfig:
    f = cfg.forecaster
    n_targets = len(cfg.plant.b)
    return fc.ForecasterConfig(
        window_w=f.window, horizon_N=f.horizon, n_targets=n_targets,
        n_covariates=1, quantile_levels=tuple(f.quantile_levels),
        encoder_layers=f.encoder_layers, decoder_layers=f.decoder_layers,
        hidden_size=f.hidden_size, decoder_hidden=f.decoder_hidden,
        decoder_output_dim=f.decoder_output_dim, dropout=f.dropout,
        layer_norm=f.layer_norm)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out if args.out else "dataset.csv")
    excitation_rng = seed_stream(cfg.master_seed, "data", 0)
    noise_rng = seed_stream(cfg.master_seed, "data", 1)
    u = pl.generate_excitation(cfg.data.n_samples,
                               (cfg.data.u_low, cfg.data.u_high),
                               excitation_rng)
    plant = ev.build_plant(cfg.plant, noise_rng)
    states, _ = pl.rollout(plant, u, noiseless=args.noiseless)
    tr.write_dataset_csv(out, states, u.reshape(-1, 1))
    print(f"wrote {cfg.data.n_samples} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out if args.out else "model.qmpc")
    targets, covariates = tr.read_dataset_csv(args.data)
    f = cfg.forecaster
    dataset = tr.Dataset.from_series(
        targets, covariates, f.window, f.horizon,
        seed_stream(cfg.master_seed, "train", 0))
    model = fc.Forecaster.build(_forecaster_config(cfg),
                                seed=_derived_seed(cfg.master_seed, "train", 1))
    t = cfg.training
    train_cfg = tr.TrainConfig(
        learning_rate=t.learning_rate, weight_decay=t.weight_decay,
        lr_step_size=t.lr_step_size, lr_decay=t.lr_decay,
        epochs=args.epochs if args.epochs is not None else t.epochs,
        batch_size=t.batch_size, shuffle=t.shuffle,
        seed=_derived_seed(cfg.master_seed, "train", 2))
    result = tr.train(model, dataset, train_cfg)
    fc.save(model, out)
    loss_path = out.with_name(out.stem + "_loss.csv")
    tr.write_loss_curves(loss_path, result)
    test_metrics = tr.metrics(model, dataset, dataset.test_idx)
    levels = model.config.quantile_levels
    cov = tr.coverage(model, dataset, dataset.test_idx,
                      lo=levels[0], hi=levels[-1])
    summary = {
        "model": str(out), "loss_curves": str(loss_path),
        "epochs": train_cfg.epochs, "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val,
        "test_mape": test_metrics["mape"].tolist(),
        "test_rrmse": test_metrics["rrmse"].tolist(),
        "test_coverage": cov,
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def _selected_kinds(args, cfg):
    if args.controller is not None:
        return [args.controller]
    return list(cfg.campaign.controllers)


def _load_model_if_needed(kinds, model_path):
    if not any(k in ("nominal", "robust") for k in kinds):
        return None
    return fc.load(model_path)


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(args.out if args.out else "episodes")
    out_dir.mkdir(parents=True, exist_ok=True)
    kinds = _selected_kinds(args, cfg)
    model = _load_model_if_needed(kinds, args.model)
    length = cfg.campaign.episode_length
    reference = cfg.campaign.reference.build(length)
    for kind in kinds:
        # identical disturbance realization across controllers
        plant = ev.build_plant(cfg.plant, seed_stream(cfg.master_seed, "plant", 0))
        controller = ev.build_controller(kind, model, cfg)
        plans = []

        def sink(k, res, _plans=plans):
            if res.forecast is None:
                return
            _plans.append({
                "step": k, "v": res.v_opt.tolist(),
                "median": res.forecast.median.tolist(),
                "lower": res.forecast.lower.tolist(),
                "upper": res.forecast.upper.tolist()})

        trace = ev.run_episode(
            controller, plant, reference, length, kind=kind, seed=0,
            plan_sink=sink if args.plan_dump else None)
        ev.write_episode_csv(out_dir / f"episode_{kind}.csv", trace)
        ev.write_solve_log_csv(out_dir / f"solve_log_{kind}.csv", trace)
        if args.plan_dump:
            with open(out_dir / f"plans_{kind}.json", "w") as fh:
                json.dump(plans, fh)
        r2 = ev.tracking_r2(trace.states, trace.reference,
                            cfg.mpc.tracked_dims[0])
        print(f"{kind}: episode of {length} steps, seed stream plant/0, "
              f"r2={r2:.4f}, fallbacks={int(trace.fallback_used.sum())}")
    return 0


def cmd_campaign(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(args.out if args.out else "campaign")
    out_dir.mkdir(parents=True, exist_ok=True)
    kinds = _selected_kinds(args, cfg)
    model = _load_model_if_needed(kinds, args.model)
    n_rep = args.replicates if args.replicates is not None \
        else cfg.campaign.replicates
    workers = args.workers if args.workers is not None else cfg.campaign.workers
    for kind in kinds:
        report, errors = ev.run_campaign(kind, model, cfg, n_replicates=n_rep,
                                         workers=workers)
        report.save(out_dir / f"report_{kind}.json")
        ev.write_aggregates_csv(out_dir / f"aggregates_{kind}.csv", report)
        print(f"{kind}: failure_rate={report.failure_rate:.4f} "
              f"replicates={report.n_replicates} aborted={report.n_aborted} "
              f"mean_solve={report.timing['mean'] * 1e3:.1f}ms")
        for rep, err in errors:
            print(f"  aborted replicate {rep}: {err}", file=sys.stderr)
    return 0


def cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        if not Path(path).exists():
            raise UsageError(f"report file not found: {path}")
        reports.append(ev.CampaignReport.load(path))
    lengths = {r.episode_length for r in reports}
    if len(lengths) > 1:
        print(f"warning: mismatched episode lengths {sorted(lengths)}",
              file=sys.stderr)
    rows = []
    for r in reports:
        rows.append({
            "kind": r.kind, "replicates": r.n_replicates,
            "failure_rate": r.failure_rate, "mean_r2": r.mean_r2,
            "margin_x1_lb": r.margins.get("x1_lb"),
            "fallback_rate": r.fallback_rate,
            "mean_solve_ms": r.timing["mean"] * 1e3,
        })
    header = f"{'kind':<10}{'fail%':>8}{'r2':>9}{'margin_lb':>11}" \
             f"{'fallback%':>11}{'solve_ms':>10}"
    print(header)
    print("-" * len(header))
    for row in rows:
        r2 = "nan" if row["mean_r2"] is None else f"{row['mean_r2']:.4f}"
        margin = "-" if row["margin_x1_lb"] is None \
            else f"{row['margin_x1_lb']:.4f}"
        print(f"{row['kind']:<10}{100 * row['failure_rate']:>8.2f}{r2:>9}"
              f"{margin:>11}{100 * row['fallback_rate']:>11.2f}"
              f"{row['mean_solve_ms']:>10.1f}")
    payload = json.dumps({"controllers": rows}, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload + "\n")
    else:
        print(payload)
    return 0


# ----------------------------------------------------------------------
# argument wiring
# ----------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="qmpc",
                     description="quantile-forecast robust MPC pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False):
        p.add_argument("--config", help="YAML config file (defaults: benchmark)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output file or directory")
        if model:
            p.add_argument("--model", default="model.qmpc",
                           help="forecaster checkpoint path")
            p.add_argument("--controller",
                           choices=("nominal", "robust", "tube"),
                           help="run a single controller kind")

    p = sub.add_parser("gen-data", help="simulate an excitation dataset")
    common(p)
    p.add_argument("--noiseless", action="store_true",
                   help="disable plant noise (oracle dataset)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the forecaster on a dataset CSV")
    common(p)
    p.add_argument("data", help="dataset CSV from gen-data")
    p.add_argument("--epochs", type=int, help="override training epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="single closed-loop episode per controller")
    common(p, model=True)
    p.add_argument("--plan-dump", action="store_true",
                   help="dump per-step plans as JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("campaign", help="Monte-Carlo closed-loop campaign")
    common(p, model=True)
    p.add_argument("--replicates", type=int, help="override replicate count")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("compare", help="summarize campaign reports")
    p.add_argument("reports", nargs="+", help="report JSON files")
    p.add_argument("--out", help="write the JSON summary here")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (tr.TrainingDiverged, RuntimeError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
