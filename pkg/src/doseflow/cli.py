"""Command line entry point: ``doseflow generate|train|evaluate|table|sweep``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, datagen
from . import experiment as ex
from .evaluate import DosageGrid, evaluate, write_reports
from .models import DoseResponseNet, load_checkpoint, save_checkpoint
from .trainer import TrainConfig

log = logging.getLogger("doseflow")


def parse_seeds(text: str):
    """'10' means seeds 0..9; '0,3,7' is an explicit list."""
    text = text.strip()
    if "," in text:
        return [int(t) for t in text.split(",") if t.strip()]
    k = int(text)
    if k < 1:
        raise argparse.ArgumentTypeError("seed count must be >= 1")
    return list(range(k))


def parse_floats(text: str):
    return [float(t) for t in text.split(",") if t.strip()]


def _dataset_args(p, required=False):
    p.add_argument("--dataset", choices=ex.DATASETS, default=None if not required else "synthetic")
    p.add_argument("--n", type=int, default=None, help="sample size (IHDP uses its covariate rows)")
    p.add_argument("--covariates", default=None, help="covariate CSV for ihdp/news (default: surrogate)")


def _dataset_spec(args, base: ex.DatasetSpec = None) -> ex.DatasetSpec:
    base = base or ex.DatasetSpec()
    return ex.DatasetSpec(name=args.dataset or base.name,
                          n=args.n if args.n is not None else base.n,
                          covariates=args.covariates or base.covariates)


def _train_args(p):
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--weight-decay", type=float, default=None)


def _train_cfg(args, base: TrainConfig = TrainConfig()) -> TrainConfig:
    upd = {k: getattr(args, a) for k, a in (("max_epochs", "max_epochs"), ("patience", "patience"),
                                            ("batch_size", "batch_size"), ("weight_decay", "weight_decay"))
           if getattr(args, a) is not None}
    return replace(base, **upd)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="doseflow", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write one generated dataset as CSV")
    _dataset_args(p, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")

    p = sub.add_parser("train", help="train one method on one seed and save a checkpoint")
    _dataset_args(p, required=True)
    p.add_argument("--method", default="vcnet-hsic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=10.0, help="TR weight before division by sqrt(n_train)")
    p.add_argument("--tr-lr", type=float, default=0.001)
    p.add_argument("--tr-knots", type=int, default=10)
    _train_args(p)
    p.add_argument("--out", default="run")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split of a seed")
    p.add_argument("checkpoint")
    _dataset_args(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--grid-size", type=int, default=65)
    p.add_argument("--out", default=".")

    p = sub.add_parser("table", help="tune and compare methods over seeds")
    _dataset_args(p)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--method", action="append", help="method name; repeat for several")
    p.add_argument("--seeds", type=parse_seeds, default=None)
    p.add_argument("--lr", type=parse_floats, default=None, help="learning-rate grid")
    p.add_argument("--gamma", type=parse_floats, default=None, help="gamma grid")
    p.add_argument("--workers", type=int, default=None)
    _train_args(p)
    p.add_argument("--out", default=None)

    p = sub.add_parser("sweep", help="relative MISE of the HSIC penalty over gamma")
    _dataset_args(p)
    p.add_argument("--config", help="JSON experiment config (dataset, seeds, grids, training)")
    p.add_argument("--gamma", type=parse_floats, default=None, help="gamma values; 0 is always added")
    p.add_argument("--seeds", type=parse_seeds, default=None)
    p.add_argument("--lr", type=float, default=None, help="fixed learning rate (default: tuned for vcnet)")
    p.add_argument("--workers", type=int, default=None)
    _train_args(p)
    p.add_argument("--out", default=None)
    return ap


def cmd_generate(args):
    spec = _dataset_spec(args)
    ds = spec.generate(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{spec.name}_seed{args.seed}.csv"
    ds.to_csv(path)
    print(f"wrote {path} ({len(ds)} rows, {ds.X.shape[1]} covariates, source {ds.covariate_source})")


def _hparams(args, method):
    _, variant = ex.parse_method(method)
    full = {"lr": args.lr, "gamma": args.gamma, "alpha": args.alpha, "beta": args.beta,
            "tr_lr": args.tr_lr, "tr_knots": args.tr_knots}
    return {k: full[k] for k in ex.METHOD_HPARAMS[variant]} if method != "gps" else {}


def cmd_train(args):
    from .plotting import plot_curves, plot_dose_response

    spec = _dataset_spec(args)
    hp = _hparams(args, args.method)
    job = ex.make_job(spec, args.method, args.seed, hp, _train_cfg(args))
    rec, model, result, data, test = ex.run_job(job, return_model=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_runs(out / "eval.csv", [rec])
    if not rec.ok:
        print(f"run failed: {rec.error}", file=sys.stderr)
        return 1
    if result is not None:
        extra = {"method": args.method, "hparams": hp, "dataset": spec.name, "seed": args.seed,
                 "covariates": spec.covariates, "n": spec.n, "best_epoch": result.best_epoch}
        save_checkpoint(out / "checkpoint.json", model.cfg, result.params, extra)
        result.write_curves(out / "curves.csv")
        plot_curves(result, out / "curves.png")
        predict = lambda X, s, w: model.predict(result.params, X, s, w)  # noqa: E731
    else:
        predict = lambda X, s, w: model.predict(X, s)  # noqa: E731
    plot_dose_response(predict, test.X, data.oracle, out / "dose_response.png")
    print(f"{args.method} seed {args.seed}: sqrt MISE {np.sqrt(rec.mise):.4f}, sqrt AMSE {np.sqrt(rec.amse):.4f}, "
          f"{rec.epochs} epochs (best {rec.best_epoch}) -> {out}")
    return 0


def cmd_evaluate(args):
    from .plotting import plot_dose_response

    cfg, params, extra = load_checkpoint(args.checkpoint)
    spec = ex.DatasetSpec(name=args.dataset or extra.get("dataset", "synthetic"),
                          n=args.n if args.n is not None else extra.get("n"),
                          covariates=args.covariates or extra.get("covariates", "surrogate"))
    seed = args.seed if args.seed is not None else extra.get("seed", 0)
    data = spec.generate(seed)
    test = datagen.split(data, datagen.SplitSpec(ex.TABLE_SPLIT, seed))[-1]
    if test.X.shape[1] != cfg.n_covariates:
        raise SystemExit(f"checkpoint expects {cfg.n_covariates} covariates, dataset has {test.X.shape[1]}")
    model = DoseResponseNet(cfg)
    predict = lambda X, s, w: model.predict(params, X, s, w)  # noqa: E731
    report = evaluate(predict, test.X, data.oracle, DosageGrid.uniform(args.grid_size),
                      seed=seed, model=extra.get("method", cfg.architecture), dataset=spec.name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(out / "eval.csv", [report])
    plot_dose_response(predict, test.X, data.oracle, out / "dose_response.png")
    print(f"sqrt MISE {report.sqrt_mise:.4f}  sqrt AMSE {report.sqrt_amse:.4f}  "
          f"pairwise {list(report.pairwise.values())[0]:.4f}")
    return 0


def _experiment_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    upd = {"dataset": _dataset_spec(args, cfg.dataset), "train": _train_cfg(args, cfg.train)}
    if getattr(args, "method", None) and isinstance(args.method, list):
        upd["methods"] = args.method
    if args.seeds is not None:
        upd["seeds"] = args.seeds
    if args.workers is not None:
        upd["workers"] = args.workers
    if args.out is not None:
        upd["out_dir"] = args.out
    grids = dict(cfg.grids)
    if isinstance(getattr(args, "lr", None), list):
        grids["lr"] = args.lr
    if args.gamma is not None:
        grids["gamma"] = args.gamma
    upd["grids"] = grids
    return ex.ExperimentConfig.from_dict(_merge(cfg, upd))


def _merge(cfg: ex.ExperimentConfig, upd: dict) -> dict:
    d = cfg.to_dict()
    for k, v in upd.items():
        d[k] = asdict(v) if k in ("dataset", "train") else v
    return d


def cmd_table(args):
    cfg = _experiment_config(args)
    table = ex.run_table(cfg)
    print(f"{'method':14s} {'sqrt MISE':>16s} {'sqrt AMSE':>16s}  ok/failed")
    for r in table.rows:
        print(f"{r.method:14s} {r.mean_sqrt_mise:8.3f} ({r.std_sqrt_mise:.3f}) "
              f"{r.mean_sqrt_amse:8.3f} ({r.std_sqrt_amse:.3f})  {r.n_ok}/{r.n_failed}")
    print(f"results in {cfg.out_dir}")
    return 0


def cmd_sweep(args):
    from .plotting import plot_sweep

    cfg = _experiment_config(args)
    gammas = sorted(set([0.0] + list(cfg.grids["gamma"])))
    lr = args.lr
    tuning = None
    if lr is None:
        tuning = ex.grid_search(cfg.dataset, "vcnet", {"lr": cfg.grids["lr"]}, cfg.train, cfg.tuning_seed,
                                cfg.workers, cfg.grid_size)
        lr = tuning.best["lr"]
    res = ex.gamma_sweep(cfg.dataset, gammas, cfg.seeds, lr, cfg.train, workers=cfg.workers,
                         grid_size=cfg.grid_size)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_sweep(out / "sweep.csv", res)
    ex.write_runs(out / "runs.csv", res.runs)
    files = ["sweep.csv", "runs.csv", "sweep.png", "manifest.json"]
    if tuning is not None:
        ex.write_runs(out / "tuning.csv", tuning.trace)
        files.append("tuning.csv")
    plot_sweep(res, out / "sweep.png", title=cfg.dataset.name)
    ex.write_manifest(out / "manifest.json", cfg, {"vcnet-hsic": {"lr": lr}}, res.runs, files)
    print(f"lr {lr:g}; best relative MISE {res.best_relative:.3f} "
          f"at gamma {res.gammas[res.relative.index(res.best_relative)]:.4g}; results in {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    handler = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
               "table": cmd_table, "sweep": cmd_sweep}[args.command]
    return handler(args) or 0


if __name__ == "__main__":
    sys.exit(main())
