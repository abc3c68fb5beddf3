"""Command-line entry point: ``tra <synth|train|predict|evaluate|backtest|ablate>``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, echo_config, load_config
from .dataprep import DataError, generate_synthetic, write_dataset, write_regimes
from .evaluation import (
    _clean,
    assignment_accuracy,
    portfolio_metrics,
    ranking_metrics,
    simulate_long_short,
    write_series_csv,
)
from .experiments import Prepared, fit_and_score, infer_test_range, prepare_from_files
from .trainer import load_checkpoint, run_training

log = logging.getLogger("tra")

CHECKPOINT = "checkpoint.npz"
PREDICTIONS = "predictions.csv"


def _prepare(cfg: RunConfig) -> Prepared:
    if not cfg.data_path.exists():
        raise DataError(f"dataset {cfg.data_path} not found; run 'tra synth' or set paths.data")
    prepared = prepare_from_files(cfg.data_path, cfg.regimes_path, cfg.backbone.window_len, cfg.split)
    if prepared.panel.n_features != cfg.backbone.feature_dim:
        raise ConfigError(
            f"backbone.feature_dim={cfg.backbone.feature_dim} but {cfg.data_path} has {prepared.panel.n_features} features"
        )
    if cfg.router.gap <= prepared.panel.horizon:
        raise ConfigError(f"router.gap={cfg.router.gap} must exceed the dataset label horizon {prepared.panel.horizon}")
    return prepared


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig, args) -> dict:
    panel, regimes = generate_synthetic(cfg.synthetic)
    cfg.data_path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(panel, cfg.data_path)
    write_regimes(panel, regimes, cfg.regimes_path)
    return {"data": str(cfg.data_path), "regimes": str(cfg.regimes_path), "rows": len(panel)}


def cmd_train(cfg: RunConfig, args) -> dict:
    prepared = _prepare(cfg)
    ck = cfg.output_dir / CHECKPOINT
    resume = ck if args.resume and ck.exists() else None
    model, report = run_training(cfg.train, cfg.backbone, cfg.router, prepared.sets, cfg.sinkhorn,
                                 checkpoint_path=ck, resume_from=resume)
    (cfg.output_dir / "train_report.json").write_text(report.to_json(), encoding="utf-8")
    return {"checkpoint": str(ck), "best_epoch": report.best_epoch, "best_valid_ic": report.best_valid_ic}


def _predict(cfg: RunConfig, prepared: Prepared, checkpoint: Path):
    if not checkpoint.exists():
        raise DataError(f"checkpoint {checkpoint} not found; run 'tra train' first")
    ck = load_checkpoint(checkpoint)
    model = ck.best or ck.model
    res, _ = infer_test_range(model, prepared.sets, ck.train_cfg.seed)
    return res


def _write_predictions(path: Path, test, res) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "stock_id", "prediction", "chosen_predictor"])
        for i in range(len(test)):
            w.writerow([str(test.dates[test.day_idx[i]]), test.stocks[test.stock_idx[i]],
                        repr(float(res.p_hat[i])), int(res.chosen[i])])


def _read_predictions(path: Path, test):
    pos = {(str(test.dates[d]), test.stocks[s]): i for i, (s, d) in enumerate(zip(test.stock_idx, test.day_idx))}
    pred = np.full(len(test), np.nan)
    chosen = np.full(len(test), -1, dtype=np.int64)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["date", "stock_id", "prediction", "chosen_predictor"]:
            raise DataError(f"{path}: line 1: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            key = (row[0], row[1])
            if key not in pos:
                raise DataError(f"{path}: line {lineno}: {key} is not a test sample")
            pred[pos[key]] = float(row[2])
            chosen[pos[key]] = int(row[3])
    if np.any(np.isnan(pred)):
        raise DataError(f"{path}: {int(np.isnan(pred).sum())} test samples have no prediction")
    return pred, chosen


def _predictions(cfg: RunConfig, prepared: Prepared, args):
    path = Path(args.predictions) if getattr(args, "predictions", None) else cfg.output_dir / PREDICTIONS
    if not path.exists():
        res = _predict(cfg, prepared, cfg.output_dir / CHECKPOINT)
        _write_predictions(path, prepared.sets["test"], res)
    return _read_predictions(path, prepared.sets["test"])


def cmd_predict(cfg: RunConfig, args) -> dict:
    prepared = _prepare(cfg)
    ck = Path(args.checkpoint) if args.checkpoint else cfg.output_dir / CHECKPOINT
    res = _predict(cfg, prepared, ck)
    out = cfg.output_dir / PREDICTIONS
    _write_predictions(out, prepared.sets["test"], res)
    return {"predictions": str(out), "rows": len(res.p_hat)}


def _long_short(cfg: RunConfig, test, pred):
    ids = np.array(test.stocks)[test.stock_idx]
    return simulate_long_short(pred, test.returns, test.dates[test.day_idx], ids, cfg.eval.decile, cfg.eval.fill_calendar)


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    prepared = _prepare(cfg)
    test = prepared.sets["test"]
    pred, chosen = _predictions(cfg, prepared, args)
    report = ranking_metrics(pred, test.labels, test.dates[test.day_idx])
    series = _long_short(cfg, test, pred)
    if len(series.R) >= 2:
        pm = portfolio_metrics(series)
        report.ar, report.av, report.sr, report.mdd = pm["ar"], pm["av"], pm["sr"], pm["mdd"]
    acc = None
    if prepared.regime_grid is not None:
        truth = prepared.regime_grid[test.stock_idx, test.day_idx]
        if np.all(truth >= 0) and chosen.max() < 6:
            acc = assignment_accuracy(chosen, truth)
    report.extra = {"assignment_accuracy": acc, "n_samples": len(test), "n_days": len(np.unique(test.day_idx)),
                    "skipped_days": len(series.skipped)}
    out = cfg.output_dir / "metrics.json"
    out.write_text(report.to_json(), encoding="utf-8")
    write_series_csv(cfg.output_dir / "ic_series.csv", report.ic_dates, report.ic)
    return {"metrics": str(out), "ic_mean": report.ic_mean, "mse": report.mse}


def cmd_backtest(cfg: RunConfig, args) -> dict:
    prepared = _prepare(cfg)
    test = prepared.sets["test"]
    pred, _ = _predictions(cfg, prepared, args)
    series = _long_short(cfg, test, pred)
    write_series_csv(cfg.output_dir / "backtest_series.csv", series.dates, series.R)
    pm = portfolio_metrics(series)
    pm["decile"] = cfg.eval.decile
    pm["skipped_days"] = [str(d) for d in series.skipped]
    _write_json(cfg.output_dir / "portfolio.json", pm)
    return {"series": str(cfg.output_dir / "backtest_series.csv"), **pm}


ABLATE_COLUMNS = ["group", "setting", "K", "lambda", "input_mode", "n_seeds", "test_mse_mean", "test_mse_std",
                  "test_ic_mean", "accuracy_mean", "max_share_mean"]


def ablation_plan(cfg: RunConfig, seeds: list[int], ks: list[int], groups: set[str]) -> list[dict]:
    runs = []
    mode = cfg.router.input_mode
    if "inputs" in groups:
        for m in ("Random", "LR", "TPE", "LR+TPE"):
            runs += [dict(group="input_mode", setting=m, K=cfg.train.K, lam=cfg.train.lam, mode=m, seed=s) for s in seeds]
    if "lambda" in groups:
        for lam in (0.0, cfg.train.lam):
            runs += [dict(group="lambda", setting=f"lambda={lam:g}", K=cfg.train.K, lam=lam, mode=mode, seed=s) for s in seeds]
    if "k" in groups:
        for k in ks:
            runs += [dict(group="K", setting=f"K={k}", K=k, lam=cfg.train.lam, mode=mode, seed=s) for s in seeds[:1]]
    return runs


def run_ablation(cfg: RunConfig, prepared: Prepared, runs: list[dict], out_dir: Path) -> tuple[list[dict], list[dict]]:
    rows = []
    for r in runs:
        tcfg = dataclasses.replace(cfg.train, K=r["K"], lam=r["lam"], seed=r["seed"])
        rcfg = dataclasses.replace(cfg.router, input_mode=r["mode"])
        fit = fit_and_score(tcfg, cfg.backbone, rcfg, prepared, cfg.sinkhorn)
        sub = out_dir / f"{r['group']}_{r['setting'].replace('=', '')}_seed{r['seed']}"
        sub.mkdir(parents=True, exist_ok=True)
        (sub / "train_report.json").write_text(fit.report.to_json(), encoding="utf-8")
        row = dict(r, test_mse=fit.test_mse, test_ic=fit.test_ic, accuracy=fit.accuracy, max_share=fit.final_max_share)
        _write_json(sub / "result.json", row)
        log.info("ablation %s: mse %.5f acc %s share %.3f", sub.name, fit.test_mse, fit.accuracy, fit.final_max_share)
        rows.append(row)
    table = []
    keys = []
    for r in rows:
        k = (r["group"], r["setting"])
        if k not in keys:
            keys.append(k)
    for g, s in keys:
        sel = [r for r in rows if (r["group"], r["setting"]) == (g, s)]
        mse = np.array([r["test_mse"] for r in sel])
        ics = [r["test_ic"] for r in sel if r["test_ic"] is not None]
        accs = [r["accuracy"] for r in sel if r["accuracy"] is not None]
        table.append({
            "group": g, "setting": s, "K": sel[0]["K"], "lambda": sel[0]["lam"], "input_mode": sel[0]["mode"],
            "n_seeds": len(sel), "test_mse_mean": float(mse.mean()), "test_mse_std": float(mse.std()),
            "test_ic_mean": float(np.mean(ics)) if ics else None,
            "accuracy_mean": float(np.mean(accs)) if accs else None,
            "max_share_mean": float(np.mean([r["max_share"] for r in sel])),
        })
    return rows, table


def _write_table(path: Path, rows: list[dict], columns: list[str]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])


def cmd_ablate(cfg: RunConfig, args) -> dict:
    prepared = _prepare(cfg)
    seeds = [cfg.train.seed + i for i in range(args.seeds)]
    ks = [int(k) for k in args.ks.split(",")]
    groups = set(args.groups.split(","))
    unknown = groups - {"inputs", "lambda", "k"}
    if unknown:
        raise ConfigError(f"unknown ablation groups {sorted(unknown)}")
    out_dir = cfg.output_dir / "ablate"
    rows, table = run_ablation(cfg, prepared, ablation_plan(cfg, seeds, ks, groups), out_dir)
    run_cols = ["group", "setting", "K", "lam", "mode", "seed", "test_mse", "test_ic", "accuracy", "max_share"]
    _write_table(cfg.output_dir / "ablation_runs.csv", rows, run_cols)
    _write_table(cfg.output_dir / "ablation.csv", table, ABLATE_COLUMNS)
    return {"table": str(cfg.output_dir / "ablation.csv"), "runs": len(rows)}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "backtest": cmd_backtest,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tra", description="Temporal routing adaptor experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI file; defaults apply to missing keys")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
        if name == "train":
            sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
        if name == "predict":
            sp.add_argument("--checkpoint")
        if name in ("evaluate", "backtest"):
            sp.add_argument("--predictions", help="predictions CSV (written from the checkpoint when absent)")
        if name == "ablate":
            sp.add_argument("--seeds", type=int, default=5)
            sp.add_argument("--ks", default="1,3,5")
            sp.add_argument("--groups", default="inputs,lambda,k", help="comma list of inputs, lambda, k")
    return p


def _overrides(pairs: list[str]) -> dict:
    out: dict = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        sec, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out.setdefault(sec, {})[name] = value
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args.set))
        echo_config(cfg, args.command)
        result = COMMANDS[args.command](cfg, args)
    except Exception as exc:  # every failure becomes one parsable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}), file=sys.stderr)
        return 1
    print(json.dumps(_clean(result), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
