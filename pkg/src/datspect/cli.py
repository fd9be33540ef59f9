"""Command line entry point: ``datspect <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from datspect import report
from datspect.config import ConfigError, PipelineConfig, parse_value
from datspect.imaging import VolumeError
from datspect.labels import Label
from datspect.metrics import PredictionsFormatError, UndefinedMetricError
from datspect.model import ImageLoadError, TrainingError
from datspect.phantom import synth_dataset
from datspect.pipeline import (
    DataError,
    evaluate_predictions,
    load_dataset,
    preprocess,
    render_run,
    run_crossval,
    run_train_final,
    write_holdout_outputs,
)
from datspect.splits import (
    ManifestError,
    stratified_holdout,
    stratified_kfold,
    write_folds,
    write_image_tree,
    write_manifest,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3

log = logging.getLogger("datspect")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag dest -> config key
FLAG_KEYS = {
    "n_control": "synth.n_control",
    "n_pd": "synth.n_pd",
    "noise_sigma": "phantom.noise_sigma",
    "pd_uptake_factor": "phantom.pd_uptake_factor",
    "asymmetry_factor": "phantom.asymmetry_factor",
    "phantom_seed": "phantom.seed",
    "z0": "preprocess.z0",
    "axis": "preprocess.axis",
    "k": "split.k",
    "split_seed": "split.seed",
    "test_frac": "split.test_frac",
    "test_control": "split.test_control",
    "test_pd": "split.test_pd",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "seed": "train.seed",
    "backbone": "train.backbone",
    "backbone_weights": "train.backbone_weights",
    "backbone_mode": "train.backbone_mode",
    "head_units": "train.head_units",
    "dropout": "train.dropout",
    "threshold": "train.threshold",
    "workers": "crossval.workers",
    "data_root": "paths.data_root",
}


def _add_common(p):
    p.add_argument("--config", type=Path, help="JSON config file (dotted or nested keys)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--data-root", help="base directory for relative input paths")
    p.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_split(p, holdout=True):
    p.add_argument("--k", type=int)
    p.add_argument("--split-seed", type=int)
    if holdout:
        p.add_argument("--test-frac", type=float)
        p.add_argument("--test-control", type=int, help="explicit CONTROL count in the test split")
        p.add_argument("--test-pd", type=int, help="explicit PD count in the test split")


def _add_train(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int, help="training seed (init, shuffling, augmentation)")
    p.add_argument("--backbone", choices=["small", "inception"])
    p.add_argument("--backbone-weights", help="state dict path, or 'imagenet'")
    p.add_argument("--backbone-mode", choices=["frozen", "fine-tune"])
    p.add_argument("--head-units", type=int)
    p.add_argument("--dropout", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="datspect", description="DaT-SPECT PD/control classification pipeline")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a labelled phantom dataset")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-control", type=int)
    p.add_argument("--n-pd", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--pd-uptake-factor", type=float)
    p.add_argument("--asymmetry-factor", type=float)
    p.add_argument("--phantom-seed", type=int)

    p = sub.add_parser("preprocess", help="volumes -> slice-triplet PNG tree")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True, help="volume manifest CSV")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--z0", type=int, help="first of the three slices (0-based)")
    p.add_argument("--axis", choices=["axial", "coronal", "sagittal"])

    p = sub.add_parser("split", help="write a k-fold plan and a stratified holdout tree")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True, help="image manifest CSV or class tree")
    p.add_argument("--out", type=Path, required=True)
    _add_split(p)

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--workers", type=int, help="folds trained in parallel processes")
    _add_split(p, holdout=False)
    _add_train(p)

    p = sub.add_parser("train", help="holdout split, final training and test report")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True,
                   help="image manifest CSV, class tree, or a directory with train/ and test/ trees")
    p.add_argument("--out", type=Path, required=True)
    _add_split(p)
    _add_train(p)

    p = sub.add_parser("evaluate", help="metrics from a predictions file")
    _add_common(p)
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--out", type=Path, help="write metrics, curves and figures here")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("report", help="re-render tables and figures of a finished run")
    _add_common(p)
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--format", default=None, help="figure format (png, pdf, svg)")
    return ap


def resolve_config(args) -> PipelineConfig:
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = parse_value(value)
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            overrides[key] = val
    if args.no_plots:
        overrides["report.plots"] = False
    if getattr(args, "format", None):
        overrides["report.format"] = args.format
    cfg = PipelineConfig.load(args.config, overrides)
    cfg.validate()
    return cfg


def _counts_line(m) -> str:
    c = m.counts()
    return f"{len(m)} subjects ({', '.join(f'{k.value} {v}' for k, v in c.items())})"


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = args.out
    m = synth_dataset(int(cfg["synth.n_control"]), int(cfg["synth.n_pd"]), cfg.phantom(), out)
    cfg.dump(out / "config.json")
    print(f"wrote {out / 'manifest.csv'}: {_counts_line(m)}")
    return EXIT_OK


def cmd_preprocess(args, cfg: PipelineConfig) -> int:
    m = load_dataset(cfg.resolve(args.manifest))
    out, failed = preprocess(m, args.out, int(cfg["preprocess.z0"]), str(cfg["preprocess.axis"]))
    cfg.dump(args.out / "config.json")
    print(f"wrote {len(out)} images under {args.out}")
    if failed:
        print(f"{len(failed)} volume(s) failed:", file=sys.stderr)
        for msg in failed:
            print(f"  {msg}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_split(args, cfg: PipelineConfig) -> int:
    m = load_dataset(cfg.resolve(args.data))
    args.out.mkdir(parents=True, exist_ok=True)
    fa = stratified_kfold(m, int(cfg["split.k"]), int(cfg["split.seed"]))
    write_folds(fa, m, args.out / "folds.csv")
    hs = stratified_holdout(m, float(cfg["split.test_frac"]), int(cfg["split.seed"]), cfg.holdout_counts())
    for name, part in (("train", hs.train), ("test", hs.test)):
        tree = write_image_tree(part, args.out / name)
        write_manifest(tree, args.out / name / "manifest.csv")
    cfg.dump(args.out / "config.json")
    rows = [[i, comp[Label.CONTROL], comp[Label.PD], sum(comp.values())] for i, comp in enumerate(fa.composition(m))]
    print(report.format_table(["Fold", "CONTROL", "PD", "Total"], rows))
    print(f"holdout: train {_counts_line(hs.train)}; test {_counts_line(hs.test)}")
    return EXIT_OK


def cmd_crossval(args, cfg: PipelineConfig) -> int:
    m = load_dataset(cfg.resolve(args.data))
    args.out.mkdir(parents=True, exist_ok=True)
    cv = run_crossval(m, cfg)
    cv.write(args.out)
    cfg.dump(args.out / "config.json")
    if cfg["report.plots"]:
        try:
            render_run(args.out, str(cfg["report.format"]))
        except Exception as exc:
            log.warning("could not render figures: %s", exc)
    print(cv.table())
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    metrics = run_train_final(cfg.resolve(args.data), cfg, args.out)
    print(report.holdout_table(metrics))
    print(f"outputs in {args.out}")
    return EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    threshold = float(cfg["train.threshold"])
    preds, metrics = evaluate_predictions(cfg.resolve(args.predictions), threshold, float(cfg["train.bce_eps"]))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_holdout_outputs(preds, metrics, args.out, bool(cfg["report.plots"]), str(cfg["report.format"]))
        cfg.dump(args.out / "config.json")
    print(report.holdout_table(metrics))
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_report(args, cfg: PipelineConfig) -> int:
    for table in render_run(args.run, str(cfg["report.format"])):
        print(table)
        print()
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "crossval": cmd_crossval,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (DataError, ManifestError, VolumeError, PredictionsFormatError, ImageLoadError,
            UndefinedMetricError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
