"""Run-level workflows: preprocessing, cross-validation, final holdout training, evaluation."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

from datspect import metrics as M
from datspect import report
from datspect.config import PipelineConfig
from datspect.imaging import VolumeError, extract_triplet, load_volume, write_image
from datspect.labels import LABELS
from datspect.model import (
    TrainingError,
    load_images,
    predict,
    save_checkpoint,
    train,
)
from datspect.splits import (
    DatasetManifest,
    ManifestEntry,
    fold_datasets,
    manifest_from_tree,
    read_manifest,
    stratified_holdout,
    stratified_kfold,
    write_manifest,
)

log = logging.getLogger(__name__)


class DataError(Exception):
    pass


def load_dataset(path: Path) -> DatasetManifest:
    """A manifest CSV, or a ``<class>/<subject>.png`` directory tree."""
    path = Path(path)
    if path.is_dir():
        if (path / "manifest.csv").exists():
            return read_manifest(path / "manifest.csv")
        m = manifest_from_tree(path)
        if not len(m):
            raise DataError(f"{path}: no images under {[lab.value for lab in LABELS]} subdirectories")
        return m
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    return read_manifest(path)


def presplit(path: Path) -> tuple[DatasetManifest, DatasetManifest] | None:
    """Return (train, test) if ``path`` holds ``train/`` and ``test/`` image trees."""
    path = Path(path)
    if path.is_dir() and (path / "train").is_dir() and (path / "test").is_dir():
        return load_dataset(path / "train"), load_dataset(path / "test")
    return None


def preprocess(m: DatasetManifest, out_dir: Path, z0: int = 40, axis: str = "axial") -> tuple[DatasetManifest, list[str]]:
    """Convert each volume to ``<out>/<class>/<subject>.png``.

    Failures do not stop the pass; they come back as messages next to the
    manifest of successfully written images.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for lab in LABELS:
        (out_dir / lab.value).mkdir(exist_ok=True)
    done, failed = [], []
    for e in m.entries:
        try:
            vol = load_volume(e.image_path)
            dst = out_dir / e.label.value / f"{e.subject_id}.png"
            write_image(extract_triplet(vol, z0, axis), dst)
        except (VolumeError, OSError, ValueError, IndexError) as exc:
            failed.append(f"{e.subject_id}: {exc}")
            continue
        done.append(ManifestEntry(e.subject_id, dst, e.label))
    out = DatasetManifest(done)
    write_manifest(out, out_dir / "manifest.csv")
    return out, failed


# -- cross-validation --------------------------------------------------------


@dataclass
class CrossValReport:
    rows: list[dict]
    summary: dict
    histories: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    ROW_FIELDS = ("fold", "n_train", "n_val", "n_val_control", "n_val_pd",
                  "train_loss", "train_accuracy", "val_loss", "val_accuracy")  # fmt: skip

    def write(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        with open(out_dir / "cv_report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.ROW_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in self.ROW_FIELDS})
        doc = {"rows": self.rows, "summary": self.summary, "config": self.config}
        (out_dir / "cv_report.json").write_text(json.dumps(doc, indent=1) + "\n")
        (out_dir / "cv_histories.json").write_text(json.dumps(self.histories) + "\n")

    def table(self) -> str:
        return report.crossval_table(self.rows, self.summary)


def aggregate_folds(rows: list[dict]) -> dict:
    """Weighted (by validation size) means plus population and sample spreads."""
    weights = [r["n_val"] for r in rows]
    summary = {}
    for key in ("train_loss", "train_accuracy", "val_loss", "val_accuracy"):
        vals = [r[key] for r in rows]
        summary[f"{key}_weighted_mean"] = M.weighted_mean(vals, weights)
        summary[f"{key}_std"] = M.population_stddev(vals)
        summary[f"{key}_sample_std"] = M.sample_stddev(vals) if len(vals) > 1 else None
    return summary


def _run_fold(args) -> tuple[dict, dict]:
    manifest, fold_of, k, i, cfg_values = args
    from datspect.splits import FoldAssignment

    cfg = PipelineConfig(cfg_values)
    fa = FoldAssignment(k, fold_of)
    tr, va = fold_datasets(manifest, fa, i)
    try:
        _, hist = train(tr, va, cfg.train(), cfg.augmentation(), cfg.schedule())
    except TrainingError as exc:
        raise TrainingError(f"fold {i}: {exc}") from None
    counts = va.counts()
    row = {
        "fold": i,
        "n_train": len(tr),
        "n_val": len(va),
        "n_val_control": counts[LABELS[0]],
        "n_val_pd": counts[LABELS[1]],
        "train_loss": hist.train_loss[-1],
        "train_accuracy": hist.train_accuracy[-1],
        "val_loss": hist.val_loss,
        "val_accuracy": hist.val_accuracy,
    }
    return row, hist.as_dict()


def run_crossval(m: DatasetManifest, cfg: PipelineConfig) -> CrossValReport:
    k = int(cfg["split.k"])
    fa = stratified_kfold(m, k, int(cfg["split.seed"]))
    jobs = [(m, dict(fa.fold_of), k, i, cfg.as_dict()) for i in range(k)]
    workers = int(cfg["crossval.workers"])
    if workers > 1:
        with ProcessPoolExecutor(workers, mp_context=get_context("spawn")) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_run_fold(job))
            r = results[-1][0]
            log.info("fold %d: val_loss %.4f val_acc %.4f", r["fold"], r["val_loss"], r["val_accuracy"])
    results.sort(key=lambda r: r[0]["fold"])
    rows = [r for r, _ in results]
    return CrossValReport(rows, aggregate_folds(rows), [h for _, h in results], cfg.as_dict())


# -- final model -------------------------------------------------------------


def holdout_metrics(preds: list[M.ScoredPrediction], threshold: float = 0.5, bce_eps: float = 1e-7) -> dict:
    out = M.summarize(preds, threshold)
    out["loss"] = M.bce(preds, bce_eps)
    return out


def write_holdout_outputs(preds, metrics: dict, out_dir: Path, plots: bool = True, fmt: str = "png") -> None:
    out_dir = Path(out_dir)
    M.write_predictions(preds, out_dir / "predictions.csv")
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=1) + "\n")
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name, key in report.HOLDOUT_FIELDS:
            w.writerow([key, metrics.get(key)])
    roc = pr = None
    if metrics.get("roc_auc") is not None:
        roc = M.roc_curve(preds)
        M.write_curve(roc, out_dir / "roc_curve.csv")
    if metrics.get("pr_auc") is not None:
        pr = M.pr_curve(preds)
        M.write_curve(pr, out_dir / "pr_curve.csv")
    if plots and roc is not None and pr is not None:
        try:
            report.plot_curves(roc, pr, out_dir / f"curves.{fmt}", metrics["roc_auc"], metrics["pr_auc"])
        except Exception as exc:  # rendering is best-effort
            log.warning("could not render curves: %s", exc)


def write_history(hist: dict, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "train_accuracy", "lr"])
        for i, row in enumerate(zip(hist["train_loss"], hist["train_accuracy"], hist["lr"])):
            w.writerow([i, *(repr(v) for v in row)])


def run_train_final(data: Path, cfg: PipelineConfig, out_dir: Path) -> dict:
    """Split (unless already split on disk), train, score the test set, write every output."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split = presplit(data)
    if split is None:
        m = load_dataset(data)
        hs = stratified_holdout(m, float(cfg["split.test_frac"]), int(cfg["split.seed"]), cfg.holdout_counts())
        train_set, test_set = hs.train, hs.test
    else:
        train_set, test_set = split
    write_manifest(train_set, out_dir / "split_train.csv")
    write_manifest(test_set, out_dir / "split_test.csv")
    tcfg = cfg.train()
    schedule = cfg.schedule()
    images = load_images(train_set)
    model, hist = train(train_set, None, tcfg, cfg.augmentation(), schedule, images=images)
    preds = predict(model, test_set)
    metrics = holdout_metrics(preds, tcfg.threshold, tcfg.bce_eps)
    metrics["n_train"] = len(train_set)
    metrics["n_test_control"] = test_set.counts()[LABELS[0]]
    metrics["n_test_pd"] = test_set.counts()[LABELS[1]]
    metrics["final_train_loss"] = hist.train_loss[-1]
    metrics["final_train_accuracy"] = hist.train_accuracy[-1]
    save_checkpoint(out_dir / "checkpoint.pt", model, tcfg, schedule, hist, {"config": cfg.as_dict()})
    write_history(hist.as_dict(), out_dir / "history.csv")
    cfg.dump(out_dir / "config.json")
    plots = bool(cfg["report.plots"])
    fmt = str(cfg["report.format"])
    write_holdout_outputs(preds, metrics, out_dir, plots, fmt)
    if plots:
        try:
            report.plot_history([hist.as_dict()], out_dir / f"history.{fmt}", ["final"])
        except Exception as exc:
            log.warning("could not render history: %s", exc)
    return metrics


def evaluate_predictions(path: Path, threshold: float = 0.5, bce_eps: float = 1e-7) -> tuple[list, dict]:
    preds = M.read_predictions(path)
    return preds, holdout_metrics(preds, threshold, bce_eps)


def render_run(run_dir: Path, fmt: str = "png") -> list[str]:
    """Re-render figures and tables from the files a run left behind."""
    run_dir = Path(run_dir)
    tables = []
    if (run_dir / "metrics.json").exists():
        metrics = json.loads((run_dir / "metrics.json").read_text())
        tables.append(report.holdout_table(metrics))
        if (run_dir / "roc_curve.csv").exists() and (run_dir / "pr_curve.csv").exists():
            roc = M.read_curve(run_dir / "roc_curve.csv", "ROC")
            pr = M.read_curve(run_dir / "pr_curve.csv", "PR")
            report.plot_curves(roc, pr, run_dir / f"curves.{fmt}", metrics.get("roc_auc"), metrics.get("pr_auc"))
        if (run_dir / "history.csv").exists():
            with open(run_dir / "history.csv", newline="") as fh:
                rows = list(csv.DictReader(fh))
            hist = {k: [float(r[k]) for r in rows] for k in ("train_loss", "train_accuracy", "lr")}
            report.plot_history([hist], run_dir / f"history.{fmt}", ["final"])
    if (run_dir / "cv_report.json").exists():
        doc = json.loads((run_dir / "cv_report.json").read_text())
        tables.append(report.crossval_table(doc["rows"], doc["summary"]))
        report.plot_crossval(doc["rows"], run_dir / f"crossval.{fmt}", doc["summary"])
        hist_path = run_dir / "cv_histories.json"
        if hist_path.exists():
            hists = json.loads(hist_path.read_text())
            report.plot_history(hists, run_dir / f"cv_history.{fmt}", [f"fold {r['fold']}" for r in doc["rows"]])
    if not tables:
        raise DataError(f"{run_dir}: no metrics.json or cv_report.json to report on")
    return tables

