"""Command-line entry point: one subcommand per pipeline stage.

Artifacts land under the run's output directory::

    preprocess/   <role>_slides.jsonl, <role>_tiles.jsonl, <role>/*.png
    tissue/       <role>_tissue_scores.csv, <role>_selected.jsonl
    train/        folds.csv, <family>/fold<i>.ckpt, fold<i>_log.csv, cv.json, oof_patients.csv
    predict/      <family>_tiles.csv, <family>_patients{,_best,_ensemble}.csv
    evaluate/     <name>.json, <name>_roc.{csv,svg}, <name>_pr.{csv,svg}
    benchmark/    timing.csv, timing.json, size_vs_time.svg
    report/       summary.csv, summary.txt, size_vs_auroc.svg

Timestamps and wall-clock figures go to ``<stage>/meta.json`` (and the
training logs), so score files and reports are byte-stable across reruns.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import plotting
from .config import RunConfig, default_seed, load_run_config
from .core import (CohortManifest, ScoreRow, atomic_write_text, load_manifest, load_tiles,
                   read_scores, select_one_slide_per_patient, write_manifest, write_scores, write_tiles)
from .errors import ConfigError, EmptyGroup, NumericError, TilebenchError
from .metrics import Metric, bootstrap_ci, curve_export, format_curve, timing_harness
from .nn import Family, count_parameters, reference_spec, toy_spec
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .preprocess import preprocess_cohort
from .tissue import TissueScorer, classify_tiles, select_cohort_tiles, write_score_file
from .train import (TrainConfig, best_fold, cross_validate, load_tile_dataset, predict_tiles,
                    score_patients, stratified_kfold, write_log)

log = logging.getLogger("tilebench")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_meta(cfg: RunConfig, stage: str, started: float, extra: dict | None = None) -> None:
    meta = {"stage": stage, "seed": cfg.seed, "threads": cfg.threads,
            "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "wall_seconds": round(time.perf_counter() - started, 3), "config": cfg.echo()}
    meta.update(extra or {})
    atomic_write_text(cfg.output_dir / stage / "meta.json", _dump(meta))


def _roles(cfg: RunConfig) -> dict[str, Path]:
    roles = {}
    if cfg.train_manifest is not None:
        roles["train"] = cfg.train_manifest
    if cfg.test_manifest is not None:
        roles["test"] = cfg.test_manifest
    if not roles:
        raise ConfigError("no manifest configured ([paths] train_manifest or --manifest)")
    return roles


def _selected_manifest(cfg: RunConfig, role: str) -> CohortManifest:
    path = cfg.output_dir / "preprocess" / f"{role}_slides.jsonl"
    if not path.is_file():
        raise ConfigError(f"{path} missing; run 'preprocess' first")
    return load_manifest(path)


def _selected_dataset(cfg: RunConfig, role: str):
    path = cfg.output_dir / "tissue" / f"{role}_selected.jsonl"
    if not path.is_file():
        raise ConfigError(f"{path} missing; run 'tissue-select' first")
    return load_tile_dataset(load_tiles(path), _selected_manifest(cfg, role))


# --- stages ------------------------------------------------------------------------

def stage_preprocess(cfg: RunConfig) -> dict:
    started = time.perf_counter()
    out = cfg.output_dir / "preprocess"
    summary = {}
    for role, path in _roles(cfg).items():
        manifest = select_one_slide_per_patient(load_manifest(path), cfg.seed)
        for s in manifest.slides:
            if not manifest.resolve(s).is_file():
                raise FileNotFoundError(f"slide image {manifest.resolve(s)} not found")
        records = preprocess_cohort(manifest, cfg.preprocess, out / role, threads=cfg.threads)
        absolute = replace(manifest, root="", slides=tuple(
            replace(s, image_path=str(manifest.resolve(s).resolve())) for s in manifest.slides))
        write_manifest(absolute, out / f"{role}_slides.jsonl")
        write_tiles(records, out / f"{role}_tiles.jsonl")
        summary[role] = {"slides": len(manifest), "tiles": len(records),
                         "qc_pass": sum(r.qc_pass for r in records), "labels": manifest.counts_report()}
    _write_meta(cfg, "preprocess", started, {"summary": summary})
    return summary


def stage_tissue(cfg: RunConfig) -> dict:
    started = time.perf_counter()
    out = cfg.output_dir / "tissue"
    scorer = TissueScorer.external(cfg.tissue_scores) if cfg.tissue_scores else TissueScorer.builtin()
    summary = {}
    for role in _roles(cfg):
        manifest = _selected_manifest(cfg, role)
        tiles = [t for t in load_tiles(cfg.output_dir / "preprocess" / f"{role}_tiles.jsonl") if t.qc_pass]
        scored = classify_tiles(tiles, scorer)
        selected, excluded = select_cohort_tiles(scored, manifest, cfg.tile_cap, cfg.seed, cfg.min_tumor_prob)
        write_score_file(scored, out / f"{role}_tissue_scores.csv")
        write_tiles(selected, out / f"{role}_selected.jsonl")
        atomic_write_text(out / f"{role}_excluded.txt", "".join(f"{p}\n" for p in excluded))
        summary[role] = {"scored": len(scored), "selected": len(selected), "excluded_patients": excluded}
    _write_meta(cfg, "tissue", started, {"summary": summary, "scorer": scorer.kind.value})
    return summary


def _family_cfg(cfg: RunConfig, family: str) -> TrainConfig:
    if family in cfg.forward_only:
        return replace(cfg.train, max_epochs=0)
    return cfg.train


def _spec_list(cfg: RunConfig):
    return cfg.specs()


def stage_train(cfg: RunConfig) -> dict:
    started = time.perf_counter()
    out = cfg.output_dir / "train"
    manifest = _selected_manifest(cfg, "train")
    data = _selected_dataset(cfg, "train")
    plan = stratified_kfold(manifest, cfg.folds, cfg.seed)
    rows = io.StringIO()
    w = csv.writer(rows, lineterminator="\n")
    w.writerow(("patient_id", "fold"))
    for pid in sorted(plan.assignments):
        w.writerow((pid, plan.assignments[pid]))
    atomic_write_text(out / "folds.csv", rows.getvalue())
    summary, timings = {}, {}
    for spec in _spec_list(cfg):
        fam = spec.family.value
        t0 = time.perf_counter()
        results = cross_validate(spec, data, plan, _family_cfg(cfg, fam), cfg.aggregation, cfg.task.value)
        best = best_fold(results)
        for r in results:
            save_checkpoint(out / fam / f"fold{r.fold}.ckpt", r.model, spec,
                            {"fold": r.fold, "best_epoch": r.state.best_epoch, "seed": cfg.seed})
            write_log(r.logs, out / fam / f"fold{r.fold}_log.csv")
        oof = sorted((s for r in results for s in r.val_scores), key=lambda s: s.entity_id)
        write_scores(oof, out / fam / "oof_patients.csv")
        cv = {"family": fam, "spec": spec.to_dict(), "best_fold": best.fold,
              "trained": fam not in cfg.forward_only,
              "folds": [{"fold": r.fold, "val_auroc": r.val_auroc, "epochs": len(r.logs),
                         "best_epoch": r.state.best_epoch,
                         "best_val_loss": r.state.best_val_loss if math.isfinite(r.state.best_val_loss) else None}
                        for r in results]}
        atomic_write_text(out / fam / "cv.json", _dump(cv))
        summary[fam] = {"best_fold": best.fold, "val_auroc": [r.val_auroc for r in results]}
        timings[fam] = round(time.perf_counter() - t0, 3)
    _write_meta(cfg, "train", started, {"summary": summary, "family_seconds": timings})
    return summary


def _load_family(cfg: RunConfig, fam: str):
    d = cfg.output_dir / "train" / fam
    cv_path = d / "cv.json"
    if not cv_path.is_file():
        raise ConfigError(f"{cv_path} missing; run 'train' first")
    cv = json.loads(cv_path.read_text())
    models = []
    for f in cv["folds"]:
        model, spec, _ = load_checkpoint(d / f"fold{f['fold']}.ckpt")
        models.append(model)
    return cv, spec, models


def stage_predict(cfg: RunConfig) -> dict:
    """Score the external cohort; without one, copy out-of-fold patient scores."""
    started = time.perf_counter()
    out = cfg.output_dir / "predict"
    has_test = "test" in _roles(cfg)
    data = _selected_dataset(cfg, "test") if has_test else None
    summary = {}
    for spec in _spec_list(cfg):
        fam = spec.family.value
        cv, spec, models = _load_family(cfg, fam)
        if data is None:
            oof = read_scores(cfg.output_dir / "train" / fam / "oof_patients.csv")
            write_scores(oof, out / f"{fam}_patients.csv")
            summary[fam] = {"source": "out-of-fold", "patients": len(oof)}
            continue
        best = models[cv["best_fold"]]
        chosen = models if cfg.selection == "ensemble" else [best]
        sized = data.resized(spec.input_px)
        tile_sets = [predict_tiles(m, sized, task=cfg.task.value) for m in chosen]
        tiles = [ScoreRow(rows[0].entity_id, rows[0].task, math.fsum(r.score for r in rows) / len(rows),
                          rows[0].label) for rows in zip(*tile_sets)]
        write_scores(tiles, out / f"{fam}_tiles.csv")
        best_rows = score_patients([best], data, spec.input_px, cfg.aggregation, cfg.task.value)
        ens_rows = score_patients(models, data, spec.input_px, cfg.aggregation, cfg.task.value)
        write_scores(best_rows, out / f"{fam}_patients_best.csv")
        write_scores(ens_rows, out / f"{fam}_patients_ensemble.csv")
        write_scores(ens_rows if cfg.selection == "ensemble" else best_rows, out / f"{fam}_patients.csv")
        summary[fam] = {"source": "external", "patients": len(best_rows), "tiles": len(tiles)}
    _write_meta(cfg, "predict", started, {"summary": summary})
    return summary


def evaluate_scores(rows: list[ScoreRow], name: str, cfg: RunConfig, out: Path) -> dict:
    rows = [r for r in rows if r.label is not None]
    if not rows:
        raise EmptyGroup(f"{name}: no labeled rows to evaluate")
    scores = [r.score for r in rows]
    labels = [r.label for r in rows]
    roc, pr = curve_export(scores, labels)
    reports = {}
    for metric, points, header, suffix in ((Metric.AUROC, roc, ("fpr", "tpr"), "roc"),
                                           (Metric.AUPRC, pr, ("recall", "precision"), "pr")):
        rep = bootstrap_ci(scores, labels, metric, cfg.n_bootstrap, cfg.level, cfg.seed)
        reports[metric.value] = rep.to_dict()
        atomic_write_text(out / f"{name}_{suffix}.csv", format_curve(points, header))
        plotting.plot_curve(points, rep, out / f"{name}_{suffix}.svg", title=name)
    doc = {"name": name, "task": rows[0].task, "n_patients": len(rows), "metrics": reports}
    atomic_write_text(out / f"{name}.json", _dump(doc))
    return doc


def stage_evaluate(cfg: RunConfig, scores: Path | None = None) -> dict:
    started = time.perf_counter()
    out = cfg.output_dir / "evaluate"
    scores = scores or cfg.scores
    docs = {}
    if scores is not None:
        docs[scores.stem] = evaluate_scores(read_scores(scores), scores.stem, cfg, out)
    else:
        for spec in _spec_list(cfg):
            fam = spec.family.value
            path = cfg.output_dir / "predict" / f"{fam}_patients.csv"
            if not path.is_file():
                raise ConfigError(f"{path} missing; run 'predict' first")
            docs[fam] = evaluate_scores(read_scores(path), fam, cfg, out)
    _write_meta(cfg, "evaluate", started, {"evaluated": sorted(docs)})
    return docs


def stage_benchmark(cfg: RunConfig) -> list[dict]:
    started = time.perf_counter()
    out = cfg.output_dir / "benchmark"
    role = "test" if cfg.test_manifest is not None else "train"
    data = _selected_dataset(cfg, role)
    rows = []
    for spec in _spec_list(cfg):
        rep = timing_harness(spec, data.resized(spec.input_px), cfg.train)
        rows.append({"family": spec.family.value, "parameter_count": rep.parameter_count,
                     "toy_parameter_count": count_parameters(spec), "n_tiles": rep.n_tiles,
                     "epoch_train_seconds": rep.epoch_train_seconds,
                     "full_prediction_seconds": rep.full_prediction_seconds})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_text(out / "timing.csv", buf.getvalue())
    atomic_write_text(out / "timing.json", _dump(rows))
    plotting.plot_size_vs(rows, "full_prediction_seconds", out / "size_vs_time.svg", "Prediction time (s)")
    _write_meta(cfg, "benchmark", started)
    return rows


SUMMARY_COLUMNS = ("family", "task", "parameter_count", "toy_parameter_count", "trained", "n_patients",
                   "AUROC", "AUROC_ci_low", "AUROC_ci_high", "AUPRC", "AUPRC_ci_low", "AUPRC_ci_high")


def stage_report(cfg: RunConfig) -> list[dict]:
    started = time.perf_counter()
    out = cfg.output_dir / "report"
    rows = []
    for spec in _spec_list(cfg):
        fam = spec.family.value
        path = cfg.output_dir / "evaluate" / f"{fam}.json"
        if not path.is_file():
            raise ConfigError(f"{path} missing; run 'evaluate' first")
        doc = json.loads(path.read_text())
        m = doc["metrics"]
        rows.append({"family": fam, "task": doc["task"],
                     "parameter_count": count_parameters(reference_spec(spec.family)),
                     "toy_parameter_count": count_parameters(spec),
                     "trained": "yes" if fam not in cfg.forward_only else "forward-only",
                     "n_patients": doc["n_patients"],
                     "AUROC": m["AUROC"]["point_estimate"], "AUROC_ci_low": m["AUROC"]["ci_low"],
                     "AUROC_ci_high": m["AUROC"]["ci_high"], "AUPRC": m["AUPRC"]["point_estimate"],
                     "AUPRC_ci_low": m["AUPRC"]["ci_low"], "AUPRC_ci_high": m["AUPRC"]["ci_high"]})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_text(out / "summary.csv", buf.getvalue())
    atomic_write_text(out / "summary.txt", format_table(rows))
    plotting.plot_size_vs(rows, "AUROC", out / "size_vs_auroc.svg", "AUROC",
                          err_keys=("AUROC_ci_low", "AUROC_ci_high"))
    _write_meta(cfg, "report", started)
    return rows


def format_table(rows: list[dict]) -> str:
    header = ["Model", "Task", "# of Params", "Trained", "AUROC (95% CI)", "AUPRC (95% CI)"]
    body = [[r["family"], r["task"], f"{r['parameter_count'] / 1e6:.2f}M", r["trained"],
             f"{r['AUROC']:.3f} ({r['AUROC_ci_low']:.3f}-{r['AUROC_ci_high']:.3f})",
             f"{r['AUPRC']:.3f} ({r['AUPRC_ci_low']:.3f}-{r['AUPRC_ci_high']:.3f})"] for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths)).rstrip()
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(b) for b in body]) + "\n"


def run_pipeline(cfg: RunConfig, benchmark: bool = False) -> list[dict]:
    stage_preprocess(cfg)
    stage_tissue(cfg)
    stage_train(cfg)
    stage_predict(cfg)
    stage_evaluate(cfg)
    if benchmark:
        stage_benchmark(cfg)
    return stage_report(cfg)


DEMO_CONFIG = """\
[run]
task = MSI
seed = {seed}
threads = 1
output_dir = out

[paths]
train_manifest = data/train_manifest.jsonl
test_manifest = data/test_manifest.jsonl

[tissue]
cap = 500

[train]
folds = 5
families = {families}
forward_only = {forward_only}
learning_rate = 0.0001
max_epochs = {epochs}
patience = 5
batch_size = 16
aggregation = mean
selection = best

[metrics]
n_bootstrap = 1000
level = 0.95
"""

DEMO_TRAINED = ("ResNet18", "Sequencer2D")


def write_demo(root: Path, seed: int, n_train: int, n_test: int, epochs: int) -> Path:
    from .synthetic import write_demo_cohort
    write_demo_cohort(root / "data", n_train=n_train, n_test=n_test, seed=seed)
    families = [f.value for f in Family]
    text = DEMO_CONFIG.format(seed=seed, epochs=epochs, families=", ".join(families),
                              forward_only=", ".join(f for f in families if f not in DEMO_TRAINED))
    path = root / "tilebench.ini"
    atomic_write_text(path, text)
    return path


# --- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="INI run configuration")
    common.add_argument("--seed", type=int, help="global seed (default: $TILEBENCH_SEED or 0)")
    common.add_argument("--threads", type=int, help="thread cap for every stage")
    common.add_argument("-o", "--output-dir", type=Path)
    common.add_argument("--manifest", type=Path, help="training cohort manifest")
    common.add_argument("--test-manifest", type=Path, help="external test cohort manifest")
    common.add_argument("--families", help="comma-separated model families")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tilebench", description="Tile-based biomarker prediction pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("preprocess", parents=[common], help="tessellate, QC, normalize and resize tiles")
    ts = sub.add_parser("tissue-select", parents=[common], help="score tissue classes, sample tumor tiles")
    ts.add_argument("--tissue-scores", type=Path, help="external nine-class score file")
    sub.add_parser("train", parents=[common], help="cross-validated training per family")
    pr = sub.add_parser("predict", parents=[common], help="tile and patient scores")
    pr.add_argument("--selection", choices=("best", "ensemble"))
    ev = sub.add_parser("evaluate", parents=[common], help="AUROC/AUPRC with bootstrap CIs")
    ev.add_argument("--scores", type=Path, help="score table to evaluate instead of predictions")
    ev.add_argument("--n-bootstrap", type=int)
    sub.add_parser("benchmark", parents=[common], help="epoch and prediction timing per family")
    sub.add_parser("report", parents=[common], help="collate evaluations into the summary table")
    demo = sub.add_parser("demo", parents=[common], help="synthetic cohort plus full pipeline")
    demo.add_argument("--dir", type=Path, default=Path("tilebench-demo"))
    demo.add_argument("--patients", type=int, default=60)
    demo.add_argument("--test-patients", type=int, default=30)
    demo.add_argument("--epochs", type=int, default=3)
    demo.add_argument("--generate-only", action="store_true")
    demo.add_argument("--benchmark", action="store_true", help="also run the timing harness")
    return p


def _config_from_args(args) -> RunConfig:
    overrides = {"seed": args.seed, "threads": args.threads, "output_dir": args.output_dir,
                 "train_manifest": args.manifest, "test_manifest": args.test_manifest}
    if args.families:
        overrides["families"] = tuple(f.strip() for f in args.families.split(",") if f.strip())
        for f in overrides["families"]:
            try:
                Family(f)
            except ValueError:
                raise ConfigError(f"unknown family {f!r}") from None
    for attr, key in (("tissue_scores", "tissue_scores"), ("selection", "selection"),
                      ("scores", "scores"), ("n_bootstrap", "n_bootstrap")):
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    return load_run_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "demo":
            seed = args.seed if args.seed is not None else default_seed()
            path = write_demo(args.dir, seed, args.patients, args.test_patients, args.epochs)
            print(f"demo cohort and config written to {path}")
            if args.generate_only:
                return 0
            args.config = path
            cfg = _config_from_args(args)
            torch.set_num_threads(cfg.threads)
            rows = run_pipeline(cfg, benchmark=args.benchmark)
            sys.stdout.write((cfg.output_dir / "report" / "summary.txt").read_text())
            return 0 if rows else 3
        cfg = _config_from_args(args)
        torch.set_num_threads(cfg.threads)
        cmd = args.command
        if cmd == "preprocess":
            result = stage_preprocess(cfg)
        elif cmd == "tissue-select":
            result = stage_tissue(cfg)
        elif cmd == "train":
            result = stage_train(cfg)
        elif cmd == "predict":
            result = stage_predict(cfg)
        elif cmd == "evaluate":
            result = stage_evaluate(cfg)
            for name, doc in result.items():
                for metric, rep in doc["metrics"].items():
                    print(f"{name}\t{metric}\t{rep['point_estimate']:.4f}\t"
                          f"[{rep['ci_low']:.4f}, {rep['ci_high']:.4f}]")
            return 0
        elif cmd == "benchmark":
            result = stage_benchmark(cfg)
        elif cmd == "report":
            stage_report(cfg)
            sys.stdout.write((cfg.output_dir / "report" / "summary.txt").read_text())
            return 0
        else:  # pragma: no cover - argparse restricts choices
            raise ConfigError(f"unknown command {cmd}")
        print(json.dumps(result, sort_keys=True, default=str))
        return 0
    except TilebenchError as exc:
        print(f"tilebench: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"tilebench: numeric error: {exc}", file=sys.stderr)
        return NumericError.exit_code
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"tilebench: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
