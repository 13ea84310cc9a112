"""Ablation runs: positive-only baseline vs +tlloss vs +tlloss+simloss, over seeds."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import statistics
from pathlib import Path
from typing import Sequence

from .config import EvalConfig
from .dataset import ImageRecord
from .evaluation import evaluate_records, model_detector, write_report, write_roc_overlay
from .losses import LossWeights
from .metrics import EvalReport
from .pipeline import TrainConfig, load_checkpoint, model_from_checkpoint, train
from .plotting import plot_roc

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "tlloss", "tlloss+simloss")
SUMMARY_FIELDS = ("map", "auc", "sensitivity", "specificity", "accuracy")


def apply_ablation(weights: LossWeights, disable_tlloss: bool = False, disable_simloss: bool = False) -> LossWeights:
    return dataclasses.replace(
        weights,
        lambda2=0.0 if disable_tlloss else weights.lambda2,
        lambda4=0.0 if disable_simloss else weights.lambda4,
    )


def variant_weights(weights: LossWeights, variant: str) -> LossWeights:
    flags = {"baseline": (True, True), "tlloss": (False, True), "tlloss+simloss": (False, False)}
    if variant not in flags:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    return apply_ablation(weights, *flags[variant])


def train_and_evaluate(config: TrainConfig, train_records, test_records, out_dir, eval_cfg: EvalConfig) -> EvalReport:
    result = train(config, train_records, out_dir)
    model, _ = model_from_checkpoint(load_checkpoint(result.checkpoint))
    report = evaluate_records(test_records, model_detector(model, eval_cfg.score_floor),
                              eval_cfg.iou_threshold, eval_cfg.patient_threshold, eval_cfg.ap_mode)
    write_report(report, out_dir)
    return report


def run_ablation(
    config: TrainConfig,
    train_records: Sequence[ImageRecord],
    test_records: Sequence[ImageRecord],
    seeds: Sequence[int],
    out_dir,
    eval_cfg: EvalConfig | None = None,
    variants: Sequence[str] = VARIANTS,
) -> dict:
    """Train/evaluate every (seed, variant); write ``ablation.csv``, ``summary.json``
    and one ROC overlay figure per seed. Returns the summary."""
    eval_cfg = eval_cfg or EvalConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        curves, aucs = {}, {}
        for variant in variants:
            cfg = dataclasses.replace(config, seed=seed, weights=variant_weights(config.weights, variant))
            run_dir = out / f"seed{seed}" / variant.replace("+", "_")
            report = train_and_evaluate(cfg, train_records, test_records, run_dir, eval_cfg)
            log.info("seed %d %s: auc %.3f spec %.3f sens %.3f", seed, variant, report.auc,
                     report.specificity, report.sensitivity)
            rows.append({"seed": seed, "variant": variant, **{f: getattr(report, f) for f in SUMMARY_FIELDS}})
            curves[variant], aucs[variant] = report.roc, report.auc
        write_roc_overlay(curves, out / f"roc_seed{seed}.csv")
        plot_roc(curves, out / f"roc_seed{seed}.png", aucs)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["seed", "variant", *SUMMARY_FIELDS])
        w.writeheader()
        w.writerows(rows)
    summary = {
        v: {f: statistics.median(r[f] for r in rows if r["variant"] == v) for f in SUMMARY_FIELDS}
        for v in variants
    }
    summary["rows"] = rows
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
