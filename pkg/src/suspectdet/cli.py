"""Command-line entry point: generate, train, evaluate, roc, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import evaluation
from .config import ConfigError, RunConfig, config_to_dict, dump_config, load_config
from .dataset import ManifestError, load_manifest
from .experiment import apply_ablation, run_ablation
from .pipeline import load_checkpoint, model_from_checkpoint, train
from .plotting import plot_loss_log, plot_roc
from .synthdata import dataset_stats, generate_dataset

log = logging.getLogger("suspectdet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MODEL_KEYS = ("image_side", "anchors", "backbone", "detector")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _manifest(data: Path, split: str) -> Path:
    """Accept either a manifest file or a dataset directory with ``<split>/manifest.json``."""
    if data.is_file():
        return data
    path = data / split / "manifest.json"
    if not path.exists():
        raise UsageError(f"no {split} manifest at {path}")
    return path


def _train_config(cfg: RunConfig, path):
    if cfg.train is None:
        raise ConfigError(f"{path}: missing config key 'train'")
    return cfg.train


def cmd_generate(args) -> int:
    cfg = load_config(args.config, require=("synth",))
    synth = cfg.synth
    if args.seed is not None:
        synth = dataclasses.replace(synth, seed=args.seed)
    try:
        synth.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    splits = generate_dataset(synth, args.out)
    dump_config(RunConfig(synth=synth), Path(args.out) / "config.yaml")
    stats = {name: dataset_stats(recs) for name, recs in splits.items()}
    print(json.dumps(stats, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, require=("train",))
    tc = _train_config(cfg, args.config)
    tc = dataclasses.replace(
        tc,
        weights=apply_ablation(tc.weights, args.disable_tlloss, args.disable_simloss),
        seed=tc.seed if args.seed is None else args.seed,
        iterations=tc.iterations if args.iterations is None else args.iterations,
        output_dir=str(args.out),
    )
    records = load_manifest(_manifest(Path(args.data), "train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(dataclasses.replace(cfg, train=tc), out / "config.yaml")
    result = train(tc, records, out, resume=args.resume)
    plot_loss_log(result.log, out / "loss.png")
    print(f"checkpoint: {result.checkpoint}\nloss log: {result.log}")
    return EXIT_OK


def cmd_evaluate(args, detect=None) -> int:
    """``detect`` overrides model inference (test hook for oracle detections)."""
    payload = load_checkpoint(args.checkpoint) if detect is None else None
    eval_cfg = RunConfig().evaluate
    if args.config:
        cfg = load_config(args.config)
        eval_cfg = cfg.evaluate
        if payload is not None and cfg.train is not None:
            mine = config_to_dict(cfg.train)
            theirs = payload["config"]
            diff = [k for k in MODEL_KEYS if mine.get(k) != theirs.get(k)]
            if diff:
                raise ConfigError(f"checkpoint/config mismatch in train.{diff[0]}")
    records = load_manifest(_manifest(Path(args.data), "test"))
    if not records:
        raise UsageError("empty test set")
    if detect is None:
        model, _ = model_from_checkpoint(payload)
        detect = evaluation.model_detector(model, eval_cfg.score_floor)
    report = evaluation.evaluate_records(records, detect, eval_cfg.iou_threshold,
                                         eval_cfg.patient_threshold, eval_cfg.ap_mode)
    json_path, roc_path = evaluation.write_report(report, args.out)
    if report.roc:
        plot_roc({args.label: report.roc}, Path(args.out) / "roc.png", {args.label: report.auc})
    print(json.dumps({k: v for k, v in report.to_json().items() if k != "roc"}, indent=2))
    print(f"report: {json_path}\nroc: {roc_path}")
    return EXIT_OK


def cmd_roc(args) -> int:
    if not args.reports:
        raise UsageError("roc needs at least one report.json")
    labels = args.labels.split(",") if args.labels else [Path(r).parent.name or str(r) for r in args.reports]
    if len(labels) != len(args.reports):
        raise UsageError(f"{len(labels)} labels for {len(args.reports)} reports")
    curves, aucs = {}, {}
    for label, path in zip(labels, args.reports):
        curves[label] = evaluation.read_report_roc(path)
        aucs[label] = json.loads(Path(path).read_text()).get("auc")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_roc_overlay(curves, out / "roc_overlay.csv")
    plot_roc(curves, out / "roc_overlay.png", {k: v for k, v in aucs.items() if v is not None})
    print(f"wrote {out / 'roc_overlay.csv'} and {out / 'roc_overlay.png'} ({len(curves)} curves)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, require=("train",))
    tc = _train_config(cfg, args.config)
    if args.iterations is not None:
        tc = dataclasses.replace(tc, iterations=args.iterations)
    data = Path(args.data)
    train_recs = load_manifest(_manifest(data, "train"))
    test_recs = load_manifest(_manifest(data, "test"))
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(dataclasses.replace(cfg, train=tc), out / "config.yaml")
    summary = run_ablation(tc, train_recs, test_recs, seeds, out, cfg.evaluate)
    print(json.dumps({k: v for k, v in summary.items() if k != "rows"}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="suspectdet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="paired positive/negative training")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="dataset directory or train manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--disable-tlloss", action="store_true", help="lambda2 = 0")
    t.add_argument("--disable-simloss", action="store_true", help="lambda4 = 0")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="mAP and patient-level metrics on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory or test manifest")
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="evaluate section; a train section is checked against the checkpoint")
    e.add_argument("--label", default="model")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("roc", help="overlay ROC curves from report.json files")
    r.add_argument("reports", nargs="*")
    r.add_argument("--labels", help="comma-separated curve labels")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_roc)

    a = sub.add_parser("ablate", help="baseline / +tlloss / +tlloss+simloss over seeds")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--iterations", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
