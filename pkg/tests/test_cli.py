import csv
import dataclasses
import json

import pytest
import torch
import yaml

from conftest import tiny_synth_config, tiny_train_config
from suspectdet.cli import UsageError, build_parser, cmd_evaluate, main
from suspectdet.config import RunConfig, dump_config
from suspectdet.dataset import load_manifest
from suspectdet.evaluation import OVERLAY_HEADER, ROC_HEADER
from suspectdet.losses import LossWeights
from suspectdet.model import Detection
from suspectdet.pipeline import load_checkpoint, train


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "run.yaml"
    dump_config(RunConfig(synth=tiny_synth_config(), train=tiny_train_config(iterations=4)), cfg_path)
    assert main(["generate", "--config", str(cfg_path), "--out", str(root / "data")]) == 0
    return root, cfg_path


def oracle(record):
    """Exact ground truth for positives, nothing for negatives."""
    return [Detection(b, 0.99) for b in record.boxes]


class TestGenerate:
    def test_layout(self, workspace, capsys):
        root, _ = workspace
        for split in ("train", "test"):
            assert (root / "data" / split / "manifest.json").exists()
        assert yaml.safe_load((root / "data" / "config.yaml").read_text())["synth"]["image_side"] == 32

    def test_missing_section_named(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text("evaluate: {}\n")
        assert main(["generate", "--config", str(p), "--out", str(tmp_path / "d")]) == 1
        assert "missing config key 'synth'" in capsys.readouterr().err

    def test_invalid_synth(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text("synth: {rim_gap: 0.0}\n")
        assert main(["generate", "--config", str(p), "--out", str(tmp_path / "d")]) == 1
        assert "rim_gap" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text("synth: {rim_gapp: 0.4}\n")
        assert main(["generate", "--config", str(p), "--out", str(tmp_path / "d")]) == 1
        assert "rim_gapp" in capsys.readouterr().err


class TestTrainEvaluate:
    def test_train_then_evaluate(self, workspace, tmp_path):
        root, cfg = workspace
        run = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(run)]) == 0
        for name in ("checkpoint.pt", "loss.csv", "loss.png", "config.yaml"):
            assert (run / name).exists()
        ev = tmp_path / "eval"
        assert main(["evaluate", "--checkpoint", str(run / "checkpoint.pt"), "--data", str(root / "data"),
                     "--out", str(ev), "--config", str(cfg)]) == 0
        report = json.loads((ev / "report.json").read_text())
        for key in ("map", "sensitivity", "specificity", "accuracy", "auc", "confusion", "roc"):
            assert key in report
        with open(ev / "roc.csv") as fh:
            assert next(csv.reader(fh)) == ROC_HEADER
        assert (ev / "roc.png").exists()

    def test_ablation_flags_equal_weight_edits(self, workspace, tmp_path):
        root, cfg = workspace
        run = tmp_path / "flags"
        assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(run),
                     "--disable-tlloss", "--disable-simloss", "--iterations", "3"]) == 0
        saved = load_checkpoint(run / "checkpoint.pt")
        assert saved["config"]["weights"]["lambda2"] == 0.0
        assert saved["config"]["weights"]["lambda4"] == 0.0
        edited = tiny_train_config(iterations=3, weights=LossWeights(lambda2=0.0, lambda4=0.0))
        direct = train(edited, load_manifest(root / "data" / "train" / "manifest.json"), tmp_path / "direct")
        ref = load_checkpoint(direct.checkpoint)["model"]
        for k, v in saved["model"].items():
            assert torch.equal(v, ref[k]), k

    def test_config_mismatch(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        run = tmp_path / "run"
        main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(run), "--iterations", "1"])
        other = tmp_path / "other.yaml"
        tc = tiny_train_config(detector=dataclasses.replace(tiny_train_config().detector, head_hidden=64))
        dump_config(RunConfig(train=tc), other)
        assert main(["evaluate", "--checkpoint", str(run / "checkpoint.pt"), "--data", str(root / "data"),
                     "--out", str(tmp_path / "e"), "--config", str(other)]) == 1
        assert "train.detector" in capsys.readouterr().err

    def test_missing_dataset(self, workspace, tmp_path, capsys):
        _, cfg = workspace
        assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1
        assert "no train manifest" in capsys.readouterr().err

    def test_missing_checkpoint_is_runtime_error(self, workspace, tmp_path):
        root, _ = workspace
        assert main(["evaluate", "--checkpoint", str(tmp_path / "x.pt"), "--data", str(root / "data"),
                     "--out", str(tmp_path / "e")]) == 2

    def test_bad_arguments(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--config"])
        assert exc.value.code == 1


class TestOracleEvaluation:
    def _args(self, root, out):
        return build_parser().parse_args(["evaluate", "--checkpoint", "unused", "--data", str(root / "data"),
                                          "--out", str(out)])

    def test_perfect_detector(self, workspace, tmp_path):
        root, _ = workspace
        assert cmd_evaluate(self._args(root, tmp_path), detect=oracle) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["map"] == 1.0
        assert report["auc"] == 1.0
        assert report["sensitivity"] == report["specificity"] == report["accuracy"] == 1.0

    def test_empty_test_set(self, tmp_path, capsys):
        (tmp_path / "m.json").write_text('{"records": []}')
        args = build_parser().parse_args(["evaluate", "--checkpoint", "unused", "--data", str(tmp_path / "m.json"),
                                          "--out", str(tmp_path / "o")])
        with pytest.raises(UsageError, match="empty test set"):
            cmd_evaluate(args, detect=oracle)


class TestRoc:
    def test_overlay_passes_points_through(self, workspace, tmp_path):
        root, _ = workspace
        args = build_parser().parse_args(["evaluate", "--checkpoint", "unused", "--data", str(root / "data"),
                                          "--out", str(tmp_path / "a")])
        cmd_evaluate(args, detect=oracle)
        args.out = str(tmp_path / "b")
        cmd_evaluate(args, detect=lambda r: [Detection(b, 0.3) for b in r.boxes])
        out = tmp_path / "overlay"
        assert main(["roc", str(tmp_path / "a" / "report.json"), str(tmp_path / "b" / "report.json"),
                     "--labels", "good,weak", "--out", str(out)]) == 0
        with open(out / "roc_overlay.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == OVERLAY_HEADER
        for label, sub in (("good", "a"), ("weak", "b")):
            with open(tmp_path / sub / "roc.csv") as fh:
                single = list(csv.reader(fh))[1:]
            assert [r[1:] for r in rows[1:] if r[0] == label] == single
        assert (out / "roc_overlay.png").exists()

    def test_label_count_mismatch(self, tmp_path):
        assert main(["roc", "x.json", "--labels", "a,b", "--out", str(tmp_path)]) == 1
