from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import pytest
import torch

from suspectdet.anchors import AnchorConfig
from suspectdet.config import load_config
from suspectdet.model import BackboneConfig, DetectorConfig
from suspectdet.pipeline import TrainConfig
from suspectdet.synthdata import SynthConfig, generate_dataset

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.yaml"

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(name: str, ok: bool, detail: str = ""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_train_config(**overrides) -> TrainConfig:
    """32x32 images, stride 4: fast enough for per-test training steps."""
    base = TrainConfig(
        image_side=32,
        iterations=10,
        base_lr=1e-3,
        anchors=AnchorConfig(stride=4),
        backbone=BackboneConfig(widths=[8, 16, 16], output_stride=4),
        detector=DetectorConfig(roi_size=2, head_hidden=32, pre_nms_top_n=300,
                                train_post_nms_top_n=50, test_post_nms_top_n=50),
        roi_batch=32,
        log_interval=5,
        checkpoint_interval=5,
    )
    return dataclasses.replace(base, **overrides)


def tiny_synth_config(**overrides) -> SynthConfig:
    base = SynthConfig(image_side=32, n_train_positive=6, n_train_negative=4, n_test_positive=3,
                       n_test_negative=3, size_min=6.0, size_max=10.0, targets_per_positive=(1, 2),
                       decoys_per_negative=(1, 2), seed=3)
    return dataclasses.replace(base, **overrides)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    splits = generate_dataset(tiny_synth_config(), out)
    return out, splits


@pytest.fixture(scope="session")
def desk_config():
    return load_config(DESK_CONFIG)
