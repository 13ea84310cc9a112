import hashlib
import json

import numpy as np
import pytest

from conftest import tiny_synth_config
from suspectdet.dataset import load_image, load_manifest
from suspectdet.synthdata import SynthConfig, dataset_stats, generate_dataset, image_rng, render_image


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestGenerate:
    def test_counts_and_manifest(self, tiny_dataset):
        out, splits = tiny_dataset
        cfg = tiny_synth_config()
        train = load_manifest(out / "train" / "manifest.json")
        assert sum(r.is_positive for r in train) == cfg.n_train_positive
        assert sum(not r.is_positive for r in train) == cfg.n_train_negative
        assert len(splits["test"]) == cfg.n_test_positive + cfg.n_test_negative
        for r in train:
            assert r.path.exists()
            assert load_image(r).shape == (32, 32)
            assert bool(r.boxes) == r.is_positive
            lo, hi = cfg.targets_per_positive
            if r.is_positive:
                assert lo <= len(r.boxes) <= hi

    def test_boxes_inside_and_sized(self, tiny_dataset):
        _, splits = tiny_dataset
        cfg = tiny_synth_config()
        for r in splits["train"] + splits["test"]:
            for b in r.boxes:
                assert 0 <= b.x_min < b.x_max <= 32 and 0 <= b.y_min < b.y_max <= 32
                assert cfg.size_min <= b.width <= cfg.size_max

    def test_byte_identical(self, tmp_path):
        cfg = tiny_synth_config()
        generate_dataset(cfg, tmp_path / "a")
        generate_dataset(cfg, tmp_path / "b")
        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_seed_changes_output(self, tmp_path):
        generate_dataset(tiny_synth_config(), tmp_path / "a")
        generate_dataset(tiny_synth_config(seed=4), tmp_path / "b")
        assert digest(tmp_path / "a") != digest(tmp_path / "b")

    def test_patient_grouping(self, tmp_path):
        splits = generate_dataset(tiny_synth_config(images_per_patient=2), tmp_path)
        pos = [r.patient_id for r in splits["train"] if r.is_positive]
        assert pos == ["train-pos-0000", "train-pos-0000", "train-pos-0001", "train-pos-0001",
                       "train-pos-0002", "train-pos-0002"]


class TestRender:
    def test_blobs_do_not_overlap(self, rng):
        cfg = SynthConfig()
        for _ in range(20):
            _, t, d = render_image(rng, cfg, 2, 2)
            boxes = np.vstack([t, d])
            for i in range(4):
                for j in range(i + 1, 4):
                    a, b = boxes[i], boxes[j]
                    assert a[0] > b[2] or b[0] > a[2] or a[1] > b[3] or b[1] > a[3]

    def test_rim_separates_targets_from_decoys(self):
        # a fixed threshold on a low quantile inside the box tells the classes apart
        cfg = SynthConfig(rim_gap=0.5)
        thr = cfg.background - cfg.rim_gap / 2
        correct = total = 0
        for i in range(60):
            img, t, d = render_image(image_rng(cfg, "train", "positive", i), cfg, 1, 1)
            for boxes, is_target in ((t, True), (d, False)):
                x0, y0, x1, y1 = np.round(boxes[0]).astype(int)
                patch = img[y0:y1, x0:x1].ravel()
                correct += (np.sort(patch)[4] < thr) == is_target
                total += 1
        assert correct == total

    def test_range(self, rng):
        img, _, _ = render_image(rng, SynthConfig(noise=0.5), 2, 2)
        assert img.min() >= 0.0 and img.max() <= 1.0


class TestValidate:
    @pytest.mark.parametrize("kw, msg", [
        ({"rim_gap": 0.0}, "rim_gap"),
        ({"size_min": 30.0, "size_max": 20.0}, "size_min"),
        ({"size_max": 80.0, "image_side": 128}, "anchor"),
        ({"targets_per_positive": (0, 2)}, "at least one"),
        ({"decoys_per_negative": (3, 1)}, "lo <= hi"),
        ({"images_per_patient": 0}, "images_per_patient"),
    ])
    def test_errors(self, kw, msg):
        with pytest.raises(ValueError, match=msg):
            SynthConfig(**kw).validate()


class TestStats:
    def test_empty(self):
        s = dataset_stats([])
        assert s["images"] == 0 and s["positive_fraction"] == 0.0 and s["box_side_min"] is None

    def test_known_manifest(self, tmp_path):
        doc = {"records": [
            {"image": "a.png", "patient_id": "p1", "polarity": "positive",
             "boxes": [{"x_min": 0, "y_min": 0, "x_max": 10, "y_max": 4},
                       {"x_min": 0, "y_min": 0, "x_max": 20, "y_max": 30}]},
            {"image": "b.png", "patient_id": "p1", "polarity": "negative", "boxes": []},
            {"image": "c.png", "patient_id": "p2", "polarity": "negative", "boxes": []},
        ]}
        (tmp_path / "m.json").write_text(json.dumps(doc))
        s = dataset_stats(load_manifest(tmp_path / "m.json"))
        assert s["images"] == 3 and s["patients"] == 2 and s["boxes"] == 2
        assert s["positive_fraction"] == pytest.approx(1 / 3)
        assert (s["box_side_min"], s["box_side_max"]) == (10.0, 30.0)
        assert s["box_side_histogram"]["8-16"] == 1 and s["box_side_histogram"]["24-32"] == 1
