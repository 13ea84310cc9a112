import numpy as np
import pytest
import torch

from oracles import nms_ref, roi_pool_ref
from suspectdet.anchors import AnchorConfig
from suspectdet.geometry import MAX_LOG_SCALE, decode_boxes
from suspectdet.model import (
    Backbone,
    BackboneConfig,
    Detector,
    DetectorConfig,
    build_detector,
    propose,
    roi_cells,
    roi_pool,
)


def small_detector(seed=0, **det):
    return build_detector(
        32,
        AnchorConfig(stride=4),
        BackboneConfig(widths=[8, 16, 16], output_stride=4),
        DetectorConfig(roi_size=2, head_hidden=32, pre_nms_top_n=300, train_post_nms_top_n=50,
                       test_post_nms_top_n=50, **det),
        seed=seed,
    )


class TestBackbone:
    def test_default_shape(self):
        out = Backbone(BackboneConfig())(torch.zeros(1, 1, 512, 512))
        assert out.shape == (1, 64, 32, 32)

    def test_stride_eight(self):
        out = Backbone(BackboneConfig(widths=[8, 8, 8], output_stride=8))(torch.zeros(1, 1, 64, 64))
        assert out.shape == (1, 8, 8, 8)

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            Backbone(BackboneConfig(widths=[8, 8], output_stride=8))
        with pytest.raises(ValueError):
            Backbone(BackboneConfig(output_stride=12))

    def test_rejects_wrong_input(self):
        bb = Backbone(BackboneConfig(widths=[8, 8], output_stride=2))
        with pytest.raises(ValueError):
            bb(torch.zeros(1, 1, 16, 18))
        with pytest.raises(ValueError):
            bb(torch.zeros(1, 1, 15, 15))

    def test_pure(self):
        bb = Backbone(BackboneConfig(widths=[8, 8], output_stride=2))
        x = torch.rand(1, 1, 16, 16)
        assert torch.equal(bb(x), bb(x))


class TestDetector:
    def test_anchor_count_default(self):
        model = Detector(512)
        assert len(model.anchors) == 15360
        with torch.no_grad():
            logits, deltas = model.rpn_forward(model.features(torch.zeros(512, 512)))
        assert logits.shape == (15360,)
        assert deltas.shape == (15360, 4)

    def test_stride_mismatch(self):
        with pytest.raises(ValueError):
            Detector(64, AnchorConfig(stride=8), BackboneConfig(output_stride=16))

    def test_wrong_image_size(self):
        with pytest.raises(ValueError):
            small_detector().features(torch.zeros(64, 64))

    def test_scores_are_probabilities(self):
        model = small_detector()
        logits, _ = model.rpn_forward(model.features(torch.rand(32, 32)))
        p = torch.sigmoid(logits)
        assert ((p > 0) & (p < 1)).all()

    def test_rpn_gradient_reaches_backbone(self):
        model = small_detector()
        logits, deltas = model.rpn_forward(model.features(torch.rand(32, 32)))
        (torch.sigmoid(logits).sum() + deltas.sum()).backward()
        first = model.backbone.body[0].weight.grad
        assert first is not None and first.abs().sum() > 0

    def test_anchor_order_matches_layout(self):
        # logit n belongs to location (n // A) in row-major order, shape n % A
        model = small_detector()
        feat = torch.zeros_like(model.features(torch.zeros(32, 32)))
        feat[:, 2, 5] = 1.0
        with torch.no_grad():
            base, _ = model.rpn_forward(torch.zeros_like(feat))
            logits, _ = model.rpn_forward(feat)
        changed = np.flatnonzero((logits - base).abs().numpy() > 0)
        A = model.anchor_config.per_location
        locs = set((changed // A).tolist())
        assert (2 * model.feature_side + 5) in locs
        centers = (model.anchors[:, :2] + model.anchors[:, 2:]) / 2
        for loc in locs:
            r, c = divmod(loc, model.feature_side)
            assert abs(r - 2) <= 1 and abs(c - 5) <= 1  # 3x3 receptive field
            assert np.allclose(centers[loc * A], [(c + 0.5) * 4, (r + 0.5) * 4])

    def test_same_seed_same_weights(self):
        a, b = small_detector(seed=5), small_detector(seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestPropose:
    def _setup(self, rng, n=400, side=64):
        xy = rng.uniform(0, side - 8, size=(n, 2))
        anchors = np.hstack([xy, xy + rng.uniform(4, 20, size=(n, 2))])
        return anchors, rng.uniform(size=n), rng.normal(scale=0.2, size=(n, 4))

    def test_matches_step_by_step(self, rng):
        for _ in range(10):
            anchors, scores, deltas = self._setup(rng)
            boxes, idx, kept_scores = propose(scores, deltas, anchors, 30, 0.7, 64, pre_nms_top_n=200)
            order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:200]
            dec = decode_boxes(deltas[order], anchors[order], clip=64, max_log_scale=MAX_LOG_SCALE)
            ok = [k for k in range(len(order)) if dec[k, 2] > dec[k, 0] and dec[k, 3] > dec[k, 1]]
            keep = nms_ref(dec[ok].tolist(), scores[np.array(order)[ok]].tolist(), 0.7)[:30]
            want = [order[ok[k]] for k in keep]
            assert idx.tolist() == want
            assert np.allclose(kept_scores, scores[want])
            assert np.allclose(boxes, dec[[ok[k] for k in keep]])

    def test_top_one_is_best(self, rng):
        anchors, scores, deltas = self._setup(rng)
        _, idx, _ = propose(scores, deltas, anchors, 1, 0.7, 64)
        assert idx.tolist() == [int(np.argmax(scores))]

    def test_bounded_and_inside(self, rng):
        anchors, scores, deltas = self._setup(rng)
        boxes, _, s = propose(scores, deltas * 10, anchors, 25, 0.5, 64)
        assert len(boxes) <= 25
        assert (boxes >= 0).all() and (boxes <= 64).all()
        assert (np.diff(s) <= 0).all()


class TestRoiPool:
    def test_cells_minimum_one(self):
        cells = roi_cells([[5.0, 5.0, 5.2, 5.0]], 4, 8, 8)
        assert cells.tolist() == [[1, 1, 2, 2]]

    def test_cells_clipped(self):
        cells = roi_cells([[-10.0, 20.0, 100.0, 40.0]], 4, 8, 8)
        assert cells.tolist() == [[0, 5, 8, 8]]

    def test_aligned_grid(self):
        feat = torch.arange(16, dtype=torch.float64).reshape(1, 4, 4)
        out = roi_pool(feat, [[0.0, 0.0, 16.0, 16.0]], 2, 4)
        assert out[0, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]

    def test_matches_reference(self, rng):
        feat = rng.normal(size=(3, 8, 8))
        ft = torch.as_tensor(feat)
        for _ in range(200):
            x0, y0 = rng.uniform(-4, 30, size=2)
            box = [x0, y0, x0 + rng.uniform(0, 30), y0 + rng.uniform(0, 30)]
            size = int(rng.integers(1, 5))
            got = roi_pool(ft, [box], size, 4)[0].numpy()
            assert np.array_equal(got, roi_pool_ref(feat, box, size, 4))

    def test_empty(self):
        assert roi_pool(torch.zeros(2, 4, 4), np.zeros((0, 4)), 3, 4).shape == (0, 2, 3, 3)

    def test_gradient_flows_to_argmax(self):
        feat = torch.zeros(1, 4, 4, requires_grad=True)
        with torch.no_grad():
            feat[0, 1, 1] = 1.0
        roi_pool(feat, [[0.0, 0.0, 8.0, 8.0]], 1, 4).sum().backward()
        assert feat.grad[0, 1, 1] == 1.0
        assert feat.grad.sum() == 1.0


class TestHead:
    def test_probabilities_sum_to_one(self):
        model = small_detector()
        feat = model.features(torch.rand(32, 32))
        logits, deltas, hidden = model.head(model.roi_features(feat, [[0, 0, 16, 16], [8, 8, 30, 20]]))
        assert logits.shape == (2, 2)
        assert deltas.shape == (2, 8)
        assert hidden.shape == (2, 32)
        assert torch.allclose(torch.softmax(logits, 1).sum(1), torch.ones(2))

    def test_gradient_reaches_head(self):
        model = small_detector()
        logits, deltas, _ = model.head(model.roi_features(model.features(torch.rand(32, 32)), [[0, 0, 16, 16]]))
        (logits.sum() + deltas.sum()).backward()
        for p in (model.fc1.weight, model.cls_score.weight, model.bbox_pred.weight):
            assert p.grad is not None and p.grad.abs().sum() > 0


class TestPredict:
    def test_blank_image(self):
        dets = small_detector().predict(torch.zeros(32, 32), score_floor=0.0)
        assert len(dets) <= 100
        for d in dets:
            assert 0 <= d.box.x_min < d.box.x_max <= 32
            assert 0 <= d.score <= 1
        assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)

    def test_floor_filters(self):
        assert small_detector().predict(torch.zeros(32, 32), score_floor=1.01) == []

    def test_deterministic(self):
        img = torch.rand(32, 32, generator=torch.Generator().manual_seed(1))
        a = small_detector().predict(img, score_floor=0.0)
        b = small_detector().predict(img, score_floor=0.0)
        assert [(d.box, d.score) for d in a] == [(d.box, d.score) for d in b]
