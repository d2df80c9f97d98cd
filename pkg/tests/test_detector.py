import numpy as np
import pytest

import tsdet.tensor as T
from tsdet.checks import DETECTOR_CHECK_H, _detector_checks
from tsdet.detector import (DetectorConfig, ProposalBatch, anchor_boxes,
                            backbone_forward, forward_full, image_to_tensor,
                            init_detector_params, is_regression_param,
                            match_boxes, predict, roi_forward, rpn_forward,
                            select_proposals)
from tsdet.geometry import Box, Detection, decode_deltas, iou
from tsdet.synth import generate_scene
from tsdet.tensor import ShapeMismatch, grad_check

CFG = DetectorConfig()


def proposals_oracle(obj_data, deltas_data, cfg, k, nms_iou):
    """Brute-force proposal selection written against the documented rule."""
    anchors = anchor_boxes(cfg)
    scores = 1.0 / (1.0 + np.exp(-np.asarray(obj_data, dtype=np.float64).reshape(-1)))
    deltas = np.asarray(deltas_data, dtype=np.float64).reshape(-1, 4)
    size = float(cfg.image_size)
    candidates = []
    for a in range(len(anchors)):
        box = decode_deltas(anchors[a], deltas[a], clip_size=(size, size))
        if box.width < 1.0 or box.height < 1.0:
            continue
        candidates.append((a, box, scores[a]))
    candidates.sort(key=lambda t: (-t[2], t[0]))
    kept = []
    for a, box, s in candidates:
        if len(kept) == k:
            break
        if all(iou(box, kb) < nms_iou for _, kb, _ in kept):
            kept.append((a, box, s))
    return [a for a, _, _ in kept]


def match_oracle(boxes, gt_boxes, mode, cfg):
    """Exhaustive argmax-IoU matching reference."""
    n = len(boxes)
    pos = np.zeros(n, dtype=bool)
    neg = np.zeros(n, dtype=bool)
    matched = np.full(n, -1)
    for i, b in enumerate(boxes):
        ious = [iou(b, g) for g in gt_boxes]
        best = max(ious) if ious else 0.0
        j = int(np.argmax(ious)) if ious else -1
        if mode == "rpn":
            if best >= cfg.rpn_pos_iou:
                pos[i], matched[i] = True, j
            elif best < cfg.rpn_neg_iou:
                neg[i] = True
        else:
            if best >= cfg.roi_pos_iou:
                pos[i], matched[i] = True, j
            else:
                neg[i] = True
    for j, g in enumerate(gt_boxes):
        ious = [iou(b, g) for b in boxes]
        i = int(np.argmax(ious))
        if ious[i] > 0:
            pos[i], neg[i], matched[i] = True, False, j
    if mode == "roi":
        neg = ~pos
    return pos, neg, matched


class TestBackbone:
    def test_output_shape(self):
        params = init_detector_params(CFG, 0)
        image = np.zeros((96, 96, 3), dtype=np.float32)
        feats = backbone_forward(params, image_to_tensor(image), CFG)
        assert feats.shape == (1, 32, 12, 12)

    def test_zero_image_zero_bias_gives_zero_features(self):
        params = init_detector_params(CFG, 0)
        for name, t in params.items():
            if name.endswith(".b"):
                t.data[...] = 0
        image = np.full((96, 96, 3), 0.5, dtype=np.float32)  # centers to exactly zero
        feats = backbone_forward(params, image_to_tensor(image), CFG)
        np.testing.assert_array_equal(feats.data, 0.0)

    def test_wrong_shape_rejected(self):
        params = init_detector_params(CFG, 0)
        with pytest.raises(ShapeMismatch):
            backbone_forward(params, image_to_tensor(np.zeros((48, 96, 3), dtype=np.float32)), CFG)


class TestRpn:
    def test_shapes(self):
        params = init_detector_params(CFG, 0)
        feats = backbone_forward(params, image_to_tensor(generate_scene(0).image), CFG)
        obj, deltas = rpn_forward(params, feats, CFG)
        assert obj.shape == (12, 12)
        assert deltas.shape == (12, 12, 4)

    def test_anchor_placement(self):
        anchors = anchor_boxes(CFG)
        first = anchors[0]
        assert first.center == (4.0, 4.0)
        assert first.width == 24.0 and first.height == 24.0
        assert decode_deltas(first, (0, 0, 0, 0)) == first
        # row-major: anchor at cell (0, 1) sits one stride to the right
        assert anchors[1].center == (12.0, 4.0)
        assert anchors[12].center == (4.0, 12.0)


class TestSelectProposals:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        obj = rng.normal(0, 1, (12, 12)).astype(np.float32)
        deltas = rng.normal(0, 0.3, (12, 12, 4)).astype(np.float32)
        got = select_proposals(T.Tensor(obj), T.Tensor(deltas), CFG, k=10, nms_iou=0.6)
        assert got.cells == proposals_oracle(obj, deltas, CFG, 10, 0.6)

    def test_k_one_keeps_best(self):
        rng = np.random.default_rng(1)
        obj = rng.normal(0, 1, (12, 12)).astype(np.float32)
        deltas = np.zeros((12, 12, 4), dtype=np.float32)
        got = select_proposals(T.Tensor(obj), T.Tensor(deltas), CFG, k=1, nms_iou=0.5)
        assert len(got) == 1
        assert got.cells[0] == int(obj.argmax())

    def test_equal_scores_tie_by_cell_index(self):
        obj = np.zeros((12, 12), dtype=np.float32)
        deltas = np.zeros((12, 12, 4), dtype=np.float32)
        got = select_proposals(T.Tensor(obj), T.Tensor(deltas), CFG, k=5, nms_iou=0.9)
        assert got.cells == sorted(got.cells)
        assert got.cells[0] == 0

    def test_boxes_clipped(self):
        obj = np.zeros((12, 12), dtype=np.float32)
        deltas = np.full((12, 12, 4), 0.8, dtype=np.float32)
        got = select_proposals(T.Tensor(obj), T.Tensor(deltas), CFG, k=20, nms_iou=0.9)
        for b in got.boxes:
            assert 0 <= b.x1 <= b.x2 <= 96
            assert 0 <= b.y1 <= b.y2 <= 96


class TestRoiHead:
    def test_shapes_and_determinism(self):
        params = init_detector_params(CFG, 0)
        feats = backbone_forward(params, image_to_tensor(generate_scene(0).image), CFG)
        boxes = [Box(10, 10, 40, 40), Box(50, 50, 90, 90), Box(10, 10, 40, 40)]
        props = ProposalBatch(boxes=boxes, scores=np.ones(3), cells=[0, 1, 2])
        logits, deltas = roi_forward(params, feats, props, CFG)
        assert logits.shape == (3, 8)
        assert deltas.shape == (3, 4)
        # identical proposals get identical rows
        np.testing.assert_array_equal(logits.data[0], logits.data[2])
        np.testing.assert_array_equal(deltas.data[0], deltas.data[2])

    def test_empty_batch_rejected(self):
        params = init_detector_params(CFG, 0)
        feats = backbone_forward(params, image_to_tensor(generate_scene(0).image), CFG)
        with pytest.raises(ValueError, match="non-empty"):
            roi_forward(params, feats, ProposalBatch([], np.zeros(0), []), CFG)


class TestMatch:
    def test_identical_proposal_is_positive(self):
        gt = [Box(10, 10, 30, 30)]
        m = match_boxes([Box(10, 10, 30, 30)], gt, [4], "roi", CFG)
        assert m.positive[0]
        assert m.gt_classes[m.matched_gt[0]] == 4

    def test_disjoint_proposal_is_background(self):
        gt = [Box(10, 10, 30, 30)]
        m = match_boxes([Box(60, 60, 90, 90)], gt, [1], "roi", CFG)
        assert not m.positive[0]
        assert m.negative[0]

    def test_best_anchor_forced_positive(self):
        # no anchor reaches the 0.5 threshold for this small box, but its
        # best anchor must still be claimed
        gt = [Box(40, 40, 50, 50)]
        anchors = anchor_boxes(CFG)
        m = match_boxes(anchors, gt, [0], "rpn", CFG)
        assert m.positive.sum() >= 1

    @pytest.mark.parametrize("seed", range(15))
    @pytest.mark.parametrize("mode", ["rpn", "roi"])
    def test_matches_exhaustive_oracle(self, seed, mode):
        rng = np.random.default_rng(seed)
        boxes = []
        for _ in range(12):
            x, y = rng.uniform(0, 70, 2)
            w, h = rng.uniform(5, 25, 2)
            boxes.append(Box(x, y, x + w, y + h))
        gts = []
        for _ in range(3):
            x, y = rng.uniform(0, 70, 2)
            w, h = rng.uniform(8, 25, 2)
            gts.append(Box(x, y, x + w, y + h))
        m = match_boxes(boxes, gts, [0, 1, 2], mode, CFG)
        pos, neg, matched = match_oracle(boxes, gts, mode, CFG)
        np.testing.assert_array_equal(m.positive, pos)
        np.testing.assert_array_equal(m.negative, neg)
        np.testing.assert_array_equal(m.matched_gt, matched)

    def test_no_gt_all_negative(self):
        m = match_boxes([Box(0, 0, 10, 10)], [], [], "rpn", CFG)
        assert not m.positive[0] and m.negative[0]


class TestPredict:
    def test_score_floor_one_empty(self):
        params = init_detector_params(CFG, 0)
        assert predict(params, generate_scene(0).image, 1.0, CFG) == []

    def test_untrained_outputs_satisfy_invariants(self):
        params = init_detector_params(CFG, 3)
        blank = np.zeros((96, 96, 3), dtype=np.float32)
        dets = predict(params, blank, 0.0, CFG)
        for d in dets:
            assert isinstance(d, Detection)
            assert 0.0 <= d.score <= 1.0
            assert 0 <= d.class_id < CFG.num_classes
            assert 0 <= d.box.x1 < d.box.x2 <= 96

    def test_pure_function_of_inputs(self):
        params = init_detector_params(CFG, 1)
        image = generate_scene(4).image
        assert predict(params, image, 0.1, CFG) == predict(params, image, 0.1, CFG)


class TestForwardFull:
    def test_injection_respects_cap(self):
        params = init_detector_params(CFG, 0)
        scene = generate_scene(1)
        boxes = [b for b, _ in scene.annotations] * 5
        out = forward_full(params, scene.image, CFG, inject_boxes=boxes)
        assert len(out.proposals) <= CFG.max_proposals
        assert out.roi_logits.shape[0] == len(out.proposals)

    def test_teacher_student_shape_congruence(self):
        a = init_detector_params(CFG, 0)
        b = init_detector_params(CFG, 99)
        assert a.shapes_match(b)

    def test_regression_param_naming(self):
        params = init_detector_params(CFG, 0)
        reg = [n for n in params.names() if is_regression_param(n)]
        assert sorted(reg) == ["roi.reg.b", "roi.reg.w", "rpn.delta.b", "rpn.delta.w"]


class TestDetectorGradients:
    @pytest.mark.parametrize("stage", range(3))
    def test_stage_gradients_match_finite_differences(self, stage):
        name, f, point = _detector_checks(2)[stage]
        report = grad_check(f, point, tol=1e-4, h=DETECTOR_CHECK_H,
                            max_probes_per_param=25, probe_seed=2)
        assert report.passed, f"{name}: {report}"
