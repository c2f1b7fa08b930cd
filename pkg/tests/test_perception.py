import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskdrive.perception import (BACKGROUND, PEDESTRIAN, VEHICLE, ConvTrunk, DetectionBox, MultiTaskNet,
                                  ProposalConfig, SceneConfig, SceneFormatError, SceneImage, SvmConfig,
                                  SvmModel, TrackerConfig, Tracker, TrainConfig, build_regions,
                                  crop_resize, extract_features, extract_features_batch, frame_correctness,
                                  generate_scene, generate_sequence, iou, iou_matrix, load_scene,
                                  match_detections, nms, propose_regions, save_scene, sliding_windows,
                                  svm_classify, svm_train, track_step)
from deskdrive.perception.network import apply_offsets, box_offsets, evaluate_loss, train_multitask
from deskdrive.perception.tracker import associate
from deskdrive.tensor import grad_check
from oracles import all_pairs_iou_brute, brute_force_linear_classifier


# ---------------------------------------------------------------- scenes

def test_scene_deterministic():
    a, b = generate_scene(7), generate_scene(7)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.annotations == b.annotations
    assert a != generate_scene(8)


def test_scene_pixels_and_boxes_in_bounds():
    for seed in range(50):
        s = generate_scene(seed)
        assert s.pixels.shape == (3, 32, 32)
        assert 0.0 <= s.pixels.min() and s.pixels.max() <= 1.0
        for a in s.annotations:
            x0, y0, x1, y1 = a.box
            assert 0 <= x0 < x1 <= 32 and 0 <= y0 < y1 <= 32


def test_scene_zero_objects():
    s = generate_scene(3, SceneConfig(count_range=(0, 0)))
    assert s.annotations == ()
    assert s.pixels.shape == (3, 32, 32)


def test_scene_class_balance():
    counts = np.zeros(2)
    for seed in range(1000):
        for a in generate_scene(seed).annotations:
            counts[a.class_id] += 1
    frac = counts[PEDESTRIAN] / counts.sum()
    # about 2000 objects: one standard error is 0.011
    assert abs(frac - SceneConfig().pedestrian_fraction) < 0.04


def test_scene_larger_image():
    s = generate_scene(0, SceneConfig(height=64, width=96))
    assert s.pixels.shape == (3, 64, 96)


@pytest.mark.parametrize("kw, field", [
    ({"count_range": (3, 1)}, "count_range"),
    ({"brightness_range": (0.9, 0.2)}, "brightness_range"),
    ({"noise": -0.1}, "noise"),
    ({"pedestrian_fraction": 1.5}, "pedestrian_fraction"),
])
def test_scene_config_rejects_bad_ranges(kw, field):
    with pytest.raises(ValueError, match=field):
        SceneConfig(**kw)


def test_detection_box_validation():
    with pytest.raises(ValueError):
        DetectionBox(VEHICLE, (5, 5, 5, 9))
    with pytest.raises(ValueError):
        DetectionBox(VEHICLE, (0, 0, 1, 1), score=1.5)
    with pytest.raises(ValueError):
        DetectionBox(7, (0, 0, 1, 1))


def test_scene_roundtrip(tmp_path):
    s = generate_scene(11)
    path = save_scene(s, tmp_path / "scene.bin")
    assert load_scene(path) == s
    assert (tmp_path / "scene.bin.boxes").read_text().count("\n") == len(s.annotations)


def test_scene_file_errors(tmp_path):
    path = save_scene(generate_scene(1), tmp_path / "s.bin")
    raw = path.read_bytes()
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(SceneFormatError, match="magic"):
        load_scene(path)
    path.write_bytes(raw[:-8])
    with pytest.raises(SceneFormatError):
        load_scene(path)


def test_sequence_objects_move_and_stay_visible():
    seq = generate_sequence(5, count_range=(2, 2))
    assert len(seq.frames) == 20 and seq.n_objects == 2
    for k in range(2):
        first = np.array(seq.frames[0].annotations[k].box)
        last = np.array(seq.frames[-1].annotations[k].box)
        step = (last - first) / 19
        assert np.all(np.abs(step) <= 1) and np.any(step != 0)
    for f in seq.frames:
        for a in f.annotations:
            assert 0 <= a.box[0] and a.box[2] <= 32 and 0 <= a.box[1] and a.box[3] <= 32


# ---------------------------------------------------------------- iou and nms

def test_iou_cases():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0   # touching edges
    assert iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3)


boxes = st.tuples(st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 5), st.floats(0.1, 5)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == pytest.approx(1.0)
    assert iou_matrix([a], [b])[0, 0] == pytest.approx(iou(a, b))


def test_iou_against_rasterised_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        lo = np.round(rng.uniform(0, 2, (2, 2)), 2)
        a, b = np.round(np.hstack([lo, lo + rng.uniform(0.3, 1.5, (2, 2))]), 2)
        assert iou(a, b) == pytest.approx(all_pairs_iou_brute(a, b), abs=0.01)


@settings(max_examples=50)
@given(st.lists(boxes, min_size=1, max_size=25), st.floats(0.0, 0.9), st.integers(0, 2**32 - 1))
def test_nms_subset_and_separation(bxs, thr, seed):
    scores = np.random.default_rng(seed).random(len(bxs))
    keep = nms(bxs, scores, thr)
    assert len(set(keep.tolist())) == len(keep) and set(keep.tolist()) <= set(range(len(bxs)))
    kept = np.array(bxs)[keep]
    m = iou_matrix(kept, kept)
    assert np.all(m[~np.eye(len(keep), dtype=bool)] <= thr + 1e-12)
    assert scores[keep[0]] == scores.max()


def test_nms_threshold_one_keeps_all():
    b = np.array([[0, 0, 4, 4], [0, 0, 4, 4], [1, 1, 5, 5]])
    assert sorted(nms(b, [0.3, 0.2, 0.9], 1.0).tolist()) == [0, 1, 2]
    cfg = ProposalConfig(nms_iou=1.0, max_proposals=None, pre_nms_top=None)
    boxes, _ = propose_regions(generate_scene(0), cfg)
    assert len(boxes) == len(sliding_windows(32, 32, cfg))


def test_nms_equal_scores_keep_input_order():
    b = np.array([[0, 0, 4, 4], [0, 0, 4, 4]])
    assert nms(b, [0.5, 0.5], 0.5).tolist() == [0]


# ---------------------------------------------------------------- proposals

def test_proposals_blank_image_near_zero():
    boxes, scores = propose_regions(np.full((3, 32, 32), 0.4))
    assert len(boxes) > 0
    assert scores.max() < 1e-12


def test_proposals_in_bounds_and_capped():
    cfg = ProposalConfig()
    for seed in range(20):
        boxes, scores = propose_regions(generate_scene(seed), cfg)
        assert len(boxes) <= cfg.max_proposals
        assert boxes[:, :2].min() >= 0 and boxes[:, 2].max() <= 32 and boxes[:, 3].max() <= 32
        assert np.all(np.diff(scores) <= 0)


def test_proposals_find_centred_vehicle():
    img = np.full((3, 32, 32), 0.3)
    img[:, 12:20, 10:22] = 0.9
    boxes, _ = propose_regions(img)
    assert iou_matrix(boxes, [(10, 12, 22, 20)]).max() >= 0.5


def test_proposal_recall_on_generated_scenes():
    # measured recall of generator + proposer at IoU 0.5: 1.0 over 300 scenes
    found = total = 0
    for seed in range(100):
        s = generate_scene(seed)
        boxes, _ = propose_regions(s)
        for a in s.annotations:
            total += 1
            found += iou_matrix(boxes, [a.box]).max() >= 0.5
    assert found / total >= 0.99


# ---------------------------------------------------------------- features

@pytest.fixture(scope="module")
def trunk():
    return ConvTrunk.init(np.random.default_rng(0))


def test_feature_dimension(trunk):
    s = generate_scene(2)
    f = extract_features(s, (4, 4, 14, 12), trunk)
    assert f.shape == (ConvTrunk.feature_dim(),) == (16 * 4 * 4,)
    assert extract_features_batch(s, [], trunk).shape == (0, 256)


def test_features_pure(trunk):
    s = generate_scene(2)
    assert np.array_equal(extract_features(s, (4, 4, 14, 12), trunk), extract_features(s, (4, 4, 14, 12), trunk))
    batch = extract_features_batch(s, [(4, 4, 14, 12), (1, 1, 9, 30)], trunk)
    assert np.allclose(batch[0], extract_features(s, (4, 4, 14, 12), trunk))


def test_degenerate_box_rejected(trunk):
    with pytest.raises(ValueError):
        extract_features(generate_scene(0), (5, 5, 5, 10), trunk)


def test_crop_resize_identity_scale():
    img = np.random.default_rng(0).random((3, 32, 32))
    # a 12.8 px square centred on 14 with context 1.25 is a 16 px crop on pixel centres 6..21
    crop = crop_resize(img, [(7.6, 7.6, 20.4, 20.4)], size=16, context=1.25)[0]
    assert np.allclose(crop, img[:, 6:22, 6:22])


def test_translated_object_closer_than_background(trunk):
    # objects on a static background drift 1 px/frame; compare frame 0 to frame 6
    for seed in range(10):
        seq = generate_sequence(seed, count_range=(1, 1))
        a0, a6 = seq.frames[0].annotations[0].box, seq.frames[6].annotations[0].box
        f0 = extract_features(seq.frames[0], a0, trunk)
        f6 = extract_features(seq.frames[6], a6, trunk)
        w, h = a0[2] - a0[0], a0[3] - a0[1]
        # background window of the same size, as far from the object as possible
        cands = [(x, y, x + w, y + h) for x in range(0, int(33 - w), 2) for y in range(0, int(33 - h), 2)]
        bg = min(cands, key=lambda b: max(iou(b, a0), iou(b, a6)) * 1e3 - abs(b[0] - a0[0]) - abs(b[1] - a0[1]))
        fb = extract_features(seq.frames[0], bg, trunk)
        assert np.linalg.norm(f0 - f6) < np.linalg.norm(f0 - fb)


# ---------------------------------------------------------------- svm

def test_svm_separable_toy():
    x = np.array([[0.0, 0.0], [0.2, 0.1], [2.0, 2.0], [2.1, 1.8]])
    y = np.array([0, 0, 1, 1])
    m = svm_train(x, y, SvmConfig(learning_rate=0.1, epochs=200, batch_size=4))
    cls, scores = svm_classify(m, x)
    assert cls.tolist() == [0, 0, 1, 1]
    assert scores.shape == (4, 2)


def test_svm_zero_weights_pick_class_zero():
    m = SvmModel.zeros(3, 5)
    cls, scores = svm_classify(m, np.ones(5))
    assert cls == 0 and not scores.any()


def test_svm_empty_class_rejected():
    with pytest.raises(ValueError, match="class 2"):
        svm_train(np.zeros((4, 2)), np.array([0, 1, 0, 1]), n_classes=3)


def test_svm_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        svm_classify(SvmModel.zeros(2, 3), np.ones(4))


def test_svm_matches_grid_search_reference():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, 200)
    x = rng.normal(0, 1, (200, 2)) + np.where(y[:, None] == 1, [1.2, 0.8], [-1.0, -0.6])
    # the perception defaults stop early on this toy; train it to convergence
    m = svm_train(x, y, SvmConfig(learning_rate=1e-2, epochs=100), np.random.default_rng(0))
    acc = np.mean(svm_classify(m, x)[0] == y)
    ref = brute_force_linear_classifier(x, y, np.linspace(-2, 2, 21))
    assert acc >= ref - 0.02


# ---------------------------------------------------------------- multi-task network

def test_box_offsets_roundtrip():
    p = np.array([[2.0, 3.0, 10.0, 9.0], [0.0, 0.0, 4.0, 4.0]])
    t = np.array([[1.0, 4.0, 11.0, 8.0], [0.5, 0.0, 4.0, 3.0]])
    assert np.allclose(apply_offsets(p, box_offsets(p, t)), t)


def test_multitask_gradients():
    rng = np.random.default_rng(0)
    net = MultiTaskNet.init(rng, channels=(2, 3, 3, 2))
    # zero-initialised biases put dead units exactly on the relu kink; move them off it
    net.set_params({k: v + rng.normal(0, 0.05, v.shape) if k.endswith(".b") else v
                    for k, v in net.params().items()})
    regions = build_regions([generate_scene(s) for s in range(3)], rng)
    batch = regions.subset(np.r_[np.nonzero(regions.labels != BACKGROUND)[0][:2],
                                 np.nonzero(regions.labels == BACKGROUND)[0][:2]])

    def fn(params, _):
        net.set_params(params)
        total, _, _, grads = net.loss_and_grads(batch, 0.7)
        return total, grads

    # a small step keeps the differences from crossing relu and max-pool kinks
    rep = grad_check(fn, net.params(), step=1e-7)
    assert rep.passed, rep.max_rel_error


def test_multitask_loss_decreases_without_momentum():
    rng = np.random.default_rng(1)
    regions = build_regions([generate_scene(s) for s in range(8)], rng)
    net = MultiTaskNet.init(rng)
    cfg = TrainConfig(epochs=6, batch_size=len(regions), lr_start=0.01, lr_end=0.01, momentum=0.0)
    losses = [evaluate_loss(net, regions)[0]]
    train_multitask(net, regions, cfg, rng, on_epoch=lambda e, h: losses.append(evaluate_loss(net, regions)[0]))
    assert np.all(np.diff(losses) < 0), losses


def test_multitask_zero_lambda_ignores_boxes():
    rng = np.random.default_rng(0)
    net = MultiTaskNet.init(rng)
    regions = build_regions([generate_scene(0)], rng)
    shifted = dataclasses.replace(regions, offsets=regions.offsets + 0.3)
    assert net.loss_and_grads(regions, 0.0)[0] == net.loss_and_grads(shifted, 0.0)[0]


# ---------------------------------------------------------------- detection matching

def test_match_detections_one_to_one():
    gt = (DetectionBox(VEHICLE, (0, 0, 10, 10)), DetectionBox(PEDESTRIAN, (20, 0, 24, 10)))
    dets = [DetectionBox(VEHICLE, (0, 0, 10, 9)), DetectionBox(VEHICLE, (0, 0, 10, 10)),
            DetectionBox(VEHICLE, (20, 0, 24, 10))]
    # the exact vehicle box wins; the pedestrian has no same-class detection
    assert match_detections(dets, gt) == [1, None]


# ---------------------------------------------------------------- tracking

class GroundTruthDetector:
    def detect(self, frame):
        return list(frame.annotations)


def test_tracker_empty_stream():
    tr = Tracker(GroundTruthDetector())
    blank = SceneImage(np.zeros((3, 32, 32)), ())
    for _ in range(5):
        assert track_step(tr, blank) == []
    assert len(tr.frame_ms) == 5


def test_tracker_single_object_keeps_one_id():
    seq = generate_sequence(4, count_range=(1, 1))
    tr = Tracker(GroundTruthDetector())
    outs = [track_step(tr, f) for f in seq.frames]
    assert {t.track_id for o in outs for t in o} == {0}
    assert outs[-1][0].age == 20
    assert all(frame_correctness(seq, outs))


def test_tracker_threshold_zero_matches_disjoint():
    tr = Tracker(None, TrackerConfig(iou_threshold=0.0))
    tr.update([DetectionBox(VEHICLE, (0, 0, 4, 4))])
    out = tr.update([DetectionBox(VEHICLE, (20, 20, 24, 24))])
    assert [t.track_id for t in out] == [0]
    # a positive threshold spawns a new track instead
    tr = Tracker(None, TrackerConfig(iou_threshold=0.3))
    tr.update([DetectionBox(VEHICLE, (0, 0, 4, 4))])
    assert sorted(t.track_id for t in tr.update([DetectionBox(VEHICLE, (20, 20, 24, 24))])) == [0, 1]


def test_tracker_coasts_then_retires():
    tr = Tracker(None, TrackerConfig(max_misses=2))
    det = DetectionBox(VEHICLE, (5, 5, 15, 12))
    tr.update([det])
    assert [t.misses for t in tr.update([])] == [1]
    assert [t.track_id for t in tr.update([det])] == [0]
    tr.update([])
    tr.update([])
    assert tr.update([]) == []
    assert [t.track_id for t in tr.update([det])] == [1]


def test_tracker_ids_never_reused():
    tr = Tracker(None, TrackerConfig(max_misses=0))
    seen = []
    for i in range(6):
        out = tr.update([DetectionBox(VEHICLE, (i * 5, 0, i * 5 + 3, 3))] if i % 2 == 0 else [])
        seen += [t.track_id for t in out]
    tr.reset()
    seen += [t.track_id for t in tr.update([DetectionBox(VEHICLE, (0, 0, 3, 3))])]
    assert seen == [0, 1, 2, 3]


def test_associate_greedy_by_iou():
    tracks = [(0, 0, 10, 10), (2, 0, 12, 10)]
    dets = [(2, 0, 12, 10)]
    assert associate(tracks, dets, 0.3) == [(1, 0)]
    assert associate([], dets, 0.3) == []


def test_frame_correctness_flags_id_switch():
    seq = generate_sequence(4, n_frames=4, count_range=(1, 1))
    from deskdrive.perception import TrackState
    box = lambda t: seq.frames[t].annotations[0]
    outs = [[TrackState(0, box(0), 1)], [TrackState(0, box(1), 2)], [TrackState(5, box(2), 1)],
            [TrackState(0, box(3), 4)]]
    assert frame_correctness(seq, outs) == [True, True, False, True]
    wrong_class = [[TrackState(0, dataclasses.replace(box(t), class_id=1 - box(t).class_id), 1)] for t in range(4)]
    assert not any(frame_correctness(seq, wrong_class))
    assert all(frame_correctness(seq, wrong_class, require_class=False))
