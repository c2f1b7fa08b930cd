"""Detectors, training and evaluation for the perception stack.

Two detectors share the proposal stage and the conv trunk:

* ``TwoStageDetector``: proposals, trunk features, linear SVM.
* ``MultiTaskDetector``: proposals, trunk, softmax class head and box
  regression head trained jointly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import NormalizationStats
from .detect import ConvTrunk, ProposalConfig, crop_resize, iou_matrix, nms, propose_regions
from .network import (MultiTaskNet, RegionSet, TrainConfig, apply_offsets, build_regions, fit_stats,
                      train_multitask)
from .scene import BACKGROUND, DetectionBox, SceneConfig, SceneImage, generate_scene
from .svm import SvmConfig, SvmModel, svm_classify, svm_train


def _clip_boxes(boxes: np.ndarray, height: int, width: int) -> np.ndarray:
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out


def _to_detections(boxes, classes, scores, nms_iou: float) -> list[DetectionBox]:
    obj = np.nonzero(classes != BACKGROUND)[0]
    valid = obj[(boxes[obj, 2] > boxes[obj, 0]) & (boxes[obj, 3] > boxes[obj, 1])]
    if valid.size == 0:
        return []
    keep = valid[nms(boxes[valid], scores[valid], nms_iou)]
    return [DetectionBox(int(classes[i]), tuple(float(v) for v in boxes[i]), float(np.clip(scores[i], 0, 1)))
            for i in keep]


@dataclass
class TwoStageDetector:
    trunk: ConvTrunk
    svm: SvmModel
    proposals: ProposalConfig = ProposalConfig()
    nms_iou: float = 0.05

    def detect(self, image) -> list[DetectionBox]:
        pixels = getattr(image, "pixels", image)
        boxes, edge = propose_regions(pixels, self.proposals)
        if len(boxes) == 0:
            return []
        feats = self.trunk.forward(crop_resize(pixels, boxes))
        cls, _ = svm_classify(self.svm, feats)
        # survivors are ranked by edge energy: the tightest window wins
        return _to_detections(boxes, cls, edge, self.nms_iou)


@dataclass
class MultiTaskDetector:
    net: MultiTaskNet
    proposals: ProposalConfig = ProposalConfig()
    nms_iou: float = 0.05
    refine: bool = True

    def detect(self, image) -> list[DetectionBox]:
        pixels = getattr(image, "pixels", image)
        _, h, w = pixels.shape
        boxes, _ = propose_regions(pixels, self.proposals)
        if len(boxes) == 0:
            return []
        probs, offsets = self.net.predict(crop_resize(pixels, boxes))
        cls = np.argmax(probs, axis=1)
        score = probs[np.arange(len(cls)), cls]
        if self.refine:
            boxes = _clip_boxes(apply_offsets(boxes, offsets), h, w)
        return _to_detections(boxes, cls, score, self.nms_iou)


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------

def match_detections(detections, annotations, iou_threshold: float = 0.5) -> list[int | None]:
    """Greedy one-to-one matching of ground truths to same-class detections.

    Returns, per annotation, the index of its detection or ``None``. Pairs
    are taken in decreasing IoU order.
    """
    out: list[int | None] = [None] * len(annotations)
    if not detections or not annotations:
        return out
    m = iou_matrix([a.box for a in annotations], [d.box for d in detections])
    same = np.array([[a.class_id == d.class_id for d in detections] for a in annotations])
    m = np.where(same, m, -1.0)
    used = set()
    for flat in np.argsort(-m, axis=None, kind="stable"):
        i, j = divmod(int(flat), len(detections))
        if m[i, j] < iou_threshold:
            break
        if out[i] is None and j not in used:
            out[i] = j
            used.add(j)
    return out


@dataclass
class DetectionReport:
    objects: int = 0
    correct: int = 0
    detections: int = 0
    false_positives: int = 0
    frame_ms: list[float] = field(default_factory=list, repr=False)

    @property
    def accuracy(self) -> float:
        return self.correct / self.objects if self.objects else 1.0

    @property
    def precision(self) -> float:
        return 1.0 - self.false_positives / self.detections if self.detections else 1.0


def evaluate_detector(detector, scenes, iou_threshold: float = 0.5) -> DetectionReport:
    """Fraction of ground-truth objects found with the right class at IoU >= ``iou_threshold``."""
    import time

    rep = DetectionReport()
    for scene in scenes:
        t0 = time.perf_counter()
        dets = detector.detect(scene)
        rep.frame_ms.append(1e3 * (time.perf_counter() - t0))
        matched = match_detections(dets, scene.annotations, iou_threshold)
        rep.objects += len(scene.annotations)
        rep.correct += sum(m is not None for m in matched)
        rep.detections += len(dets)
        rep.false_positives += len(dets) - sum(m is not None for m in matched)
    return rep


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class PerceptionConfig:
    scene: SceneConfig = SceneConfig()
    proposals: ProposalConfig = ProposalConfig()
    train: TrainConfig = TrainConfig()
    svm: SvmConfig = SvmConfig()
    train_scenes: int = 400
    channels: tuple[int, ...] = (8, 8, 16, 16)
    nms_iou: float = 0.05   # objects never overlap, so near-duplicate boxes are suppressed hard


@dataclass
class PerceptionModel:
    net: MultiTaskNet
    svm: SvmModel
    history: object = None

    def two_stage(self, cfg: PerceptionConfig = PerceptionConfig()) -> TwoStageDetector:
        return TwoStageDetector(self.net.trunk, self.svm, cfg.proposals, cfg.nms_iou)

    def multitask(self, cfg: PerceptionConfig = PerceptionConfig()) -> MultiTaskDetector:
        return MultiTaskDetector(self.net, cfg.proposals, cfg.nms_iou)

    def params(self) -> dict[str, np.ndarray]:
        p = self.net.params()
        p.update(self.svm.params())
        st = self.net.trunk.stats
        p["trunk.stats"] = np.array([st.mean, st.std])
        return p

    @classmethod
    def from_params(cls, p, channels=(8, 8, 16, 16)) -> "PerceptionModel":
        """Rebuild from :meth:`params` output (for example a loaded checkpoint)."""
        net = MultiTaskNet.init(np.random.default_rng(0), channels)
        net.set_params(p)
        mean, std = np.asarray(p["trunk.stats"])
        net.trunk.stats = NormalizationStats(tuple(mean), tuple(std))
        return cls(net, SvmModel.from_params(p))


def train_perception(cfg: PerceptionConfig, rng: np.random.Generator, scene_seeds=None,
                     on_epoch=None) -> PerceptionModel:
    """Train the multi-task network, then an SVM on its frozen trunk features."""
    if scene_seeds is None:
        scene_seeds = rng.integers(0, 2**63 - 1, size=cfg.train_scenes)
    scenes = [generate_scene(int(s), cfg.scene) for s in scene_seeds]
    regions = build_regions(scenes, rng, cfg.proposals)
    net = MultiTaskNet.init(rng, cfg.channels)
    net.trunk.stats = fit_stats(regions)
    hist = train_multitask(net, regions, cfg.train, rng, on_epoch)
    feats = net.trunk.forward(regions.crops)
    svm = svm_train(feats, regions.labels, cfg.svm, rng, n_classes=3)
    return PerceptionModel(net, svm, hist)


def region_features(model: PerceptionModel, regions: RegionSet) -> np.ndarray:
    return model.net.trunk.forward(regions.crops)


def scene_stream(seeds, cfg: SceneConfig = SceneConfig()) -> list[SceneImage]:
    return [generate_scene(int(s), cfg) for s in seeds]
