"""Multi-task detection head: shared conv trunk, class scores and box offsets.

Training minimises, per region, cross-entropy on the class plus ``lam``
times the smooth-L1 box loss (the box term only for object regions).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import (NormalizationStats, OptimizerState, conv2d_grad, dense, dense_grad, exponential_lr,
                      he_normal, max_pool2d_grad, relu_grad, sgd_step, smooth_l1, smooth_l1_grad, softmax,
                      softmax_cross_entropy)
from .detect import ConvTrunk, ProposalConfig, crop_resize, iou_matrix, propose_regions
from .scene import BACKGROUND, N_CLASSES

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.3


def box_offsets(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Corner offsets of ``targets`` relative to ``proposals``, in units of proposal size."""
    w = proposals[:, 2] - proposals[:, 0]
    h = proposals[:, 3] - proposals[:, 1]
    scale = np.stack([w, h, w, h], axis=1)
    return (targets - proposals) / scale


def apply_offsets(proposals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    w = proposals[:, 2] - proposals[:, 0]
    h = proposals[:, 3] - proposals[:, 1]
    return proposals + offsets * np.stack([w, h, w, h], axis=1)


@dataclass
class RegionSet:
    """Labelled crops for training: class id and box offsets per region."""
    crops: np.ndarray
    labels: np.ndarray
    offsets: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "RegionSet":
        return RegionSet(self.crops[idx], self.labels[idx], self.offsets[idx])


def label_regions(boxes: np.ndarray, annotations) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Label each box by its best-overlapping ground truth.

    IoU >= 0.5 takes that object's class, IoU < 0.3 is background, anything
    in between is ambiguous and flagged by ``keep == False``.
    """
    n = len(boxes)
    labels = np.full(n, BACKGROUND, dtype=np.intp)
    offsets = np.zeros((n, 4))
    keep = np.ones(n, dtype=bool)
    if annotations:
        gt = np.array([a.box for a in annotations], dtype=np.float64)
        m = iou_matrix(boxes, gt)
        best = m.argmax(axis=1)
        best_iou = m[np.arange(n), best]
        pos = best_iou >= POSITIVE_IOU
        labels[pos] = [annotations[j].class_id for j in best[pos]]
        offsets[pos] = box_offsets(boxes[pos], gt[best[pos]])
        keep = pos | (best_iou < NEGATIVE_IOU)
    return labels, offsets, keep


def build_regions(scenes, rng: np.random.Generator, prop_cfg: ProposalConfig = ProposalConfig(),
                  jitter: int = 2, background_ratio: float = 3.0) -> RegionSet:
    """Proposals plus jittered ground-truth boxes from each scene, labelled.

    Background regions are subsampled to ``background_ratio`` per object region.
    """
    crops, labels, offsets = [], [], []
    for scene in scenes:
        boxes, _ = propose_regions(scene, prop_cfg)
        extra = []
        for a in scene.annotations:
            b = np.array(a.box)
            extra.append(b)
            for _ in range(jitter):
                d = rng.integers(-1, 2, size=4)
                j = b + d
                if j[2] > j[0] and j[3] > j[1]:
                    extra.append(j)
        if extra:
            boxes = np.vstack([boxes, np.array(extra)])
        lab, off, keep = label_regions(boxes, scene.annotations)
        boxes, lab, off = boxes[keep], lab[keep], off[keep]
        if len(boxes):
            crops.append(crop_resize(scene.pixels, boxes))
            labels.append(lab)
            offsets.append(off)
    crops = np.concatenate(crops)
    labels = np.concatenate(labels)
    offsets = np.concatenate(offsets)
    pos = np.nonzero(labels != BACKGROUND)[0]
    neg = np.nonzero(labels == BACKGROUND)[0]
    n_neg = min(len(neg), int(round(background_ratio * max(len(pos), 1))))
    neg = np.sort(rng.choice(neg, size=n_neg, replace=False)) if n_neg < len(neg) else neg
    idx = np.sort(np.concatenate([pos, neg]))
    return RegionSet(crops[idx], labels[idx], offsets[idx])


@dataclass
class MultiTaskNet:
    trunk: ConvTrunk
    cls_w: np.ndarray
    cls_b: np.ndarray
    reg_w: np.ndarray
    reg_b: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, channels=(8, 8, 16, 16)) -> "MultiTaskNet":
        trunk = ConvTrunk.init(rng, channels)
        d = ConvTrunk.feature_dim(channels=channels)
        return cls(trunk, he_normal(rng, (N_CLASSES, d), d) * 0.1, np.zeros(N_CLASSES),
                   he_normal(rng, (4, d), d) * 0.01, np.zeros(4))

    def params(self) -> dict[str, np.ndarray]:
        p = self.trunk.params()
        p.update({"head.cls.w": self.cls_w, "head.cls.b": self.cls_b,
                  "head.reg.w": self.reg_w, "head.reg.b": self.reg_b})
        return p

    def set_params(self, p) -> None:
        self.trunk.set_params(p)
        self.cls_w, self.cls_b = np.asarray(p["head.cls.w"]), np.asarray(p["head.cls.b"])
        self.reg_w, self.reg_b = np.asarray(p["head.reg.w"]), np.asarray(p["head.reg.b"])

    def forward(self, crops: np.ndarray, cache: list | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Class logits ``(n, 3)`` and box offsets ``(n, 4)``."""
        f = self.trunk.forward(crops, cache)
        if cache is not None:
            cache.append(f)
        return dense(f, self.cls_w, self.cls_b), dense(f, self.reg_w, self.reg_b)

    def loss_and_grads(self, batch: RegionSet, lam: float = 1.0):
        """Mean multi-task loss over ``batch`` and its parameter gradients.

        Returns ``(total, classification_part, regression_part, grads)``.
        """
        cache: list = []
        logits, offsets = self.forward(batch.crops, cache)
        feats = cache.pop()
        n = len(batch)
        ce, g_logits = softmax_cross_entropy(logits, batch.labels)
        obj = (batch.labels != BACKGROUND)[:, None]
        reg = float(smooth_l1(offsets * obj, batch.offsets * obj))
        g_off = smooth_l1_grad(offsets, batch.offsets) * obj * lam / n
        g_logits = g_logits / n
        gf1, gcw, gcb = dense_grad(feats, self.cls_w, g_logits)
        gf2, grw, grb = dense_grad(feats, self.reg_w, g_off)
        grads = {"head.cls.w": gcw, "head.cls.b": gcb, "head.reg.w": grw, "head.reg.b": grb}
        grads.update(self._trunk_backward(cache, gf1 + gf2))
        cls_part = float(ce.mean())
        reg_part = reg / n
        return cls_part + lam * reg_part, cls_part, reg_part, grads

    def _trunk_backward(self, cache, g_feat):
        grads = {}
        last_shape = cache[-1][2].shape
        if len(cache) - 1 in ConvTrunk.POOL_AFTER:
            pooled = (last_shape[0], last_shape[1], last_shape[2] // 2, last_shape[3] // 2)
            g = g_feat.reshape(pooled)
        else:
            g = g_feat.reshape(last_shape)
        for i in range(len(cache) - 1, -1, -1):
            h_in, z, a = cache[i]
            if i in ConvTrunk.POOL_AFTER:
                g = max_pool2d_grad(a, g, 2)
            g = relu_grad(z, g)
            gi, gk, gb = conv2d_grad(h_in, self.trunk.kernels[i], g, 1, 1)
            grads[f"trunk.{i}.k"], grads[f"trunk.{i}.b"] = gk, gb
            g = gi
        return grads

    def predict(self, crops: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Class probabilities and box offsets."""
        logits, offsets = self.forward(crops)
        return softmax(logits), offsets


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr_start: float = 0.02
    lr_end: float = 2e-4
    momentum: float = 0.9
    lam: float = 1.0


@dataclass
class TrainHistory:
    total: list[float] = field(default_factory=list)
    classification: list[float] = field(default_factory=list)
    regression: list[float] = field(default_factory=list)


def fit_stats(regions: RegionSet) -> NormalizationStats:
    return NormalizationStats.from_images(regions.crops)


def train_multitask(net: MultiTaskNet, regions: RegionSet, cfg: TrainConfig, rng: np.random.Generator,
                    on_epoch=None) -> TrainHistory:
    """Minibatch SGD with momentum and an exponentially decaying learning rate."""
    opt = OptimizerState(cfg.lr_start, cfg.momentum)
    hist = TrainHistory()
    n = len(regions)
    for epoch in range(cfg.epochs):
        opt.learning_rate = exponential_lr(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)
        order = rng.permutation(n)
        tot = cl = rg = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            t, c, r, grads = net.loss_and_grads(regions.subset(idx), cfg.lam)
            net.set_params(sgd_step(net.params(), grads, opt))
            k = len(idx)
            tot, cl, rg = tot + t * k, cl + c * k, rg + r * k
        hist.total.append(tot / n)
        hist.classification.append(cl / n)
        hist.regression.append(rg / n)
        if on_epoch is not None:
            on_epoch(epoch, hist)
    return hist


def evaluate_loss(net: MultiTaskNet, regions: RegionSet, lam: float = 1.0) -> tuple[float, float, float]:
    t, c, r, _ = net.loss_and_grads(regions, lam)
    return t, c, r
