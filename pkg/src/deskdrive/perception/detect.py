"""Region proposals, overlap measures and crop features."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..tensor import NormalizationStats, conv2d, he_normal, max_pool2d, normalize, relu


def iou(a, b) -> float:
    """Intersection over union of two ``(x0, y0, x1, y1)`` boxes."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between box arrays ``(n, 4)`` and ``(m, 4)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(boxes, scores, iou_threshold: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices, best first.

    A box is dropped when its IoU with an already kept box exceeds
    ``iou_threshold``, so a threshold of 1.0 keeps everything. Equal scores
    keep input order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if iou_threshold >= 1.0:
        return order if max_keep is None else order[:max_keep]
    ordered = boxes[order]
    rest = np.arange(len(order))
    keep = []
    while rest.size and (max_keep is None or len(keep) < max_keep):
        i = rest[0]
        keep.append(order[i])
        rest = rest[1:]
        rest = rest[iou_matrix(ordered[i], ordered[rest])[0] <= iou_threshold]
    return np.asarray(keep, dtype=np.intp)


# ----------------------------------------------------------------------
# proposals
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ProposalConfig:
    widths: tuple[int, ...] = (3, 4, 6, 8, 10, 12, 14)
    heights: tuple[int, ...] = (6, 8, 10, 12, 14)
    stride: int = 1
    nms_iou: float = 0.5
    max_proposals: int | None = 32
    pre_nms_top: int | None = 1500   # highest-scoring windows passed to NMS

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride: must be at least 1")
        if not self.widths or not self.heights or min(self.widths + self.heights) < 1:
            raise ValueError("widths/heights: need positive window sizes")


def edge_maps(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channel-mean absolute differences across vertical and horizontal pixel edges.

    ``gx[r, c]`` is the jump between columns ``c - 1`` and ``c`` of row ``r``
    (zero at ``c = 0`` and ``c = W``); ``gy`` likewise for rows.
    """
    c, h, w = pixels.shape
    gx = np.zeros((h, w + 1))
    gy = np.zeros((h + 1, w))
    gx[:, 1:w] = np.abs(np.diff(pixels, axis=2)).mean(axis=0)
    gy[1:h, :] = np.abs(np.diff(pixels, axis=1)).mean(axis=0)
    return gx, gy


@lru_cache(maxsize=16)
def _windows_cached(height: int, width: int, cfg: ProposalConfig) -> np.ndarray:
    w = _sliding_windows(height, width, cfg)
    w.setflags(write=False)
    return w


def sliding_windows(height: int, width: int, cfg: ProposalConfig) -> np.ndarray:
    """All in-bounds windows ``(n, 4)`` for every width/height pair."""
    return _windows_cached(height, width, cfg)


def _sliding_windows(height: int, width: int, cfg: ProposalConfig) -> np.ndarray:
    out = []
    for ww in cfg.widths:
        for hh in cfg.heights:
            if ww > width or hh > height:
                continue
            xs = np.arange(0, width - ww + 1, cfg.stride)
            ys = np.arange(0, height - hh + 1, cfg.stride)
            x0, y0 = np.meshgrid(xs, ys)
            x0, y0 = x0.ravel(), y0.ravel()
            out.append(np.stack([x0, y0, x0 + ww, y0 + hh], axis=1))
    if not out:
        return np.zeros((0, 4))
    return np.concatenate(out).astype(np.float64)


def edge_energy(pixels: np.ndarray, windows: np.ndarray) -> np.ndarray:
    """Mean edge strength along each window's border, in [0, 1].

    A window hugging an object's outline collects the full object/background
    contrast on all four sides; a misaligned window cuts through flat areas.
    """
    gx, gy = edge_maps(pixels)
    # cumulative sums: vertical runs of gx, horizontal runs of gy
    cx = np.vstack([np.zeros((1, gx.shape[1])), np.cumsum(gx, axis=0)])
    cy = np.hstack([np.zeros((gy.shape[0], 1)), np.cumsum(gy, axis=1)])
    x0, y0, x1, y1 = (windows[:, i].astype(np.intp) for i in range(4))
    left = cx[y1, x0] - cx[y0, x0]
    right = cx[y1, x1] - cx[y0, x1]
    top = cy[y0, x1] - cy[y0, x0]
    bottom = cy[y1, x1] - cy[y1, x0]
    perimeter = 2 * (x1 - x0) + 2 * (y1 - y0)
    return (left + right + top + bottom) / perimeter


def propose_regions(image, cfg: ProposalConfig = ProposalConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Candidate boxes ``(n, 4)`` and their edge-energy scores, best first."""
    pixels = getattr(image, "pixels", image)
    _, h, w = pixels.shape
    windows = sliding_windows(h, w, cfg)
    scores = edge_energy(pixels, windows)
    if cfg.pre_nms_top is not None and len(scores) > cfg.pre_nms_top:
        top = np.sort(np.argpartition(-scores, cfg.pre_nms_top - 1)[:cfg.pre_nms_top])
        windows, scores = windows[top], scores[top]
    keep = nms(windows, scores, cfg.nms_iou, cfg.max_proposals)
    return windows[keep], scores[keep]


# ----------------------------------------------------------------------
# features
# ----------------------------------------------------------------------

CROP_SIZE = 16
CROP_CONTEXT = 1.25


def crop_resize(pixels: np.ndarray, boxes, size: int = CROP_SIZE, context: float = CROP_CONTEXT) -> np.ndarray:
    """Square crops around each box, bilinearly resampled to ``size x size``.

    The crop side is ``context * max(w, h)`` so the object's aspect ratio
    survives resampling. Samples outside the image take the nearest edge pixel.
    Returns ``(n, C, size, size)``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    bw, bh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    if np.any(bw <= 0) or np.any(bh <= 0):
        raise ValueError("degenerate box (zero area)")
    c, h, w = pixels.shape
    side = context * np.maximum(bw, bh)
    cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
    cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
    t = (np.arange(size) + 0.5) / size - 0.5
    # sample positions in pixel-centre coordinates
    px = cx[:, None] + side[:, None] * t[None, :] - 0.5
    py = cy[:, None] + side[:, None] * t[None, :] - 0.5
    px = np.clip(px, 0, w - 1)
    py = np.clip(py, 0, h - 1)
    x0 = np.minimum(np.floor(px).astype(np.intp), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(py).astype(np.intp), h - 2 if h > 1 else 0)
    fx = px - x0
    fy = py - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    # gather: (n, C, size_y, size_x)
    def g(yi, xi):
        return pixels[:, yi[:, :, None], xi[:, None, :]].transpose(1, 0, 2, 3)
    fx_ = fx[:, None, None, :]
    fy_ = fy[:, None, :, None]
    top = g(y0, x0) * (1 - fx_) + g(y0, x1) * fx_
    bot = g(y1, x0) * (1 - fx_) + g(y1, x1) * fx_
    return top * (1 - fy_) + bot * fy_


@dataclass
class ConvTrunk:
    """Four 3x3 conv+relu layers with a 2x2 max-pool after the second and fourth.

    Feature dimension is ``channels[-1] * (size // 4) ** 2`` (256 for the
    default 16x16 crop and channels (8, 8, 16, 16)).
    """

    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    stats: NormalizationStats = NormalizationStats((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))

    POOL_AFTER = (1, 3)

    @classmethod
    def init(cls, rng: np.random.Generator, channels=(8, 8, 16, 16), in_channels: int = 3) -> "ConvTrunk":
        ks, bs = [], []
        c_in = in_channels
        for c_out in channels:
            ks.append(he_normal(rng, (c_out, c_in, 3, 3), c_in * 9))
            bs.append(np.zeros(c_out))
            c_in = c_out
        return cls(ks, bs)

    @staticmethod
    def feature_dim(size: int = CROP_SIZE, channels=(8, 8, 16, 16)) -> int:
        return channels[-1] * (size // 4) ** 2

    def forward(self, crops: np.ndarray, cache: list | None = None) -> np.ndarray:
        """``(n, C, s, s)`` crops to ``(n, feature_dim)``; ``cache`` collects activations for backprop."""
        h = normalize(crops, self.stats)
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            z = conv2d(h, k, b, 1, 1)
            a = relu(z)
            if cache is not None:
                cache.append((h, z, a))
            h = max_pool2d(a, 2) if i in self.POOL_AFTER else a
        return h.reshape(h.shape[0], -1)

    def params(self) -> dict[str, np.ndarray]:
        p = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            p[f"trunk.{i}.k"] = k
            p[f"trunk.{i}.b"] = b
        return p

    def set_params(self, p) -> None:
        for i in range(len(self.kernels)):
            self.kernels[i] = np.asarray(p[f"trunk.{i}.k"], dtype=np.float64)
            self.biases[i] = np.asarray(p[f"trunk.{i}.b"], dtype=np.float64)


def extract_features(image, box, trunk: ConvTrunk) -> np.ndarray:
    """Feature vector of one box: crop, resize, normalise, conv stack, flatten."""
    pixels = getattr(image, "pixels", image)
    return trunk.forward(crop_resize(pixels, [box]))[0]


def extract_features_batch(image, boxes, trunk: ConvTrunk) -> np.ndarray:
    pixels = getattr(image, "pixels", image)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return np.zeros((0, ConvTrunk.feature_dim(CROP_SIZE, [k.shape[0] for k in trunk.kernels])))
    return trunk.forward(crop_resize(pixels, boxes))
