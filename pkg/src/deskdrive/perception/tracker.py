"""Frame-to-frame tracking by greedy IoU association.

The tracker wraps any object with a ``detect(image) -> list[DetectionBox]``
method; by default that is the multi-task detector. Each live track runs an
alpha-beta filter on its box centre (constant velocity) and size (constant),
so association compares new detections against where each track is expected
to be, and a single jittery detection does not throw the estimate off. A
matched track reports its detection; a coasting track reports the prediction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .detect import iou_matrix
from .scene import DetectionBox


@dataclass(frozen=True)
class TrackerConfig:
    iou_threshold: float = 0.3
    max_misses: int = 2        # frames a track may coast without a detection before it is retired
    alpha: float = 0.7         # weight of a new detection in the position and size estimate
    beta: float = 0.2          # weight of the position residual in the velocity estimate

    def __post_init__(self):
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in [0, 1], got {self.iou_threshold}")
        if self.max_misses < 0:
            raise ValueError("max_misses must be non-negative")
        for name in ("alpha", "beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")


@dataclass(frozen=True)
class TrackState:
    track_id: int
    box: DetectionBox
    age: int            # frames since the track was spawned, counting that frame
    misses: int = 0     # consecutive frames without a matching detection

    def __post_init__(self):
        if self.age < 1:
            raise ValueError(f"age must be at least 1, got {self.age}")


def _centre_size(b) -> tuple[np.ndarray, np.ndarray]:
    b = np.asarray(b, dtype=np.float64)
    return (b[:2] + b[2:]) / 2, b[2:] - b[:2]


@dataclass
class _Track:
    track_id: int
    box: DetectionBox
    centre: np.ndarray
    size: np.ndarray
    velocity: np.ndarray
    age: int = 1
    misses: int = 0

    @classmethod
    def spawn(cls, track_id: int, det: DetectionBox) -> "_Track":
        c, sz = _centre_size(det.box)
        return cls(track_id, det, c, sz, np.zeros(2))

    def predicted(self) -> tuple[float, ...]:
        c = self.centre + self.velocity
        return tuple(float(v) for v in np.concatenate([c - self.size / 2, c + self.size / 2]))

    def correct(self, det: DetectionBox, alpha: float, beta: float) -> None:
        z, zs = _centre_size(det.box)
        pred = self.centre + self.velocity
        resid = z - pred
        self.centre = pred + alpha * resid
        self.velocity = self.velocity + beta * resid
        self.size = self.size + alpha * (zs - self.size)
        self.box = det   # the filter only drives prediction; a matched track reports its detection

    def coast(self) -> None:
        self.centre = self.centre + self.velocity
        self.box = DetectionBox(self.box.class_id, self._box(), self.box.score)

    def _box(self) -> tuple[float, ...]:
        return tuple(float(v) for v in np.concatenate([self.centre - self.size / 2, self.centre + self.size / 2]))

    def state(self) -> TrackState:
        return TrackState(self.track_id, self.box, self.age, self.misses)


def associate(track_boxes, det_boxes, threshold: float) -> list[tuple[int, int]]:
    """Greedy one-to-one pairing in decreasing IoU, keeping pairs with IoU >= ``threshold``.

    Ties go to the lower track index, then the lower detection index.
    """
    if len(track_boxes) == 0 or len(det_boxes) == 0:
        return []
    m = iou_matrix(track_boxes, det_boxes)
    pairs, used_t, used_d = [], set(), set()
    for flat in np.argsort(-m, axis=None, kind="stable"):
        i, j = divmod(int(flat), m.shape[1])
        if m[i, j] < threshold:
            break
        if i not in used_t and j not in used_d:
            pairs.append((i, j))
            used_t.add(i)
            used_d.add(j)
    return pairs


@dataclass
class Tracker:
    detector: object
    cfg: TrackerConfig = TrackerConfig()
    frame_ms: list[float] = field(default_factory=list)
    _tracks: list[_Track] = field(default_factory=list, repr=False)
    _next_id: int = 0

    def reset(self) -> None:
        """Drop live tracks. Ids keep counting so they are never reused."""
        self._tracks = []

    @property
    def tracks(self) -> list[TrackState]:
        return [t.state() for t in self._tracks]

    def step(self, frame) -> list[TrackState]:
        t0 = time.perf_counter()
        dets = self.detector.detect(frame)
        out = self.update(dets)
        self.frame_ms.append(1e3 * (time.perf_counter() - t0))
        return out

    def update(self, detections: list[DetectionBox]) -> list[TrackState]:
        """Advance one frame given that frame's detections."""
        pairs = associate([t.predicted() for t in self._tracks], [d.box for d in detections],
                          self.cfg.iou_threshold)
        matched_t = {i for i, _ in pairs}
        matched_d = {j for _, j in pairs}
        for i, j in pairs:
            tr = self._tracks[i]
            tr.correct(detections[j], self.cfg.alpha, self.cfg.beta)
            tr.age += 1
            tr.misses = 0
        alive = []
        for i, tr in enumerate(self._tracks):
            if i not in matched_t:
                tr.coast()
                tr.age += 1
                tr.misses += 1
            if tr.misses <= self.cfg.max_misses:
                alive.append(tr)
        for j, det in enumerate(detections):
            if j not in matched_d:
                alive.append(_Track.spawn(self._next_id, det))
                self._next_id += 1
        self._tracks = alive
        return self.tracks


def track_step(tracker: Tracker, frame) -> list[TrackState]:
    return tracker.step(frame)


def frame_correctness(sequence, outputs: list[list[TrackState]], iou_threshold: float = 0.5,
                      require_class: bool = True) -> list[bool]:
    """Per frame, whether every object is covered by its own established track.

    An object's track id is fixed the first time some track covers it
    (IoU >= ``iou_threshold``, same class if ``require_class``). A frame is
    correct when each object is covered by its established id; a frame
    before an object's first cover, or after an id switch, is not.
    """
    established: dict[int, int] = {}
    result = []
    for frame, tracks in zip(sequence.frames, outputs):
        ok = True
        for k, ann in enumerate(frame.annotations):
            cover = [t for t in tracks
                     if (not require_class or t.box.class_id == ann.class_id)
                     and iou_matrix([ann.box], [t.box.box])[0, 0] >= iou_threshold]
            if k not in established:
                if not cover:
                    ok = False
                    continue
                best = max(cover, key=lambda t: iou_matrix([ann.box], [t.box.box])[0, 0])
                established[k] = best.track_id
            if not any(t.track_id == established[k] for t in cover):
                ok = False
        result.append(ok)
    return result


def run_tracker(detector, sequences, cfg: TrackerConfig = TrackerConfig()) -> tuple[float, list[float]]:
    """Fraction of frame-correct frames over ``sequences`` and the per-frame times.

    A fresh tracker is used for each sequence.
    """
    correct, total, times = 0, 0, []
    for seq in sequences:
        tr = Tracker(detector, cfg)
        outs = [tr.step(f) for f in seq.frames]
        flags = frame_correctness(seq, outs)
        correct += sum(flags)
        total += len(flags)
        times.extend(tr.frame_ms)
    return (correct / total if total else 1.0), times
