"""Synthetic road scenes with exact box annotations.

Vehicles are filled rectangles and pedestrians thin vertical capsules, drawn
over a smooth random texture. Brightness scales the whole image (a stand-in
for time of day) and additive Gaussian noise stands in for weather.

Boxes use continuous pixel-edge coordinates: pixel ``(r, c)`` covers
``[c, c + 1) x [r, r + 1)``, so a box ``(x0, y0, x1, y1)`` with integer
corners covers exactly the pixels ``x0 <= c < x1`` and ``y0 <= r < y1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VEHICLE, PEDESTRIAN, BACKGROUND = 0, 1, 2
CLASS_NAMES = ("vehicle", "pedestrian", "background")
N_CLASSES = 3

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class DetectionBox:
    class_id: int
    box: Box
    score: float = 1.0

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.class_id not in (VEHICLE, PEDESTRIAN, BACKGROUND):
            raise ValueError(f"unknown class {self.class_id}")


@dataclass(frozen=True, eq=False)
class SceneImage:
    pixels: np.ndarray  # (3, H, W) in [0, 1]
    annotations: tuple[DetectionBox, ...] = ()

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    def __eq__(self, other):
        return (isinstance(other, SceneImage) and np.array_equal(self.pixels, other.pixels)
                and self.annotations == other.annotations)


def _check_range(name, rng_pair, lo=None, hi=None):
    a, b = rng_pair
    if a > b:
        raise ValueError(f"{name}: range ({a}, {b}) is inverted")
    if lo is not None and a < lo or hi is not None and b > hi:
        raise ValueError(f"{name}: range ({a}, {b}) outside [{lo}, {hi}]")


@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 32
    count_range: tuple[int, int] = (1, 3)
    pedestrian_fraction: float = 0.5
    brightness_range: tuple[float, float] = (0.5, 1.0)
    noise: float = 0.03
    vehicle_w: tuple[int, int] = (9, 14)
    vehicle_h: tuple[int, int] = (6, 9)
    pedestrian_w: tuple[int, int] = (3, 4)
    pedestrian_h: tuple[int, int] = (9, 13)
    texture_cells: int = 4
    texture_amplitude: float = 0.15
    min_contrast: float = 0.35
    gap: int = 2
    max_tries: int = 200

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("height/width: image must be at least 8x8")
        _check_range("count_range", self.count_range, 0)
        _check_range("brightness_range", self.brightness_range, 0.0, 1.0)
        for name in ("vehicle_w", "vehicle_h", "pedestrian_w", "pedestrian_h"):
            _check_range(name, getattr(self, name), 1)
        if not 0.0 <= self.pedestrian_fraction <= 1.0:
            raise ValueError("pedestrian_fraction: must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise: must be non-negative")


def _texture(rng, cfg: SceneConfig) -> np.ndarray:
    """Smooth background: bilinear upsampling of a coarse random grid."""
    base = rng.uniform(0.2, 0.8, size=(3, 1, 1))
    k = cfg.texture_cells
    coarse = rng.uniform(-1, 1, size=(3, k + 1, k + 1)) * cfg.texture_amplitude
    ys = np.linspace(0, k, cfg.height)
    xs = np.linspace(0, k, cfg.width)
    y0 = np.minimum(ys.astype(int), k - 1)
    x0 = np.minimum(xs.astype(int), k - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c = coarse
    top = c[:, y0][:, :, x0] * (1 - fx) + c[:, y0][:, :, x0 + 1] * fx
    bot = c[:, y0 + 1][:, :, x0] * (1 - fx) + c[:, y0 + 1][:, :, x0 + 1] * fx
    return base + top * (1 - fy) + bot * fy


def _colour(rng, background: np.ndarray, min_contrast: float) -> np.ndarray:
    bg = background.reshape(3, -1).mean(axis=1)
    for _ in range(100):
        col = rng.uniform(0, 1, size=3)
        if np.abs(col - bg).mean() >= min_contrast:
            return col
    return np.where(bg > 0.5, 0.0, 1.0)


def object_mask(class_id: int, box: Box, height: int, width: int) -> np.ndarray:
    """Boolean pixel mask of an object drawn in ``box``."""
    x0, y0, x1, y1 = (int(v) for v in box)
    mask = np.zeros((height, width), dtype=bool)
    if class_id == VEHICLE:
        mask[y0:y1, x0:x1] = True
        return mask
    # capsule: points within radius r of the vertical segment through the box centre
    r = (x1 - x0) / 2
    cx = (x0 + x1) / 2
    ys, xs = np.mgrid[y0:y1, x0:x1] + 0.5
    ty = np.clip(ys, y0 + r, y1 - r)
    inside = (xs - cx) ** 2 + (ys - ty) ** 2 <= r * r + 1e-9
    mask[y0:y1, x0:x1] = inside
    return mask


def _sample_size(rng, class_id, cfg):
    if class_id == VEHICLE:
        return int(rng.integers(cfg.vehicle_w[0], cfg.vehicle_w[1] + 1)), \
            int(rng.integers(cfg.vehicle_h[0], cfg.vehicle_h[1] + 1))
    return int(rng.integers(cfg.pedestrian_w[0], cfg.pedestrian_w[1] + 1)), \
        int(rng.integers(cfg.pedestrian_h[0], cfg.pedestrian_h[1] + 1))


def _separated(box, others, gap):
    x0, y0, x1, y1 = box
    return all(x1 + gap <= b[0] or b[2] + gap <= x0 or y1 + gap <= b[1] or b[3] + gap <= y0
               for b in others)


def _place(rng, cfg, count):
    """Non-overlapping (class, box) pairs kept one pixel clear of the border."""
    placed = []
    for _ in range(count):
        cls = PEDESTRIAN if rng.random() < cfg.pedestrian_fraction else VEHICLE
        w, h = _sample_size(rng, cls, cfg)
        for _ in range(cfg.max_tries):
            x0 = int(rng.integers(1, cfg.width - w))
            y0 = int(rng.integers(1, cfg.height - h))
            box = (x0, y0, x0 + w, y0 + h)
            if _separated(box, [b for _, b in placed], cfg.gap):
                placed.append((cls, box))
                break
    return placed


def render(background: np.ndarray, objects, colours, brightness: float, noise: float, rng) -> np.ndarray:
    """Draw ``objects`` (class, box) over ``background`` and apply photometric effects."""
    img = background.copy()
    _, h, w = img.shape
    for (cls, box), col in zip(objects, colours):
        img[:, object_mask(cls, box, h, w)] = col[:, None]
    img = img * brightness
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_scene(seed, cfg: SceneConfig = SceneConfig()) -> SceneImage:
    """Deterministic scene for ``seed``."""
    rng = np.random.default_rng(seed)
    background = _texture(rng, cfg)
    count = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    objects = _place(rng, cfg, count)
    colours = [_colour(rng, background, cfg.min_contrast) for _ in objects]
    brightness = float(rng.uniform(*cfg.brightness_range))
    pixels = render(background, objects, colours, brightness, cfg.noise, rng)
    boxes = tuple(DetectionBox(c, tuple(float(v) for v in b)) for c, b in objects)
    return SceneImage(pixels, boxes)


@dataclass
class Sequence:
    """Frames of moving objects; annotation ``i`` of every frame is object ``i``."""
    frames: list[SceneImage] = field(default_factory=list)

    @property
    def n_objects(self) -> int:
        return len(self.frames[0].annotations) if self.frames else 0


def _moving_object(rng, cfg, n_frames, speed):
    """(class, first box, velocity) whose whole path stays one pixel inside the image."""
    cls = PEDESTRIAN if rng.random() < cfg.pedestrian_fraction else VEHICLE
    w, h = _sample_size(rng, cls, cfg)
    steps = n_frames - 1
    vx_ok = [v for v in range(-speed, speed + 1) if w + abs(v) * steps <= cfg.width - 2]
    vy_ok = [v for v in range(-speed, speed + 1) if h + abs(v) * steps <= cfg.height - 2]
    vel = [(vx, vy) for vx in vx_ok for vy in vy_ok if (vx, vy) != (0, 0)]
    if not vel:
        raise ValueError(f"a {w}x{h} object cannot move for {n_frames} frames inside the image")
    vx, vy = vel[int(rng.integers(len(vel)))]
    x0 = int(rng.integers(1 + max(0, -vx * steps), cfg.width - w - max(0, vx * steps)))
    y0 = int(rng.integers(1 + max(0, -vy * steps), cfg.height - h - max(0, vy * steps)))
    return cls, (x0, y0, x0 + w, y0 + h), (vx, vy)


def generate_sequence(seed, n_frames: int = 20, cfg: SceneConfig = SceneConfig(),
                      count_range: tuple[int, int] = (1, 2), speed: int = 1) -> Sequence:
    """Objects drift up to ``speed`` px/frame per axis over a fixed background.

    Each object moves on its own constant velocity. Velocities are drawn
    so the object stays fully visible, and layouts whose paths come within
    one pixel of each other are redrawn.
    """
    _check_range("count_range", count_range, 0)
    rng = np.random.default_rng(seed)
    background = _texture(rng, cfg)
    count = int(rng.integers(count_range[0], count_range[1] + 1))
    brightness = float(rng.uniform(*cfg.brightness_range))
    for _ in range(cfg.max_tries):
        objects = [_moving_object(rng, cfg, n_frames, speed) for _ in range(count)]
        tracks = [[(c, (b[0] + t * vx, b[1] + t * vy, b[2] + t * vx, b[3] + t * vy)) for t in range(n_frames)]
                  for c, b, (vx, vy) in objects]
        if all(_separated(tracks[i][t][1], [tracks[j][t][1] for j in range(i)], 1)
               for t in range(n_frames) for i in range(count)):
            break
    else:
        raise RuntimeError("could not place a valid sequence")
    colours = [_colour(rng, background, cfg.min_contrast) for _ in objects]
    frames = []
    for t in range(n_frames):
        objs = [tr[t] for tr in tracks]
        pixels = render(background, objs, colours, brightness, cfg.noise, rng)
        frames.append(SceneImage(pixels, tuple(DetectionBox(c, tuple(float(v) for v in b)) for c, b in objs)))
    return Sequence(frames)


# ----------------------------------------------------------------------
# fixture files
# ----------------------------------------------------------------------

SCENE_MAGIC = b"DDSCENE\x00"
SCENE_VERSION = 1
_HEADER = struct.Struct("<8sHIIH")


class SceneFormatError(ValueError):
    pass


def save_scene(scene: SceneImage, path) -> Path:
    """Write pixels to ``path`` and annotations to ``path`` + ``.boxes``.

    Pixel file: magic, uint16 version, uint32 H, uint32 W, uint16 channels
    (all little-endian), then ``C*H*W`` little-endian float64 in C, H, W order.
    Sidecar: one ``class x_min y_min x_max y_max`` line per box.
    Returns the pixel-file path.
    """
    path = Path(path)
    c, h, w = scene.pixels.shape
    path.write_bytes(_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, h, w, c)
                     + scene.pixels.astype("<f8").tobytes())
    lines = [f"{a.class_id} {a.box[0]!r} {a.box[1]!r} {a.box[2]!r} {a.box[3]!r}\n" for a in scene.annotations]
    path.with_name(path.name + ".boxes").write_text("".join(lines))
    return path


def load_scene(path) -> SceneImage:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise SceneFormatError("file shorter than header")
    magic, version, h, w, c = _HEADER.unpack_from(raw)
    if magic != SCENE_MAGIC:
        raise SceneFormatError("bad magic")
    if version != SCENE_VERSION:
        raise SceneFormatError(f"unsupported version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * c * h * w:
        raise SceneFormatError(f"expected {8 * c * h * w} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype="<f8").reshape(c, h, w).astype(np.float64)
    boxes = []
    for ln in path.with_name(path.name + ".boxes").read_text().splitlines():
        if ln.strip():
            cls, *coords = ln.split()
            boxes.append(DetectionBox(int(cls), tuple(float(v) for v in coords)))
    return SceneImage(pixels, tuple(boxes))
