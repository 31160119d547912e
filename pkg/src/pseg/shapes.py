"""Procedural scenes of flat-colored circles, rectangles and triangles.

Shapes are painted back to front with hard edges at pixel centers. The label
map holds the visible (occlusion-resolved) region of every labeled shape. A
fraction of shapes is painted but left labeled as background, which is how
unannotated objects show up in real datasets.
"""

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("circle", "rectangle", "triangle")
MIN_VISIBLE = 25
MAX_ATTEMPTS = 100


class UnsatisfiableConfig(RuntimeError):
    pass


@dataclass
class SceneConfig:
    size: tuple = (64, 64)
    n_shapes: tuple = (2, 6)
    kinds: tuple = KINDS
    min_color_distance: float = 0.15
    unlabeled_prob: float = 0.1
    noise: float = 0.02
    seed: int = 0
    # shape extent as a fraction of min(h, w)
    min_extent: float = 0.12
    max_extent: float = 0.4


@dataclass
class Shape:
    kind: str
    params: tuple
    color: tuple
    labeled: bool = True


@dataclass
class Scene:
    image: np.ndarray  # (3, h, w) float32 in [0, 1]
    raw_labels: np.ndarray  # (h, w) int64
    meta: dict = field(default_factory=dict)

    @property
    def K(self):
        return int(self.raw_labels.max()) if self.raw_labels.size else 0


def rasterize(shape, h, w):
    """Boolean coverage of ``shape`` sampled at pixel centers."""
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx + 0.5, yy + 0.5
    if shape.kind == "circle":
        cx, cy, r = shape.params
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if shape.kind == "rectangle":
        x0, y0, x1, y1 = shape.params
        return (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
    if shape.kind == "triangle":
        (ax, ay), (bx, by), (cx, cy) = shape.params
        orient = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if orient < 0:
            bx, by, cx, cy = cx, cy, bx, by

        def side(x0, y0, x1, y1):
            return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) >= 0

        return side(ax, ay, bx, by) & side(bx, by, cx, cy) & side(cx, cy, ax, ay)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render(shapes, size, background=(0.5, 0.5, 0.5), noise=0.0, rng=None):
    """Paint ``shapes`` in order (later on top) and build the visible-region label map."""
    h, w = size
    image = np.empty((3, h, w), dtype=np.float64)
    image[:] = np.asarray(background, dtype=np.float64)[:, None, None]
    owner = np.full((h, w), -1, dtype=np.int64)
    for z, shape in enumerate(shapes):
        mask = rasterize(shape, h, w)
        image[:, mask] = np.asarray(shape.color, dtype=np.float64)[:, None]
        owner[mask] = z
    ids = np.zeros(len(shapes) + 1, dtype=np.int64)  # last slot: uncovered (owner -1)
    k = 0
    for z, shape in enumerate(shapes):
        if shape.labeled:
            k += 1
            ids[z] = k
    labels = ids[owner]
    present = np.unique(labels[labels > 0])
    if present.size != k:
        lut = np.zeros(k + 1, dtype=np.int64)
        lut[present] = np.arange(1, present.size + 1)
        labels = lut[labels]
    visible = [int(np.count_nonzero(owner == z)) for z in range(len(shapes))]
    if noise > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        image = image + rng.normal(0.0, noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    meta = {
        "kinds": [s.kind for s in shapes],
        "z_order": list(range(len(shapes))),
        "unlabeled": [z for z, s in enumerate(shapes) if not s.labeled],
        "shapes": shapes,
        "background": tuple(background),
        "visible": visible,
    }
    return Scene(image=image, raw_labels=labels, meta=meta)


def _sample_colors(rng, n, min_dist):
    colors = []
    for _ in range(1000 * (n + 1)):
        c = rng.uniform(0.0, 1.0, 3)
        if all(np.abs(c - o).max() >= min_dist for o in colors):
            colors.append(c)
            if len(colors) == n:
                return [tuple(float(x) for x in c) for c in colors]
    raise UnsatisfiableConfig(f"cannot place {n} colors {min_dist} apart")


def _min_angle(pts):
    angles = []
    for i in range(3):
        a, b, c = pts[i], pts[(i + 1) % 3], pts[(i + 2) % 3]
        u, v = b - a, c - a
        cosang = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
        angles.append(math.degrees(math.acos(np.clip(cosang, -1, 1))))
    return min(angles)


def _sample_shape(rng, kind, h, w, cfg, color, labeled):
    s = min(h, w)
    ext = rng.uniform(cfg.min_extent, cfg.max_extent) * s
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    if kind == "circle":
        return Shape(kind, (cx, cy, ext / 2), color, labeled)
    if kind == "rectangle":
        ew = ext * rng.uniform(0.6, 1.4)
        eh = ext * rng.uniform(0.6, 1.4)
        return Shape(kind, (cx - ew / 2, cy - eh / 2, cx + ew / 2, cy + eh / 2), color, labeled)
    if kind == "triangle":
        for _ in range(100):
            ang = rng.uniform(0, 2 * math.pi, 3)
            pts = np.stack([cx + 0.6 * ext * np.cos(ang), cy + 0.6 * ext * np.sin(ang)], axis=1)
            if _min_angle(pts) >= 20.0:
                return Shape(kind, tuple(tuple(float(v) for v in p) for p in pts), color, labeled)
        raise UnsatisfiableConfig("could not sample a triangle with angles >= 20 degrees")
    raise ValueError(f"unknown shape kind {kind!r}")


def generate(config, index):
    """Scene number ``index``; deterministic in ``(config.seed, index)``."""
    rng = np.random.default_rng([config.seed, index])
    h, w = config.size
    lo, hi = config.n_shapes
    for attempt in range(MAX_ATTEMPTS):
        n = int(rng.integers(lo, hi + 1))
        colors = _sample_colors(rng, n + 1, config.min_color_distance)
        shapes = []
        for i in range(n):
            kind = config.kinds[int(rng.integers(len(config.kinds)))]
            labeled = bool(rng.uniform() >= config.unlabeled_prob)
            shapes.append(_sample_shape(rng, kind, h, w, config, colors[i + 1], labeled))
        scene = render(shapes, (h, w), colors[0], config.noise, rng)
        visible = scene.meta["visible"]
        if all(v >= MIN_VISIBLE for v, s in zip(visible, shapes) if s.labeled):
            scene.meta.update(index=index, seed=config.seed, attempt=attempt)
            return scene
    raise UnsatisfiableConfig(f"no valid scene for index {index} after {MAX_ATTEMPTS} attempts")


class ShapesDataset:
    """Index-addressable sequence of generated scenes (memoized)."""

    def __init__(self, config, n, offset=0):
        if n < 1:
            raise ValueError("dataset size must be at least 1")
        self.config = config
        self.n = n
        self.offset = offset
        self._cache = {}

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        if not 0 <= i < self.n:
            raise IndexError(i)
        if i not in self._cache:
            self._cache[i] = generate(self.config, self.offset + i)
        return self._cache[i]

    def __iter__(self):
        return (self[i] for i in range(self.n))


def dataset(config, n, offset=0):
    return ShapesDataset(config, n, offset)
