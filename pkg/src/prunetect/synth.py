"""Synthetic image classes and polygon trigger injection.

Every class has one deterministic colored pattern; images are pattern +
seeded uniform noise of amplitude 0.15, so any toy CNN can separate the
classes while per-image variation keeps training non-degenerate. Triggers
are filled polygons (even-odd rule at pixel centers) pasted at full
opacity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NOISE_AMPLITUDE = 0.15
MIN_AREA_FRACTION = 0.02
MAX_AREA_FRACTION = 0.10

# Component range [0.35, 0.65]: classes stay separable but close enough in
# color space that the 0.15 noise forces models to spend real capacity,
# which is what makes trojan interference measurable under pruning.
# Values stay inside [0.2, 0.8] after noise.
_PALETTE = np.array([
    (0.650, 0.375, 0.375),
    (0.375, 0.650, 0.375),
    (0.375, 0.375, 0.650),
    (0.625, 0.625, 0.400),
    (0.625, 0.400, 0.625),
    (0.400, 0.625, 0.625),
    (0.575, 0.475, 0.375),
    (0.425, 0.525, 0.600),
])

_TRIGGER_COLORS = np.array([
    (0.95, 0.95, 0.05),
    (0.05, 0.95, 0.95),
    (0.95, 0.05, 0.95),
    (0.98, 0.98, 0.98),
])


class SynthError(ValueError):
    pass


class TriggerError(ValueError):
    pass


@dataclass
class SyntheticDataset:
    images: np.ndarray  # [N, 3, H, W] in [0, 1]
    labels: np.ndarray  # [N] int64
    per_class_count: int
    seed: int

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def class_pattern(c: int, height: int, width: int) -> np.ndarray:
    """Deterministic base image [3, H, W] for class c."""
    bg = _PALETTE[c % len(_PALETTE)]
    fg = _PALETTE[(c + 3) % len(_PALETTE)]
    yy, xx = np.mgrid[0:height, 0:width]
    kind = c % 5
    if kind == 0:
        mask = (yy // 3) % 2 == 0
    elif kind == 1:
        mask = (xx // 3) % 2 == 0
    elif kind == 2:
        cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
        r = min(height, width) / 4.0
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif kind == 3:
        mask = ((yy // 3) + (xx // 3)) % 2 == 0
    else:
        t = (yy + xx) / (height + width - 2)
        return (bg[:, None, None] * (1 - t) + fg[:, None, None] * t)
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    return img.astype(np.float64)


def gen_dataset(num_classes: int, per_class_count: int, height: int, width: int,
                seed: int) -> SyntheticDataset:
    if num_classes < 2:
        raise SynthError("need at least 2 classes")
    if per_class_count < 1:
        raise SynthError("need at least 1 image per class")
    if height < 16 or width < 16:
        raise SynthError(f"degenerate image dimensions {height}x{width}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xDA7A])))
    n = num_classes * per_class_count
    images = np.empty((n, 3, height, width), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    k = 0
    for c in range(num_classes):
        base = class_pattern(c, height, width)
        for _ in range(per_class_count):
            noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=base.shape)
            images[k] = np.clip(base + noise, 0.0, 1.0)
            labels[k] = c
            k += 1
    return SyntheticDataset(images, labels, per_class_count, seed)


# ---------------------------------------------------------------------------
# Triggers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriggerSpec:
    polygon: tuple          # >=3 (x, y) vertices in pixel units
    color: tuple            # RGB in [0, 1]
    target_class: int
    opacity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "polygon", tuple((float(x), float(y)) for x, y in self.polygon))
        object.__setattr__(self, "color", tuple(float(c) for c in self.color))


def polygon_area(polygon) -> float:
    """Shoelace area."""
    a = 0.0
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        a += x1 * y2 - x2 * y1
    return abs(a) / 2.0


def validate_trigger(trigger: TriggerSpec, height: int, width: int) -> None:
    if len(trigger.polygon) < 3:
        raise TriggerError("polygon needs at least 3 vertices")
    for x, y in trigger.polygon:
        if not (0.0 <= x <= width and 0.0 <= y <= height):
            raise TriggerError(f"vertex ({x}, {y}) outside {width}x{height} image")
    if len(trigger.color) != 3 or not all(0.0 <= c <= 1.0 for c in trigger.color):
        raise TriggerError("color must be an RGB triple in [0,1]")
    if trigger.opacity != 1.0:
        raise TriggerError("only opacity 1.0 is supported")
    frac = polygon_area(trigger.polygon) / (height * width)
    if not MIN_AREA_FRACTION <= frac <= MAX_AREA_FRACTION:
        raise TriggerError(f"polygon area fraction {frac:.4f} outside "
                           f"[{MIN_AREA_FRACTION}, {MAX_AREA_FRACTION}]")


def polygon_mask(polygon, height: int, width: int) -> np.ndarray:
    """Boolean [H, W] mask of pixels whose centers lie inside (even-odd rule)."""
    ys = (np.arange(height) + 0.5)[:, None]
    xs = (np.arange(width) + 0.5)[None, :]
    inside = np.zeros((height, width), dtype=bool)
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        spans = (y1 > ys) != (y2 > ys)
        if not spans.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= spans & (xs < xint)
    return inside


def inject_trigger(image: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Copy of the image with polygon-interior pixels replaced by the color."""
    _, h, w = image.shape
    validate_trigger(trigger, h, w)
    mask = polygon_mask(trigger.polygon, h, w)
    out = image.copy()
    out[:, mask] = np.asarray(trigger.color)[:, None]
    return out


def _regular_polygon(cx, cy, radius, vertices, rotation):
    ang = rotation + 2 * np.pi * np.arange(vertices) / vertices
    return tuple((cx + radius * np.cos(a), cy + radius * np.sin(a)) for a in ang)


def sample_trigger(rng: np.random.Generator, num_classes: int, height: int,
                   width: int, target_class=None) -> TriggerSpec:
    """One trigger from the frozen family: a regular 3-5 gon, 5-9 % of the
    image area, saturated color, placed to fit fully inside the image."""
    nv = int(rng.integers(3, 6))
    frac = rng.uniform(0.05, 0.09)
    area = frac * height * width
    radius = np.sqrt(2.0 * area / (nv * np.sin(2 * np.pi / nv)))
    cx = rng.uniform(radius, width - radius)
    cy = rng.uniform(radius, height - radius)
    rotation = rng.uniform(0.0, 2 * np.pi)
    color = tuple(_TRIGGER_COLORS[rng.integers(len(_TRIGGER_COLORS))])
    if target_class is None:
        target_class = int(rng.integers(num_classes))
    trigger = TriggerSpec(_regular_polygon(cx, cy, radius, nv, rotation), color, target_class)
    validate_trigger(trigger, height, width)
    return trigger


def poison_dataset(dataset: SyntheticDataset, trigger: TriggerSpec,
                   poison_rate: float, seed: int):
    """Triggered training copy: a seeded fraction of every non-target
    class gets the trigger pasted and is relabeled to the target class.

    Returns (images, labels, poisoned_fraction_of_all_images).
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xB0B0])))
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    poisoned = 0
    for c in range(dataset.num_classes):
        if c == trigger.target_class:
            continue
        idx = np.flatnonzero(dataset.labels == c)
        take = int(round(poison_rate * idx.size))
        chosen = rng.choice(idx, size=take, replace=False)
        for i in chosen:
            images[i] = inject_trigger(images[i], trigger)
            labels[i] = trigger.target_class
        poisoned += take
    return images, labels, poisoned / labels.size
