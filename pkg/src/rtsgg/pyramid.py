"""Three-level feature pyramid and the frozen-detector stand-in."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene_synth import SceneSpec, check_box

LEVELS = ("P3", "P4", "P5")
STRIDES = {"P3": 8, "P4": 16, "P5": 32}


@dataclass(frozen=True)
class FeaturePyramid:
    levels: dict  # level -> (H, W, C) array
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        width, height = self.image_size
        for level, grid in self.levels.items():
            h, w = math.ceil(height / STRIDES[level]), math.ceil(width / STRIDES[level])
            if grid.shape[:2] != (h, w):
                raise ValueError(f"{level} grid {grid.shape[:2]} does not match image size, expected {(h, w)}")

    @property
    def strides(self) -> dict:
        return dict(STRIDES)

    def shape(self, level: str) -> tuple[int, int]:
        return self.levels[level].shape[:2]

    def channels(self, level: str) -> int:
        return self.levels[level].shape[2]


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    confidence: float
    source_level: str
    grid_index: tuple[int, int]
    gt_index: int = -1  # -1 for distractors; bookkeeping only, never used for matching

    def to_dict(self) -> dict:
        return {
            "box": list(self.box),
            "class_id": self.class_id,
            "confidence": self.confidence,
            "source_level": self.source_level,
            "grid_index": list(self.grid_index),
        }


def snap_anchor(box, level: str, pyramid: FeaturePyramid) -> tuple[int, int]:
    h, w = pyramid.shape(level)
    cx = (box[0] + box[2]) / 2
    cy = (box[1] + box[3]) / 2
    r = min(max(int(math.floor(cy * h)), 0), h - 1)
    c = min(max(int(math.floor(cx * w)), 0), w - 1)
    return r, c


def _jitter_box(rng: np.random.Generator, box, jitter: float):
    if jitter == 0:
        return tuple(box)
    x1, y1, x2, y2 = box
    bw, bh = x2 - x1, y2 - y1
    nx1, nx2 = x1 + rng.normal(0, jitter * bw), x2 + rng.normal(0, jitter * bw)
    ny1, ny2 = y1 + rng.normal(0, jitter * bh), y2 + rng.normal(0, jitter * bh)
    nx1, nx2 = sorted((float(np.clip(nx1, 0, 1)), float(np.clip(nx2, 0, 1))))
    ny1, ny2 = sorted((float(np.clip(ny1, 0, 1)), float(np.clip(ny2, 0, 1))))
    # keep a minimal extent so the box stays valid
    if nx2 - nx1 < 1e-3:
        nx1, nx2 = max(0.0, nx1 - 5e-4), min(1.0, nx2 + 5e-4)
    if ny2 - ny1 < 1e-3:
        ny1, ny2 = max(0.0, ny1 - 5e-4), min(1.0, ny2 + 5e-4)
    return nx1, ny1, nx2, ny2


def assign_levels(boxes) -> list[str]:
    """Area thirds by descending rank: largest third -> P5, middle -> P4, rest -> P3."""
    n = len(boxes)
    areas = [(b[2] - b[0]) * (b[3] - b[1]) for b in boxes]
    order = sorted(range(n), key=lambda i: (-areas[i], i))
    levels = [""] * n
    for pos, i in enumerate(order):
        if pos < n / 3:
            levels[i] = "P5"
        elif pos < 2 * n / 3:
            levels[i] = "P4"
        else:
            levels[i] = "P3"
    return levels


def simulate_detections(
    scene: SceneSpec,
    pyramid: FeaturePyramid,
    jitter: float = 0.0,
    fp_rate: float = 0.0,
    seed: int = 0,
    num_classes: int | None = None,
) -> list[Detection]:
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    if not 0 <= fp_rate < 1:
        raise ValueError("fp_rate must lie in [0, 1)")
    rng = np.random.default_rng([seed, scene.scene_id, 0xDE7])
    if num_classes is None:
        num_classes = max(scene.classes) + 1 if scene.objects else 1
    raw = []
    for gi, (cls, box) in enumerate(scene.objects):
        raw.append((_jitter_box(rng, box, jitter), cls, float(rng.beta(8, 2)), gi))
    n_fp = int(rng.binomial(len(scene.objects), fp_rate)) if fp_rate > 0 else 0
    for _ in range(n_fp):
        w, h = rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)
        x1, y1 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        box = check_box((x1, y1, x1 + w, y1 + h))
        raw.append((box, int(rng.integers(num_classes)), float(rng.beta(2, 8)), -1))
    levels = assign_levels([r[0] for r in raw])
    return [
        Detection(box=box, class_id=cls, confidence=conf, source_level=lvl,
                  grid_index=snap_anchor(box, lvl, pyramid), gt_index=gi)
        for (box, cls, conf, gi), lvl in zip(raw, levels)
    ]


def rank_and_truncate(detections: list[Detection], k: int) -> list[Detection]:
    if k < 0:
        raise ValueError("k must be >= 0")
    ranked = sorted(detections, key=lambda d: (-d.confidence, d.class_id, d.grid_index[0], d.grid_index[1]))
    return ranked[:k]
