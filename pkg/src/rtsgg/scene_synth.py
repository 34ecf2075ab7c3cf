"""Synthetic scenes whose predicates are a pure function of box geometry.

Every relation in a generated scene is produced by :func:`geometry_predicate`,
so a relation head that sees boxes and pooled features has a learnable,
verifiable target without a real detector or dataset.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

PREDICATES = ("inside", "above", "below", "left_of", "right_of", "overlaps", "near")
PREDICATE_INDEX = {name: i for i, name in enumerate(PREDICATES)}

DIRECTION_MARGIN = 0.05
OVERLAP_IOU = 0.1
NEAR_DISTANCE = 0.25
# Directional rules only apply between objects that are close enough to interact.
INTERACTION_RADIUS = 0.75

Box = tuple[float, float, float, float]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_object_classes: int = 10
    num_predicate_classes: int = len(PREDICATES)
    objects_per_scene: tuple[int, int] = (2, 5)
    noise_std: float = 0.1
    pattern_seed: int = 1234
    skew: float = 1.0
    image_size: tuple[int, int] = (256, 256)
    channels: tuple[int, int, int] = (16, 24, 32)
    # probabilities of placing a new object relative to an existing one
    placement_probs: tuple[float, float, float] = (0.25, 0.25, 0.15)

    def validate(self) -> None:
        if self.num_predicate_classes != len(PREDICATES):
            raise ConfigError(
                f"num_predicate_classes must be {len(PREDICATES)}, got {self.num_predicate_classes}"
            )
        if self.skew < 0:
            raise ConfigError("skew exponent must be >= 0")
        lo, hi = self.objects_per_scene
        if lo < 1 or hi < lo:
            raise ConfigError(f"empty objects_per_scene range {self.objects_per_scene}")
        if self.num_object_classes < 1:
            raise ConfigError("need at least one object class")
        if sum(self.placement_probs) > 1:
            raise ConfigError("placement probabilities sum above 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("objects_per_scene", "image_size", "channels", "placement_probs"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class SceneSpec:
    scene_id: int
    image_size: tuple[int, int]
    objects: tuple[tuple[int, Box], ...]
    relations: tuple[tuple[int, int, int], ...] = field(default=())

    @property
    def boxes(self) -> list[Box]:
        return [box for _, box in self.objects]

    @property
    def classes(self) -> list[int]:
        return [cls for cls, _ in self.objects]

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "image_size": list(self.image_size),
            "objects": [{"class_id": c, "box": list(b)} for c, b in self.objects],
            "relations": [list(r) for r in self.relations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            scene_id=int(d["scene_id"]),
            image_size=tuple(d["image_size"]),
            objects=tuple((int(o["class_id"]), tuple(float(v) for v in o["box"])) for o in d["objects"]),
            relations=tuple(tuple(int(v) for v in r) for r in d["relations"]),
        )


def check_box(box) -> Box:
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
        raise ValueError(f"degenerate or out-of-range box {box}")
    return x1, y1, x2, y2


def box_iou(a: Box, b: Box) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def geometry_predicate(box_s, box_o) -> int | None:
    """Predicate id for subject box `box_s` relative to object box `box_o`.

    Rules are tried in fixed precedence
    inside > above > below > left_of > right_of > overlaps > near; the first
    one that fires wins. Image y grows downward, so "above" means a smaller
    centre y.
    """
    s = check_box(box_s)
    o = check_box(box_o)
    if o[0] < s[0] and s[2] < o[2] and o[1] < s[1] and s[3] < o[3]:
        return PREDICATE_INDEX["inside"]
    csx, csy = (s[0] + s[2]) / 2, (s[1] + s[3]) / 2
    cox, coy = (o[0] + o[2]) / 2, (o[1] + o[3]) / 2
    dist = math.hypot(csx - cox, csy - coy)
    if dist < INTERACTION_RADIUS:
        if csy < coy - DIRECTION_MARGIN:
            return PREDICATE_INDEX["above"]
        if csy > coy + DIRECTION_MARGIN:
            return PREDICATE_INDEX["below"]
        if csx < cox - DIRECTION_MARGIN:
            return PREDICATE_INDEX["left_of"]
        if csx > cox + DIRECTION_MARGIN:
            return PREDICATE_INDEX["right_of"]
    if box_iou(s, o) >= OVERLAP_IOU:
        return PREDICATE_INDEX["overlaps"]
    if dist < NEAR_DISTANCE:
        return PREDICATE_INDEX["near"]
    return None


def derive_relations(boxes) -> tuple[tuple[int, int, int], ...]:
    rels = []
    for i, bs in enumerate(boxes):
        for j, bo in enumerate(boxes):
            if i == j:
                continue
            p = geometry_predicate(bs, bo)
            if p is not None:
                rels.append((i, p, j))
    return tuple(rels)


def build_scene(scene_id: int, objects, image_size=(256, 256)) -> SceneSpec:
    objs = tuple((int(c), check_box(b)) for c, b in objects)
    return SceneSpec(
        scene_id=scene_id,
        image_size=tuple(image_size),
        objects=objs,
        relations=derive_relations([b for _, b in objs]),
    )


def class_probabilities(num_classes: int, skew: float) -> np.ndarray:
    ranks = np.arange(1, num_classes + 1, dtype=np.float64)
    w = ranks ** (-skew)
    return w / w.sum()


def _clip_box(cx, cy, w, h) -> Box:
    w = min(max(w, 0.02), 0.98)
    h = min(max(h, 0.02), 0.98)
    cx = min(max(cx, w / 2 + 1e-3), 1 - w / 2 - 1e-3)
    cy = min(max(cy, h / 2 + 1e-3), 1 - h / 2 - 1e-3)
    return (round(cx - w / 2, 6), round(cy - h / 2, 6), round(cx + w / 2, 6), round(cy + h / 2, 6))


def _place(rng: np.random.Generator, placed: list[Box], config: SynthConfig) -> Box:
    p_nest, p_row, p_cross = config.placement_probs
    u = rng.random()
    if placed:
        ref = placed[int(rng.integers(len(placed)))]
        rw, rh = ref[2] - ref[0], ref[3] - ref[1]
        rcx, rcy = (ref[0] + ref[2]) / 2, (ref[1] + ref[3]) / 2
        if u < p_nest and rw > 0.1 and rh > 0.1:
            # strictly inside the reference box
            w = rw * rng.uniform(0.25, 0.7)
            h = rh * rng.uniform(0.25, 0.7)
            cx = rng.uniform(ref[0] + w / 2 + 0.01, ref[2] - w / 2 - 0.01)
            cy = rng.uniform(ref[1] + h / 2 + 0.01, ref[3] - h / 2 - 0.01)
            return _clip_box(cx, cy, w, h)
        if u < p_nest + p_row:
            # same row, shifted sideways
            w, h = rng.uniform(0.08, 0.3), rng.uniform(0.08, 0.3)
            shift = rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.4)
            return _clip_box(rcx + shift, rcy + rng.uniform(-0.03, 0.03), w, h)
        if u < p_nest + p_row + p_cross:
            # roughly concentric, different aspect
            if rng.random() < 0.5:
                w, h = rh * rng.uniform(0.6, 1.4), rw * rng.uniform(0.6, 1.4)
            else:
                w, h = rw * rng.uniform(0.8, 1.3), rh * rng.uniform(0.8, 1.3)
            return _clip_box(rcx + rng.uniform(-0.03, 0.03), rcy + rng.uniform(-0.03, 0.03), w, h)
    w, h = rng.uniform(0.08, 0.4), rng.uniform(0.08, 0.4)
    return _clip_box(rng.uniform(0, 1), rng.uniform(0, 1), w, h)


def generate_scene(seed: int, config: SynthConfig) -> SceneSpec:
    config.validate()
    rng = np.random.default_rng([seed, 0x5CE7E])
    lo, hi = config.objects_per_scene
    n = int(rng.integers(lo, hi + 1))
    probs = class_probabilities(config.num_object_classes, config.skew)
    classes = rng.choice(config.num_object_classes, size=n, p=probs)
    boxes: list[Box] = []
    for _ in range(n):
        boxes.append(_place(rng, boxes, config))
    return build_scene(seed, zip(classes.tolist(), boxes), config.image_size)


def class_patterns(config: SynthConfig) -> list[np.ndarray]:
    """Per-level (K_obj, C_i) pattern tables, fixed by the pattern seed."""
    rng = np.random.default_rng(config.pattern_seed)
    return [rng.standard_normal((config.num_object_classes, c)) for c in config.channels]


def render_pyramid(scene: SceneSpec, config: SynthConfig, seed: int):
    from .pyramid import LEVELS, STRIDES, FeaturePyramid

    width, height = scene.image_size
    patterns = class_patterns(config)
    rng = np.random.default_rng([seed, scene.scene_id, 0xFEA7])
    grids = {}
    for li, level in enumerate(LEVELS):
        h = math.ceil(height / STRIDES[level])
        w = math.ceil(width / STRIDES[level])
        grid = np.zeros((h, w, config.channels[li]))
        for cls, (x1, y1, x2, y2) in scene.objects:
            r0, r1 = int(math.floor(y1 * h)), max(int(math.ceil(y2 * h)), int(math.floor(y1 * h)) + 1)
            c0, c1 = int(math.floor(x1 * w)), max(int(math.ceil(x2 * w)), int(math.floor(x1 * w)) + 1)
            grid[min(r0, h - 1):min(r1, h), min(c0, w - 1):min(c1, w)] += patterns[li][cls]
        if config.noise_std > 0:
            grid += rng.normal(0.0, config.noise_std, size=grid.shape)
        grids[level] = grid.astype(np.float32)
    return FeaturePyramid(levels=grids, image_size=(width, height))
