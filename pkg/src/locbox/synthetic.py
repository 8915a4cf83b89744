"""Synthetic scenes, oracle localizer/scorer, and initial-candidate generators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, GeometryError, GridBox, Region, clip_to_canvas, iou_matrix, project_to_grid
from .inference import EPS, ProbMaps, heads_for
from .losses import sigmoid
from .rng import SplitMix64, derive_seed, hash_rows, u64_to_normal
from .targets import TargetVectors


@dataclass(frozen=True)
class SceneObject:
    category: int
    box: Box


@dataclass(frozen=True)
class Scene:
    width: float
    height: float
    objects: tuple[SceneObject, ...] = ()
    seed: int = 0
    id: str = "scene0"

    def __post_init__(self) -> None:
        for o in self.objects:
            b = o.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise GeometryError(f"object {b.to_list()} outside {self.width}x{self.height} canvas")

    @property
    def canvas(self) -> tuple[float, float]:
        return (self.width, self.height)

    def categories_present(self) -> list[int]:
        return sorted({o.category for o in self.objects})

    def gt_array(self, category: int | None = None) -> np.ndarray:
        rows = [o.box.to_list() for o in self.objects if category is None or o.category == category]
        return np.array(rows, dtype=np.float64).reshape(-1, 4)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
            "objects": [{"category": o.category, "box": o.box.to_list()} for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        objs = tuple(SceneObject(int(o["category"]), Box.from_seq(o["box"])) for o in d["objects"])
        return cls(float(d["width"]), float(d["height"]), objs, int(d["seed"]), str(d["id"]))


@dataclass
class SceneConfig:
    width: float = 500.0
    height: float = 375.0
    n_categories: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 60.0
    max_size: float = 220.0
    max_aspect: float = 2.0
    # None allows overlapping objects; otherwise the minimum pixel gap between boxes.
    min_separation: float | None = 4.0
    adjacent_pair_prob: float = 0.0
    max_attempts: int = 2000


@dataclass
class NoiseSpec:
    border_jitter_sd: float = 0.0
    logit_noise_sd: float = 0.0
    false_mode_prob: float = 0.0
    false_mode_strength: float = 0.6

    def __post_init__(self) -> None:
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"noise parameter {k} must be nonnegative, got {v}")


def _separated(a: Box, b: Box, gap: float | None) -> bool:
    if gap is None:
        return True
    return (
        a.x2 + gap <= b.x1 or b.x2 + gap <= a.x1 or a.y2 + gap <= b.y1 or b.y2 + gap <= a.y1
    )


def _random_box(rng: SplitMix64, cfg: SceneConfig) -> Box:
    size = math.exp(rng.uniform(math.log(cfg.min_size), math.log(cfg.max_size)))
    aspect = math.exp(rng.uniform(-math.log(cfg.max_aspect), math.log(cfg.max_aspect)))
    w = min(size * math.sqrt(aspect), cfg.width)
    h = min(size / math.sqrt(aspect), cfg.height)
    x = rng.uniform(0.0, cfg.width - w)
    y = rng.uniform(0.0, cfg.height - h)
    return Box(x, y, x + w, y + h)


def generate_scene(seed: int, cfg: SceneConfig | None = None, scene_id: str | None = None) -> Scene:
    """Place a seeded random number of objects on the canvas.

    With ``adjacent_pair_prob > 0`` an object may receive a same-category
    neighbour of similar size placed right next to it.
    """
    cfg = cfg or SceneConfig()
    rng = SplitMix64(seed)
    n = cfg.min_objects + rng.integers(0, cfg.max_objects - cfg.min_objects + 1)
    objects: list[SceneObject] = []
    attempts = 0
    while len(objects) < n:
        attempts += 1
        if attempts > cfg.max_attempts * max(n, 1):
            raise RuntimeError(f"could not place {n} objects with the configured separation")
        cat = rng.integers(0, cfg.n_categories)
        box = _random_box(rng, cfg)
        if not all(_separated(box, o.box, cfg.min_separation) for o in objects):
            continue
        objects.append(SceneObject(cat, box))
        if len(objects) < n and cfg.adjacent_pair_prob > 0 and rng.random() < cfg.adjacent_pair_prob:
            gap = cfg.min_separation or 0.0
            w = box.width * rng.uniform(0.8, 1.2)
            x1 = box.x2 + gap
            y1 = min(max(box.y1 + rng.uniform(-0.1, 0.1) * box.height, 0.0), cfg.height - box.height)
            if x1 + w <= cfg.width:
                twin = Box(x1, y1, x1 + w, y1 + box.height)
                if all(_separated(twin, o.box, cfg.min_separation) for o in objects):
                    objects.append(SceneObject(cat, twin))
    return Scene(cfg.width, cfg.height, tuple(objects), seed, scene_id or f"scene{seed}")


def _pick_gt(scene: Scene, region: Region, category: int, anchor: Box | None) -> list[int]:
    """Indices of same-category objects overlapping the region, best IoU to the anchor first."""
    anchor = anchor or region.bounds
    idx = [k for k, o in enumerate(scene.objects) if o.category == category]
    if not idx:
        return []
    gts = np.array([scene.objects[k].box.to_list() for k in idx])
    inside = iou_matrix(region.bounds.to_array()[None], gts)[0] > 0
    scores = iou_matrix(anchor.to_array()[None], gts)[0]
    ranked = sorted((k for k, ok in zip(range(len(idx)), inside) if ok), key=lambda k: (-scores[k], k))
    return [idx[k] for k in ranked]


def _jitter(g: GridBox, M: int, sd: float, rng: SplitMix64) -> GridBox:
    d = [int(round(rng.normal(0.0, sd))) for _ in range(4)]
    clip = lambda v: min(max(v, 1), M)  # noqa: E731
    l, r = sorted((clip(g.l + d[0]), clip(g.r + d[1])))
    t, b = sorted((clip(g.t + d[2]), clip(g.b + d[3])))
    return GridBox(l, t, r, b)


def oracle_probmaps(
    scene: Scene,
    region: Region,
    category: int,
    noise: NoiseSpec | None = None,
    kind: str = "inout",
    seed: int = 0,
    anchor: Box | None = None,
) -> ProbMaps:
    """Probability maps an ideal localizer would output, optionally corrupted.

    The reference gt is the same-category object overlapping ``region`` with
    the highest IoU to ``anchor`` (the region itself when omitted). With zero
    noise the result equals the clamped targets of that gt. With no eligible
    gt every entry is ``EPS``.
    """
    noise = noise or NoiseSpec()
    M = region.M
    ranked = _pick_gt(scene, region, category, anchor)
    if not ranked:
        return ProbMaps(kind, M, {h: np.zeros(M) for h in heads_for(kind)})
    rng = SplitMix64(seed)
    g = project_to_grid(scene.objects[ranked[0]].box, region)
    if noise.border_jitter_sd > 0:
        g = _jitter(g, M, noise.border_jitter_sd, rng)
    maps = {k: np.clip(v, EPS, 1 - EPS) for k, v in TargetVectors.build(g, M, kind).vectors.items()}

    if noise.false_mode_prob > 0 and rng.random() < noise.false_mode_prob:
        if len(ranked) > 1:
            fg = project_to_grid(scene.objects[ranked[1]].box, region)
        else:
            shift = max(1, (g.r - g.l + 1) // 2) * (1 if rng.random() < 0.5 else -1)
            fg = GridBox(min(max(g.l + shift, 1), M), g.t, min(max(g.r + shift, 1), M), g.b)
        s = noise.false_mode_strength
        for name, lo, hi in (("px", fg.l, fg.r), ("py", fg.t, fg.b)):
            if name in maps:
                maps[name][lo - 1 : hi] = np.maximum(maps[name][lo - 1 : hi], s)
        for name, pos in (("pl", fg.l), ("pr", fg.r), ("pt", fg.t), ("pb", fg.b)):
            if name in maps:
                maps[name][pos - 1] = max(maps[name][pos - 1], s)

    if noise.logit_noise_sd > 0:
        for name in heads_for(kind):
            z = np.log(maps[name]) - np.log1p(-maps[name])
            maps[name] = sigmoid(z + noise.logit_noise_sd * rng.normal_array(M))
    return ProbMaps(kind, M, maps)


def max_iou_to_category(scene: Scene, boxes: np.ndarray, category: int) -> np.ndarray:
    gts = scene.gt_array(category)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if gts.shape[0] == 0:
        return np.zeros(boxes.shape[0])
    return iou_matrix(boxes, gts).max(axis=1)


def _score_noise(seed: int, scene: Scene, boxes: np.ndarray, category: int) -> np.ndarray:
    key = derive_seed(seed, "score", scene.id, int(category))
    return u64_to_normal(hash_rows(key, boxes))


def oracle_scorer(scene: Scene, box: Box, category: int, noise_sd: float = 0.0, seed: int = 0) -> float:
    """Recognition stand-in: cube of the best IoU to a same-category gt, plus noise.

    The noise is a pure function of ``(seed, scene id, category, box)``.
    """
    arr = box.to_array()[None]
    s = max_iou_to_category(scene, arr, category)[0] ** 3
    if noise_sd > 0:
        s += noise_sd * _score_noise(seed, scene, arr, category)[0]
    return float(s)


class OracleScorer:
    """Vectorized :func:`oracle_scorer` that counts how many box rows it scored."""

    def __init__(self, noise_sd: float = 0.0, seed: int = 0) -> None:
        self.noise_sd = noise_sd
        self.seed = seed
        self.rows_scored = 0
        self.calls = 0

    def score(self, scene: Scene, boxes: np.ndarray, categories: Sequence[int]) -> np.ndarray:
        """Scores of shape ``(len(boxes), len(categories))``."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        self.rows_scored += boxes.shape[0]
        self.calls += 1
        out = np.zeros((boxes.shape[0], len(categories)))
        for j, c in enumerate(categories):
            out[:, j] = max_iou_to_category(scene, boxes, c) ** 3
            if self.noise_sd > 0 and boxes.shape[0]:
                out[:, j] += self.noise_sd * _score_noise(self.seed, scene, boxes, c)
        return out


@dataclass
class WindowConfig:
    min_size: float = 116.0
    scale_factor: float = math.sqrt(2.0)
    aspect_ratios: tuple[float, ...] = (1 / 3, 1 / 2, 1.0, 2.0, 3.0)
    stride_frac: float = 0.1


def sliding_windows_all(width: float, height: float, cfg: WindowConfig | None = None) -> np.ndarray:
    """Every window of the scale pyramid, before subsampling.

    Windows are ``s * sqrt(a)`` wide and ``s / sqrt(a)`` tall for each scale
    ``s = min_size * scale_factor**k`` and aspect ``a``; only windows that fit in
    the canvas are placed, on a grid with stride ``stride_frac * min(w, h)``.
    """
    cfg = cfg or WindowConfig()
    out = []
    s = cfg.min_size
    while True:
        fitted = False
        for a in cfg.aspect_ratios:
            w, h = s * math.sqrt(a), s / math.sqrt(a)
            if w > width + 1e-9 or h > height + 1e-9:
                continue
            fitted = True
            w, h = min(w, width), min(h, height)
            stride = cfg.stride_frac * min(w, h)
            nx = int(math.floor((width - w) / stride + 1e-9)) + 1
            ny = int(math.floor((height - h) / stride + 1e-9)) + 1
            xs = np.arange(nx) * stride
            ys = np.arange(ny) * stride
            X, Y = np.meshgrid(xs, ys, indexing="ij")
            X, Y = X.ravel(), Y.ravel()
            out.append(np.stack([X, Y, X + w, Y + h], axis=1))
        if not fitted:
            break
        s *= cfg.scale_factor
    if not out:
        return np.zeros((0, 4))
    boxes = np.concatenate(out)
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, height)
    return boxes


def sliding_windows(
    canvas: tuple[float, float], target_count: int = 10000, cfg: WindowConfig | None = None, seed: int = 0
) -> np.ndarray:
    boxes = sliding_windows_all(canvas[0], canvas[1], cfg)
    if boxes.shape[0] > target_count:
        keep = SplitMix64(derive_seed(seed, "windows")).sample_indices(boxes.shape[0], target_count)
        boxes = boxes[keep]
    return boxes


_JITTER_LEVELS = (0.04, 0.08, 0.15, 0.25, 0.4)


def _concentric(gt: Box, target_iou: float, canvas: tuple[float, float]) -> Box | None:
    k = 1.0 / math.sqrt(target_iou)
    cx, cy = gt.center
    hw, hh = 0.5 * k * gt.width, 0.5 * k * gt.height
    try:
        return clip_to_canvas(Box(cx - hw, cy - hh, cx + hw, cy + hh), *canvas)
    except GeometryError:
        return None


def jittered_proposals(
    scene: Scene,
    per_gt_count: int,
    iou_band: tuple[float, float] = (0.5, 0.9),
    seed: int = 0,
    background_count: int = 0,
    max_attempts: int = 2000,
) -> list[Box]:
    """Per gt, ``per_gt_count`` boxes whose IoU to it lies inside ``iou_band``; then background boxes.

    Foreground boxes come from rejection sampling of jittered copies of the gt;
    if that fails, a concentric enlargement at the band midpoint is tried.
    """
    lo, hi = iou_band
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"invalid IoU band {iou_band}")
    rng = SplitMix64(derive_seed(seed, "proposals", scene.id))
    W, H = scene.canvas
    out: list[Box] = []
    for obj in scene.objects:
        gt = obj.box
        if lo >= 1.0:
            out.extend([gt] * per_gt_count)
            continue
        garr = gt.to_array()[None]
        got = 0
        for attempt in range(max_attempts):
            if got == per_gt_count:
                break
            sd = _JITTER_LEVELS[attempt % len(_JITTER_LEVELS)]
            cx, cy = gt.center
            cx += rng.normal(0.0, sd) * gt.width
            cy += rng.normal(0.0, sd) * gt.height
            w = gt.width * math.exp(rng.normal(0.0, sd))
            h = gt.height * math.exp(rng.normal(0.0, sd))
            x1, y1 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
            x2, y2 = min(cx + w / 2, W), min(cy + h / 2, H)
            if not (x1 < x2 and y1 < y2):
                continue
            cand = Box(x1, y1, x2, y2)
            v = iou_matrix(cand.to_array()[None], garr)[0, 0]
            if lo <= v <= hi:
                out.append(cand)
                got += 1
        while got < per_gt_count:
            cand = _concentric(gt, 0.5 * (lo + hi), (W, H))
            if cand is None or not (lo <= iou_matrix(cand.to_array()[None], garr)[0, 0] <= hi):
                break
            out.append(cand)
            got += 1
    for _ in range(background_count):
        w = rng.uniform(0.05, 0.6) * W
        h = rng.uniform(0.05, 0.6) * H
        x = rng.uniform(0.0, W - w)
        y = rng.uniform(0.0, H - h)
        out.append(Box(x, y, x + w, y + h))
    return out
