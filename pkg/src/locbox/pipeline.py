"""Iterative detection pipeline: score, prune, localize, merge, post-process."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .geometry import Box, GeometryError, Region, clip_to_canvas, enlarge, grid_to_box, iou_matrix
from .inference import ProbMaps, infer
from .regression import RegTargets, reg_apply, reg_targets
from .rng import SplitMix64, derive_seed
from .synthetic import NoiseSpec, Scene, SceneConfig, oracle_probmaps


@dataclass(frozen=True)
class Detection:
    scene_id: str
    category: int
    box: Box
    score: float
    iteration: int = 1

    def to_json(self) -> str:
        return json.dumps(
            {
                "scene_id": self.scene_id,
                "category": self.category,
                "box": self.box.to_list(),
                "score": self.score,
                "iteration_of_origin": self.iteration,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Detection":
        d = json.loads(line)
        return cls(d["scene_id"], int(d["category"]), Box.from_seq(d["box"]), float(d["score"]),
                   int(d.get("iteration_of_origin", 1)))


@dataclass
class PipelineConfig:
    T: int = 4
    gamma: float = 1.8
    prune_budget: float = 18.0
    prune_nms_iou: float = 0.95
    final_nms_iou: float = 0.3
    voting_iou: float = 0.5
    M: int = 28

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError(f"pipeline needs T >= 1, got {self.T}")
        for name in ("prune_nms_iou", "final_nms_iou", "voting_iou"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.gamma < 1.0:
            raise ValueError("gamma must be >= 1")


class Scorer(Protocol):
    def score(self, scene: Scene, boxes: np.ndarray, categories: Sequence[int]) -> np.ndarray: ...


class Localizer(Protocol):
    def localize(self, scene: Scene, boxes: np.ndarray, category: int) -> np.ndarray: ...


# ---------------------------------------------------------------- post-processing


def _nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    order = list(np.argsort(-scores, kind="stable"))
    keep: list[int] = []
    if not order:
        return keep
    ious = iou_matrix(boxes, boxes)
    alive = np.ones(len(scores), dtype=bool)
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        alive &= ious[i] < iou_thresh
    return keep


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy per-category, per-scene suppression of detections overlapping a better one at IoU >= thresh.

    Survivors are returned in descending score order within each group.
    """
    out: list[Detection] = []
    for members in _groups(dets).values():
        boxes = np.array([d.box.to_list() for d in members])
        scores = np.array([d.score for d in members])
        out.extend(members[i] for i in _nms_indices(boxes, scores, iou_thresh))
    return out


def _groups(dets: Sequence[Detection]) -> dict[tuple[str, int], list[Detection]]:
    groups: dict[tuple[str, int], list[Detection]] = {}
    for d in dets:
        groups.setdefault((d.scene_id, d.category), []).append(d)
    return groups


def box_voting(kept: Sequence[Detection], pool: Sequence[Detection], voting_iou: float = 0.5) -> list[Detection]:
    """Replace each kept box by the score-weighted mean of same-group pool boxes with IoU >= ``voting_iou``.

    Weights are ``max(score, 0)``; if they sum to zero the box is left as is.
    """
    pools = _groups(pool)
    out = []
    for d in kept:
        members = pools.get((d.scene_id, d.category), [])
        if not members:
            out.append(d)
            continue
        boxes = np.array([m.box.to_list() for m in members])
        w = np.maximum(np.array([m.score for m in members]), 0.0)
        w = np.where(iou_matrix(d.box.to_array()[None], boxes)[0] >= voting_iou, w, 0.0)
        if w.sum() <= 0:
            out.append(d)
            continue
        coords = (w[:, None] * boxes).sum(axis=0) / w.sum()
        try:
            out.append(Detection(d.scene_id, d.category, Box.from_seq(coords), d.score, d.iteration))
        except GeometryError:
            out.append(d)
    return out


def post_process(merged: Sequence[Detection], cfg: PipelineConfig) -> list[Detection]:
    kept = nms(merged, cfg.final_nms_iou)
    voted = box_voting(kept, merged, cfg.voting_iou)
    # Voting can pull two survivors together; a last pass restores the NMS guarantee.
    return nms(voted, cfg.final_nms_iou)


def select_budget(scored: Sequence[Detection], cfg: PipelineConfig, image_count: int) -> list[Detection]:
    """Top ``round(budget * image_count)`` detections per category, in input order.

    The per-category score threshold is global across images; ties in score
    are resolved by input order.
    """
    by_cat: dict[int, list[int]] = {}
    for k, d in enumerate(scored):
        by_cat.setdefault(d.category, []).append(k)
    quota = int(round(cfg.prune_budget * image_count))
    chosen: list[int] = []
    for cat in sorted(by_cat):
        idx = by_cat[cat]
        scores = np.array([scored[k].score for k in idx])
        order = np.argsort(-scores, kind="stable")[:quota]
        chosen.extend(idx[i] for i in order)
    chosen.sort()
    return [scored[k] for k in chosen]


def prune(scored: Sequence[Detection], cfg: PipelineConfig, image_count: int) -> list[Detection]:
    """Budget selection (:func:`select_budget`) followed by near-duplicate NMS at ``prune_nms_iou``."""
    return nms(select_budget(scored, cfg, image_count), cfg.prune_nms_iou)


# ---------------------------------------------------------------- localizers


class ProbLocalizer:
    """Enlarge, ask ``source`` for probability maps, infer, back-project.

    ``source(scene, region, category, anchor)`` returns :class:`ProbMaps`.
    """

    def __init__(self, source: Callable[..., ProbMaps], gamma: float = 1.8, M: int = 28) -> None:
        self.source = source
        self.gamma = gamma
        self.M = M
        self.calls = 0

    def localize(self, scene: Scene, boxes: np.ndarray, category: int) -> np.ndarray:
        out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        for k, row in enumerate(out):
            self.calls += 1
            b = Box.from_seq(row)
            try:
                region = enlarge(b, self.gamma, scene.canvas, self.M)
            except GeometryError:
                continue
            p = self.source(scene, region, category, b)
            out[k] = grid_to_box(infer(p), region).to_list()
        return out


class RegressionLocalizer:
    """Apply a predicted regression transform; ``source(scene, box, category)`` returns :class:`RegTargets`."""

    def __init__(self, source: Callable[..., RegTargets]) -> None:
        self.source = source
        self.calls = 0

    def localize(self, scene: Scene, boxes: np.ndarray, category: int) -> np.ndarray:
        out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
        for k, row in enumerate(out):
            self.calls += 1
            b = Box.from_seq(row)
            try:
                out[k] = clip_to_canvas(reg_apply(b, self.source(scene, b, category)), *scene.canvas).to_list()
            except GeometryError:
                pass
        return out


def oracle_localizer(kind: str, noise: NoiseSpec | None = None, seed: int = 0,
                     gamma: float = 1.8, M: int = 28) -> ProbLocalizer:
    """Localizer backed by :func:`oracle_probmaps`; noise is keyed by (seed, scene, category, box)."""

    def source(scene: Scene, region: Region, category: int, anchor: Box) -> ProbMaps:
        key = derive_seed(seed, "oracle-maps", scene.id, category, *anchor.to_list())
        return oracle_probmaps(scene, region, category, noise, kind, key, anchor=anchor)

    return ProbLocalizer(source, gamma, M)


def oracle_regression_localizer(noise_sd: float = 0.0, seed: int = 0) -> RegressionLocalizer:
    """Regression stand-in: exact transform to the best same-category gt, plus Gaussian noise."""

    def source(scene: Scene, box: Box, category: int) -> RegTargets:
        gts = scene.gt_array(category)
        if gts.shape[0] == 0:
            return RegTargets(0.0, 0.0, 0.0, 0.0)
        ious = iou_matrix(box.to_array()[None], gts)[0]
        j = int(np.argmax(ious))
        if ious[j] <= 0:
            return RegTargets(0.0, 0.0, 0.0, 0.0)
        t = reg_targets(box, Box.from_seq(gts[j])).to_array()
        if noise_sd > 0:
            rng = SplitMix64(derive_seed(seed, "oracle-reg", scene.id, category, *box.to_list()))
            t = t + noise_sd * rng.normal_array(4)
        return RegTargets.from_seq(t)

    return RegressionLocalizer(source)


# ---------------------------------------------------------------- driver


@dataclass
class PipelineResult:
    detections: list[Detection]
    merged: list[Detection]
    # candidate boxes per iteration (after pruning at t=1), as detections with their scores
    per_iteration: dict[int, list[Detection]] = field(default_factory=dict)


def _default_categories(scenes: Sequence[Scene]) -> list[int]:
    n = SceneConfig().n_categories
    present = {c for s in scenes for c in s.categories_present()}
    return list(range(max([n] + [c + 1 for c in present])))


def run_pipeline_many(
    scenes: Sequence[Scene],
    initial_boxes: Sequence[np.ndarray],
    scorer: Scorer,
    localizer: Localizer | None,
    cfg: PipelineConfig,
    categories: Sequence[int] | None = None,
) -> PipelineResult:
    """Run the pipeline over a set of images with one global pruning threshold per category.

    Without a localizer the run stops after the first scoring round, whatever ``T`` is.
    """
    categories = _default_categories(scenes) if categories is None else list(categories)
    T = cfg.T if localizer is not None else 1

    # t = 1: category-agnostic boxes are scored once for all categories.
    first: list[Detection] = []
    for scene, boxes in zip(scenes, initial_boxes):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if boxes.shape[0] == 0 or not categories:
            continue
        S = scorer.score(scene, boxes, categories)
        for j, c in enumerate(categories):
            first.extend(Detection(scene.id, c, Box.from_seq(boxes[k]), float(S[k, j]), 1)
                         for k in range(boxes.shape[0]))
    per_iter = {1: prune(first, cfg, max(len(scenes), 1))}

    current = {key: np.array([d.box.to_list() for d in dets]) for key, dets in _groups(per_iter[1]).items()}
    order = [(s, c) for s in scenes for c in categories if (s.id, c) in current]
    for t in range(2, T + 1):
        per_iter[t] = []
        for scene, c in order:
            boxes = localizer.localize(scene, current[scene.id, c], c)
            current[scene.id, c] = boxes
            S = scorer.score(scene, boxes, [c])[:, 0]
            per_iter[t].extend(Detection(scene.id, c, Box.from_seq(b), float(s), t) for b, s in zip(boxes, S))

    merged = [d for t in sorted(per_iter) for d in per_iter[t]]
    return PipelineResult(post_process(merged, cfg), merged, per_iter)


def run_pipeline(scene: Scene, initial_boxes: np.ndarray, scorer: Scorer, localizer: Localizer | None,
                 cfg: PipelineConfig, categories: Sequence[int] | None = None) -> list[Detection]:
    """Single-image pipeline; returns the post-processed detections."""
    return run_pipeline_many([scene], [initial_boxes], scorer, localizer, cfg, categories).detections
