"""Recall-vs-IoU, average recall, average precision and COCO-style mAP.

Inputs are grouped per scene: a list with one ``(N, 4)`` box array per scene
and a parallel list of ground-truth arrays. Category filtering happens in the
report builders at the bottom of the module.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .files import atomic_write
from .geometry import iou_matrix

AR_GRID = np.round(np.linspace(0.5, 1.0, 51), 2)
COCO_GRID = np.round(np.linspace(0.5, 0.95, 10), 2)


def _greedy_match_ious(boxes: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """IoU of each gt's partner under one-to-one greedy matching by descending IoU (0 if unmatched).

    Because pairs are consumed in descending IoU order, restricting to pairs
    with IoU >= t yields the same partners for every threshold t; recall at t
    is the fraction of gts whose partner IoU is >= t.
    """
    K = gts.shape[0]
    out = np.zeros(K)
    if K == 0 or boxes.shape[0] == 0:
        return out
    ious = iou_matrix(boxes, gts)
    bi, gi = np.nonzero(ious > 0)
    if bi.size == 0:
        return out
    vals = ious[bi, gi]
    order = np.lexsort((bi, gi, -vals))
    used_box = set()
    done = np.zeros(K, dtype=bool)
    for k in order:
        b, g = bi[k], gi[k]
        if done[g] or b in used_box:
            continue
        done[g] = True
        used_box.add(b)
        out[g] = vals[k]
        if done.all():
            break
    return out


def matched_ious(boxes_by_scene: Sequence[np.ndarray], gts_by_scene: Sequence[np.ndarray]) -> np.ndarray:
    parts = [
        _greedy_match_ious(np.asarray(b, float).reshape(-1, 4), np.asarray(g, float).reshape(-1, 4))
        for b, g in zip(boxes_by_scene, gts_by_scene)
    ]
    return np.concatenate(parts) if parts else np.zeros(0)


def recall_from_ious(ious: np.ndarray, thresholds) -> np.ndarray:
    ious = np.asarray(ious, dtype=np.float64)
    thr = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    if ious.size == 0:
        return np.zeros(thr.shape)
    return (ious[None, :] >= thr[:, None]).mean(axis=1)


def recall_at(boxes_by_scene, gts_by_scene, iou_thresh: float) -> float:
    """Fraction of gts matched by some box at IoU >= ``iou_thresh``."""
    return float(recall_from_ious(matched_ious(boxes_by_scene, gts_by_scene), iou_thresh)[0])


def ar_from_recalls(recalls: np.ndarray, grid: np.ndarray = AR_GRID) -> float:
    """Trapezoid integral of recall over ``[0.5, 1]``, normalized so constant recall 1 gives 1."""
    recalls = np.asarray(recalls, dtype=np.float64)
    area = float(np.sum(0.5 * (recalls[1:] + recalls[:-1]) * np.diff(grid)))
    return area / float(grid[-1] - grid[0])


def average_recall(boxes_by_scene, gts_by_scene) -> float:
    ious = matched_ious(boxes_by_scene, gts_by_scene)
    return ar_from_recalls(recall_from_ious(ious, AR_GRID))


def paired_average_recall(ious: np.ndarray) -> float:
    """AR when each prediction is paired with its own gt (one IoU per pair)."""
    return ar_from_recalls(recall_from_ious(ious, AR_GRID))


def _match_detections(scene_ids: np.ndarray, boxes: np.ndarray, scores: np.ndarray,
                      gts_by_scene: Mapping, thr: float) -> np.ndarray:
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(order.size, dtype=bool)
    taken: dict = {sid: np.zeros(len(g), dtype=bool) for sid, g in gts_by_scene.items()}
    ious_cache: dict = {}
    for rank, k in enumerate(order):
        sid = scene_ids[k]
        gts = gts_by_scene.get(sid)
        if gts is None or len(gts) == 0:
            continue
        if k not in ious_cache:
            ious_cache[k] = iou_matrix(boxes[k][None], gts)[0]
        ious = np.where(taken[sid], -1.0, ious_cache[k])
        j = int(np.argmax(ious))
        if ious[j] >= thr:
            taken[sid][j] = True
            tp[rank] = True
    return tp


def ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if n_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    rec = ctp / n_gt
    prec = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(dets_by_scene, gts_by_scene, iou_thresh: float) -> float:
    """AP for one category.

    Args:
        dets_by_scene: per scene a pair ``(boxes (N, 4), scores (N,))``.
        gts_by_scene: per scene a ``(K, 4)`` array.
        iou_thresh: minimum IoU for a true positive.
    """
    ids, boxes, scores = [], [], []
    for s, (b, sc) in enumerate(dets_by_scene):
        b = np.asarray(b, float).reshape(-1, 4)
        ids.extend([s] * b.shape[0])
        boxes.append(b)
        scores.append(np.asarray(sc, float).reshape(-1))
    gts = {s: np.asarray(g, float).reshape(-1, 4) for s, g in enumerate(gts_by_scene)}
    n_gt = sum(len(g) for g in gts.values())
    if not ids:
        return 0.0
    tp = _match_detections(np.array(ids), np.concatenate(boxes), np.concatenate(scores), gts, iou_thresh)
    return ap_from_tp(tp, n_gt)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    categories: list[int]
    recall_grid: np.ndarray = field(default_factory=lambda: AR_GRID.copy())
    recall_curves: dict[int, np.ndarray] = field(default_factory=dict)
    ar: dict[int, float] = field(default_factory=dict)
    ap_grid: np.ndarray = field(default_factory=lambda: COCO_GRID.copy())
    ap: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def mar(self) -> float:
        return float(np.mean(list(self.ar.values()))) if self.ar else 0.0

    @property
    def mean_recall_curve(self) -> np.ndarray:
        if not self.recall_curves:
            return np.zeros_like(self.recall_grid)
        return np.mean(np.stack(list(self.recall_curves.values())), axis=0)

    @property
    def map_curve(self) -> np.ndarray:
        if not self.ap:
            return np.zeros_like(self.ap_grid)
        return np.mean(np.stack(list(self.ap.values())), axis=0)

    def map_at(self, thr: float) -> float:
        idx = np.flatnonzero(np.isclose(self.ap_grid, thr))
        if idx.size == 0:
            raise KeyError(f"threshold {thr} is not on the AP grid")
        return float(self.map_curve[idx[0]])

    def recall_at(self, thr: float) -> float:
        idx = np.flatnonzero(np.isclose(self.recall_grid, thr))
        if idx.size == 0:
            raise KeyError(f"threshold {thr} is not on the recall grid")
        return float(self.mean_recall_curve[idx[0]])

    @property
    def coco_map(self) -> float:
        return float(np.mean(self.map_curve)) if self.ap else 0.0

    def summary(self) -> dict:
        return {
            "mar": self.mar,
            "ar": {str(c): v for c, v in self.ar.items()},
            "map": {f"{t:.2f}": float(v) for t, v in zip(self.ap_grid, self.map_curve)},
            "coco_map": self.coco_map,
            "recall": {f"{t:.2f}": float(v) for t, v in zip(self.recall_grid, self.mean_recall_curve)},
        }


def _group(items, scenes, category):
    """Per-scene boxes (and scores) of ``category`` from detection-like items."""
    by_scene = {s.id: ([], []) for s in scenes}
    for d in items:
        if d.category == category and d.scene_id in by_scene:
            by_scene[d.scene_id][0].append(d.box.to_list())
            by_scene[d.scene_id][1].append(d.score)
    return [
        (np.array(by_scene[s.id][0], float).reshape(-1, 4), np.array(by_scene[s.id][1], float))
        for s in scenes
    ]


def evaluate(detections: Sequence, scenes: Sequence, categories: Sequence[int] | None = None,
             recall_boxes: Sequence | None = None) -> EvalReport:
    """Full report over the categories that have at least one gt.

    Args:
        detections: items with ``scene_id``, ``category``, ``box`` and ``score``.
        scenes: the ground-truth scenes.
        categories: restrict to these categories; default is every category present.
        recall_boxes: items used for the recall curves and AR; defaults to ``detections``.
    """
    if categories is None:
        categories = sorted({o.category for s in scenes for o in s.objects})
    recall_items = detections if recall_boxes is None else recall_boxes
    rep = EvalReport(categories=[c for c in categories if any(o.category == c for s in scenes for o in s.objects)])
    for c in rep.categories:
        gts = [s.gt_array(c) for s in scenes]
        dets = _group(detections, scenes, c)
        rboxes = [b for b, _ in _group(recall_items, scenes, c)]
        rep.recall_curves[c] = recall_from_ious(matched_ious(rboxes, gts), rep.recall_grid)
        rep.ar[c] = ar_from_recalls(rep.recall_curves[c], rep.recall_grid)
        rep.ap[c] = np.array([average_precision(dets, gts, t) for t in rep.ap_grid])
    return rep


def coco_style_map(detections: Sequence, scenes: Sequence) -> float:
    return evaluate(detections, scenes).coco_map


def _fmt(v: float) -> str:
    return f"{float(v):.6f}"


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def recall_csv(report: EvalReport) -> str:
    header = ["iou"] + [f"recall_c{c}" for c in report.categories] + ["recall_mean"]
    mean = report.mean_recall_curve
    rows = [
        [_fmt(t)] + [_fmt(report.recall_curves[c][k]) for c in report.categories] + [_fmt(mean[k])]
        for k, t in enumerate(report.recall_grid)
    ]
    return _csv_text(header, rows)


def map_csv(report: EvalReport) -> str:
    header = ["iou"] + [f"ap_c{c}" for c in report.categories] + ["map"]
    mean = report.map_curve
    rows = [
        [_fmt(t)] + [_fmt(report.ap[c][k]) for c in report.categories] + [_fmt(mean[k])]
        for k, t in enumerate(report.ap_grid)
    ]
    return _csv_text(header, rows)


def iteration_csv(reports: Mapping[int, EvalReport]) -> str:
    header = ["iteration", "map_0.50", "map_0.70", "map_0.80", "map_0.90", "coco_map", "recall_0.80", "mar"]
    rows = []
    for t in sorted(reports):
        r = reports[t]
        rows.append([str(t)] + [_fmt(r.map_at(x)) for x in (0.5, 0.7, 0.8, 0.9)]
                    + [_fmt(r.coco_map), _fmt(r.recall_at(0.8)), _fmt(r.mar)])
    return _csv_text(header, rows)


def emit_curves(report: EvalReport, paths: Mapping[str, str],
                per_iteration: Mapping[int, EvalReport] | None = None) -> None:
    """Write curve CSVs.

    ``paths`` may contain ``"recall"``, ``"map"``, ``"iteration"`` and
    ``"summary"`` keys; files are written atomically.
    """
    if "recall" in paths:
        atomic_write(paths["recall"], recall_csv(report))
    if "map" in paths:
        atomic_write(paths["map"], map_csv(report))
    if "iteration" in paths and per_iteration:
        atomic_write(paths["iteration"], iteration_csv(per_iteration))
    if "summary" in paths:
        atomic_write(paths["summary"], json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
