"""Target probability vectors and training-sample assembly."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .geometry import Box, GeometryError, GridBox, Region, enlarge, iou_matrix, project_to_grid

if TYPE_CHECKING:
    from .synthetic import Scene

KINDS = ("inout", "borders", "combined")


def check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    return kind


def inout_targets(g: GridBox, M: int) -> tuple[np.ndarray, np.ndarray]:
    g.validate(M)
    idx = np.arange(1, M + 1)
    tx = ((idx >= g.l) & (idx <= g.r)).astype(np.float64)
    ty = ((idx >= g.t) & (idx <= g.b)).astype(np.float64)
    return tx, ty


def border_targets(g: GridBox, M: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One-hot vectors ``(T_l, T_r, T_t, T_b)``."""
    g.validate(M)
    out = []
    for pos in (g.l, g.r, g.t, g.b):
        v = np.zeros(M, dtype=np.float64)
        v[pos - 1] = 1.0
        out.append(v)
    return tuple(out)  # type: ignore[return-value]


@dataclass(frozen=True)
class TargetVectors:
    kind: str
    M: int
    gridbox: GridBox
    vectors: dict[str, np.ndarray] = field(repr=False)

    @classmethod
    def build(cls, g: GridBox, M: int, kind: str) -> "TargetVectors":
        check_kind(kind)
        vecs: dict[str, np.ndarray] = {}
        if kind in ("inout", "combined"):
            vecs["px"], vecs["py"] = inout_targets(g, M)
        if kind in ("borders", "combined"):
            vecs["pl"], vecs["pr"], vecs["pt"], vecs["pb"] = border_targets(g, M)
        return cls(kind, M, g, vecs)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.vectors[name]


@dataclass(frozen=True)
class TrainingSample:
    region: Region
    target: TargetVectors
    category: int
    gt_gridbox: GridBox
    proposal: Box
    gt_box: Box

    def to_json(self) -> str:
        return json.dumps(
            {
                "region": self.region.bounds.to_list(),
                "M": self.region.M,
                "kind": self.target.kind,
                "category": self.category,
                "gridbox": self.gt_gridbox.to_list(),
                "proposal": self.proposal.to_list(),
                "gt": self.gt_box.to_list(),
            },
            sort_keys=True,
        )


@dataclass
class SampleBatch:
    samples: list[TrainingSample]
    skipped: int = 0


def make_training_samples(
    scene: "Scene",
    proposals: Sequence[Box],
    kind: str = "inout",
    gamma: float = 1.8,
    M: int = 28,
    min_iou: float = 0.4,
) -> SampleBatch:
    """Build localization training samples from proposals, one pass per category.

    A proposal becomes a sample for category ``c`` when its best IoU against the
    ground truths of ``c`` is at least ``min_iou``; it is assigned the gt with the
    highest IoU (lowest index on ties). The search region is the proposal
    enlarged by ``gamma``.
    """
    check_kind(kind)
    if len(proposals) == 0:
        raise ValueError("make_training_samples needs at least one proposal")
    batch = SampleBatch([])
    props = np.array([p.to_list() for p in proposals], dtype=np.float64)
    for cat in scene.categories_present():
        gts = [o.box for o in scene.objects if o.category == cat]
        ious = iou_matrix(props, np.array([g.to_list() for g in gts]))
        for k, prop in enumerate(proposals):
            j = int(np.argmax(ious[k]))
            if ious[k, j] < min_iou:
                continue
            gt = gts[j]
            try:
                region = enlarge(prop, gamma, (scene.width, scene.height), M)
                gbox = project_to_grid(gt, region)
            except GeometryError:
                batch.skipped += 1
                continue
            batch.samples.append(
                TrainingSample(region, TargetVectors.build(gbox, M, kind), cat, gbox, prop, gt)
            )
    return batch
