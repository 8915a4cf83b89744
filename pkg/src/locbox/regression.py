"""Bounding-box regression baseline: targets, transform and squared euclidean loss.

Formulas use the top-left + width/height convention; :class:`Box` values are
converted at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box, GeometryError


@dataclass(frozen=True)
class RegTargets:
    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.to_list()):
            raise ValueError(f"non-finite regression values: {self.to_list()}")

    def to_list(self) -> list[float]:
        return [self.tx, self.ty, self.tw, self.th]

    def to_array(self) -> np.ndarray:
        return np.array(self.to_list(), dtype=np.float64)

    @classmethod
    def from_seq(cls, seq) -> "RegTargets":
        return cls(*(float(v) for v in seq))


def reg_targets(B: Box, Bgt: Box) -> RegTargets:
    bx, by, bw, bh = B.to_xywh()
    gx, gy, gw, gh = Bgt.to_xywh()
    if bw <= 0 or bh <= 0 or gw <= 0 or gh <= 0:
        raise GeometryError("regression targets need positive widths and heights")
    return RegTargets((gx - bx) / bw, (gy - by) / bh, math.log(gw / bw), math.log(gh / bh))


def reg_apply(B: Box, f: RegTargets) -> Box:
    bx, by, bw, bh = B.to_xywh()
    return Box.from_xywh(bw * f.tx + bx, bh * f.ty + by, bw * math.exp(f.tw), bh * math.exp(f.th))


def reg_loss(pred: RegTargets, target: RegTargets) -> tuple[float, np.ndarray]:
    """Squared euclidean distance and its gradient w.r.t. ``pred``."""
    d = pred.to_array() - target.to_array()
    return float(d @ d), 2.0 * d


def reg_targets_array(B: np.ndarray, Bgt: np.ndarray) -> np.ndarray:
    """Vectorized :func:`reg_targets` over ``(N, 4)`` corner-format arrays."""
    B = np.asarray(B, dtype=np.float64).reshape(-1, 4)
    G = np.asarray(Bgt, dtype=np.float64).reshape(-1, 4)
    bw, bh = B[:, 2] - B[:, 0], B[:, 3] - B[:, 1]
    gw, gh = G[:, 2] - G[:, 0], G[:, 3] - G[:, 1]
    if (np.minimum(np.minimum(bw, bh), np.minimum(gw, gh)) <= 0).any():
        raise GeometryError("regression targets need positive widths and heights")
    return np.stack(
        [(G[:, 0] - B[:, 0]) / bw, (G[:, 1] - B[:, 1]) / bh, np.log(gw / bw), np.log(gh / bh)], axis=1
    )
