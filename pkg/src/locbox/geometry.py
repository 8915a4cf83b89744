"""Boxes, search regions and the mapping between image coordinates and the M-grid.

Boxes use the corner convention ``(x1, y1, x2, y2)`` in continuous pixel
coordinates. A :class:`Region` divides its bounds into ``M`` equal columns and
``M`` equal rows; column ``i`` (1-based) covers the half-open interval
``[x1 + (i-1) * w / M, x1 + i * w / M)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised for degenerate boxes or empty projections."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box coordinates: {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise GeometryError(f"degenerate box: {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def to_array(self) -> np.ndarray:
        return np.array(self.to_list(), dtype=np.float64)

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "Box":
        if len(seq) != 4:
            raise GeometryError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.width, self.height)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class GridBox:
    """Box on the discrete 1..M grid; ``l..r`` are columns and ``t..b`` rows, inclusive."""

    l: int
    t: int
    r: int
    b: int

    def validate(self, M: int) -> "GridBox":
        if not (1 <= self.l <= self.r <= M and 1 <= self.t <= self.b <= M):
            raise GeometryError(f"invalid grid box {self} for M={M}")
        return self

    def to_list(self) -> list[int]:
        return [self.l, self.t, self.r, self.b]


@dataclass(frozen=True)
class Region:
    bounds: Box
    M: int = 28

    def __post_init__(self) -> None:
        if not isinstance(self.M, (int, np.integer)) or self.M < 1:
            raise GeometryError(f"grid resolution must be a positive integer, got {self.M!r}")

    def x_edges(self) -> np.ndarray:
        return _edges(self.bounds.x1, self.bounds.width, self.M)

    def y_edges(self) -> np.ndarray:
        return _edges(self.bounds.y1, self.bounds.height, self.M)


def _edges(origin: float, extent: float, M: int) -> np.ndarray:
    # Same expression as grid_to_box so projections round-trip bit-exactly.
    return np.array([origin + k * extent / M for k in range(M + 1)], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(K, 4)`` corner-format arrays.

    Agrees bit-for-bit with :func:`iou` on every pair.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    ok = (iw > 0) & (ih > 0)
    inter = np.where(ok, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(ok, inter / union, 0.0)
    return out


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.to_list() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def clip_to_canvas(b: Box, width: float, height: float) -> Box:
    """Clamp ``b`` to ``[0, width] x [0, height]``; raises if nothing is left."""
    x1, y1 = max(b.x1, 0.0), max(b.y1, 0.0)
    x2, y2 = min(b.x2, float(width)), min(b.y2, float(height))
    if not (x1 < x2 and y1 < y2):
        raise GeometryError(f"box {b.to_list()} lies outside the {width}x{height} canvas")
    return Box(x1, y1, x2, y2)


def enlarge(b: Box, gamma: float, canvas: tuple[float, float], M: int = 28) -> Region:
    """Scale ``b`` by ``gamma`` about its center and clamp the result to the canvas.

    Args:
        b: candidate box.
        gamma: enlargement factor, at least 1.
        canvas: ``(width, height)`` of the image.
        M: grid resolution of the returned region.

    Returns:
        The search region.

    Raises:
        GeometryError: if ``gamma < 1`` or the clamped region has zero area.
    """
    if not gamma >= 1.0:
        raise GeometryError(f"gamma must be >= 1, got {gamma}")
    cx, cy = b.center
    hw = 0.5 * gamma * b.width
    hh = 0.5 * gamma * b.height
    if gamma == 1.0:
        scaled = b
    else:
        x1, y1, x2, y2 = cx - hw, cy - hh, cx + hw, cy + hh
        if not (x1 < x2 and y1 < y2):
            raise GeometryError("enlarged box collapsed")
        scaled = Box(x1, y1, x2, y2)
    return Region(clip_to_canvas(scaled, canvas[0], canvas[1]), M)


def _inside_cells(lo: float, hi: float, edges: np.ndarray) -> np.ndarray:
    overlap = np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1])
    return np.flatnonzero(overlap > 0)


def project_to_grid(b: Box, r: Region) -> GridBox:
    """First and last columns/rows of ``r`` that overlap ``b`` with positive length."""
    cols = _inside_cells(b.x1, b.x2, r.x_edges())
    rows = _inside_cells(b.y1, b.y2, r.y_edges())
    if cols.size == 0 or rows.size == 0:
        raise GeometryError(f"box {b.to_list()} does not overlap region {r.bounds.to_list()}")
    return GridBox(int(cols[0]) + 1, int(rows[0]) + 1, int(cols[-1]) + 1, int(rows[-1]) + 1)


def grid_to_box(g: GridBox, r: Region) -> Box:
    g.validate(r.M)
    bx, M = r.bounds, r.M
    w, h = bx.width, bx.height
    return Box(
        bx.x1 + (g.l - 1) * w / M,
        bx.y1 + (g.t - 1) * h / M,
        bx.x1 + g.r * w / M,
        bx.y1 + g.b * h / M,
    )
