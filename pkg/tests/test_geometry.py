import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locbox.geometry import (
    Box,
    GeometryError,
    GridBox,
    Region,
    clip_to_canvas,
    enlarge,
    grid_to_box,
    iou,
    iou_matrix,
    project_to_grid,
)


def boxes(lo=0.0, hi=500.0):
    corner = st.floats(lo, hi * 0.9)
    size = st.floats(0.01, hi * 0.1 + 1.0)
    return st.tuples(corner, corner, size, size).map(lambda c: Box(c[0], c[1], c[0] + c[2], c[1] + c[3]))


def gridboxes(M):
    idx = st.integers(1, M)
    return st.tuples(idx, idx, idx, idx).map(
        lambda v: GridBox(min(v[0], v[2]), min(v[1], v[3]), max(v[0], v[2]), max(v[1], v[3]))
    )


class TestBox:
    def test_rejects_degenerate(self):
        with pytest.raises(GeometryError):
            Box(0, 0, 0, 10)
        with pytest.raises(GeometryError):
            Box(0, 0, math.nan, 10)

    def test_xywh_round_trip(self):
        b = Box(1.5, 2.0, 11.5, 7.0)
        assert Box.from_xywh(*b.to_xywh()) == b
        assert b.width == 10.0 and b.height == 5.0 and b.area == 50.0

    def test_gridbox_validate(self):
        with pytest.raises(GeometryError):
            GridBox(3, 1, 2, 1).validate(28)
        with pytest.raises(GeometryError):
            GridBox(1, 1, 29, 1).validate(28)


class TestIou:
    def test_identity(self):
        assert iou(Box(0, 0, 10, 10), Box(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 10, 10), Box(20, 20, 30, 30)) == 0.0

    def test_half_shift(self):
        assert iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(1 / 3)

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == pytest.approx(iou(b, a))
        assert 0.0 <= v <= 1.0 + 1e-12

    @given(st.lists(boxes(), min_size=1, max_size=5), st.lists(boxes(), min_size=1, max_size=5))
    def test_matrix_matches_scalar(self, a, b):
        m = iou_matrix(np.array([x.to_list() for x in a]), np.array([y.to_list() for y in b]))
        for i, x in enumerate(a):
            for j, y in enumerate(b):
                assert m[i, j] == pytest.approx(iou(x, y), abs=1e-12)


class TestEnlarge:
    def test_center_scaling(self):
        r = enlarge(Box(40, 45, 60, 55), 1.8, (100, 100))
        assert r.bounds.to_list() == pytest.approx([32, 41, 68, 59])
        assert r.M == 28

    def test_identity_gamma(self):
        b = Box(40, 45, 60, 55)
        assert enlarge(b, 1.0, (100, 100)).bounds == b

    def test_clamp(self):
        r = enlarge(Box(0, 0, 20, 20), 1.8, (100, 100))
        assert r.bounds.to_list() == pytest.approx([0, 0, 28, 28])

    def test_outside_canvas_is_error(self):
        with pytest.raises(GeometryError):
            enlarge(Box(200, 200, 210, 210), 1.8, (100, 100))

    def test_gamma_below_one_rejected(self):
        with pytest.raises(ValueError):
            enlarge(Box(0, 0, 10, 10), 0.9, (100, 100))

    @given(boxes(0, 100), st.floats(1.0, 3.0))
    def test_area_bound(self, b, gamma):
        r = enlarge(b, gamma, (100, 100))
        assert r.bounds.area <= gamma**2 * b.area * (1 + 1e-9)


class TestGridProjection:
    R28 = Region(Box(0, 0, 28, 28), 28)

    def test_full_region(self):
        assert project_to_grid(self.R28.bounds, self.R28) == GridBox(1, 1, 28, 28)

    def test_cell_aligned(self):
        assert project_to_grid(Box(3, 5, 10, 12), self.R28) == GridBox(4, 6, 10, 12)

    def test_half_cell_overlaps(self):
        assert project_to_grid(Box(9.5, 9.5, 10.5, 10.5), self.R28) == GridBox(10, 10, 11, 11)

    def test_no_overlap_is_error(self):
        with pytest.raises(GeometryError):
            project_to_grid(Box(30, 30, 40, 40), self.R28)

    def test_back_projection(self):
        assert grid_to_box(GridBox(4, 6, 10, 12), self.R28) == Box(3, 5, 10, 12)
        assert grid_to_box(GridBox(1, 1, 28, 28), self.R28) == self.R28.bounds
        r = Region(Box(10, 10, 66, 66), 28)
        assert grid_to_box(GridBox(1, 1, 1, 1), r) == Box(10, 10, 12, 12)

    @settings(max_examples=200)
    @given(st.integers(1, 60).flatmap(lambda M: st.tuples(st.just(M), gridboxes(M))),
           boxes(0, 400))
    def test_grid_round_trip(self, mg, bounds):
        M, g = mg
        r = Region(bounds, M)
        assert project_to_grid(grid_to_box(g, r), r) == g

    @given(gridboxes(28))
    def test_cell_aligned_box_round_trip(self, g):
        r = Region(Box(0, 0, 56, 84), 28)
        b = Box((g.l - 1) * 2, (g.t - 1) * 3, g.r * 2, g.b * 3)
        assert grid_to_box(project_to_grid(b, r), r) == b


def test_clip_to_canvas():
    assert clip_to_canvas(Box(-5, -5, 20, 20), 10, 10) == Box(0, 0, 10, 10)
    with pytest.raises(GeometryError):
        clip_to_canvas(Box(20, 20, 30, 30), 10, 10)
