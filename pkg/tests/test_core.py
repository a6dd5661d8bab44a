import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from advmark.core import (
    ClosedSpline, ImageGrid, LandmarkSet, fill_polygon, fit_closed_spline,
    polygon_area, rasterize_spline, regular_polygon,
)
from advmark.errors import DuplicatePoints, EmptyMask, InvalidCount

GRID = ImageGrid(128, 128, 1.0)


def random_landmarks(rng, size=128):
    # star-shaped: sorted angles around a centre, so the cyclic order is a simple loop
    c = rng.uniform(0.35 * size, 0.65 * size, 2)
    ang = np.sort(rng.uniform(0, 2 * np.pi, 6))
    ang += np.arange(6) * 0.05
    r = rng.uniform(0.12 * size, 0.3 * size, 6)
    return LandmarkSet(np.stack([c[0] + r * np.cos(ang), c[1] + r * np.sin(ang)], 1))


def test_grid_validation():
    with pytest.raises(ValueError):
        ImageGrid(8, 64)
    with pytest.raises(ValueError):
        ImageGrid(64, 64, 0.0)
    assert ImageGrid.canonical().shape == (512, 512)
    assert ImageGrid.desk(64).spacing == pytest.approx(0.169 * 8)


def test_circle_fit_within_5_percent_of_radius():
    r = 20.0
    s = fit_closed_spline(regular_polygon(6, r, (64, 64), phase=0.3))
    dense = s.sample(5000)
    dev = np.abs(np.linalg.norm(dense - 64, axis=1) - r)
    assert dev.max() < 0.05 * r


def test_triangle_closure_exact():
    s = fit_closed_spline([(10, 10), (40, 12), (25, 35)], n_expected=3)
    assert np.array_equal(s(0.0), s(1.0))


def test_hexagon_area_oracle():
    hexagon = regular_polygon(6, 30, (64, 64))
    area = polygon_area(hexagon)
    filled_poly = fill_polygon(hexagon, GRID.shape).sum()
    assert abs(filled_poly - area) / area < 0.05
    filled_spline = rasterize_spline(fit_closed_spline(hexagon), GRID).sum()
    assert area < filled_spline < np.pi * 30 ** 2


def test_circle_area_within_3_percent():
    s = ClosedSpline(regular_polygon(12, 20, (64, 64)))
    n = rasterize_spline(s, GRID, "filled").sum()
    assert abs(n - np.pi * 400) / (np.pi * 400) < 0.03


def test_offgrid_spline_is_empty():
    s = ClosedSpline(regular_polygon(6, 10, (500, 500)))
    for mode in ("filled", "outline"):
        with pytest.raises(EmptyMask):
            rasterize_spline(s, GRID, mode)


def test_outline_within_dilated_boundary():
    s = ClosedSpline(regular_polygon(6, 25, (60, 70), phase=0.2))
    filled = rasterize_spline(s, GRID, "filled")
    outline = rasterize_spline(s, GRID, "outline")
    boundary = filled & ~ndimage.binary_erosion(filled)
    dilated = ndimage.binary_dilation(boundary, structure=np.ones((3, 3), bool))
    assert outline.any()
    assert not (outline & ~dilated).any()


def test_outline_pixels_are_near_curve():
    s = ClosedSpline(regular_polygon(6, 25, (60, 70)))
    outline = rasterize_spline(s, GRID, "outline")
    rr, cc = np.nonzero(outline)
    dense = s.sample(20000)
    d = np.sqrt(((np.stack([cc, rr], 1)[:, None] - dense[None]) ** 2).sum(-1)).min(1)
    assert d.max() <= 0.5 + 1e-3


def test_filled_convex_is_simply_connected():
    s = ClosedSpline(regular_polygon(6, 25, (64, 64)))
    filled = rasterize_spline(s, GRID)
    _, n = ndimage.label(filled)
    assert n == 1
    _, holes = ndimage.label(~filled)
    assert holes == 1


def test_errors():
    pts = regular_polygon(6, 20, (64, 64))
    pts[3] = pts[1] + 1e-8
    with pytest.raises(DuplicatePoints):
        fit_closed_spline(pts)
    with pytest.raises(InvalidCount):
        fit_closed_spline(regular_polygon(5, 20, (64, 64)))
    lm = LandmarkSet(regular_polygon(6, 20, (64, 64)), valid=[1, 1, 0, 1, 1, 1])
    with pytest.raises(InvalidCount):
        fit_closed_spline(lm)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_closure_and_interpolation(seed):
    lm = random_landmarks(np.random.default_rng(seed))
    s = fit_closed_spline(lm)
    assert np.abs(s(0.0) - s(1.0)).max() <= 1e-9
    knots = s(np.arange(6) / 6)
    assert np.abs(knots - lm.points).max() <= 1e-6


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rasterization_deterministic(seed):
    lm = random_landmarks(np.random.default_rng(seed))
    a = rasterize_spline(fit_closed_spline(lm), GRID)
    b = rasterize_spline(fit_closed_spline(lm.copy()), GRID)
    assert np.array_equal(a, b)
