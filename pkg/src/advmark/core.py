"""Geometry primitives: image grids, landmark sets, closed splines and rasterization.

Coordinates are ``(x, y) = (column, row)`` with the origin at the centre of the
top-left pixel, so pixel ``(r, c)`` is centred at ``x=c, y=r``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DuplicatePoints, EmptyMask, InvalidCount

N_LANDMARKS = 6
CANONICAL_SPACING = 0.169  # mm / pixel
CANONICAL_SIZE = 512


@dataclass(frozen=True)
class ImageGrid:
    height: int
    width: int
    spacing: float = CANONICAL_SPACING

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError(f"grid must be at least 16x16, got {self.height}x{self.width}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @classmethod
    def canonical(cls) -> "ImageGrid":
        return cls(CANONICAL_SIZE, CANONICAL_SIZE, CANONICAL_SPACING)

    @classmethod
    def desk(cls, size: int = 64) -> "ImageGrid":
        """Square grid covering the canonical field of view at reduced resolution."""
        return cls(size, size, CANONICAL_SPACING * CANONICAL_SIZE / size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(xx, yy)`` arrays of pixel-centre coordinates, each ``(H, W)``."""
        yy, xx = np.mgrid[0:self.height, 0:self.width]
        return xx.astype(np.float64), yy.astype(np.float64)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        return ((pts[:, 0] >= -0.5) & (pts[:, 0] <= self.width - 0.5)
                & (pts[:, 1] >= -0.5) & (pts[:, 1] <= self.height - 0.5))


class Point2(NamedTuple):
    x: float
    y: float


@dataclass
class LandmarkSet:
    """Six ordered landmarks; row ``k`` of ``points`` is landmark ``k + 1``."""

    points: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.points.shape[0] != N_LANDMARKS:
            raise InvalidCount(f"expected {N_LANDMARKS} landmarks, got {self.points.shape[0]}")
        if self.valid is None:
            self.valid = np.isfinite(self.points).all(axis=1)
        else:
            self.valid = np.asarray(self.valid, dtype=bool).reshape(N_LANDMARKS)

    def __len__(self):
        return N_LANDMARKS

    def __getitem__(self, k) -> Point2:
        return Point2(*self.points[k])

    @property
    def all_valid(self) -> bool:
        return bool(self.valid.all())

    def translated(self, dx: float, dy: float) -> "LandmarkSet":
        return LandmarkSet(self.points + np.array([dx, dy]), self.valid.copy())

    def copy(self) -> "LandmarkSet":
        return LandmarkSet(self.points.copy(), self.valid.copy())


def _as_points(points) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(points, LandmarkSet):
        return points.points, points.valid
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts, np.isfinite(pts).all(axis=1)


class ClosedSpline:
    """Periodic centripetal Catmull-Rom spline through ``control_points``.

    The global parameter ``s`` runs over ``[0, 1)``; segment ``i`` (from control
    point ``i`` to ``i + 1``) occupies ``[i/n, (i+1)/n)``, so ``curve(i/n)`` is
    control point ``i`` and ``curve(1) == curve(0)``.
    """

    alpha = 0.5

    def __init__(self, control_points):
        pts = np.asarray(control_points, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            raise InvalidCount(f"closed spline needs at least 3 points, got {len(pts)}")
        if not np.isfinite(pts).all():
            raise ValueError("control points must be finite")
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        d[np.diag_indices(len(pts))] = np.inf
        if d.min() <= 1e-6:
            i, j = np.unravel_index(np.argmin(d), d.shape)
            raise DuplicatePoints(f"control points {i} and {j} coincide")
        self.control_points = pts
        n = len(pts)
        p0 = np.roll(pts, 1, axis=0)
        p1 = pts
        p2 = np.roll(pts, -1, axis=0)
        p3 = np.roll(pts, -2, axis=0)
        self._p = np.stack([p0, p1, p2, p3], axis=1)  # (n, 4, 2)
        t1 = np.linalg.norm(p1 - p0, axis=1) ** self.alpha
        t2 = t1 + np.linalg.norm(p2 - p1, axis=1) ** self.alpha
        t3 = t2 + np.linalg.norm(p3 - p2, axis=1) ** self.alpha
        self._knots = np.stack([np.zeros(n), t1, t2, t3], axis=1)  # (n, 4)

    @property
    def n_segments(self) -> int:
        return len(self.control_points)

    def __call__(self, s) -> np.ndarray:
        return self.evaluate(s)

    def evaluate(self, s) -> np.ndarray:
        """Evaluate at parameters ``s`` (any shape); returns ``s.shape + (2,)``."""
        s = np.asarray(s, dtype=np.float64)
        shape = s.shape
        s = np.mod(s.ravel(), 1.0)
        n = self.n_segments
        seg = np.minimum((s * n).astype(np.int64), n - 1)
        u = s * n - seg
        out = self._segment_points(seg, u)
        exact = u == 0.0
        out[exact] = self.control_points[seg[exact]]
        return out.reshape(shape + (2,))

    def _segment_points(self, seg: np.ndarray, u: np.ndarray) -> np.ndarray:
        P = self._p[seg]
        k = self._knots[seg]
        t0, t1, t2, t3 = (k[:, i:i + 1] for i in range(4))
        t = t1 + u[:, None] * (t2 - t1)
        P0, P1, P2, P3 = P[:, 0], P[:, 1], P[:, 2], P[:, 3]
        A1 = (t1 - t) / (t1 - t0) * P0 + (t - t0) / (t1 - t0) * P1
        A2 = (t2 - t) / (t2 - t1) * P1 + (t - t1) / (t2 - t1) * P2
        A3 = (t3 - t) / (t3 - t2) * P2 + (t - t2) / (t3 - t2) * P3
        B1 = (t2 - t) / (t2 - t0) * A1 + (t - t0) / (t2 - t0) * A2
        B2 = (t3 - t) / (t3 - t1) * A2 + (t - t1) / (t3 - t1) * A3
        return (t2 - t) / (t2 - t1) * B1 + (t - t1) / (t2 - t1) * B2

    def polyline(self, max_step: float = 0.25) -> np.ndarray:
        """Dense closed polyline (first vertex not repeated) with edges <= ``max_step`` px."""
        n = self.n_segments
        coarse_u = np.linspace(0.0, 1.0, 65)
        pieces = []
        for i in range(n):
            c = self._segment_points(np.full(65, i), coarse_u)
            arc = np.linalg.norm(np.diff(c, axis=0), axis=1).sum()
            m = max(8, int(np.ceil(1.05 * arc / max_step)))
            u = np.arange(m) / m
            pts = self._segment_points(np.full(m, i), u)
            pts[0] = self.control_points[i]
            pieces.append(pts)
        return np.concatenate(pieces, axis=0)

    def sample(self, count: int) -> np.ndarray:
        return self.evaluate(np.arange(count) / count)


def fit_closed_spline(points, n_expected: int | None = N_LANDMARKS) -> ClosedSpline:
    """Fit the periodic interpolating spline through landmarks in their cyclic order."""
    pts, valid = _as_points(points)
    if not valid.all() or (n_expected is not None and len(pts) != n_expected):
        raise InvalidCount(
            f"need {n_expected if n_expected is not None else '>=3'} valid points, "
            f"got {int(valid.sum())} of {len(pts)}")
    return ClosedSpline(pts)


def polygon_area(vertices: np.ndarray) -> float:
    x, y = np.asarray(vertices, dtype=np.float64).T
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def fill_polygon(vertices: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Even-odd scanline fill sampled at pixel centres; centres on an edge count as inside."""
    h, w = shape
    v = np.asarray(vertices, dtype=np.float64)
    a = v
    b = np.roll(v, -1, axis=0)
    mask = np.zeros(shape, dtype=bool)
    lo = max(int(np.ceil(v[:, 1].min())), 0)
    hi = min(int(np.floor(v[:, 1].max())), h - 1)
    horiz = a[:, 1] == b[:, 1]
    for row in range(lo, hi + 1):
        y = float(row)
        cross = ((a[:, 1] <= y) & (b[:, 1] > y)) | ((b[:, 1] <= y) & (a[:, 1] > y))
        if not cross.any():
            continue
        ea, eb = a[cross], b[cross]
        xs = ea[:, 0] + (y - ea[:, 1]) * (eb[:, 0] - ea[:, 0]) / (eb[:, 1] - ea[:, 1])
        xs.sort()
        for xl, xr in zip(xs[0::2], xs[1::2]):
            c0 = max(int(np.ceil(xl)), 0)
            c1 = min(int(np.floor(xr)), w - 1)
            if c1 >= c0:
                mask[row, c0:c1 + 1] = True
        # horizontal edges lying exactly on the scanline are on the curve
        on = horiz & (a[:, 1] == y)
        for xa, xb in zip(a[on, 0], b[on, 0]):
            c0 = max(int(np.ceil(min(xa, xb))), 0)
            c1 = min(int(np.floor(max(xa, xb))), w - 1)
            if c1 >= c0:
                mask[row, c0:c1 + 1] = True
    return mask


def outline_polygon(vertices: np.ndarray, shape: tuple[int, int], radius: float = 0.5) -> np.ndarray:
    """Mark pixels whose centre lies within ``radius`` px of the closed polyline."""
    h, w = shape
    a = np.asarray(vertices, dtype=np.float64)
    b = np.roll(a, -1, axis=0)
    reach = int(np.ceil(radius + np.linalg.norm(b - a, axis=1).max())) + 1
    base = np.floor(np.minimum(a, b)).astype(np.int64) - reach + 1
    offs = np.arange(2 * reach + 1)
    ox, oy = np.meshgrid(offs, offs)
    cx = base[:, 0:1] + ox.ravel()[None, :]  # (M, K)
    cy = base[:, 1:2] + oy.ravel()[None, :]
    d = b - a
    dd = np.maximum((d ** 2).sum(axis=1), 1e-300)[:, None]
    t = ((cx - a[:, 0:1]) * d[:, 0:1] + (cy - a[:, 1:2]) * d[:, 1:2]) / dd
    t = np.clip(t, 0.0, 1.0)
    px = a[:, 0:1] + t * d[:, 0:1] - cx
    py = a[:, 1:2] + t * d[:, 1:2] - cy
    near = px ** 2 + py ** 2 <= radius ** 2
    near &= (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
    mask = np.zeros(shape, dtype=bool)
    mask[cy[near], cx[near]] = True
    return mask


def rasterize_spline(spline: ClosedSpline, grid: ImageGrid, mode: str = "filled") -> np.ndarray:
    """Rasterize a closed spline on ``grid`` as a boolean ``(H, W)`` mask.

    ``mode="outline"`` marks pixels within 0.5 px of the curve; ``mode="filled"``
    marks the enclosed region using the even-odd rule.
    """
    poly = spline.polyline()
    if mode == "outline":
        mask = outline_polygon(poly, grid.shape)
    elif mode == "filled":
        mask = fill_polygon(poly, grid.shape)
    else:
        raise ValueError(f"unknown rasterization mode {mode!r}")
    if not mask.any():
        raise EmptyMask("spline does not cover any pixel of the grid")
    return mask


def landmark_mask(points, grid: ImageGrid) -> np.ndarray:
    """Filled spline mask for a landmark set (the mask compared by Dice)."""
    return rasterize_spline(fit_closed_spline(points), grid, "filled")


def regular_polygon(n: int, radius: float, center: Sequence[float], phase: float = 0.0) -> np.ndarray:
    ang = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)
