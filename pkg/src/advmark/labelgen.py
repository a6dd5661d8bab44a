"""Per-pixel training targets: 7-class landmark distribution and fuzzy contour."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import ImageGrid, LandmarkSet, fit_closed_spline, rasterize_spline
from .errors import InvalidSigma

N_CLASSES = 7
BACKGROUND = 6  # channel index of the shared background class


@dataclass
class ClassTargetStack:
    grid: ImageGrid
    probs: np.ndarray  # (7, H, W); channels 0-5 landmarks, 6 background
    sigma_lm: float

    @property
    def background(self) -> np.ndarray:
        return self.probs[BACKGROUND]


@dataclass
class ContourTarget:
    grid: ImageGrid
    likelihood: np.ndarray  # (H, W) in [0, 1]
    sigma_cnt: float


def landmark_gaussians(landmarks: LandmarkSet, grid: ImageGrid, sigma: float) -> np.ndarray:
    """Unnormalized peak-1 Gaussians, one channel per landmark; invalid landmarks give zeros."""
    xx, yy = grid.pixel_centers()
    g = np.zeros((6,) + grid.shape)
    for k, ((x, y), ok) in enumerate(zip(landmarks.points, landmarks.valid)):
        if ok:
            g[k] = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * sigma ** 2))
    return g


def splat_polyline(vertices: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Anti-aliased line density: each vertex deposits its arc-length share bilinearly."""
    v = np.asarray(vertices, dtype=np.float64)
    seg = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
    w = 0.5 * (seg + np.roll(seg, 1))
    x0 = np.floor(v[:, 0]).astype(np.int64)
    y0 = np.floor(v[:, 1]).astype(np.int64)
    fx = v[:, 0] - x0
    fy = v[:, 1] - y0
    out = np.zeros(shape)
    h, wd = shape
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xs, ys = x0 + dx, y0 + dy
        ok = (xs >= 0) & (xs < wd) & (ys >= 0) & (ys < h)
        np.add.at(out, (ys[ok], xs[ok]), (w * wt)[ok])
    return out


def gaussian_disk_kernel(sigma: float, radius_sigmas: float = 3.5) -> np.ndarray:
    """Isotropic Gaussian kernel truncated on a disk (no square-corner leakage)."""
    r = max(int(np.floor(radius_sigmas * sigma)), 1)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    d2 = xx ** 2 + yy ** 2
    k = np.exp(-d2 / (2.0 * sigma ** 2))
    k[d2 > (radius_sigmas * sigma) ** 2] = 0.0
    return k / k.sum()


def make_class_targets(landmarks: LandmarkSet, grid: ImageGrid, sigma_lm: float,
                       dtype=np.float64) -> ClassTargetStack:
    """Shared-background classification target.

    Each landmark contributes ``exp(-d^2 / 2 sigma^2)``; the background takes the
    remainder. Where the Gaussians overlap with total mass above one, landmark
    probabilities are rescaled to sum to one and the background is zero.
    """
    if not sigma_lm > 0:
        raise InvalidSigma(f"sigma_lm must be positive, got {sigma_lm}")
    g = landmark_gaussians(landmarks, grid, sigma_lm)
    total = g.sum(axis=0)
    over = total > 1.0
    g[:, over] /= total[over]
    bg = np.where(over, 0.0, 1.0 - total)
    probs = np.concatenate([g, bg[None]], axis=0)
    # absorb rounding so each pixel is exactly on the simplex
    probs[BACKGROUND] = np.clip(probs[BACKGROUND], 0.0, 1.0)
    return ClassTargetStack(grid, probs.astype(dtype, copy=False), float(sigma_lm))


def make_contour_target(landmarks: LandmarkSet, grid: ImageGrid, sigma_cnt: float,
                        dtype=np.float64) -> ContourTarget:
    """Gaussian-blurred spline outline, rescaled so its maximum is 1."""
    if not sigma_cnt > 0:
        raise InvalidSigma(f"sigma_cnt must be positive, got {sigma_cnt}")
    spline = fit_closed_spline(landmarks)
    rasterize_spline(spline, grid, "outline")  # raises EmptyMask for off-grid curves
    line = splat_polyline(spline.polyline(0.1), grid.shape)
    blurred = ndimage.convolve(line, gaussian_disk_kernel(sigma_cnt), mode="constant", cval=0.0)
    blurred /= blurred.max()
    return ContourTarget(grid, np.clip(blurred, 0.0, 1.0).astype(dtype, copy=False), float(sigma_cnt))
