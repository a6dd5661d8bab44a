"""Training-set tripling: original, translated+noise, rotated+noise copies."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import CANONICAL_SIZE, ImageGrid, LandmarkSet
from .phantom import Sample

_SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class AugmentPolicy:
    translate_range: tuple[float, float] = (30.0, 70.0)  # px magnitude
    rotate_range: tuple[float, float] = (4.0, 7.0)  # degrees magnitude
    noise_sigma: float = 0.05
    rng_seed: int = 0
    # test overrides: fixed translation direction (deg) and rotation sign
    translate_direction: float | None = None
    rotate_sign: int | None = None

    def __post_init__(self):
        for name in ("translate_range", "rotate_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def scaled_to(self, grid: ImageGrid) -> "AugmentPolicy":
        """Rescale pixel translations from the 512-px canonical grid to ``grid``."""
        f = min(grid.height, grid.width) / CANONICAL_SIZE
        lo, hi = self.translate_range
        return replace(self, translate_range=(lo * f, hi * f))


@dataclass(frozen=True)
class RigidTransform:
    """Forward map ``p' = A @ p + t`` on ``(x, y)`` coordinates."""

    A: np.ndarray
    t: np.ndarray

    @classmethod
    def translation(cls, dx: float, dy: float) -> "RigidTransform":
        return cls(np.eye(2), np.array([dx, dy], dtype=np.float64))

    @classmethod
    def rotation(cls, degrees: float, center) -> "RigidTransform":
        th = np.deg2rad(degrees)
        A = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        c = np.asarray(center, dtype=np.float64)
        return cls(A, c - A @ c)

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.A.T + self.t

    def apply_image(self, image: np.ndarray, cval: float = 0.0) -> np.ndarray:
        """Warp with bilinear interpolation; uncovered pixels take ``cval``."""
        inv = np.linalg.inv(self.A)
        matrix = _SWAP @ inv @ _SWAP
        offset = -(_SWAP @ inv @ self.t)
        return ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="constant", cval=cval)

    def apply_landmarks(self, lm: LandmarkSet, grid: ImageGrid) -> LandmarkSet:
        pts = self.apply_points(lm.points)
        return LandmarkSet(pts, lm.valid & grid.contains(pts))


def _noisy(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(image + rng.normal(0.0, sigma, image.shape), 0.0, 1.0)


def draw_transforms(policy: AugmentPolicy, grid: ImageGrid, rng: np.random.Generator):
    mag = rng.uniform(*policy.translate_range)
    direction = rng.uniform(0.0, 360.0)
    if policy.translate_direction is not None:
        direction = policy.translate_direction
    d = np.deg2rad(direction)
    shift = RigidTransform.translation(mag * np.cos(d), mag * np.sin(d))
    angle = rng.uniform(*policy.rotate_range)
    sign = rng.choice([-1.0, 1.0])
    if policy.rotate_sign is not None:
        sign = float(np.sign(policy.rotate_sign))
    center = ((grid.width - 1) / 2.0, (grid.height - 1) / 2.0)
    return shift, RigidTransform.rotation(sign * angle, center)


def augment_triple(sample: Sample, policy: AugmentPolicy,
                   rng: np.random.Generator | None = None) -> list[Sample]:
    """Return ``[original, translated + noise, rotated + noise]``.

    Landmarks follow the same rigid map; any pushed off the grid are marked invalid
    on that copy.
    """
    rng = np.random.default_rng(policy.rng_seed) if rng is None else rng
    h, w = sample.image.shape
    grid = ImageGrid(h, w)
    out = [replace(sample, image=sample.image.copy(), landmarks=sample.landmarks.copy())]
    for tf in draw_transforms(policy, grid, rng):
        img = _noisy(tf.apply_image(sample.image), policy.noise_sigma, rng)
        out.append(replace(sample, image=img, landmarks=tf.apply_landmarks(sample.landmarks, grid)))
    return out


def augment_corpus(samples: Sequence[Sample], policy: AugmentPolicy) -> list[Sample]:
    rng = np.random.default_rng(policy.rng_seed)
    out: list[Sample] = []
    for s in samples:
        out.extend(augment_triple(s, policy, rng))
    return out
