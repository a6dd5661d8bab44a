"""Synthetic trans-rectal-ultrasound-like phantoms with known landmarks.

The gland is an ellipse darker than the surrounding tissue. Echo strength falls
off with distance from the probe (bottom edge of the image), so the anterior
boundary (top) is the faintest. Optional acoustic shadow sectors and bright
calcifications make parts of the boundary ambiguous.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .core import ImageGrid, LandmarkSet, Point2
from .errors import SpecOutOfBounds

# parametric ellipse angles (degrees, image coords with y down) in landmark order:
# posterior, left extent, left-anterior, anterior, right-anterior, right extent
LANDMARK_ANGLES = np.array([90.0, 180.0, 225.0, 270.0, 315.0, 360.0])
ANTERIOR = 3  # zero-based index of the most anterior landmark

_INSIDE, _OUTSIDE, _SHADOW = 0.22, 0.55, 0.06
_MARGIN = 8


@dataclass(frozen=True)
class PhantomSpec:
    grid: ImageGrid
    gland_center: Point2
    semi_axes: tuple[float, float]
    rotation: float = 0.0  # degrees
    speckle_strength: float = 0.6
    shadow_probability: float = 0.0
    calcification_count: int = 0
    rng_seed: int = 0
    landmark_jitter: float = 1.5  # px, annotation noise
    shadow_angle: float | None = None  # degrees; None draws around the anterior direction
    shadow_half_width: float | None = None  # degrees
    attenuation: float = 0.6  # fractional echo loss from bottom to top edge

    def __post_init__(self):
        for name in ("speckle_strength", "shadow_probability", "attenuation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.calcification_count < 0:
            raise ValueError("calcification_count must be >= 0")
        if min(self.semi_axes) <= 0:
            raise ValueError("semi-axes must be positive")
        if self.landmark_jitter < 0:
            raise ValueError("landmark_jitter must be >= 0")


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float in [0, 1]
    landmarks: LandmarkSet
    sweep_id: str = ""
    frame_index: int = 0
    patient_id: str = ""


def _rotation(deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def ellipse_points(center, semi_axes, rotation, angles_deg) -> np.ndarray:
    t = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    local = np.stack([semi_axes[0] * np.cos(t), semi_axes[1] * np.sin(t)], axis=1)
    return local @ _rotation(rotation).T + np.asarray(center, dtype=np.float64)


def check_bounds(spec: PhantomSpec) -> None:
    a, b = spec.semi_axes
    r = np.deg2rad(spec.rotation)
    ext_x = np.hypot(a * np.cos(r), b * np.sin(r))
    ext_y = np.hypot(a * np.sin(r), b * np.cos(r))
    cx, cy = spec.gland_center
    g = spec.grid
    if (cx - ext_x < _MARGIN or cx + ext_x > g.width - 1 - _MARGIN
            or cy - ext_y < _MARGIN or cy + ext_y > g.height - 1 - _MARGIN):
        raise SpecOutOfBounds(
            f"ellipse at ({cx:.1f}, {cy:.1f}) with axes ({a:.1f}, {b:.1f}) "
            f"violates the {_MARGIN}px margin of a {g.height}x{g.width} grid")


def _signed_boundary_distance(spec: PhantomSpec, xx, yy) -> tuple[np.ndarray, np.ndarray]:
    """Approximate signed distance to the ellipse (negative inside) and polar angle."""
    a, b = spec.semi_axes
    dx, dy = xx - spec.gland_center[0], yy - spec.gland_center[1]
    rot = _rotation(-spec.rotation)
    u = rot[0, 0] * dx + rot[0, 1] * dy
    v = rot[1, 0] * dx + rot[1, 1] * dy
    phi = np.arctan2(v, u)
    radius = 1.0 / np.sqrt((np.cos(phi) / a) ** 2 + (np.sin(phi) / b) ** 2)
    rho = np.hypot(u / a, v / b)
    return (rho - 1.0) * radius, np.arctan2(dy, dx)


def _angular_window(theta, center_deg, half_width_deg, soft_deg=4.0):
    diff = np.rad2deg(np.angle(np.exp(1j * (theta - np.deg2rad(center_deg)))))
    return np.clip((half_width_deg - np.abs(diff)) / soft_deg + 0.5, 0.0, 1.0)


def clean_landmarks(spec: PhantomSpec) -> np.ndarray:
    return ellipse_points(spec.gland_center, spec.semi_axes, spec.rotation, LANDMARK_ANGLES)


def generate(spec: PhantomSpec) -> Sample:
    """Render one phantom frame; deterministic given ``spec.rng_seed``."""
    check_bounds(spec)
    rng = np.random.default_rng(spec.rng_seed)
    g = spec.grid
    scale = min(g.height, g.width) / 512.0
    xx, yy = g.pixel_centers()

    sd, theta = _signed_boundary_distance(spec, xx, yy)
    edge_width = max(0.6, 2.0 * scale)
    inside = 1.0 / (1.0 + np.exp(np.clip(sd / edge_width, -50, 50)))
    image = _OUTSIDE + (_INSIDE - _OUTSIDE) * inside

    # draws are made unconditionally so every option sees the same random stream
    tex = ndimage.gaussian_filter(rng.standard_normal(g.shape), max(1.0, 12 * scale))
    tex /= max(tex.std(), 1e-12)
    image = image + 0.04 * spec.speckle_strength * tex

    n_calc = spec.calcification_count
    calc_pos = rng.uniform(-0.55, 0.55, size=(max(n_calc, 0), 2))
    calc_amp = rng.uniform(0.4, 0.7, size=max(n_calc, 0))
    a, b = spec.semi_axes
    rot = _rotation(spec.rotation)
    blob_sigma = max(0.7, 5.0 * scale)
    for (pu, pv), amp in zip(calc_pos, calc_amp):
        cx, cy = rot @ np.array([pu * a, pv * b]) + np.asarray(spec.gland_center)
        image += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * blob_sigma ** 2))

    has_shadow = rng.uniform() < spec.shadow_probability
    shadow_center = -90.0 + rng.uniform(-45.0, 45.0)
    shadow_half = rng.uniform(22.0, 40.0)
    if spec.shadow_angle is not None:
        shadow_center = spec.shadow_angle
    if spec.shadow_half_width is not None:
        shadow_half = spec.shadow_half_width
    if has_shadow:
        m = _angular_window(theta, shadow_center, shadow_half)
        # the shadow starts part-way into the gland and extends outward
        m = m * np.clip((sd + 0.5 * np.minimum(a, b)) / (3 * edge_width), 0.0, 1.0)
        image = (1.0 - m) * image + m * _SHADOW

    depth = (g.height - 1 - yy) / max(g.height - 1, 1)
    image = image * (1.0 - spec.attenuation * depth)

    re = rng.standard_normal(g.shape)
    im = rng.standard_normal(g.shape)
    grain = max(0.5, 1.5 * scale)
    re = ndimage.gaussian_filter(re, grain)
    im = ndimage.gaussian_filter(im, grain)
    speckle = np.hypot(re, im)
    speckle /= speckle.mean()
    s = spec.speckle_strength
    image = image * ((1.0 - s) + s * speckle)
    image = np.clip(image, 0.0, 1.0)

    pts = clean_landmarks(spec)
    pts = pts + rng.normal(0.0, spec.landmark_jitter, size=pts.shape) if spec.landmark_jitter > 0 else pts
    return Sample(image=image, landmarks=LandmarkSet(pts))


def generate_sweep(base: PhantomSpec, frames: int, drift: float, sweep_id: str | None = None,
                   patient_id: str = "") -> list[Sample]:
    """Successive frames of one probe pass.

    The gland centre moves along a small circle at ``drift`` px per frame and the
    semi-axes breathe slowly in proportion to ``drift``.
    """
    if frames < 2:
        raise ValueError("a sweep needs at least 2 frames")
    sweep_id = sweep_id if sweep_id is not None else f"S{base.rng_seed:08x}"
    seeds = np.random.SeedSequence([base.rng_seed, 0x5EE9]).generate_state(frames + 1, dtype=np.uint64)
    heading = np.random.default_rng(int(seeds[-1])).uniform(0, 2 * np.pi)
    radius = 1.5 * drift
    omega = 2 * np.arcsin(1.0 / 3.0) if drift > 0 else 0.0
    out = []
    for i in range(frames):
        phase = heading + i * omega
        shift = radius * np.array([np.cos(phase) - np.cos(heading), np.sin(phase) - np.sin(heading)])
        breathe = 0.25 * drift * np.sin(i * omega / 4)
        spec = replace(
            base,
            gland_center=Point2(*(np.asarray(base.gland_center) + shift)),
            semi_axes=(base.semi_axes[0] + breathe, base.semi_axes[1] + breathe),
            rng_seed=int(seeds[i]),
        )
        s = generate(spec)
        s.sweep_id, s.frame_index, s.patient_id = sweep_id, i, patient_id
        out.append(s)
    return out


def random_spec(grid: ImageGrid, rng: np.random.Generator, shadow_probability: float = 0.5) -> PhantomSpec:
    """Draw a plausible gland for one synthetic patient.

    Draws that would leave the margin (with ~1% of the grid spare for sweep
    motion) are redrawn.
    """
    w, h = grid.width, grid.height
    slack = 0.01 * min(w, h)
    while True:
        a = rng.uniform(0.22, 0.30) * w
        b = rng.uniform(0.15, 0.21) * h
        center = Point2(w / 2 + rng.uniform(-0.08, 0.08) * w, h / 2 + rng.uniform(-0.06, 0.06) * h)
        spec = PhantomSpec(
            grid=grid,
            gland_center=center,
            semi_axes=(a, b),
            rotation=rng.uniform(-12, 12),
            speckle_strength=rng.uniform(0.5, 0.8),
            shadow_probability=shadow_probability,
            calcification_count=int(rng.integers(0, 4)),
            rng_seed=int(rng.integers(0, 2 ** 63)),
            landmark_jitter=max(0.5, 1.5 * min(w, h) / 512),
        )
        try:
            check_bounds(replace(spec, semi_axes=(a + slack, b + slack)))
        except SpecOutOfBounds:
            continue
        return spec


def generate_corpus(n_patients: int, frames_per_sweep: int, grid: ImageGrid, seed: int = 0,
                    drift: float | None = None, shadow_probability: float = 0.5) -> list[Sample]:
    """One sweep per synthetic patient, patient ids ``P000``, ``P001``, ..."""
    rng = np.random.default_rng(seed)
    drift = 1.0 * min(grid.width, grid.height) / 512 if drift is None else drift
    samples = []
    for p in range(n_patients):
        spec = random_spec(grid, rng, shadow_probability)
        pid = f"P{p:03d}"
        if frames_per_sweep == 1:
            s = generate(spec)
            s.sweep_id, s.frame_index, s.patient_id = f"{pid}-S0", 0, pid
            samples.append(s)
        else:
            samples.extend(generate_sweep(spec, frames_per_sweep, drift, f"{pid}-S0", pid))
    return samples
