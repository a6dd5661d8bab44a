import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from advmark.core import ImageGrid, Point2
from advmark.errors import SpecOutOfBounds
from advmark.phantom import PhantomSpec, generate, generate_sweep, generate_corpus

GRID = ImageGrid(128, 128, 0.169 * 4)


def spec(**kw):
    base = dict(grid=GRID, gland_center=Point2(64.0, 62.0), semi_axes=(34.0, 24.0), rotation=8.0,
                speckle_strength=0.6, shadow_probability=0.0, calcification_count=2, rng_seed=11)
    base.update(kw)
    return PhantomSpec(**base)


def test_clean_landmarks_sit_on_edges():
    s = generate(spec(speckle_strength=0.0, calcification_count=0, landmark_jitter=0.0))
    gy, gx = np.gradient(s.image)
    mag = np.hypot(gx, gy)
    at = ndimage.map_coordinates(mag, [s.landmarks.points[:, 1], s.landmarks.points[:, 0]], order=1)
    assert (at > 5 * np.median(mag)).all()


def test_landmarks_on_ellipse_before_jitter():
    sp = spec(landmark_jitter=0.0)
    pts = generate(sp).landmarks.points - np.array(sp.gland_center)
    t = np.deg2rad(-sp.rotation)
    u = np.cos(t) * pts[:, 0] - np.sin(t) * pts[:, 1]
    v = np.sin(t) * pts[:, 0] + np.cos(t) * pts[:, 1]
    rho = np.hypot(u / 34.0, v / 24.0)
    assert np.abs(rho - 1).max() * 34 < 1.0


def test_same_seed_is_bit_identical():
    a, b = generate(spec()), generate(spec())
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.landmarks.points, b.landmarks.points)


def test_distinct_seeds_distinct_speckle():
    assert not np.array_equal(generate(spec(rng_seed=1)).image, generate(spec(rng_seed=2)).image)


def _boundary_bands(sp):
    xx, yy = GRID.pixel_centers()
    dx, dy = xx - sp.gland_center[0], yy - sp.gland_center[1]
    t = np.deg2rad(-sp.rotation)
    u = np.cos(t) * dx - np.sin(t) * dy
    v = np.sin(t) * dx + np.cos(t) * dy
    rho = np.hypot(u / sp.semi_axes[0], v / sp.semi_axes[1])
    ang = np.rad2deg(np.arctan2(dy, dx))
    return (rho > 0.8) & (rho < 0.92), (rho > 1.08) & (rho < 1.2), ang


def test_anterior_shadow_kills_boundary_contrast():
    sp = spec(speckle_strength=0.0, calcification_count=0, shadow_probability=1.0,
              shadow_angle=-90.0, shadow_half_width=35.0)
    img = generate(sp).image
    inner, outer, ang = _boundary_bands(sp)
    in_sector = np.abs(ang + 90) < 25
    out_sector = np.abs(ang + 90) > 50
    c_in = abs(img[outer & in_sector].mean() - img[inner & in_sector].mean())
    c_out = abs(img[outer & out_sector].mean() - img[inner & out_sector].mean())
    assert c_in < 0.2 * c_out


def test_out_of_bounds():
    with pytest.raises(SpecOutOfBounds):
        generate(spec(gland_center=Point2(30.0, 64.0)))
    with pytest.raises(ValueError):
        spec(speckle_strength=1.5)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 63), st.floats(0, 1), st.floats(0, 1), st.integers(0, 5))
def test_images_valid(seed, speckle, shadow, calc):
    img = generate(spec(rng_seed=seed, speckle_strength=speckle, shadow_probability=shadow,
                        calcification_count=calc)).image
    assert np.isfinite(img).all() and img.min() >= 0 and img.max() <= 1


def test_two_frame_sweep():
    frames = generate_sweep(spec(), 2, 1.0, sweep_id="abc")
    assert len(frames) == 2
    assert {f.sweep_id for f in frames} == {"abc"}
    assert [f.frame_index for f in frames] == [0, 1]


def _mean_displacement(frames):
    pts = np.stack([f.landmarks.points for f in frames])
    return np.linalg.norm(np.diff(pts, axis=0), axis=-1).mean()


def test_drift_without_jitter():
    frames = generate_sweep(spec(landmark_jitter=0.0), 60, 2.0)
    assert 1.6 <= _mean_displacement(frames) <= 2.4


def test_jitter_only_matches_monte_carlo():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 1.5, (10_000, 2))
    b = rng.normal(0, 1.5, (10_000, 2))
    oracle = np.linalg.norm(a - b, axis=1).mean()
    assert oracle == pytest.approx(1.5 * np.sqrt(np.pi / 2) * np.sqrt(2), rel=0.03)
    frames = generate_sweep(spec(landmark_jitter=1.5), 200, 0.0)
    assert _mean_displacement(frames) == pytest.approx(oracle, rel=0.1)


def test_corpus_patients():
    samples = generate_corpus(4, 3, ImageGrid.desk(64), seed=5)
    assert len(samples) == 12
    assert sorted({s.patient_id for s in samples}) == ["P000", "P001", "P002", "P003"]


@pytest.mark.parametrize("size", [64, 512])
def test_random_specs_respect_margin(size):
    from advmark.phantom import check_bounds, random_spec
    rng = np.random.default_rng(4)
    for _ in range(2000):
        check_bounds(random_spec(ImageGrid.desk(size), rng))
