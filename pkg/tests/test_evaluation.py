import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advmark.core import ImageGrid, Point2
from advmark.errors import CountMismatch, GridMismatch, ShortSweep
from advmark.evaluation import (
    EvalReport, annotation_noise, dice, format_table, landmark_errors, percentile80, summarize_errors,
)
from advmark.phantom import PhantomSpec, generate_sweep


def test_dice_oracles():
    a = np.zeros((32, 32), bool)
    a[5:15, 5:15] = True
    assert dice(a, a) == 1.0
    b = np.zeros_like(a)
    b[20:30, 20:30] = True
    assert dice(a, b) == 0.0
    # 100-px square vs the same square shifted so 60 px overlap
    c = np.zeros_like(a)
    c[5:15, 9:19] = True
    assert (a & c).sum() == 60
    assert dice(a, c) == pytest.approx(0.6, abs=1e-9)
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(GridMismatch):
        dice(a, a[:, :10])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 1))
def test_dice_symmetry_and_bounds(seed, p):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 16, 16)) < p
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


def test_landmark_errors():
    t = np.random.default_rng(0).uniform(0, 64, (6, 2))
    assert np.all(landmark_errors(t, t, 0.169) == 0)
    e = landmark_errors(t + [10.0, 0.0], t, 0.169)
    assert np.allclose(e, 1.69)
    with pytest.raises(CountMismatch):
        landmark_errors(t[:5], t[:5], 1.0)
    with pytest.raises(CountMismatch):
        landmark_errors(t, t[None].repeat(2, 0), 1.0)


def test_percentile_interpolation():
    assert percentile80([1, 2, 3, 4, 5]) == pytest.approx(4.2)


def test_overall_is_mean_of_per_landmark_rows():
    e = np.random.default_rng(1).gamma(2.0, 1.0, size=(40, 6))
    s = summarize_errors(e)
    assert s.overall_mean == pytest.approx(e.mean(), abs=1e-9)
    assert s.overall_mean == pytest.approx(np.mean(s.mean), abs=1e-12)


def test_overall_rows_reproduce_reference_noise_column():
    # per-landmark mean / SD / p80 of a reference annotation-noise column
    from advmark.evaluation import LandmarkStats
    s = LandmarkStats([0.98, 1.45, 2.17, 1.99, 2.19, 1.43], [0.28, 0.44, 0.60, 0.47, 0.74, 0.54],
                      [1.42, 2.05, 3.17, 2.87, 3.14, 2.03])
    assert round(s.overall_mean, 2) == 1.70
    assert round(s.overall_sd, 2) == 0.51
    assert round(s.overall_p80, 2) == 2.45


def test_report_shapes_and_table():
    e = np.random.default_rng(2).uniform(0, 3, (10, 6))
    r = EvalReport.from_arrays(e, np.linspace(0.8, 0.95, 10), label="Baseline", latencies_ms=[1.0, 2.0, 3.0])
    d = r.to_dict()
    assert d["n_images"] == 10 and all(f"lm{k}_p80_mm" in d for k in range(1, 7))
    assert r.latency_ms_p95 >= r.latency_ms_mean >= 0
    table = format_table([r, EvalReport.from_arrays(e / 2, [0.9] * 10, label="Multitask GAN")])
    lines = table.splitlines()
    assert "Baseline" in lines[0] and lines[0].index("Baseline") < lines[0].index("Multitask GAN")
    assert sum(1 for ln in lines if "+/-" in ln) == 6 + 1 + 1
    assert "=" in r.to_keyvalue()


def test_static_sweep_noise_is_zero():
    pts = np.random.default_rng(3).uniform(0, 64, (6, 2))
    s = annotation_noise([[pts] * 5, [pts + 1] * 3], spacing=0.169)
    assert s.mean == [0.0] * 6 and s.sd == [0.0] * 6


def test_unit_drift_sweep():
    pts = np.random.default_rng(3).uniform(0, 64, (6, 2))
    sweep = [pts + [i, 0.0] for i in range(10)]
    s = annotation_noise([sweep], spacing=0.169)
    assert np.allclose(s.mean, 0.169) and np.allclose(s.sd, 0.0, atol=1e-12)


def test_short_sweeps_skipped_with_warning():
    pts = np.zeros((6, 2))
    with pytest.warns(ShortSweep):
        s = annotation_noise([[pts], [pts, pts + [0, 2]]], spacing=1.0)
    assert np.allclose(s.mean, 2.0)


def test_phantom_jitter_noise_matches_monte_carlo():
    rng = np.random.default_rng(0)
    trials = np.linalg.norm(rng.normal(0, 1.5, (10_000, 2)) - rng.normal(0, 1.5, (10_000, 2)), axis=1)
    oracle_mm = trials.mean() * 0.5
    grid = ImageGrid(128, 128, 0.5)
    sweeps = [generate_sweep(PhantomSpec(grid, Point2(64.0, 64.0), (30.0, 22.0), rng_seed=s,
                                         landmark_jitter=1.5), 20, 0.0) for s in range(10)]
    s = annotation_noise(sweeps, spacing=0.5)
    assert abs(s.overall_mean - oracle_mm) / oracle_mm < 0.15
