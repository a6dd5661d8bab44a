"""Dice, landmark error statistics, annotation-noise estimate and report formatting."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import N_LANDMARKS
from .errors import CountMismatch, GridMismatch, ShortSweep


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise GridMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def landmark_errors(preds, targets, spacing: float) -> np.ndarray:
    """Euclidean distance in mm per landmark; shape ``(..., 6)``."""
    p = np.asarray(getattr(preds, "points", preds), dtype=np.float64)
    t = np.asarray(getattr(targets, "points", targets), dtype=np.float64)
    if p.shape != t.shape or p.shape[-2:] != (N_LANDMARKS, 2):
        raise CountMismatch(f"prediction {p.shape} and target {t.shape} must both be (..., 6, 2)")
    return np.linalg.norm(p - t, axis=-1) * spacing


def percentile80(values) -> float:
    # linear interpolation between closest ranks: rank = 0.8 * (n - 1)
    return float(np.percentile(np.asarray(values, dtype=np.float64), 80, method="linear"))


@dataclass
class LandmarkStats:
    mean: list[float]
    sd: list[float]
    p80: list[float]

    @property
    def overall_mean(self) -> float:
        return float(np.mean(self.mean))

    @property
    def overall_sd(self) -> float:
        # average of per-landmark SDs, not a pooled SD
        return float(np.mean(self.sd))

    @property
    def overall_p80(self) -> float:
        return float(np.mean(self.p80))


def summarize_errors(errors: np.ndarray) -> LandmarkStats:
    """Per-landmark mean, SD and 80th percentile of an ``(N, 6)`` error matrix (NaN ignored)."""
    e = np.asarray(errors, dtype=np.float64).reshape(-1, N_LANDMARKS)
    mean, sd, p80 = [], [], []
    for k in range(N_LANDMARKS):
        col = e[:, k][np.isfinite(e[:, k])]
        if col.size == 0:
            mean.append(float("nan")); sd.append(float("nan")); p80.append(float("nan"))
            continue
        mean.append(float(col.mean()))
        sd.append(float(col.std()))
        p80.append(percentile80(col))
    return LandmarkStats(mean, sd, p80)


@dataclass
class EvalReport:
    landmarks: LandmarkStats
    dice_mean: float
    dice_sd: float
    n_images: int
    label: str = ""
    latency_ms_mean: float | None = None
    latency_ms_p95: float | None = None
    dice_values: list[float] = field(default_factory=list, repr=False)

    @classmethod
    def from_arrays(cls, errors_mm: np.ndarray, dices: Sequence[float], label: str = "",
                    latencies_ms: Sequence[float] | None = None) -> "EvalReport":
        d = np.asarray(dices, dtype=np.float64)
        lat = np.asarray(latencies_ms if latencies_ms is not None else [], dtype=np.float64)
        return cls(
            summarize_errors(errors_mm), float(d.mean()) if d.size else float("nan"),
            float(d.std()) if d.size else float("nan"), int(len(d)), label,
            float(lat.mean()) if lat.size else None,
            float(np.percentile(lat, 95)) if lat.size else None,
            [float(v) for v in d],
        )

    def to_dict(self) -> dict:
        out = {
            "label": self.label,
            "n_images": self.n_images,
            "dice_mean": self.dice_mean,
            "dice_sd": self.dice_sd,
            "overall_mean_mm": self.landmarks.overall_mean,
            "overall_sd_mm": self.landmarks.overall_sd,
            "overall_p80_mm": self.landmarks.overall_p80,
            "latency_ms_mean": self.latency_ms_mean,
            "latency_ms_p95": self.latency_ms_p95,
        }
        for k in range(N_LANDMARKS):
            out[f"lm{k + 1}_mean_mm"] = self.landmarks.mean[k]
            out[f"lm{k + 1}_sd_mm"] = self.landmarks.sd[k]
            out[f"lm{k + 1}_p80_mm"] = self.landmarks.p80[k]
        return out

    def to_keyvalue(self) -> str:
        return "".join(f"{k}={_fmt_value(v)}\n" for k, v in self.to_dict().items())

    def to_table(self) -> str:
        return format_table([self])


def _fmt_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_table(reports: Sequence[EvalReport], noise: LandmarkStats | None = None) -> str:
    """Plain-text comparison: rows per landmark, one column per method."""
    cols: list[tuple[str, LandmarkStats, EvalReport | None]] = []
    if noise is not None:
        cols.append(("Noise", noise, None))
    cols += [(r.label or f"Method {i + 1}", r.landmarks, r) for i, r in enumerate(reports)]
    w0, w = 26, 18
    lines = ["Metric".ljust(w0) + "".join(name.rjust(w) for name, _, _ in cols)]
    lines.append("-" * len(lines[0]))
    for k in range(N_LANDMARKS):
        head = "Mean error +/- SD (mm)" if k == 0 else ""
        lines.append(f"{head:<{w0 - 4}}{k + 1:>3} " + "".join(
            f"{s.mean[k]:.2f} +/- {s.sd[k]:.2f}".rjust(w) for _, s, _ in cols))
    lines.append("Overall Avg.".ljust(w0) + "".join(
        f"{s.overall_mean:.2f} +/- {s.overall_sd:.2f}".rjust(w) for _, s, _ in cols))
    lines.append("-" * len(lines[0]))
    for k in range(N_LANDMARKS):
        head = "80th percentile (mm)" if k == 0 else ""
        lines.append(f"{head:<{w0 - 4}}{k + 1:>3} " + "".join(f"{s.p80[k]:.2f}".rjust(w) for _, s, _ in cols))
    lines.append("Overall Avg.".ljust(w0) + "".join(f"{s.overall_p80:.2f}".rjust(w) for _, s, _ in cols))
    lines.append("-" * len(lines[0]))
    lines.append("Avg. Dice +/- SD".ljust(w0) + "".join(
        ("-" if r is None else f"{100 * r.dice_mean:.1f}% +/- {100 * r.dice_sd:.1f}%").rjust(w)
        for _, _, r in cols))
    lines.append("Images".ljust(w0) + "".join(("-" if r is None else str(r.n_images)).rjust(w)
                                              for _, _, r in cols))
    return "\n".join(lines) + "\n"


def annotation_noise(sweeps, spacing: float) -> LandmarkStats:
    """Per-landmark displacement between consecutive frames, pooled over sweeps (mm).

    ``sweeps`` is a sequence of frame sequences; each frame is a Sample or a
    ``(6, 2)`` point array. Sweeps with fewer than two frames are skipped.
    """
    disp = []
    for sweep in sweeps:
        frames = list(sweep)
        if len(frames) < 2:
            warnings.warn(f"sweep with {len(frames)} frame(s) skipped", ShortSweep, stacklevel=2)
            continue
        if hasattr(frames[0], "frame_index"):
            frames = sorted(frames, key=lambda s: s.frame_index)
        pts = np.stack([np.asarray(getattr(getattr(f, "landmarks", f), "points", f), dtype=np.float64)
                        for f in frames])
        disp.append(np.linalg.norm(np.diff(pts, axis=0), axis=-1) * spacing)
    if not disp:
        return summarize_errors(np.full((1, N_LANDMARKS), np.nan))
    return summarize_errors(np.concatenate(disp, axis=0))
