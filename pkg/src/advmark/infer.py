"""Landmark extraction from class maps, predictors, and single-image prediction."""
from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import ClosedSpline, ImageGrid, LandmarkSet, fit_closed_spline
from .errors import AdvmarkError, CheckpointError
from .labelgen import N_CLASSES, make_class_targets, make_contour_target
from .model import Checkpoint, load_checkpoint, module_from_checkpoint

CONFIDENCE_THRESHOLD = 0.2


@dataclass
class Extraction:
    landmarks: LandmarkSet
    confidence: np.ndarray  # (6,)
    flagged: np.ndarray  # (6,) bool, confidence below threshold


def _vertex_offset(left: float, mid: float, right: float) -> float:
    """Sub-pixel peak offset from three samples, exact for a sampled Gaussian."""
    if min(left, mid, right) > 0:
        a, b, c = np.log(left), np.log(mid), np.log(right)
        denom = a - 2 * b + c
        if denom < 0:
            return float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))
    total = left + mid + right
    if total <= 0:
        return 0.0
    return float(np.clip((right - left) / total, -0.5, 0.5))


def refine_peak(channel: np.ndarray, row: int, col: int) -> tuple[float, float]:
    """Refine an integer argmax to sub-pixel ``(x, y)`` using its 3x3 neighbourhood."""
    h, w = channel.shape
    dx = dy = 0.0
    if 0 < col < w - 1:
        dx = _vertex_offset(channel[row, col - 1], channel[row, col], channel[row, col + 1])
    if 0 < row < h - 1:
        dy = _vertex_offset(channel[row - 1, col], channel[row, col], channel[row + 1, col])
    return col + dx, row + dy


def extract_landmarks(class_probs: np.ndarray, threshold: float = CONFIDENCE_THRESHOLD) -> Extraction:
    """Per landmark class: argmax (first in row-major order on ties) plus sub-pixel refinement."""
    probs = np.asarray(class_probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[0] != N_CLASSES:
        raise ValueError(f"expected (7, H, W) class probabilities, got {probs.shape}")
    pts = np.zeros((6, 2))
    conf = np.zeros(6)
    for k in range(6):
        ch = probs[k]
        idx = int(np.argmax(ch))
        r, c = divmod(idx, ch.shape[1])
        pts[k] = refine_peak(ch, r, c)
        conf[k] = ch[r, c]
    return Extraction(LandmarkSet(pts, np.ones(6, bool)), conf, conf < threshold)


# --- predictors --------------------------------------------------------------

def image_key(image: np.ndarray) -> str:
    q = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype("<u2")
    return hashlib.sha1(q.tobytes()).hexdigest()


class DetectorPredictor:
    """Runs a trained detector in inference mode on single images."""

    def __init__(self, model: torch.nn.Module, meta: dict | None = None):
        self.model = model.eval()
        self.meta = dict(meta or {})
        self.multitask = bool(model.spec.multitask)

    @torch.no_grad()
    def __call__(self, image: np.ndarray):
        x = torch.as_tensor(np.asarray(image, dtype=np.float32))[None, None]
        logits, contour = self.model(x)
        probs = torch.softmax(logits, dim=1)[0].double().numpy()
        cmap = torch.sigmoid(contour)[0, 0].double().numpy() if contour is not None else None
        return probs, cmap


class OraclePredictor:
    """Looks up ground-truth landmarks by image content and renders their targets.

    Used to check the evaluation path end to end; images it has not seen get a
    uniform class map.
    """

    def __init__(self, table: dict[str, list], sigma_lm: float, sigma_cnt: float,
                 multitask: bool = True, meta: dict | None = None):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.sigma_lm = sigma_lm
        self.sigma_cnt = sigma_cnt
        self.multitask = multitask
        self.meta = dict(meta or {})

    def __call__(self, image: np.ndarray):
        h, w = image.shape
        pts = self.table.get(image_key(image))
        if pts is None:
            return np.full((N_CLASSES, h, w), 1.0 / N_CLASSES), (np.zeros((h, w)) if self.multitask else None)
        grid = ImageGrid(h, w)
        lm = LandmarkSet(pts)
        probs = make_class_targets(lm, grid, self.sigma_lm).probs
        cmap = make_contour_target(lm, grid, self.sigma_cnt).likelihood if self.multitask else None
        return probs, cmap


def make_oracle_checkpoint(manifest, sigma_lm: float, sigma_cnt: float, meta: dict | None = None) -> Checkpoint:
    table = {image_key(manifest.load_image(e)): e.landmarks.tolist() for e in manifest.entries}
    m = {"mode": "oracle", "multitask": True, "sigma_lm": sigma_lm, "sigma_cnt": sigma_cnt,
         "table": table, **(meta or {})}
    return Checkpoint("oracle", {}, {}, 0, {}, "", m)


def load_predictor(source) -> DetectorPredictor | OraclePredictor:
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(Path(source))
    if ckpt.kind == "oracle":
        m = ckpt.meta
        return OraclePredictor(m["table"], m["sigma_lm"], m["sigma_cnt"], m.get("multitask", True), m)
    if ckpt.kind != "detector":
        raise CheckpointError(f"expected a detector checkpoint, got kind {ckpt.kind!r}")
    return DetectorPredictor(module_from_checkpoint(ckpt), ckpt.meta)


# --- prediction ----------------------------------------------------------------

@dataclass
class Prediction:
    landmarks: LandmarkSet
    confidence: np.ndarray
    flagged: np.ndarray
    contour: np.ndarray | None
    spline: ClosedSpline | None
    spline_error: str | None
    latency_ms: float
    class_probs: np.ndarray | None = None

    def to_record(self) -> dict:
        return {
            "landmarks": [
                {"x": float(x), "y": float(y), "confidence": float(c), "flagged": bool(f)}
                for (x, y), c, f in zip(self.landmarks.points, self.confidence, self.flagged)
            ],
            "spline_control_points": (self.spline.control_points.tolist() if self.spline is not None else None),
            "spline_error": self.spline_error,
            "latency_ms": self.latency_ms,
        }


def predict(predictor, image: np.ndarray, keep_maps: bool = False) -> Prediction:
    """One forward pass, landmark extraction and spline fit, timed end to end."""
    t0 = time.perf_counter()
    probs, cmap = predictor(image)
    ext = extract_landmarks(probs)
    spline, err = None, None
    try:
        spline = fit_closed_spline(ext.landmarks)
    except (AdvmarkError, ValueError) as exc:
        err = f"{type(exc).__name__}: {exc}"
    latency = (time.perf_counter() - t0) * 1000.0
    return Prediction(ext.landmarks, ext.confidence, ext.flagged, cmap, spline, err, latency,
                      probs if keep_maps else None)
