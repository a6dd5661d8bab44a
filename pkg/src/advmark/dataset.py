"""Corpus manifest format, image I/O, canonicalization and patient-level splits.

Manifest layout (UTF-8)::

    # advmark corpus manifest
    version: 1
    spacing: 1.352
    encoding: png16
    grid: 64x64

    patient_id,sweep_id,frame_index,image_path,x1,y1,...,x6,y6
    P000,P000-S0,0,images/P000_S0_0000.png,12.5,30.25,...

The header block ends at the first blank line. Image paths are relative to the
manifest's directory. Invalid landmarks are written as ``nan``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import N_LANDMARKS, ImageGrid, LandmarkSet
from .errors import CoverageError, DegenerateImage, ManifestError, OverlapError
from .phantom import Sample

MANIFEST_VERSION = 1
ENCODINGS = ("png16", "pgm16")
COLUMNS = ["patient_id", "sweep_id", "frame_index", "image_path"] + [
    f"{a}{k}" for k in range(1, N_LANDMARKS + 1) for a in ("x", "y")]


@dataclass
class ManifestEntry:
    patient_id: str
    sweep_id: str
    frame_index: int
    image_path: str
    landmarks: np.ndarray  # (6, 2) px in canonical space

    def __post_init__(self):
        if not self.patient_id:
            raise ManifestError("patient_id must be non-empty")
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64).reshape(N_LANDMARKS, 2)


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    spacing: float
    grid: ImageGrid
    encoding: str = "png16"
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.entries)

    @property
    def patients(self) -> list[str]:
        return sorted({e.patient_id for e in self.entries})

    def subset(self, patients: Iterable[str]) -> "CorpusManifest":
        keep = set(patients)
        return CorpusManifest([e for e in self.entries if e.patient_id in keep],
                              self.spacing, self.grid, self.encoding, self.root)

    def image_file(self, entry: ManifestEntry) -> Path:
        return self.root / entry.image_path

    def load_image(self, entry: ManifestEntry) -> np.ndarray:
        return read_image(self.image_file(entry))

    def samples(self) -> list[Sample]:
        return [Sample(self.load_image(e), LandmarkSet(e.landmarks), e.sweep_id, e.frame_index, e.patient_id)
                for e in self.entries]

    def sweeps(self) -> list[list[Sample]]:
        """Samples grouped by sweep, each ordered by frame index."""
        groups: dict[str, list[Sample]] = {}
        for s in self.samples():
            groups.setdefault(s.sweep_id, []).append(s)
        return [sorted(g, key=lambda s: s.frame_index) for _, g in sorted(groups.items())]


# --- image files -----------------------------------------------------------

def write_image(path: Path, image: np.ndarray) -> None:
    """Store an intensity image in [0, 1] as 16-bit grayscale (PNG or binary PGM)."""
    path = Path(path)
    q = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    if path.suffix.lower() == ".pgm":
        h, w = q.shape
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
            f.write(q.astype(">u2").tobytes())
    else:
        Image.fromarray(q).save(path, format="PNG")


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64) / 65535.0


# --- manifest --------------------------------------------------------------

def write_manifest(manifest: CorpusManifest, path: Path) -> None:
    path = Path(path)
    buf = io.StringIO(newline="")
    buf.write("# advmark corpus manifest\n")
    buf.write(f"version: {MANIFEST_VERSION}\n")
    buf.write(f"spacing: {manifest.spacing!r}\n")
    buf.write(f"encoding: {manifest.encoding}\n")
    buf.write(f"grid: {manifest.grid.height}x{manifest.grid.width}\n\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for e in manifest.entries:
        w.writerow([e.patient_id, e.sweep_id, e.frame_index, e.image_path]
                   + [repr(float(v)) for v in e.landmarks.ravel()])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def read_manifest(path: Path) -> CorpusManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").split("\n")
    header: dict[str, str] = {}
    i = 0
    while i < len(lines) and lines[i].strip():
        line = lines[i].strip()
        i += 1
        if line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ManifestError(f"bad header line {i}: {line!r}")
        header[key.strip()] = value.strip()
    for key in ("version", "spacing", "encoding", "grid"):
        if key not in header:
            raise ManifestError(f"manifest header is missing {key!r}")
    if int(header["version"]) != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {header['version']}")
    if header["encoding"] not in ENCODINGS:
        raise ManifestError(f"unknown encoding {header['encoding']!r}")
    h, w = (int(v) for v in header["grid"].lower().split("x"))
    spacing = float(header["spacing"])
    rows = list(csv.reader(line for line in lines[i:] if line.strip()))
    if rows and rows[0] == COLUMNS:
        rows = rows[1:]
    entries = []
    for n, row in enumerate(rows):
        if len(row) != len(COLUMNS):
            raise ManifestError(f"record {n} has {len(row)} fields, expected {len(COLUMNS)}")
        entries.append(ManifestEntry(row[0], row[1], int(row[2]), row[3],
                                     np.array([float(v) for v in row[4:]])))
    manifest = CorpusManifest(entries, spacing, ImageGrid(h, w, spacing), header["encoding"], path.parent)
    for e in entries:
        if not manifest.image_file(e).is_file():
            raise ManifestError(f"image listed in manifest does not exist: {e.image_path}")
    return manifest


def write_corpus(samples: Sequence[Sample], out_dir: Path, grid: ImageGrid,
                 encoding: str = "png16") -> CorpusManifest:
    """Write images plus ``manifest.csv`` into ``out_dir``."""
    if encoding not in ENCODINGS:
        raise ValueError(f"unknown encoding {encoding!r}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    ext = ".png" if encoding == "png16" else ".pgm"
    entries = []
    for s in samples:
        rel = f"images/{s.sweep_id}_{s.frame_index:04d}{ext}"
        write_image(out_dir / rel, s.image)
        pts = np.where(s.landmarks.valid[:, None], s.landmarks.points, np.nan)
        entries.append(ManifestEntry(s.patient_id, s.sweep_id, s.frame_index, rel, pts))
    manifest = CorpusManifest(entries, grid.spacing, grid, encoding, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


# --- canonicalization ------------------------------------------------------

def canonicalize(image: np.ndarray, spacing_in: float, target: ImageGrid,
                 landmarks: LandmarkSet | None = None):
    """Resample to ``target.spacing`` (bilinear) then centre pad with zeros or centre crop.

    Returns the canonical image, plus the transformed landmarks when given.
    Landmarks that leave the grid are marked invalid.
    """
    if not spacing_in > 0:
        raise ValueError("spacing_in must be positive")
    image = np.asarray(image, dtype=np.float64)
    if min(image.shape) < 8:
        raise DegenerateImage(f"image {image.shape} is smaller than 8 px")
    scale = spacing_in / target.spacing
    if abs(scale - 1.0) > 1e-12:
        h = max(int(round(image.shape[0] * scale)), 1)
        w = max(int(round(image.shape[1] * scale)), 1)
        # pixel-centre aligned: out index i samples input (i + 0.5) / scale - 0.5
        rr = (np.arange(h) + 0.5) / scale - 0.5
        cc = (np.arange(w) + 0.5) / scale - 0.5
        R, C = np.meshgrid(rr, cc, indexing="ij")
        image = ndimage.map_coordinates(image, [R, C], order=1, mode="nearest")
    else:
        scale = 1.0
    out = np.zeros(target.shape, dtype=np.float64)
    h, w = image.shape
    # offsets of the resampled image inside the output (negative = cropped)
    oy = (target.height - h) // 2 if target.height >= h else -((h - target.height) // 2)
    ox = (target.width - w) // 2 if target.width >= w else -((w - target.width) // 2)
    src_y0, dst_y0 = max(-oy, 0), max(oy, 0)
    src_x0, dst_x0 = max(-ox, 0), max(ox, 0)
    ny = min(h - src_y0, target.height - dst_y0)
    nx = min(w - src_x0, target.width - dst_x0)
    out[dst_y0:dst_y0 + ny, dst_x0:dst_x0 + nx] = image[src_y0:src_y0 + ny, src_x0:src_x0 + nx]
    if landmarks is None:
        return out
    pts = (landmarks.points + 0.5) * scale - 0.5 + np.array([ox, oy])
    valid = landmarks.valid & target.contains(pts)
    return out, LandmarkSet(pts, valid)


# --- splits ----------------------------------------------------------------

@dataclass(frozen=True)
class SplitConfig:
    train_patients: frozenset
    val_patients: frozenset
    test_patients: frozenset

    def __init__(self, train_patients, val_patients, test_patients):
        object.__setattr__(self, "train_patients", frozenset(train_patients))
        object.__setattr__(self, "val_patients", frozenset(val_patients))
        object.__setattr__(self, "test_patients", frozenset(test_patients))

    @classmethod
    def by_counts(cls, patients: Sequence[str], counts: Sequence[int], seed: int = 0) -> "SplitConfig":
        """Random patient partition with the given (train, val, test) sizes."""
        patients = sorted(patients)
        if sum(counts) != len(patients):
            raise CoverageError(f"split counts {tuple(counts)} do not cover {len(patients)} patients")
        order = np.random.default_rng(seed).permutation(len(patients))
        shuffled = [patients[i] for i in order]
        a, b = counts[0], counts[0] + counts[1]
        return cls(shuffled[:a], shuffled[a:b], shuffled[b:])

    def as_dict(self) -> dict[str, list[str]]:
        return {"train": sorted(self.train_patients), "val": sorted(self.val_patients),
                "test": sorted(self.test_patients)}


def split_by_patient(manifest: CorpusManifest, cfg: SplitConfig):
    """Return ``(train, val, test)`` manifests with no patient shared between them."""
    sets = [cfg.train_patients, cfg.val_patients, cfg.test_patients]
    for i in range(3):
        for j in range(i + 1, 3):
            both = sets[i] & sets[j]
            if both:
                raise OverlapError(f"patients assigned to two splits: {sorted(both)}")
    missing = set(manifest.patients) - set().union(*sets)
    if missing:
        raise CoverageError(f"patients not assigned to any split: {sorted(missing)}")
    return tuple(manifest.subset(s) for s in sets)
