"""Alternating optimisation of the detector S and discriminator D.

Three modes share one loop: ``baseline`` (landmark loss only), ``multitask``
(landmark + contour) and ``multitask_gan`` (adds the adversarial term and a
discriminator step before every detector step).
"""
from __future__ import annotations

import contextlib
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentPolicy, augment_corpus
from .core import CANONICAL_SIZE, ImageGrid, LandmarkSet, landmark_mask
from .dataset import CorpusManifest, SplitConfig, read_manifest, split_by_patient
from .errors import AlternationViolation, ConfigError, EmptyMask, EmptySplit, InvalidCount, NonFiniteLoss
from .evaluation import EvalReport, dice, landmark_errors
from .infer import load_predictor, predict
from .labelgen import make_class_targets, make_contour_target
from .loss import (
    LossWeights, adversarial_generator_loss_from_logits, contour_loss_from_logits,
    discriminator_loss_from_logits, landmark_loss_from_logits, total_detector_loss,
)
from .model import (
    Checkpoint, DetectorSpec, DiscriminatorSpec, build_detector, build_discriminator,
    capture_rng_state, checkpoint_from_module, config_hash, parameter_checksum, save_checkpoint,
)
from .phantom import Sample

log = logging.getLogger(__name__)

MODES = ("baseline", "multitask", "multitask_gan")
# landmark and contour widths in px on the 512 grid; scaled with the grid
CANONICAL_SIGMA_LM = 12.0
CANONICAL_SIGMA_CNT = 12.0


@dataclass(frozen=True)
class TrainConfig:
    """Training settings. Every field is a key of the TOML config file.

    ``sigma_lm`` / ``sigma_cnt`` default to 12 px at 512 px, scaled to ``grid_size``.
    ``lambda1`` / ``lambda2`` are overridden by the mode: baseline uses 0 / 0 and
    multitask uses lambda1 / 0.
    """

    mode: str = "multitask_gan"
    epochs: int = 60
    batch_size: int = 8
    learning_rate_S: float = 1e-3
    learning_rate_D: float = 1e-4
    lambda1: float = 1.0
    lambda2: float = 0.02
    sigma_lm: float | None = None
    sigma_cnt: float | None = None
    seed: int = 0
    grid_size: int = 64
    base_filters: int = 16
    checkpoint_interval: int = 0  # epochs between periodic checkpoints, 0 = best only
    patience: int = 10
    d_steps: int = 1  # discriminator steps per detector step
    adv_warmup_epochs: float = 10.0  # linear ramp of lambda2 from 0; D trains from step 0
    augment: bool = True
    corpus: str | None = None  # directory holding manifest.csv
    split: tuple[int, int, int] = (23, 6, 3)
    split_seed: int = 0
    verify_alternation: bool = True
    max_steps: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        for key in ("epochs", "batch_size", "grid_size", "base_filters", "d_steps"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1, got {getattr(self, key)}")
        for key in ("learning_rate_S", "learning_rate_D"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key}: must be > 0, got {getattr(self, key)}")
        for key in ("lambda1", "lambda2"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be >= 0, got {getattr(self, key)}")
        for key in ("sigma_lm", "sigma_cnt"):
            v = getattr(self, key)
            if v is not None and not v > 0:
                raise ConfigError(f"{key}: must be > 0, got {v}")
        if self.adv_warmup_epochs < 0:
            raise ConfigError(f"adv_warmup_epochs: must be >= 0, got {self.adv_warmup_epochs}")
        if self.patience < 1 or self.checkpoint_interval < 0:
            raise ConfigError("patience must be >= 1 and checkpoint_interval >= 0")
        if len(self.split) != 3 or min(self.split) < 0:
            raise ConfigError(f"split: expected three non-negative patient counts, got {self.split}")

    @property
    def weights(self) -> LossWeights:
        if self.mode == "baseline":
            return LossWeights(0.0, 0.0)
        if self.mode == "multitask":
            return LossWeights(self.lambda1, 0.0)
        return LossWeights(self.lambda1, self.lambda2)

    @property
    def multitask(self) -> bool:
        return self.mode != "baseline"

    @property
    def adversarial(self) -> bool:
        return self.mode == "multitask_gan"

    @property
    def grid(self) -> ImageGrid:
        return ImageGrid.desk(self.grid_size)

    @property
    def sigmas(self) -> tuple[float, float]:
        f = self.grid_size / CANONICAL_SIZE
        lm = self.sigma_lm if self.sigma_lm is not None else CANONICAL_SIGMA_LM * f
        cnt = self.sigma_cnt if self.sigma_cnt is not None else max(CANONICAL_SIGMA_CNT * f, 0.5)
        return float(lm), float(cnt)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, data: dict, **overrides) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        merged = {**data, **{k: v for k, v in overrides.items() if v is not None}}
        for key in merged:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        kw = {}
        for key, value in merged.items():
            kw[key] = _coerce(key, value, cls.__dataclass_fields__[key].default)
        return cls(**kw)

    def echo(self) -> str:
        w = self.weights
        lm, cnt = self.sigmas
        lines = [f"mode = {self.mode}", f"lambda1 = {w.lambda1:g}", f"lambda2 = {w.lambda2:g}",
                 f"sigma_lm = {lm:g}", f"sigma_cnt = {cnt:g}", f"seed = {self.seed}"]
        skip = {"mode", "lambda1", "lambda2", "sigma_lm", "sigma_cnt", "seed"}
        lines += [f"{k} = {v}" for k, v in self.to_dict().items() if k not in skip]
        return "\n".join(lines) + "\n"


def _coerce(key: str, value, default):
    """Check a config value against the type of its default."""
    if key == "split":
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"split: expected a list of three integers, got {value!r}")
        return tuple(value)
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or key in ("max_steps",):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or key in ("sigma_lm", "sigma_cnt"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def load_config(path, **overrides) -> TrainConfig:
    """Read a TOML config. Keys may sit at top level or under a ``[train]`` table."""
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    data = dict(data.get("train", data))
    corpus = data.get("corpus")
    if corpus is not None and not Path(corpus).is_absolute():
        data["corpus"] = str((path.parent / corpus).resolve())
    return TrainConfig.from_dict(data, **overrides)


# --- log -------------------------------------------------------------------------

LOG_COLUMNS = ("step", "l_lm", "l_cnt", "l_adv_s", "l_adv_d", "wall_ms")


@dataclass
class TrainLog:
    """Per-step losses; optionally mirrored to an append-only CSV file."""

    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)
            if not self.path.exists() or self.path.stat().st_size == 0:
                with open(self.path, "w", newline="") as f:
                    csv.writer(f).writerow(LOG_COLUMNS)

    def append(self, step: int, l_lm: float, l_cnt: float, l_adv_s: float, l_adv_d: float, wall_ms: float):
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError(f"log steps must increase: {step} after {self.records[-1]['step']}")
        rec = dict(zip(LOG_COLUMNS, (int(step), float(l_lm), float(l_cnt), float(l_adv_s),
                                     float(l_adv_d), float(wall_ms))))
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow([rec[c] for c in LOG_COLUMNS])

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def __len__(self):
        return len(self.records)

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        out = cls()
        for r in rows:
            out.append(**{k: float(r[k]) for k in LOG_COLUMNS})
        return out


# --- data ------------------------------------------------------------------------

@dataclass
class TensorSet:
    images: torch.Tensor  # (N, 1, H, W)
    classes: torch.Tensor  # (N, 7, H, W)
    contours: torch.Tensor  # (N, 1, H, W)

    def __len__(self):
        return self.images.shape[0]


def _contour_map(lm: LandmarkSet, grid: ImageGrid, sigma_cnt: float) -> np.ndarray:
    # augmentation may push landmarks off the grid; the curve itself is still defined
    try:
        return make_contour_target(LandmarkSet(lm.points), grid, sigma_cnt).likelihood
    except (EmptyMask, InvalidCount):
        return np.zeros(grid.shape)


def build_tensors(samples: Sequence[Sample], grid: ImageGrid, sigma_lm: float, sigma_cnt: float) -> TensorSet:
    n = len(samples)
    images = np.zeros((n, 1) + grid.shape, np.float32)
    classes = np.zeros((n, 7) + grid.shape, np.float32)
    contours = np.zeros((n, 1) + grid.shape, np.float32)
    for i, s in enumerate(samples):
        if s.image.shape != grid.shape:
            raise ConfigError(f"grid_size: image {s.image.shape} does not match grid {grid.shape}")
        images[i, 0] = s.image
        classes[i] = make_class_targets(s.landmarks, grid, sigma_lm).probs
        contours[i, 0] = _contour_map(s.landmarks, grid, sigma_cnt)
    return TensorSet(torch.from_numpy(images), torch.from_numpy(classes), torch.from_numpy(contours))


def _as_samples(data) -> list[Sample]:
    if isinstance(data, CorpusManifest):
        return data.samples()
    return list(data)


def prepare_splits(cfg: TrainConfig, manifest: CorpusManifest | None = None):
    """Load the corpus named in ``cfg`` and split it by patient into (train, val, test)."""
    if manifest is None:
        if cfg.corpus is None:
            raise ConfigError("corpus: no corpus directory given")
        path = Path(cfg.corpus)
        path = path / "manifest.csv" if path.is_dir() else path
        if not path.is_file():
            raise ConfigError(f"corpus: manifest not found at {path}")
        manifest = read_manifest(path)
    split = SplitConfig.by_counts(manifest.patients, cfg.split, cfg.split_seed)
    return split_by_patient(manifest, split)


# --- alternation helpers ------------------------------------------------------------

@contextlib.contextmanager
def frozen(module: torch.nn.Module):
    """Freeze parameters and stop BatchNorm from updating its running statistics.

    The module keeps normalising with batch statistics, so its forward pass is the
    same function as in its own training step.
    """
    grads = [p.requires_grad for p in module.parameters()]
    bns = [m for m in module.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    tracking = [m.track_running_stats for m in bns]
    for p in module.parameters():
        p.requires_grad_(False)
    for m in bns:
        m.track_running_stats = False
    try:
        yield module
    finally:
        for p, g in zip(module.parameters(), grads):
            p.requires_grad_(g)
        for m, t in zip(bns, tracking):
            m.track_running_stats = t


def discriminator_scores(D: torch.nn.Module, images: torch.Tensor, real: torch.Tensor,
                         fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """P(real) for annotated and generated contours, scored the way D is trained.

    D only ever sees mixed [real; fake] batches normalised with batch statistics;
    its BatchNorm running averages lag the weights and are not used.
    """
    was_training = D.training
    D.train()
    try:
        with torch.no_grad(), frozen(D):
            p = D.probability(torch.cat([images, images]), torch.cat([real, fake]))
    finally:
        D.train(was_training)
    return p[:len(real)], p[len(real):]


def _guard(name: str, module: torch.nn.Module, before: str | None, step: int) -> None:
    if before is not None and parameter_checksum(module) != before:
        raise AlternationViolation(f"{name} parameters changed while frozen at step {step}")


# --- training -------------------------------------------------------------------------

@dataclass
class TrainResult:
    detector: Checkpoint  # best validation checkpoint
    discriminator: Checkpoint | None
    log: TrainLog
    epochs: list[dict]
    best_epoch: int
    alternation_checks: int = 0


def _val_landmark_loss(model, data: TensorSet, batch_size: int) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            logits, _ = model(data.images[i:i + batch_size])
            total += float(landmark_loss_from_logits(logits, data.classes[i:i + batch_size])) * logits.shape[0]
    model.train()
    return total / len(data)


def train(train_data, val_data, cfg: TrainConfig, out_dir=None, meta: dict | None = None) -> TrainResult:
    """Train one detector (and a discriminator in ``multitask_gan`` mode).

    ``train_data`` / ``val_data`` are manifests or lists of samples on the
    config grid. The best checkpoint by validation landmark loss is returned;
    training stops early after ``patience`` epochs without improvement.
    """
    train_samples, val_samples = _as_samples(train_data), _as_samples(val_data)
    if not train_samples:
        raise EmptySplit("training split is empty")
    if not val_samples:
        raise EmptySplit("validation split is empty")
    grid = cfg.grid
    sigma_lm, sigma_cnt = cfg.sigmas
    w = cfg.weights

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if cfg.augment:
        policy = AugmentPolicy(rng_seed=cfg.seed).scaled_to(grid)
        train_samples = augment_corpus(train_samples, policy)
    tr = build_tensors(train_samples, grid, sigma_lm, sigma_cnt)
    va = build_tensors(val_samples, grid, sigma_lm, sigma_cnt)

    S = build_detector(DetectorSpec(base_filters=cfg.base_filters, multitask=cfg.multitask))
    opt_s = torch.optim.Adam(S.parameters(), lr=cfg.learning_rate_S)
    D = opt_d = None
    if cfg.adversarial:
        D = build_discriminator(DiscriminatorSpec.for_size(cfg.grid_size, base_filters=cfg.base_filters))
        opt_d = torch.optim.Adam(D.parameters(), lr=cfg.learning_rate_D)
    S.train()

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.echo())
    tlog = TrainLog(path=out / "train_log.csv" if out is not None else None)
    chash = config_hash(cfg.to_dict())
    meta_base = {"mode": cfg.mode, "multitask": cfg.multitask, "grid_size": cfg.grid_size,
                 "spacing": grid.spacing, "sigma_lm": sigma_lm, "sigma_cnt": sigma_cnt, "seed": cfg.seed, **(meta or {})}

    step, checks = 0, 0
    best, best_epoch, best_val, stale = None, -1, math.inf, 0
    epochs: list[dict] = []
    t_start = time.perf_counter()
    n = len(tr)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        lm_sum, count = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[i:i + cfg.batch_size])
            x, y_lm, y_cnt = tr.images[idx], tr.classes[idx], tr.contours[idx]
            b = x.shape[0]
            # one detector forward per step; S's parameters do not change until its own step
            logits, c = S(x)
            l_adv_d = torch.zeros(())
            if D is not None:
                # D step: S frozen (its output enters detached)
                fake = torch.sigmoid(c).detach()
                before = parameter_checksum(S) if cfg.verify_alternation else None
                for _ in range(cfg.d_steps):
                    d_logits = D(torch.cat([x, x]), torch.cat([y_cnt, fake]))
                    l_adv_d = discriminator_loss_from_logits(d_logits[:b], d_logits[b:])
                    opt_d.zero_grad(set_to_none=True)
                    l_adv_d.backward()
                    opt_d.step()
                _guard("detector", S, before, step)
                checks += before is not None

            # S step: D frozen
            before = parameter_checksum(D) if (D is not None and cfg.verify_alternation) else None
            l_lm = landmark_loss_from_logits(logits, y_lm)
            l_cnt = contour_loss_from_logits(c, y_cnt) if c is not None else torch.zeros(())
            l_adv_s = torch.zeros(())
            if D is not None:
                with frozen(D):
                    d_logits = D(torch.cat([x, x]), torch.cat([y_cnt, torch.sigmoid(c)]))
                l_adv_s = adversarial_generator_loss_from_logits(d_logits[b:])
            ramp = min(1.0, step / (cfg.adv_warmup_epochs * steps_per_epoch)) if cfg.adv_warmup_epochs else 1.0
            loss = total_detector_loss(l_lm, l_cnt, l_adv_s, replace(w, lambda2=w.lambda2 * ramp))
            terms = {"l_lm": l_lm.item(), "l_cnt": l_cnt.item(), "l_adv_s": l_adv_s.item(),
                     "l_adv_d": l_adv_d.item()}
            if not all(math.isfinite(v) for v in terms.values()):
                log.error("non-finite loss at step %d: %s", step, terms)
                raise NonFiniteLoss(step, terms)
            opt_s.zero_grad(set_to_none=True)
            loss.backward()
            opt_s.step()
            _guard("discriminator", D, before, step)
            checks += before is not None

            tlog.append(step, *terms.values(), (time.perf_counter() - t_start) * 1000.0)
            lm_sum += terms["l_lm"] * b
            count += b
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break

        val = _val_landmark_loss(S, va, cfg.batch_size)
        epochs.append({"epoch": epoch, "train_l_lm": lm_sum / count, "val_l_lm": val, "steps": step})
        log.info("epoch %d  train L_lm %.4f  val L_lm %.4f", epoch, lm_sum / count, val)
        meta = {**meta_base, "epoch": epoch, "val_l_lm": val}
        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best = checkpoint_from_module(S, step, capture_rng_state(rng), chash, meta)
            if out is not None:
                save_checkpoint(best, out / "detector_best.ckpt")
        else:
            stale += 1
        if out is not None and cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(checkpoint_from_module(S, step, capture_rng_state(rng), chash, meta),
                            out / f"detector_epoch{epoch + 1:03d}.ckpt")
        if stale >= cfg.patience or (cfg.max_steps is not None and step >= cfg.max_steps):
            break

    d_ckpt = None
    if D is not None:
        d_ckpt = checkpoint_from_module(D, step, capture_rng_state(rng), chash, meta_base)
        if out is not None:
            save_checkpoint(d_ckpt, out / "discriminator.ckpt")
    return TrainResult(best, d_ckpt, tlog, epochs, best_epoch, checks)


# --- validation -------------------------------------------------------------------------

def _mask_or_empty(points, grid: ImageGrid) -> np.ndarray:
    try:
        return landmark_mask(points, grid)
    except (EmptyMask, InvalidCount):
        return np.zeros(grid.shape, bool)


def validate(checkpoint, manifest, label: str = "") -> EvalReport:
    """Run inference and evaluation on every image of ``manifest``.

    ``checkpoint`` may be a Checkpoint, a path, or an already-loaded predictor.
    Dice compares filled spline masks; errors are reported in mm.
    """
    samples = _as_samples(manifest)
    if not samples:
        raise EmptySplit("evaluation split is empty")
    predictor = checkpoint if callable(checkpoint) else load_predictor(checkpoint)
    spacing = manifest.spacing if isinstance(manifest, CorpusManifest) else ImageGrid.desk(
        samples[0].image.shape[0]).spacing
    errors, dices, latencies = [], [], []
    for s in samples:
        grid = ImageGrid(*s.image.shape, spacing)
        p = predict(predictor, s.image)
        errors.append(landmark_errors(p.landmarks, s.landmarks, spacing))
        dices.append(dice(_mask_or_empty(p.landmarks.points, grid), _mask_or_empty(s.landmarks, grid)))
        latencies.append(p.latency_ms)
    label = label or predictor.meta.get("mode", "")
    return EvalReport.from_arrays(np.stack(errors), dices, label, latencies)


def with_mode(cfg: TrainConfig, mode: str, seed: int | None = None) -> TrainConfig:
    return replace(cfg, mode=mode, seed=cfg.seed if seed is None else seed)
