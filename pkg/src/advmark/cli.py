"""Command-line entry point: ``advmark <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import ImageGrid, fit_closed_spline
from .dataset import ENCODINGS, read_image, read_manifest, write_corpus
from .errors import AdvmarkError, ConfigError, ManifestError, NonFiniteLoss
from .evaluation import annotation_noise, format_table
from .phantom import generate, generate_corpus, random_spec

MODE_ORDER = {"baseline": 0, "multitask": 1, "multitask_gan": 2}

CONFIG_HELP = """config file keys (TOML, top level or under [train]):
  corpus               corpus directory or manifest.csv (required, relative to the config file)
  mode                 baseline | multitask | multitask_gan   (default multitask_gan)
  epochs               maximum epochs (60)
  batch_size           images per step (8)
  learning_rate_S      detector Adam learning rate (1e-3)
  learning_rate_D      discriminator Adam learning rate (1e-4)
  lambda1, lambda2     contour / adversarial weights (1.0, 0.02); forced to 0 by the mode
  sigma_lm, sigma_cnt  target widths in px (default 12 px at 512, scaled to grid_size)
  seed                 training seed (0)
  grid_size            image size in px (64)
  base_filters         first encoder width (16)
  checkpoint_interval  epochs between extra checkpoints, 0 = best only (0)
  patience             early stopping patience in epochs (10)
  d_steps              discriminator steps per detector step (1)
  adv_warmup_epochs    epochs over which lambda2 ramps linearly from 0 (10)
  augment              triple the training set with shifted / rotated copies (true)
  split                [train, val, test] patient counts ([23, 6, 3])
  split_seed           seed of the patient split (0)
  verify_alternation   checksum the frozen network around every step (true)
  max_steps            optional cap on detector steps
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _hardware() -> str:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    import torch
    return (f"{cpu}; {os.cpu_count()} logical cpus; torch {torch.__version__} "
            f"({torch.get_num_threads()} threads); {platform.system()} {platform.release()}")


# --- commands -------------------------------------------------------------------------

def cmd_phantom_gen(args) -> int:
    grid = ImageGrid.desk(args.size)
    print(f"seed = {args.seed}")
    samples = generate_corpus(args.patients, args.frames_per_sweep, grid, seed=args.seed,
                              shadow_probability=args.shadow_probability)
    manifest = write_corpus(samples, Path(args.out), grid, args.encoding)
    print(f"wrote {len(manifest)} records for {len(manifest.patients)} patients to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .model import save_checkpoint
    from .train import load_config, prepare_splits, train, validate

    cfg = load_config(args.config, mode=args.mode, seed=args.seed, epochs=args.epochs)
    sys.stdout.write(cfg.echo())
    tr, va, te = prepare_splits(cfg)
    out = Path(args.out)
    split = {"train": tr.patients, "val": va.patients, "test": te.patients}
    meta = {"corpus": str(Path(cfg.corpus).resolve()), "split": split}
    res = train(tr, va, cfg, out_dir=out, meta=meta)
    (out / "split.json").write_text(json.dumps(split, indent=1))
    print(f"trained {len(res.log)} steps over {len(res.epochs)} epochs; best epoch {res.best_epoch} "
          f"(val L_lm {res.epochs[res.best_epoch]['val_l_lm']:.4f})")
    if res.alternation_checks:
        print(f"alternation checks passed: {res.alternation_checks}")
    save_checkpoint(res.detector, out / "detector_best.ckpt")
    print(f"checkpoint: {out / 'detector_best.ckpt'}")
    if len(te):
        rep = validate(res.detector, te, cfg.mode)
        print(f"test Dice {rep.dice_mean:.4f}, mean error {rep.landmarks.overall_mean:.3f} mm")
    return 0


def _resolve_manifest(args, meta: dict):
    corpus = args.corpus or meta.get("corpus")
    if corpus is None:
        raise ConfigError("corpus: checkpoint has no corpus path; pass --corpus")
    path = Path(corpus)
    return read_manifest(path / "manifest.csv" if path.is_dir() else path)


def _split_manifest(manifest, split_name: str, meta: dict):
    if split_name == "all":
        return manifest
    split = meta.get("split")
    if split is None:
        raise ConfigError(f"split: checkpoint records no patient split; use --split all")
    return manifest.subset(split[split_name])


def cmd_eval(args) -> int:
    from .model import load_checkpoint
    from .train import validate

    ckpts = [load_checkpoint(Path(p)) for p in args.checkpoint]
    ckpts.sort(key=lambda c: MODE_ORDER.get(c.meta.get("mode", ""), -1))
    reports, noise, n_split = [], None, None
    for c in ckpts:
        manifest = _split_manifest(_resolve_manifest(args, c.meta), args.split, c.meta)
        n_split = len(manifest)
        label = c.meta.get("mode", c.kind).replace("_", " ").title().replace("Gan", "GAN")
        reports.append(validate(c, manifest, label))
        if noise is None:
            noise = annotation_noise(manifest.sweeps(), manifest.spacing)
    text = format_table(reports, noise if args.noise else None)
    body = [text, ""]
    for r in reports:
        body += [f"[{r.label}]", r.to_keyvalue()]
    Path(args.report).write_text("\n".join(body))
    sys.stdout.write(text)
    print(f"{n_split} images in split {args.split!r}; report written to {args.report}")
    return 0


def _target_for(image_path: Path, manifest):
    for e in manifest.entries:
        if manifest.image_file(e).resolve() == image_path.resolve():
            return e.landmarks
    return None


def render_overlay(image, prediction, target=None, contour=None):
    """RGB overlay at the image's own resolution.

    Green: target contour. Blue: predicted landmarks (diamonds) and their spline.
    The contour heatmap, when given, is blended in as an orange tint.
    """
    from PIL import Image, ImageDraw

    g = (np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    rgb = np.stack([g, g, g], axis=-1).astype(np.float64)
    if contour is not None:
        a = np.clip(contour, 0.0, 1.0)[..., None] * 0.6
        rgb = rgb * (1 - a) + a * np.array([255.0, 64.0, 0.0])
    im = Image.fromarray(rgb.astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(im)
    if prediction.spline is not None:
        poly = prediction.spline.polyline(0.5)
        draw.line([tuple(p) for p in poly] + [tuple(poly[0])], fill=(40, 90, 255), width=1)
    if target is not None:
        poly = fit_closed_spline(target).polyline(0.5)
        draw.line([tuple(p) for p in poly] + [tuple(poly[0])], fill=(0, 255, 0), width=1)
    r = max(1.5, image.shape[0] / 64)
    for x, y in prediction.landmarks.points:
        draw.polygon([(x, y - r), (x + r, y), (x, y + r), (x - r, y)], outline=(40, 90, 255))
    return im


def cmd_render(args) -> int:
    from .infer import load_predictor, predict
    from .model import load_checkpoint

    ckpt = load_checkpoint(Path(args.checkpoint))
    predictor = load_predictor(ckpt)
    image_path = Path(args.image)
    if not image_path.is_file():
        raise FileNotFoundError(f"image not found: {image_path}")
    image = read_image(image_path)
    pred = predict(predictor, image)
    target = None
    try:
        target = _target_for(image_path, _resolve_manifest(args, ckpt.meta))
    except (ConfigError, ManifestError):
        pass
    if target is None:
        print("no target annotation found for this image; drawing the prediction only")
    im = render_overlay(image, pred, target, pred.contour)
    im.save(args.out)
    print(f"overlay {im.size[0]}x{im.size[1]} written to {args.out}")
    return 0


def cmd_bench(args) -> int:
    from .infer import load_predictor, predict
    from .model import load_checkpoint

    ckpt = load_checkpoint(Path(args.checkpoint))
    predictor = load_predictor(ckpt)
    size = args.size or int(ckpt.meta.get("grid_size", 64))
    grid = ImageGrid.desk(size)
    print(f"seed = {args.seed}")
    rng = np.random.default_rng(args.seed)
    images = [generate(random_spec(grid, rng)).image for _ in range(min(args.n, 8))]
    predict(predictor, images[0])  # warm-up
    times = []
    for i in range(args.n):
        t0 = time.perf_counter()
        predict(predictor, images[i % len(images)])
        times.append((time.perf_counter() - t0) * 1000.0)
    t = np.asarray(times)
    print(f"image_size = {size}x{size}")
    print(f"n = {len(t)}")
    print(f"latency_ms_mean = {t.mean():.3f}")
    print(f"latency_ms_p95 = {np.percentile(t, 95):.3f}")
    print(f"hardware = {_hardware()}")
    return 0


def cmd_make_oracle(args) -> int:
    from .infer import make_oracle_checkpoint
    from .model import save_checkpoint

    path = Path(args.corpus)
    manifest = read_manifest(path / "manifest.csv" if path.is_dir() else path)
    ckpt = make_oracle_checkpoint(manifest, args.sigma_lm, args.sigma_cnt,
                                  {"corpus": str(path.resolve()), "grid_size": manifest.grid.height})
    save_checkpoint(ckpt, Path(args.out))
    print(f"oracle checkpoint for {len(manifest)} images written to {args.out}")
    return 0


# --- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="advmark", description="Adversarial multitask landmark and contour detection.")
    p.add_argument("--version", action="version", version=f"advmark {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("phantom-gen", help="write a synthetic phantom corpus")
    g.add_argument("--patients", type=int, required=True)
    g.add_argument("--frames-per-sweep", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64, help="image size in px (default 64)")
    g.add_argument("--encoding", choices=ENCODINGS, default="png16")
    g.add_argument("--shadow-probability", type=float, default=0.5)
    g.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", help="train a detector", epilog=CONFIG_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config", required=True)
    t.add_argument("--mode", choices=tuple(MODE_ORDER))
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--epochs", type=int, help="overrides the config epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints and write a comparison report")
    e.add_argument("--checkpoint", nargs="+", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--report", required=True)
    e.add_argument("--corpus", help="corpus directory (default: the one recorded in the checkpoint)")
    e.add_argument("--no-noise", dest="noise", action="store_false", help="omit the annotation-noise column")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="draw target and prediction over an image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--corpus", help="corpus holding the target annotation")
    r.set_defaults(func=cmd_render)

    b = sub.add_parser("bench", help="single-image inference latency")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--n", type=int, default=100)
    b.add_argument("--size", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    o = sub.add_parser("make-oracle", help="checkpoint that returns the ground truth of a corpus")
    o.add_argument("--corpus", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--sigma-lm", type=float, default=1.5)
    o.add_argument("--sigma-cnt", type=float, default=1.5)
    o.set_defaults(func=cmd_make_oracle)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if getattr(args, "n", 1) is not None and getattr(args, "n", 1) < 1:
        print("advmark: --n must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteLoss as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    except (AdvmarkError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
