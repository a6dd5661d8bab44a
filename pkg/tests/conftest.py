import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest

MODES = ("baseline", "multitask", "multitask_gan")
COMPARISON = dict(patients=32, frames=5, split=(23, 6, 3), seeds=(0, 1, 2))


@pytest.fixture(scope="session")
def mode_comparison(tmp_path_factory):
    """Train every mode on one seeded 32-patient 64x64 corpus for three seeds (default config).

    Returns ``{mode: [(seed, TrainResult, test EvalReport, seconds), ...]}``.
    """
    import time
    from advmark.core import ImageGrid
    from advmark.dataset import SplitConfig, read_manifest, split_by_patient, write_corpus
    from advmark.phantom import generate_corpus
    from advmark.train import TrainConfig, train, validate

    root = tmp_path_factory.mktemp("comparison")
    grid = ImageGrid.desk(64)
    write_corpus(generate_corpus(COMPARISON["patients"], COMPARISON["frames"], grid, seed=0), root, grid)
    m = read_manifest(root / "manifest.csv")
    tr, va, te = split_by_patient(m, SplitConfig.by_counts(m.patients, COMPARISON["split"], seed=0))
    out = {k: [] for k in MODES}
    for seed in COMPARISON["seeds"]:
        for mode in MODES:
            t0 = time.perf_counter()
            res = train(tr, va, TrainConfig(mode=mode, seed=seed))
            rep = validate(res.detector, te, mode)
            dt = time.perf_counter() - t0
            out[mode].append((seed, res, rep, dt))
            print(f"\n  seed {seed} {mode:14s} test Dice {rep.dice_mean:.4f}  "
                  f"best epoch {res.best_epoch}  ({dt:.0f} s)", flush=True)
    return out
