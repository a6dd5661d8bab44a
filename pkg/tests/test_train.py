import math
from pathlib import Path

import numpy as np
import pytest
import torch

from advmark.core import ImageGrid
from advmark.dataset import write_corpus, read_manifest
from advmark.errors import AlternationViolation, ConfigError, EmptySplit, NonFiniteLoss
from advmark.infer import make_oracle_checkpoint
from advmark.model import module_from_checkpoint
from advmark.phantom import generate_corpus
from advmark.train import TrainConfig, TrainLog, frozen, load_config, train, validate

GRID = ImageGrid.desk(64)


@pytest.fixture(scope="module")
def corpus():
    samples = generate_corpus(8, 6, GRID, seed=3)
    train_s = [s for s in samples if s.patient_id < "P006"]
    val_s = [s for s in samples if s.patient_id >= "P006"]
    return train_s, val_s


def small(mode, **kw):
    base = dict(mode=mode, epochs=2, learning_rate_S=1e-3, learning_rate_D=1e-3, augment=False)
    base.update(kw)
    return TrainConfig(**base)


def test_mode_contract():
    w = TrainConfig(mode="baseline", lambda1=3.0, lambda2=1.0).weights
    assert (w.lambda1, w.lambda2) == (0.0, 0.0)
    w = TrainConfig(mode="multitask", lambda2=1.0).weights
    assert (w.lambda1, w.lambda2) == (1.0, 0.0)
    w = TrainConfig(mode="multitask_gan").weights
    assert (w.lambda1, w.lambda2) == (1.0, 0.02)
    assert "lambda1 = 0\nlambda2 = 0" in TrainConfig(mode="baseline").echo()


def test_config_validation_names_key(tmp_path):
    with pytest.raises(ConfigError, match="mode"):
        TrainConfig(mode="gan")
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="batch_size"):
        TrainConfig.from_dict({"batch_size": "eight"})
    p = tmp_path / "c.toml"
    p.write_text('[train]\nmode = "multitask"\nepochs = 3\nlearning_rate_S = 0.001\ncorpus = "data"\n')
    cfg = load_config(p)
    assert cfg.mode == "multitask" and cfg.epochs == 3 and cfg.corpus == str((tmp_path / "data").resolve())
    assert load_config(p, mode="baseline").mode == "baseline"


def test_desk_sigmas_scale_with_grid():
    assert TrainConfig(grid_size=64).sigmas == (1.5, 1.5)
    assert TrainConfig(grid_size=512).sigmas == (12.0, 12.0)


def test_empty_split(corpus):
    tr, va = corpus
    with pytest.raises(EmptySplit):
        train([], va, small("baseline"))
    with pytest.raises(EmptySplit):
        train(tr, [], small("baseline"))
    with pytest.raises(EmptySplit):
        validate(make_oracle_checkpoint_from_samples(va), [])


def make_oracle_checkpoint_from_samples(samples, tmp=None):
    from advmark.infer import image_key
    from advmark.model import Checkpoint
    table = {image_key(s.image): s.landmarks.points.tolist() for s in samples}
    return Checkpoint("oracle", {}, {}, 0, {}, "", {"mode": "oracle", "sigma_lm": 1.5, "sigma_cnt": 1.5,
                                                    "table": table})


def test_baseline_epoch_mean_decreases():
    samples = generate_corpus(10, 5, GRID, seed=11)  # 50 images
    tr = [s for s in samples if s.patient_id < "P008"]
    va = [s for s in samples if s.patient_id >= "P008"]
    res = train(tr, va, small("baseline", epochs=5, patience=10))
    means = [e["train_l_lm"] for e in res.epochs]
    assert len(means) == 5
    assert means[-1] < means[0]


def test_alternation_contract_and_log(corpus, tmp_path):
    tr, va = corpus
    res = train(tr, va, small("multitask_gan", epochs=1), out_dir=tmp_path)
    n_steps = len(res.log)
    assert res.alternation_checks == 2 * n_steps
    assert np.all(np.diff(res.log.column("step")) > 0)
    for c in ("l_lm", "l_cnt", "l_adv_s", "l_adv_d"):
        assert np.all(np.isfinite(res.log.column(c)))
    assert (tmp_path / "detector_best.ckpt").is_file() and (tmp_path / "discriminator.ckpt").is_file()
    header = (tmp_path / "train_log.csv").read_text().splitlines()[0]
    assert header == "step,l_lm,l_cnt,l_adv_s,l_adv_d,wall_ms"
    back = TrainLog.read_csv(tmp_path / "train_log.csv")
    assert np.allclose(back.column("l_lm"), res.log.column("l_lm"))


def test_frozen_network_is_untouched():
    from advmark.model import DetectorSpec, build_detector, parameter_checksum
    torch.manual_seed(0)
    net = build_detector(DetectorSpec(base_filters=4))
    before = parameter_checksum(net)
    with frozen(net):
        logits, _ = net(torch.randn(2, 1, 32, 32))
    assert parameter_checksum(net) == before
    assert all(p.requires_grad for p in net.parameters())


def test_alternation_violation_detected(corpus, monkeypatch):
    import advmark.train as T
    tr, va = corpus
    real = T.frozen

    class Leaky:
        # frozen() that lets the discriminator's BatchNorm statistics drift during the S step
        def __init__(self, m):
            self.m = m

        def __enter__(self):
            return self.m

        def __exit__(self, *a):
            return False

    monkeypatch.setattr(T, "frozen", lambda m: Leaky(m) if hasattr(m, "head") else real(m))
    with pytest.raises(AlternationViolation):
        train(tr, va, small("multitask_gan", epochs=1, max_steps=2))


def test_reproducible_losses(corpus):
    tr, va = corpus
    a = train(tr, va, small("multitask_gan", epochs=1, max_steps=6))
    b = train(tr, va, small("multitask_gan", epochs=1, max_steps=6))
    for c in ("l_lm", "l_cnt", "l_adv_s", "l_adv_d"):
        assert np.allclose(a.log.column(c), b.log.column(c), rtol=1e-3, atol=0)


def test_non_finite_loss_aborts(corpus):
    tr, va = corpus
    bad = [type(s)(np.full_like(s.image, np.nan), s.landmarks, s.sweep_id, s.frame_index, s.patient_id)
           for s in tr]
    with pytest.raises(NonFiniteLoss) as ei:
        train(bad, va, small("multitask", epochs=1))
    assert ei.value.step == 0 and not math.isfinite(ei.value.terms["l_lm"])


def test_modes_share_initial_detector_weights(corpus):
    tr, va = corpus
    a = train(tr, va, small("baseline", max_steps=1, learning_rate_S=1e-12))
    b = train(tr, va, small("multitask", max_steps=1, learning_rate_S=1e-12))
    pa, pb = a.detector.params, b.detector.params
    w = "encoder.0.0.weight"
    assert np.allclose(pa[w], pb[w], atol=1e-9)


def test_validate_oracle_and_schema(corpus, tmp_path):
    _, va = corpus
    write_corpus(va, tmp_path, GRID)
    m = read_manifest(tmp_path / "manifest.csv")
    rep = validate(make_oracle_checkpoint(m, 1.5, 1.5), m)
    assert rep.dice_mean == 1.0
    assert rep.landmarks.overall_mean < 1e-3
    assert len(rep.landmarks.mean) == len(rep.landmarks.p80) == 6
    assert rep.n_images == len(va)
    again = validate(make_oracle_checkpoint(m, 1.5, 1.5), m)
    assert again.to_dict()["overall_mean_mm"] == rep.to_dict()["overall_mean_mm"]


def test_validate_trained_checkpoint_is_deterministic(corpus):
    tr, va = corpus
    res = train(tr, va, small("multitask", epochs=1))
    r1, r2 = validate(res.detector, va), validate(res.detector, va)
    assert r1.dice_values == r2.dice_values
    assert module_from_checkpoint(res.detector).spec.multitask


def test_trained_discriminator_separates_real_and_generated_contours(corpus):
    tr, va = corpus
    res = train(tr, va, small("multitask_gan", epochs=3))
    S, D = module_from_checkpoint(res.detector), module_from_checkpoint(res.discriminator)
    from advmark.train import build_tensors, discriminator_scores
    data = build_tensors(va, GRID, *TrainConfig().sigmas)
    with torch.no_grad():
        fake = torch.sigmoid(S(data.images)[1])
    p_real, p_fake = discriminator_scores(D, data.images, data.contours, fake)
    assert float((p_real - p_fake).abs().mean()) > 0.1


@pytest.mark.slow
def test_adversarial_loss_stays_in_band_after_warmup(mode_comparison):
    for seed, res, _, _ in mode_comparison["multitask_gan"]:
        d = res.log.column("l_adv_d")
        steps_per_epoch = len(d) // len(res.epochs)
        start = int(TrainConfig().adv_warmup_epochs) * steps_per_epoch
        per_epoch = d[start:start + (len(d) - start) // steps_per_epoch * steps_per_epoch]
        per_epoch = per_epoch.reshape(-1, steps_per_epoch).mean(axis=1)
        assert np.all((per_epoch > 0.1) & (per_epoch < 4.0)), (seed, np.round(per_epoch, 3).tolist())
