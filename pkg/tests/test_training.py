import json

import numpy as np
import pytest

from liwt.autodiff import Tensor, backward, sum_
from liwt.data import CurriculumSchedule, ImageSet, make_batch
from liwt.model import LiwtModel, load_checkpoint
from liwt.training import (
    Adam,
    RunManifest,
    TrainConfig,
    TrainingError,
    batch_loss,
    fit,
    lr_at,
    train_step,
)

from conftest import SMALL, smooth_image


def test_lr_schedule():
    assert lr_at(0) == 1e-4
    assert lr_at(199) == 1e-4
    assert lr_at(200) == 5e-5
    assert lr_at(999) == pytest.approx(1e-4 * 0.5**4)
    vals = [lr_at(e) for e in range(0, 1200, 7)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lr_at(-1)


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([0.5, -0.2, 3.0]), requires_grad=True)
    opt = Adam([("p", p)])
    p.grad = np.array([0.3, -7.0, 1e-3])
    before = p.data.copy()
    opt.step(1e-2)
    assert np.allclose(before - p.data, 1e-2 * np.sign([0.3, -7.0, 1e-3]), rtol=1e-4)


def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam([("p", p)])
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step(0.1)
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adam_quadratic_converges():
    # minimum of (x - 3)^2 is x = 3
    x = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([("x", x)])
    for _ in range(200):
        x.zero_grad()
        d = x + Tensor(np.array([-3.0]))
        backward(sum_(d * d))
        opt.step(0.1)
    assert abs(x.data[0] - 3.0) < 0.05


def _images(n=2, size=64):
    return ImageSet([smooth_image(size, size, seed=i) for i in range(n)], [f"im{i}" for i in range(n)])


def _batch(seed=0, p=8):
    return make_batch(_images(), [0, 1], CurriculumSchedule.fixed(2.0), 0, 1, p, np.random.default_rng(seed))


def test_perfect_prediction_gives_zero_loss_and_no_update():
    m = LiwtModel(SMALL, seed=0, dtype=np.float64)
    b = _batch()
    b.gt_rgb = np.stack([
        m(Tensor(b.lr_patches[i]), b.coords[i], b.cells[i]).data for i in range(len(b))
    ])
    before = {n: p.data.copy() for n, p in m.named_parameters()}
    opt = Adam(m.named_parameters())
    assert train_step(m, b, opt, 1e-3) == 0.0
    for n, p in m.named_parameters():
        assert np.array_equal(p.data, before[n]), n


def test_small_step_decreases_loss_on_frozen_batch():
    m = LiwtModel(SMALL, seed=2, dtype=np.float64)
    b = _batch(seed=3)
    opt = Adam(m.named_parameters())
    first = train_step(m, b, opt, 1e-6)
    assert batch_loss(m, b).item() < first


def test_loss_is_mean_abs_error():
    m = LiwtModel(SMALL, seed=4, dtype=np.float64)
    b = _batch(seed=5)
    preds = [m(Tensor(b.lr_patches[i]), b.coords[i], b.cells[i]).data for i in range(len(b))]
    ref = np.mean(np.abs(np.stack(preds) - b.gt_rgb))
    assert batch_loss(m, b).item() == pytest.approx(ref, rel=1e-12)


def test_nonfinite_loss_dumps_and_raises(tmp_path):
    m = LiwtModel(SMALL, seed=0)
    m.decoder.layers[0].weight.data[0, 0] = np.nan
    with pytest.raises(TrainingError):
        train_step(m, _batch(), Adam(m.named_parameters()), 1e-4, dump_dir=tmp_path)
    dump = json.loads((tmp_path / "nonfinite_dump.json").read_text())
    assert dump["params"]["decoder.layers.0.weight"]["finite"] is False


def test_zero_epochs_writes_initial_checkpoint_only(tmp_path):
    m = LiwtModel(SMALL, seed=0)
    man = fit(m, _images(1), CurriculumSchedule.fixed(2.0), TrainConfig(epochs=0, patch=8), tmp_path)
    assert man.checkpoints == ["ckpt_e00000.liwt"]
    assert man.losses == []
    reloaded = RunManifest.load(tmp_path / "manifest.jsonl")
    assert reloaded.records == man.records


def _cfg(epochs, **kw):
    return TrainConfig(epochs=epochs, batch=2, patch=8, queries=24, lr=1e-3, checkpoint_every=2, seed=11, **kw)


def _params_bytes(model):
    return [(n, p.data.tobytes()) for n, p in model.named_parameters()]


def test_resume_matches_uninterrupted_run(tmp_path):
    imgs, sched = _images(3), CurriculumSchedule()
    full = LiwtModel(SMALL, seed=5)
    man_full = fit(full, imgs, sched, _cfg(4), tmp_path / "full")

    part = LiwtModel(SMALL, seed=5)
    fit(part, imgs, sched, _cfg(4), tmp_path / "part")  # same run, used only for its epoch-2 checkpoint
    resumed = LiwtModel(SMALL, seed=99)  # parameters come from the checkpoint
    man_res = fit(resumed, imgs, sched, _cfg(4), tmp_path / "res", resume=tmp_path / "part" / "ckpt_e00002.liwt")

    assert man_res.losses == man_full.losses[2:]
    assert _params_bytes(resumed) == _params_bytes(full)
    a = (tmp_path / "full" / "ckpt_e00004.liwt").read_bytes()
    b = (tmp_path / "res" / "ckpt_e00004.liwt").read_bytes()
    assert a == b


def test_resume_in_place_keeps_history(tmp_path):
    imgs, sched = _images(2), CurriculumSchedule.fixed(2.0)
    m = LiwtModel(SMALL, seed=1)
    fit(m, imgs, sched, _cfg(2), tmp_path)
    m2 = LiwtModel(SMALL, seed=1)
    man = fit(m2, imgs, sched, _cfg(4), tmp_path, resume=tmp_path / "ckpt_e00002.liwt")
    kinds = [r["kind"] for r in man.records]
    assert kinds[0] == "config" and "resume" in kinds
    assert [r["epoch"] for r in man.records if r["kind"] == "epoch"] == [0, 1, 2, 3]
    _, _, meta = load_checkpoint(tmp_path / "ckpt_e00004.liwt")
    assert meta["epoch"] == 4 and meta["adam_step"] == 4


def test_fit_checkpoint_cadence_and_loss_csv(tmp_path):
    m = LiwtModel(SMALL, seed=0)
    man = fit(m, _images(2), CurriculumSchedule(), _cfg(3), tmp_path)
    assert man.checkpoints == ["ckpt_e00000.liwt", "ckpt_e00002.liwt", "ckpt_e00003.liwt"]
    rows = (tmp_path / "loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,loss,lr" and len(rows) == 4
    assert [float(r.split(",")[1]) for r in rows[1:]] == man.losses


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patch=7)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    assert TrainConfig(patch=6).queries_per_patch == 36
