import json
import math

import numpy as np
import pytest
import torch

from depthstab.stabilizer import FlickerDepthPredictor, FlickerParams, StabilizerModel
from depthstab.training import ClipSampler, NumericalError, TrainConfig, lr_at, prepare, train


def small_cfg(**kw):
    return TrainConfig(**{"steps": 6, "batch": 2, "crop": 24, "val_every": 2, **kw})


def test_lr_schedule():
    cfg = TrainConfig(lr=6e-4, lr_decay_every=10, lr_decay=1e-4)
    assert lr_at(cfg, 0) == 6e-4 and lr_at(cfg, 10) == pytest.approx(5e-4)
    assert lr_at(cfg, 1000) == pytest.approx(6e-5)
    assert lr_at(TrainConfig(lr=1e-3), 999) == 1e-3


def test_sampler_is_a_function_of_step(scene, tiny_config):
    ps = [prepare(scene)]
    a = ClipSampler(ps, small_cfg(), tiny_config.n_ref, FlickerParams())
    b = ClipSampler(ps, small_cfg(), tiny_config.n_ref, a.params)
    x, y = a.sample(3), b.sample(3)
    assert all(torch.equal(x[k], y[k]) for k in x)
    assert x["rgb"].shape == (2, 2, 4, 3, 24, 24) and x["flows"].shape == (2, 1, 2, 24, 24)
    assert not torch.equal(a.sample(4)["depth"], x["depth"])


def test_loss_log_and_running_best(scene, tiny_config, tmp_path):
    model = StabilizerModel(tiny_config)
    res = train(model, [scene], small_cfg(), log_path=tmp_path / "log.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == list(range(6)) == [r["step"] for r in res.history]
    best = [r["running_best"] for r in rows]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert best[-1] == min(r["total"] for r in rows)


def test_training_leaves_the_predictor_alone(scene, tiny_config):
    pred = FlickerDepthPredictor(seed=4)
    before = [pred(g, 0, k).values for k, g in enumerate(scene.gt_disparity)]
    train(StabilizerModel(tiny_config), [scene], small_cfg(steps=2))
    after = [pred(g, 0, k).values for k, g in enumerate(scene.gt_disparity)]
    assert all(np.array_equal(a, b, equal_nan=True) for a, b in zip(before, after))


def test_resume_reproduces_the_uninterrupted_run(scene, tiny_config):
    straight = StabilizerModel(tiny_config)
    full = train(straight, [scene], small_cfg())
    part = StabilizerModel(tiny_config)
    first = train(part, [scene], small_cfg(), stop_at=3)
    assert first.step == 3
    rest = train(part, [scene], small_cfg(), resume=first)
    losses = [r["total"] for r in rest.history]
    assert [r["step"] for r in rest.history] == [3, 4, 5]
    assert np.allclose(losses, [r["total"] for r in full.history[3:]], rtol=0, atol=1e-6)
    for a, b in zip(straight.parameters(), part.parameters()):
        assert torch.allclose(a, b, atol=1e-6)


def test_best_validation_state_is_restored(scene, tiny_config):
    scores = iter([3.0, 1.0, 2.0])
    snaps = []

    def validate(m):
        snaps.append({k: v.clone() for k, v in m.state_dict().items()})
        return next(scores)

    model = StabilizerModel(tiny_config)
    res = train(model, [scene], small_cfg(), validate=validate)
    assert res.best_val == 1.0
    assert all(torch.equal(v, snaps[1][k]) for k, v in model.state_dict().items())


def test_best_state_survives_resume(scene, tiny_config):
    scores = iter([3.0, 1.0, 2.0])
    snaps = []

    def validate(m):
        snaps.append({k: v.clone() for k, v in m.state_dict().items()})
        return next(scores)

    model = StabilizerModel(tiny_config)
    first = train(model, [scene], small_cfg(), validate=validate, stop_at=4)
    train(model, [scene], small_cfg(), validate=validate, resume=first)
    assert all(torch.equal(v, snaps[1][k]) for k, v in model.state_dict().items())


def test_non_finite_loss_raises(scene, tiny_config):
    def bad(model, batch):
        out = model(batch["rgb"][:, 0, 0].new_zeros(1, 4, 8, 8), batch["rgb"].new_zeros(1, 3, 4, 8, 8))
        return out.sum() * math.nan, {"total": math.nan}

    with pytest.raises(NumericalError):
        train(StabilizerModel(tiny_config), [scene], small_cfg(), objective=bad)


def test_training_reduces_loss(scene, tiny_config):
    model = StabilizerModel(tiny_config)
    res = train(model, [scene], small_cfg(steps=60, batch=4))
    totals = [r["total"] for r in res.history]
    assert np.mean(totals[-10:]) < np.mean(totals[:10])
