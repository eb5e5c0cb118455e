import numpy as np
import pytest

from fastcaps.checkpoint import load_checkpoint
from fastcaps.data import SynthParams, split, synth_nodules
from fastcaps.losses import LossConfig
from fastcaps.network import build_model, preset
from fastcaps.optim import Adam
from fastcaps.tensor import Tape, parameter, precision, sum_, square
from fastcaps.train import (Trainer, TrainConfig, evaluate, fraction_sweep, prepare_for_model, read_history_csv,
                            sweep_medians, train_step)


def adam_loop(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return p


def test_adam_first_step_is_lr():
    with precision("f64"):
        p = parameter(np.array([1.0, -2.0]))
        opt = Adam({"p": p}, lr=0.01)
        opt.step({p: np.array([3.0, -0.5])})
    np.testing.assert_allclose(p.data, [0.99, -1.99], atol=1e-9)


def test_adam_matches_scalar_loop(rng):
    grads = rng.normal(size=(7, 3))
    with precision("f64"):
        p = parameter(np.array([0.5, 0.0, -1.0]))
        opt = Adam({"p": p}, lr=0.05)
        for g in grads:
            opt.step({p: g})
    for k in range(3):
        assert p.data[k] == pytest.approx(adam_loop([0.5, 0.0, -1.0][k], grads[:, k], 0.05), abs=1e-12)


def test_adam_minimises_quadratic():
    with precision("f64"):
        p = parameter(np.array([3.0, -4.0]))
        opt = Adam({"p": p}, lr=0.1)
        for _ in range(300):
            with Tape() as tape:
                loss = sum_(square(p))
            opt.step(tape.backward(loss))
    assert np.all(np.abs(p.data) < 1e-2)


def test_adam_rejects_bad_lr():
    with pytest.raises(ValueError):
        Adam({}, lr=0.0)


@pytest.fixture(scope="module")
def small_data():
    return split(synth_nodules(48, 5, SynthParams.for_size(12)), (0.5, 0.25, 0.25), 5)


def test_prepare_for_model(small_data):
    model = build_model(preset("tiny-test"))
    sliced = prepare_for_model(small_data, model)
    assert sliced.sample_shape == (12, 12)
    with pytest.raises(ValueError):
        prepare_for_model(small_data, build_model(preset("fast-2d", conv1_filters=4, caps_dim=4)))


def test_train_step_reduces_loss(small_data):
    data = prepare_for_model(small_data, build_model(preset("tiny-test")))
    model = build_model(preset("tiny-test"), 0)
    opt = Adam(model.params, lr=1e-2)
    x, y = data.images[:16], data.labels[:16]
    first = train_step(model, opt, x, y, LossConfig())["loss"]
    for _ in range(30):
        last = train_step(model, opt, x, y, LossConfig())["loss"]
    assert last < first


def test_fit_writes_checkpoints_and_history(tmp_path, small_data):
    model = build_model(preset("tiny-test"), 1)
    data = prepare_for_model(small_data, model)
    trainer = Trainer(model, TrainConfig(epochs=3, batch_size=8, lr=3e-3), tmp_path, {"tag": "x"})
    history = trainer.fit(data)
    assert [r["epoch"] for r in history] == [1, 2, 3]
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    rows = read_history_csv(tmp_path / "metrics.csv")
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    assert rows[-1]["train_loss"] == pytest.approx(history[-1]["train_loss"], rel=1e-5)
    _, info, tensors = load_checkpoint(tmp_path / "last.ckpt")
    assert info["optimizer"]["step"] == 3 * 3 and info["meta"]["epoch"] == 3
    assert any(k.startswith("adam.m/") for k in tensors)
    _, best_info, _ = load_checkpoint(tmp_path / "best.ckpt")
    assert best_info["meta"]["epoch"] == trainer.best["epoch"]


def test_resume_matches_uninterrupted_run(tmp_path, small_data):
    data = prepare_for_model(small_data, build_model(preset("tiny-test")))
    cfg4 = TrainConfig(epochs=4, batch_size=8, lr=3e-3, seed=2)
    straight = Trainer(build_model(preset("tiny-test"), 2), cfg4)
    straight.fit(data)

    first = Trainer(build_model(preset("tiny-test"), 2), TrainConfig(epochs=2, batch_size=8, lr=3e-3, seed=2),
                    tmp_path)
    first.fit(data)
    resumed = Trainer.resume(tmp_path / "last.ckpt", TrainConfig(epochs=2, batch_size=8, lr=3e-3, seed=2))
    history = resumed.fit(data)
    assert [r["epoch"] for r in history] == [1, 2, 3, 4]
    for name, p in straight.model.params.items():
        assert np.array_equal(resumed.model.params[name].data, p.data), name


def test_target_val_error_stops_early(small_data):
    data = prepare_for_model(small_data, build_model(preset("tiny-test")))
    trainer = Trainer(build_model(preset("tiny-test")), TrainConfig(epochs=5, batch_size=8, target_val_error=100.0))
    assert len(trainer.fit(data)) == 1


def test_evaluate_report(small_data):
    model = build_model(preset("tiny-test"))
    data = prepare_for_model(small_data, model)
    r = evaluate(model, data.images, data.labels, batch_size=7, n_thresholds=150)
    assert r.total == 48 and len(r.pr_curve) == 150
    assert r.recon_error > 0 and np.isfinite(r.loss)
    with pytest.raises(ValueError):
        evaluate(model, data.images[:0], data.labels[:0])


def test_fraction_sweep_nested(small_data):
    data = prepare_for_model(small_data, build_model(preset("tiny-test")))
    rows = fraction_sweep(data, lambda s: build_model(preset("tiny-test"), s),
                          TrainConfig(epochs=1, batch_size=8), [0.25, 1.0], [0, 1])
    assert len(rows) == 4
    assert {r["n_train"] for r in rows} == {6, 24}
    assert [f for f, _ in sweep_medians(rows)] == [0.25, 1.0]


def test_train_config_validation():
    for kwargs in (dict(epochs=0), dict(batch_size=0), dict(train_fraction=0.0), dict(train_fraction=1.5)):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)
