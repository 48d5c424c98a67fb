import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pixemb import trainer
from pixemb.data import Dataset, synthetic
from pixemb.network import build_model, forward
from pixemb.trainer import (MetricLog, MetricRecord, TrainConfig, TrainingDivergedError, augment,
                            crop, eval_steps, evaluate, flip, lr_at, pad_image, roughness,
                            run_experiment, train)


@pytest.fixture(scope="module")
def small():
    return synthetic(40, 4, seed=2)


def cfg(**kw):
    base = dict(batch_size=8, total_steps=4, lr_decay_steps=(), eval_every=2, augment=False)
    return TrainConfig(**{**base, **kw})


# ---------------------------------------------------------------- config and schedule

def test_schedule_pointwise():
    c = TrainConfig(base_lr=0.1, total_steps=100, lr_decay_steps=(50, 75), lr_decay_factor=0.1)
    assert lr_at(0, c) == 0.1 and lr_at(49, c) == 0.1
    assert lr_at(50, c) == pytest.approx(0.01) and lr_at(74, c) == pytest.approx(0.01)
    assert lr_at(75, c) == pytest.approx(0.001) and lr_at(99, c) == pytest.approx(0.001)


@given(st.integers(0, 400), st.lists(st.integers(1, 399), max_size=4, unique=True))
def test_schedule_counts_boundaries(step, bounds):
    c = TrainConfig(total_steps=400, lr_decay_steps=sorted(bounds), lr_decay_factor=0.5)
    assert lr_at(step, c) == c.base_lr * 0.5 ** sum(step >= b for b in bounds)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_steps=10, lr_decay_steps=(5, 5))
    with pytest.raises(ValueError):
        TrainConfig(total_steps=10, lr_decay_steps=(10,))
    with pytest.raises(ValueError):
        TrainConfig(total_steps=0, lr_decay_steps=())


def test_desk_schedule():
    c = TrainConfig.desk(5000, epochs=3.0, batch_size=64)
    assert c.total_steps == 235 and c.lr_decay_steps == (117, 176)
    assert c.momentum == 0.9 and c.weight_decay == 5e-4


# ---------------------------------------------------------------- augmentation

def test_flip_twice_is_identity(rng):
    x = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    np.testing.assert_array_equal(flip(flip(x)), x)


def test_centre_crop_is_identity(rng):
    x = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    padded = pad_image(x)
    assert padded.shape == (40, 40, 3) and not padded[:4].any()
    np.testing.assert_array_equal(crop(padded, 4, 4), x)


def test_augment_reproducible(rng):
    x = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    a = [augment(x, np.random.default_rng(9)) for _ in range(2)]
    np.testing.assert_array_equal(a[0], a[1])
    outs = {augment(x, np.random.default_rng(s)).tobytes() for s in range(20)}
    assert len(outs) > 1


@given(st.integers(0, 2**31))
def test_augment_is_a_shifted_window(seed):
    x = np.arange(32 * 32 * 3, dtype=np.int64).reshape(32, 32, 3) % 251 + 1
    out = augment(x, np.random.default_rng(seed))
    assert out.shape == x.shape
    padded = pad_image(x)
    found = any(np.array_equal(out, c) or np.array_equal(out, flip(c))
                for t in range(9) for l in range(9) for c in [crop(padded, t, l)])
    assert found


# ---------------------------------------------------------------- metrics

def test_metric_log_order_and_csv():
    log = MetricLog()
    log.append(MetricRecord(10, 2.5, 0.1, 0.25, None))
    log.append(MetricRecord(20, 2.0, 0.01, 0.5, 0.75))
    with pytest.raises(ValueError):
        log.append(MetricRecord(20, 1.0, 0.01, 0.5, 0.75))
    lines = log.to_csv().splitlines()
    assert lines[0] == "step,loss,lr,top1,top5"
    assert lines[1] == "10,2.5,0.1,0.25," and lines[2] == "20,2.0,0.01,0.5,0.75"


def test_roughness():
    log = MetricLog()
    for step, acc in enumerate([0.1, 0.2, 0.3, 0.5, 0.4, 0.6], start=1):
        log.append(MetricRecord(step, 0.0, 0.1, acc, None))
    # final third of 6 steps: steps 5, 6 -> too few
    with pytest.raises(ValueError):
        roughness(log, 6)
    assert roughness(log, 3) == pytest.approx(np.std(np.diff([0.3, 0.5, 0.4, 0.6])))


def test_eval_steps():
    assert eval_steps(cfg(total_steps=5)) == [2, 4, 5]
    assert eval_steps(cfg(total_steps=4)) == [2, 4]
    assert eval_steps(cfg(total_steps=3, eval_every=10)) == [3]


def test_experiment_checks_schedule_first(small):
    with pytest.raises(ValueError, match="final third"):
        run_experiment(["iwq-first"], [0], small, small, cfg(total_steps=6))


# ---------------------------------------------------------------- evaluation

def test_constant_model_scores_one_over_k():
    data = synthetic(40, 4, seed=1)
    m = build_model("iwq-first", num_classes=4)
    m.params["fc.w"][:] = 1.0  # all logits equal; class 0 always wins
    for path in ("infer-float", "infer-packed"):
        acc = evaluate(m, data, path)
        assert acc["top1"] == pytest.approx(0.25) and acc["top5"] is None


def test_top5_reported_for_ten_classes():
    data = synthetic(20, 10, seed=1)
    acc = evaluate(build_model("pixemb-first"), data)
    assert 0.0 <= acc["top1"] <= acc["top5"] <= 1.0


# ---------------------------------------------------------------- training

def test_zero_lr_leaves_params_unchanged(small):
    m = build_model("pixemb-first", num_classes=4)
    before = {k: v.copy() for k, v in m.params.items()}
    train(m, small, cfg(total_steps=1, base_lr=0.0, eval_every=1))
    for k, v in before.items():
        np.testing.assert_array_equal(m.params[k], v, err_msg=k)


def test_one_step_moves_embedding_table(small):
    m = build_model("pixemb-first", num_classes=4)
    before = m.params["embed.table"].copy()
    train(m, small, cfg(total_steps=1, eval_every=1))
    after = m.params["embed.table"]
    assert np.any((after != before).any(axis=0))
    assert after.min() >= 0.0 and after.max() <= 1.0


def test_deterministic(small):
    runs = []
    for _ in range(2):
        m, log = train(build_model("pixemb-first", num_classes=4, seed=4), small,
                       cfg(augment=True, seed=11), small)
        runs.append((log.to_csv(), {k: v.tobytes() for k, v in m.params.items()}))
    assert runs[0] == runs[1]


def test_metric_log_contents(small):
    _, log = train(build_model("iwq-first", num_classes=4), small, cfg(total_steps=5), small)
    assert [r.step for r in log.records] == [2, 4, 5]
    assert all(math.isfinite(r.loss) and 0 <= r.top1 <= 1 for r in log.records)


def toy_set():
    """16 4x4 images: class 0 dark, class 1 bright, with per-image jitter."""
    rng = np.random.default_rng(0)
    labels = np.arange(16) % 2
    base = np.where(labels == 0, 40, 215)[:, None, None, None]
    images = np.clip(base + rng.integers(-20, 21, (16, 4, 4, 3)), 0, 255).astype(np.uint8)
    return Dataset(images, labels, 2)


@pytest.mark.parametrize("preset", ["fp-first", "pixemb-first"])
def test_fits_separable_toy(preset):
    data = toy_set()
    m = build_model(preset, num_classes=2, seed=0)
    c = TrainConfig(batch_size=16, base_lr=0.01, total_steps=200, lr_decay_steps=(100, 150),
                    eval_every=50, augment=False)
    train(m, data, c)
    assert evaluate(m, data)["top1"] == 1.0


def test_divergence_names_step(small, monkeypatch):
    real = trainer.ad.softmax_cross_entropy
    calls = []

    def poisoned(logits, labels):
        out = real(logits, labels)
        calls.append(1)
        if len(calls) == 3:
            out.data[...] = np.nan
        return out

    monkeypatch.setattr(trainer.ad, "softmax_cross_entropy", poisoned)
    with pytest.raises(TrainingDivergedError, match="step 2") as e:
        train(build_model("iwq-first", num_classes=4), small, cfg())
    assert e.value.step == 2


def test_rejects_mismatched_classes(small):
    with pytest.raises(ValueError, match="classes"):
        train(build_model("iwq-first", num_classes=10), small, cfg())


def test_packed_and_float_after_training(small):
    m, _ = train(build_model("pixemb-first", num_classes=4), small, cfg(total_steps=6))
    f = evaluate(m, small, "infer-float")["top1"]
    p = evaluate(m, small, "infer-packed")["top1"]
    assert abs(f - p) <= 0.05
    assert forward(m, small.images[:2], "infer-packed").dtype.kind == "i"
