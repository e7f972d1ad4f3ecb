"""Smoke tests for the python module: import, dataset generation, a quick
training run, quantization round trips and the scoring utilities."""

import math

import numpy as np
import pytest

import cablab


def test_dataset_generation_deterministic():
    spec = cablab.DataSpec()
    spec.train_count = 64
    a = cablab.generate_synthetic_dataset(spec, 3, 64, "train")
    b = cablab.generate_synthetic_dataset(spec, 3, 64, "train")
    assert a.count() == 64
    assert a.labels == b.labels
    assert np.array_equal(a.images, b.images)
    assert a.images.shape == (64, 1, 12, 12)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    # balanced classes
    counts = np.bincount(a.labels, minlength=4)
    assert (counts == 16).all()


def test_quick_training_and_evaluation():
    spec = cablab.DataSpec()
    spec.train_count = 512
    model = cablab.train_clean_quick(spec, seed=5, epochs=4)
    test = cablab.generate_synthetic_dataset(spec, 99, 200, "test")
    trig = cablab.TriggerSpec()
    rec = cablab.evaluate_model(model, test, trig, 0)
    assert rec.clean_accuracy > 0.8
    # a clean model barely reacts to the trigger
    assert rec.attack_success < 0.2
    logits = model.logits(test.images[:8])
    assert logits.shape == (8, 4)


def test_quantization_round_trip_bound():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1.0, 1.0, size=512).astype(np.float32)
    params = cablab.calibrate_minmax(x, signed_range=True)
    assert params.scale > 0
    assert params.zero_point == 0
    rt = cablab.quantize_roundtrip(x, signed_range=True)
    covered = (x >= -128 * params.scale) & (x <= 127 * params.scale)
    assert np.abs(rt[covered] - x[covered]).max() <= params.scale / 2 + 1e-7
    # fake quantization is idempotent
    fq = cablab.fake_quant(x, params)
    assert np.array_equal(cablab.fake_quant(fq, params), fq)


def test_trigger_stamping():
    imgs = np.zeros((2, 1, 12, 12), dtype=np.float32)
    trig = cablab.TriggerSpec()
    stamped = cablab.stamp_trigger(imgs, trig)
    assert stamped.sum() == 2 * 9  # 3x3 white patch per image
    assert imgs.sum() == 0  # input untouched


def test_scoring_utilities():
    idx = cablab.anomaly_indices([2, 4, 6, 8, 100])
    assert idx[0] == pytest.approx(4 / (1.4826 * 2))
    assert idx[3] == 0.0
    assert cablab.auc([3, 5], [1, 4]) == pytest.approx(0.75)
    assert cablab.auc([1, 2], [1, 2]) == pytest.approx(0.5)
    assert cablab.tpr_at_fpr([10, 11], [1, 2], 0.1) == 1.0


def test_presets_round_trip():
    names = cablab.preset_names()
    assert "quant_demo" in names
    cfg = cablab.preset("quant_demo")
    text = cablab.config_to_json(cfg)
    back = cablab.config_from_json(text)
    assert back.seed == cfg.seed
    assert math.isclose(back.target_class, cfg.target_class)
