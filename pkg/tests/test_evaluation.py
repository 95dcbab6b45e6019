import dataclasses

import numpy as np
import pytest

from mimlab.config import DataConfig, EvalConfig, TrainConfig
from mimlab.evaluation import (
    Split,
    check_disjoint,
    evaluate_accuracy,
    extract_features,
    finetune,
    fit_affine,
    layer_decay_multipliers,
    linear_probe,
    results_csv,
    train_test_split,
)
from mimlab.masking import MaskConfig
from mimlab.model import EncoderConfig
from mimlab.trainer import build_model, build_target_spec, load_dataset

CFG = TrainConfig(
    data=DataConfig(seed=0, num_images=64, num_classes=4, image_size=16),
    mask=MaskConfig("random", 4, 0.5),
    encoder=EncoderConfig(16, 4, 16, 2, 2),
)
FAST = EvalConfig(probe_epochs=100, finetune_epochs=6, finetune_batch_size=16, finetune_lr=2e-3)


@pytest.fixture(scope="module")
def data():
    ds = load_dataset(CFG.data)
    return ds, *train_test_split(ds, 0.25, 0)


@pytest.fixture(scope="module")
def state(data):
    return build_model(CFG, build_target_spec(CFG, data[0]))


def test_layer_decay_multipliers():
    assert layer_decay_multipliers(1, 0.9) == pytest.approx((0.81, 0.9, 1.0), abs=1e-15)
    assert layer_decay_multipliers(4, 1.0) == (1.0,) * 6
    m = layer_decay_multipliers(6, 0.75)
    assert all(a <= b for a, b in zip(m, m[1:]))


def test_evaluate_accuracy_examples():
    labels = np.array([0, 1, 2, 3] * 3)
    split = Split(np.zeros((12, 2)), labels)
    assert evaluate_accuracy(lambda x: labels, split) == 1.0
    assert evaluate_accuracy(lambda x: np.zeros(12, int), split) == 0.25
    scores = np.eye(4)[labels]
    assert evaluate_accuracy(lambda x: scores, split) == 1.0


def test_evaluate_accuracy_hand_tally():
    labels = np.array([0, 1, 1, 2, 3, 3, 0, 2, 1, 0])
    pred = np.array([0, 1, 2, 2, 3, 0, 0, 1, 1, 3])
    # correct at positions 0, 1, 3, 4, 6, 8
    assert evaluate_accuracy(lambda x: pred, Split(np.zeros(10), labels)) == 0.6


def test_evaluate_accuracy_empty_split():
    with pytest.raises(ValueError, match="empty"):
        evaluate_accuracy(lambda x: x, Split(np.zeros((0, 2)), np.zeros(0, int)))


def test_split_is_stratified_and_disjoint(data):
    ds, train, test = data
    assert len(train) + len(test) == len(ds)
    assert np.bincount(test.labels).tolist() == [4, 4, 4, 4]
    with pytest.raises(ValueError, match="both"):
        check_disjoint(train, train.subset([0, 1]))
    with pytest.raises(ValueError):
        train_test_split(ds, 1.0, 0)


def test_separable_features_probe_above_095():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(4, 8)) * 4
    labels = rng.integers(0, 4, size=600)
    feats = centers[labels] + rng.normal(size=(600, 8)) * 0.3
    scorer = fit_affine(feats[:400], labels[:400], 4, EvalConfig(probe_epochs=200), 0)
    assert evaluate_accuracy(scorer, Split(feats[400:], labels[400:])) > 0.95


def test_random_labels_give_chance_accuracy():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(3000, 8))
    labels = rng.integers(0, 4, size=3000)
    scorer = fit_affine(feats[:1000], labels[:1000], 4, EvalConfig(probe_epochs=200), 0)
    assert abs(evaluate_accuracy(scorer, Split(feats[1000:], labels[1000:])) - 0.25) <= 0.05


def test_feature_shapes(data, state):
    f = extract_features(state, data[2], batch=5)
    assert f.shape == (CFG.encoder.depth + 1, 16, 16)


def test_probe_leaves_encoder_untouched_and_reports_best_layer(data, state):
    _, train, test = data
    before = state.checksum()
    r = linear_probe(state, train, test, FAST, seed=0)
    assert state.checksum() == before
    assert len(r.per_layer) == CFG.encoder.depth + 1
    assert r.accuracy == max(r.per_layer) == r.per_layer[r.feature_source]
    weighted = np.average(r.per_class, weights=np.bincount(test.labels))
    assert weighted == pytest.approx(r.accuracy)
    again = linear_probe(state, train, test, FAST, seed=0)
    assert again == r


def test_finetune_not_worse_than_probe():
    # big enough that fine-tuning gets off the chance floor (about 20 s on one core)
    cfg = dataclasses.replace(CFG, data=DataConfig(seed=0, num_images=256, num_classes=4, image_size=32),
                              encoder=EncoderConfig(32, 4, 32, 2, 4))
    ds = load_dataset(cfg.data)
    train, test = train_test_split(ds, 0.25, 0)
    state = build_model(cfg, build_target_spec(cfg, ds))
    ev = EvalConfig(probe_epochs=200, finetune_epochs=60, finetune_batch_size=16, finetune_lr=1e-3)
    before = state.checksum()
    ft = finetune(state, train, test, ev, seed=0)
    probe = linear_probe(state, train, test, ev, seed=0)
    assert state.checksum() == before
    assert "head.weight" not in ft.params and "cls_head.weight" in ft.params
    assert np.mean(ft.losses[-10:]) < np.mean(ft.losses[:10])
    assert ft.accuracy >= probe.accuracy


def test_finetune_label_range_error(data, state):
    _, train, test = data
    with pytest.raises(ValueError, match="labels outside"):
        finetune(state, train, test, dataclasses.replace(FAST, finetune_epochs=1), num_classes=2)


def test_results_csv_layout():
    text = results_csv([("probe", 0, 2, 0.5)])
    assert text == "protocol,seed,block,accuracy\nprobe,0,2,0.5\n"
