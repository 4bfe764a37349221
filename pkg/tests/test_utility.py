import json

import numpy as np
import pytest
import torch

from neurobf.data import SyntheticSpec, generate_synthetic, split
from neurobf.errors import ConfigError, DomainError
from neurobf.metrics import rank_auc
from neurobf.nn import Rng, param_digest
from neurobf.scheme import EncoderKey, IdentityScheme, KeyedObfuscationScheme, Obfuscator, SchemeConfig, decode_predictions
from neurobf.utility import (
    Classifier,
    ClassifierConfig,
    UtilityReport,
    class_auc,
    evaluate_utility,
    learning_curve,
    nested_subsets,
    run_utility,
    select_classifier,
    train_classifier,
    utility_table,
)

SCHEME = SchemeConfig(height=16, width=16, patch=4, blocks=1, dim=8, heads=2)
CLS = ClassifierConfig(dim=16, depth=1, heads=2, epochs=3, batch=16)
SWAP = EncoderKey(0, torch.zeros(0), np.array([1, 0]))


def _splits(n=200, seed=0):
    ds = generate_synthetic(SyntheticSpec(n=n, height=16, width=16, seed=seed))
    return split(ds, (0.6, 0.2, 0.2), Rng(seed))


# --- AUC and decoding ----------------------------------------------------------


def test_swap_decoding_reverses_auc():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p1 = rng.random(50)
        probs = np.stack([p1, 1 - p1], 1)
        labels = rng.integers(1, 3, 50)
        labels[:2] = [1, 2]
        before = class_auc(probs, labels, 2)
        after = class_auc(decode_predictions(probs, SWAP), labels, 2)
        assert abs(after - (1 - before)) <= 1e-9


def test_swap_reversal_holds_with_ties():
    probs = np.array([[0.5, 0.5], [0.5, 0.5], [0.9, 0.1], [0.2, 0.8]])
    labels = np.array([1, 2, 1, 2])
    before = class_auc(probs, labels, 2)
    assert abs(class_auc(decode_predictions(probs, SWAP), labels, 2) - (1 - before)) <= 1e-9


def test_perfect_classifier_scores_one():
    labels = np.array([1, 2, 2, 1, 2])
    probs = np.eye(2)[labels - 1]
    assert class_auc(probs, labels, 2) == 1.0
    labels3 = np.array([1, 2, 3, 3, 1])
    assert class_auc(np.eye(3)[labels3 - 1], labels3, 3) == 1.0


def test_random_scores_are_near_chance():
    # sd of AUC under the null at 500/500 is about 0.013
    rng = np.random.default_rng(1)
    labels = np.repeat([1, 2], 500)
    aucs = []
    for _ in range(20):
        p = rng.random(1000)
        aucs.append(class_auc(np.stack([1 - p, p], 1), labels, 2))
    assert all(abs(a - 0.5) <= 0.05 for a in aucs)


def test_one_vs_rest_average_and_missing_classes():
    labels = np.array([1, 2, 3, 1, 2, 3])
    probs = np.random.default_rng(2).random((6, 3))
    expected = np.mean([rank_auc(probs[:, c], labels == c + 1) for c in range(3)])
    assert class_auc(probs, labels, 3) == pytest.approx(expected)
    with pytest.raises(DomainError):
        class_auc(probs, np.ones(6, dtype=int), 3)


def test_pipeline_is_permutation_equivariant_with_a_frozen_classifier():
    # a classifier that fits the permuted labels puts raw class c's mass in column perm[c];
    # decoding must give back the raw-space predictions and the same confusion matrix
    rng = np.random.default_rng(3)
    for k in (2, 3, 5):
        raw_probs = rng.dirichlet(np.ones(k), 40)
        labels = rng.integers(1, k + 1, 40)
        perm = Rng(k).fisher_yates(k)
        key = EncoderKey(0, torch.zeros(0), perm)
        encoded_probs = np.empty_like(raw_probs)
        encoded_probs[:, perm] = raw_probs
        decoded = decode_predictions(encoded_probs, key)
        assert np.array_equal(decoded, raw_probs)
        confusion = lambda p: np.histogram2d(labels, p.argmax(1) + 1, bins=[np.arange(1, k + 2)] * 2)[0]
        assert np.array_equal(confusion(decoded), confusion(raw_probs))


def test_frozen_model_through_evaluate_utility():
    train, dev, test = _splits()
    scheme = KeyedObfuscationScheme(Obfuscator(SchemeConfig(height=16, width=16, patch=4, blocks=1, dim=8, heads=2), Rng(0)))
    model = Classifier(8, 16, 2, CLS, Rng(1))
    key = scheme.sample_key(Rng(2))
    z = scheme.encode_images(test.images, key).detach()
    probs = model.predict(z)
    by_hand = class_auc(decode_predictions(probs, key), test.labels, 2)
    assert evaluate_utility(model, z, test.labels, scheme, key) == by_hand


# --- classifier training -------------------------------------------------------


def test_classifier_output_dimension():
    for k in (2, 4):
        m = Classifier(16, 16, k, CLS, Rng(0)).eval()
        assert m(torch.zeros(3, 16, 16)).shape == (3, k)


def test_single_class_training_set_is_rejected():
    x = torch.zeros(8, 16, 16)
    with pytest.raises(DomainError):
        train_classifier(x, np.ones(8), x, np.array([1, 2] * 4), 2, CLS, Rng(0))
    with pytest.raises(ConfigError):
        ClassifierConfig(dropout=1.0)


def test_raw_pixels_are_learnable():
    train, dev, test = _splits(400, seed=1)
    scheme = IdentityScheme(SCHEME)
    cfg = ClassifierConfig(dim=16, depth=1, heads=2, epochs=25, batch=16)
    report = run_utility(scheme, train, dev, test, cfg, Rng(2), grid={"dropout": (0.0,), "weight_decay": (0.0,)})
    assert report.auc >= 0.95


def test_dev_selection_returns_the_best_epoch():
    train, dev, _ = _splits()
    scheme = IdentityScheme(SCHEME)
    x, dx = scheme.encode_images(train.images, None, None), scheme.encode_images(dev.images, None, None)
    cfg = ClassifierConfig(dim=16, depth=1, heads=2, epochs=6, batch=16)
    model, info = train_classifier(x, train.labels, dx, dev.labels, 2, cfg, Rng(3))
    curve = info["dev_curve"]
    assert info["dev_auc"] == max(curve)
    assert info["best_epoch"] == curve.index(max(curve))
    assert class_auc(model.predict(dx), dev.labels, 2) == info["dev_auc"]


def test_grid_selection_keeps_the_best_dev_auc():
    train, dev, _ = _splits()
    scheme = IdentityScheme(SCHEME)
    x, dx = scheme.encode_images(train.images, None, None), scheme.encode_images(dev.images, None, None)
    grid = {"dropout": (0.0, 0.1), "weight_decay": (0.0,)}
    model, info = select_classifier(x, train.labels, dx, dev.labels, 2, CLS, Rng(4), grid)
    rng = Rng(4)
    singles = [
        train_classifier(x, train.labels, dx, dev.labels, 2, ClassifierConfig(**{**CLS.__dict__, "dropout": d}), rng.spawn())[1]["dev_auc"]
        for d in (0.0, 0.1)
    ]
    assert info["dev_auc"] == max(singles)


def test_training_is_deterministic():
    train, dev, _ = _splits()
    x = IdentityScheme(SCHEME).encode_images(train.images, None, None)
    dx = IdentityScheme(SCHEME).encode_images(dev.images, None, None)
    cfg = ClassifierConfig(**{**CLS.__dict__, "dropout": 0.1})
    m1, i1 = train_classifier(x, train.labels, dx, dev.labels, 2, cfg, Rng(5))
    m2, i2 = train_classifier(x, train.labels, dx, dev.labels, 2, cfg, Rng(5))
    assert i1 == i2 and param_digest(m1) == param_digest(m2)


# --- learning curves -----------------------------------------------------------


def test_nested_subsets_are_nested():
    labels = np.repeat([1, 2], 256)
    subsets = nested_subsets(labels, (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0), Rng(0))
    assert [s.size for s in subsets] == [16, 32, 64, 128, 256, 512]
    for small, large in zip(subsets, subsets[1:]):
        assert set(small) <= set(large)
    assert np.array_equal(subsets[-1], np.arange(512))


def test_nested_subsets_errors():
    labels = np.repeat([1, 2], 16)
    with pytest.raises(DomainError):
        nested_subsets(labels, (1 / 32,), Rng(0))  # one sample
    with pytest.raises(DomainError):
        nested_subsets(labels, (0.0,), Rng(0))
    with pytest.raises(DomainError):
        nested_subsets(labels, (1.5,), Rng(0))


def test_full_fraction_equals_training_on_everything():
    train, dev, _ = _splits()
    x = IdentityScheme(SCHEME).encode_images(train.images, None, None)
    dx = IdentityScheme(SCHEME).encode_images(dev.images, None, None)
    full = nested_subsets(train.labels, (1.0,), Rng(0))[0]
    sel = torch.from_numpy(full)
    m1, i1 = train_classifier(x[sel], train.labels[full], dx, dev.labels, 2, CLS, Rng(6))
    m2, i2 = train_classifier(x, train.labels, dx, dev.labels, 2, CLS, Rng(6))
    assert i1 == i2 and param_digest(m1) == param_digest(m2)


def test_learning_curve_reports():
    train, dev, test = _splits()
    grid = {"dropout": (0.0,), "weight_decay": (0.0,)}
    reports = learning_curve(IdentityScheme(SCHEME), train, dev, test, (0.25, 1.0), CLS, Rng(7), seed=3, grid=grid)
    assert [r.fraction for r in reports] == [0.25, 1.0]
    assert all(0 <= r.auc <= 1 and r.seed == 3 and r.scheme == "identity" for r in reports)


# --- reports -------------------------------------------------------------------


def test_report_json_round_trip_and_range():
    r = UtilityReport("obfuscator", 0.8, 0.5, 2, dev_auc=0.7, hyper={"dropout": 0.1})
    assert UtilityReport.from_dict(json.loads(r.to_json())) == r
    with pytest.raises(DomainError):
        UtilityReport("x", 1.2)


def test_table_layout():
    reports = [UtilityReport("raw", 0.9, task="a"), UtilityReport("raw", 0.7, task="b"), UtilityReport("dp", 0.6, task="a")]
    lines = utility_table(reports).splitlines()
    assert lines[0].split() == ["scheme", "a", "b", "avg"]
    assert lines[1].split() == ["raw", "0.900", "0.700", "0.800"]
    assert lines[2].split() == ["dp", "0.600", "nan", "0.600"]
