import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from subtune.datakit import Dataset
from subtune.model import build_network
from subtune.train import (DEFAULT_LRS, TrainConfig, cosine_lr, cv_score, evaluate, finetune, kfold_split,
                           lr_sweep, train)


def snapshot_equal(net, pretrained, ids):
    for i in ids:
        a, b = net.block(i), pretrained.snapshot[i - 1]
        for (_, la), (_, lb) in zip(a.layers(), b.layers()):
            if not (np.array_equal(la.weight, lb.weight) and np.array_equal(la.bias, lb.bias)):
                return False
    return True


def test_epochs_must_be_positive():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_one_short_batch_per_epoch(blobs):
    net = build_network(6, 2, 4, seed=0)
    net.set_trainable([1])
    steps = []
    train(net, blobs.take(np.arange(10)), TrainConfig(epochs=1, batch_size=256),
          after_step=lambda n: steps.append(1))
    assert len(steps) == 1


def test_lr_zero_leaves_network_unchanged(blobs):
    net = build_network(6, 2, 4, seed=0)
    net.set_trainable([1, 2])
    before = net.clone()
    acc0 = evaluate(net, blobs).accuracy
    rec = train(net, blobs, TrainConfig(lr=0.0, epochs=2))
    assert rec.accuracy == acc0
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(net.state_arrays(False), before.state_arrays(False)))


def test_class_count_mismatch(blobs):
    net = build_network(6, 2, 3, seed=0)
    with pytest.raises(ValueError):
        train(net, blobs, TrainConfig(epochs=1))


def test_separable_blobs_head_only():
    r = np.random.default_rng(0)
    y = np.arange(100) % 2
    x = np.where(y[:, None] == 1, 2.0, -2.0) * np.ones((100, 3)) + 0.3 * r.normal(size=(100, 3))
    ds = Dataset(x, y, 2)
    # logistic-regression oracle on the same data
    def nll(w):
        z = x @ w[:3] + w[3]
        return float(np.mean(np.logaddexp(0, -z * (2 * y - 1))))
    w = minimize(nll, np.zeros(4)).x
    assert np.mean((x @ w[:3] + w[3] > 0) == y) >= 0.99
    net = build_network(3, 2, 2, seed=1)
    net.mark_pretrained()
    _, rec = finetune(net, (), ds, TrainConfig(epochs=50, lr=1e-2))
    assert rec.accuracy >= 0.99


def test_evaluate_chance_and_determinism():
    r = np.random.default_rng(3)
    c, n = 5, 2000
    ds = Dataset(r.normal(size=(n, 4)), r.integers(0, c, n), c)
    net = build_network(4, 2, c, seed=2)
    rec = evaluate(net, ds)
    sigma = math.sqrt((1 / c) * (1 - 1 / c) / n)
    assert abs(rec.accuracy - 1 / c) <= 3 * sigma
    assert evaluate(net, ds) == rec


def test_evaluate_single_correct_sample():
    net = build_network(3, 1, 2, seed=0)
    x = np.ones((1, 3))
    label = int(np.argmax(net.logits(x)))
    assert evaluate(net, Dataset(x, [label], 2)).accuracy == 1.0


def test_kfold_examples():
    folds = kfold_split(10, 5, None if False else np.zeros(10, int), seed=0)
    assert [len(f) for f in folds] == [2] * 5
    labels = np.array([0, 1] * 5)
    folds = kfold_split(10, 5, labels, seed=1)
    assert all(sorted(labels[f]) == [0, 1] for f in folds)
    assert all(np.array_equal(a, b) for a, b in zip(folds, kfold_split(10, 5, labels, seed=1)))
    assert [len(f) for f in kfold_split(4, 2, [0, 0, 1, 1], 0)] == [2, 2]


def test_kfold_without_labels_warns():
    with pytest.warns(UserWarning):
        folds = kfold_split(7, 3, None, 0)
    assert sorted(np.concatenate(folds).tolist()) == list(range(7))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 60), k=st.integers(2, 6), classes=st.integers(1, 4), seed=st.integers(0, 100))
def test_kfold_partition_property(n, k, classes, seed):
    if n < k:
        return
    labels = np.random.default_rng(seed).integers(0, classes, n)
    folds = kfold_split(n, k, labels, seed)
    allidx = np.concatenate(folds)
    assert sorted(allidx.tolist()) == list(range(n))
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    for c in np.unique(labels):
        per = [int(np.sum(labels[f] == c)) for f in folds]
        assert max(per) - min(per) <= 1


def test_cosine_schedule():
    total = 17
    lrs = [cosine_lr(0.1, t, total) for t in range(total)]
    assert lrs[0] == 0.1
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == pytest.approx(0.1 * 0.5 * (1 + math.cos(math.pi * (total - 1) / total)))


def test_training_keeps_frozen_blocks_bitwise(blobs):
    pre = build_network(6, 4, 4, seed=0)
    pre.mark_pretrained()
    net, _ = finetune(pre, (2, 4), blobs, TrainConfig(epochs=3, lr=1e-2))
    assert snapshot_equal(net, pre, (1, 3))
    assert not snapshot_equal(net, pre, (2,))


def test_cv_score_mean_and_determinism(blobs):
    pre = build_network(6, 2, 4, seed=0)
    pre.mark_pretrained()
    cfg = TrainConfig(epochs=2, seed=4)
    a = cv_score(pre, (), blobs, cfg, k=5)
    b = cv_score(pre, (), blobs, cfg, k=5)
    assert a.mean == b.mean
    assert a.mean == math.fsum(f.accuracy for f in a.folds) / 5
    assert len(a.folds) == 5
    assert snapshot_equal(pre, pre, (1, 2))


def test_cv_memorization_gap():
    r = np.random.default_rng(0)
    ds = Dataset(r.normal(size=(20, 6)), r.integers(0, 4, 20), 4)
    pre = build_network(6, 2, 4, seed=0)
    pre.mark_pretrained()
    res = cv_score(pre, (1, 2), ds, TrainConfig(epochs=200, lr=1e-2, batch_size=16), k=4)
    assert all(t.accuracy == 1.0 for t in res.train)
    assert res.mean < 1.0


def test_lr_sweep(blobs):
    pre = build_network(6, 2, 4, seed=0)
    pre.mark_pretrained()
    assert DEFAULT_LRS == (1e-3, 5e-4, 1e-4, 5e-5, 1e-5)
    best, _, _ = lr_sweep(pre, (), blobs.take(np.arange(20)), [3e-4], TrainConfig(epochs=1), k=2)
    assert best == 3e-4
    # lr=0 everywhere makes every score identical, so the largest lr wins the tie
    cfg = TrainConfig(epochs=1)
    best, _, scores = lr_sweep(pre, (), blobs.take(np.arange(20)), [0.0, 0.0], cfg, k=2)
    tie = lr_sweep(pre, (), blobs.take(np.arange(20)), [1e-12, 2e-12], cfg, k=2)
    assert tie[2][0][1] == tie[2][1][1]
    assert tie[0] == 2e-12


def test_thread_count_does_not_change_results(blobs, monkeypatch):
    pre = build_network(6, 2, 4, seed=0)
    pre.mark_pretrained()
    cfg = TrainConfig(epochs=2)
    monkeypatch.setenv("SUBTUNE_THREADS", "1")
    a = cv_score(pre, (1,), blobs, cfg).mean
    monkeypatch.setenv("SUBTUNE_THREADS", "3")
    b = cv_score(pre, (1,), blobs, cfg).mean
    assert a == b
