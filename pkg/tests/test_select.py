import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subtune.datakit import Dataset
from subtune.model import build_network
from subtune.select import (GapExperimentConfig, GapRecord, LookupEvaluator, finetune_profile, gap_experiment,
                            gap_trend, greedy_subtune, holdout_split, linearized_evaluate, pairwise_profile,
                            project_to_ball)
from subtune.train import TrainConfig, evaluate, finetune

TABLE = {(): 0.5, (1,): 0.6, (2,): 0.7, (3,): 0.65, (2, 1): 0.72, (2, 3): 0.71, (2, 1, 3): 0.722}


@pytest.fixture
def pre():
    net = build_network(6, 8, 4, seed=0)
    net.mark_pretrained()
    return net


@pytest.fixture
def quick():
    return TrainConfig(epochs=2, lr=1e-2)


def test_greedy_on_lookup_table():
    ev = LookupEvaluator(TABLE)
    trace = greedy_subtune(None, epsilon=0.005, evaluator=ev, n_blocks=3)
    assert trace.final == (2, 1)
    assert [s.best_block for s in trace.steps] == [2, 1, 3]
    assert [s.accepted for s in trace.steps] == [True, True, False]
    assert trace.candidate_evaluations == 3 + 2 + 1
    assert ev.calls == 7  # plus the linear-probe baseline


def test_greedy_zero_init_matches_on_table():
    trace = greedy_subtune(None, epsilon=0.005, evaluator=LookupEvaluator(TABLE), n_blocks=3, init="zero")
    assert trace.final == (2, 1) and trace.baseline == 0.0


def test_greedy_infinite_epsilon_is_linear_probe():
    trace = greedy_subtune(None, epsilon=math.inf, evaluator=LookupEvaluator(TABLE), n_blocks=3)
    assert trace.final == ()


def test_greedy_rejects_negative_epsilon():
    with pytest.raises(ValueError):
        greedy_subtune(None, epsilon=-1, evaluator=LookupEvaluator(TABLE), n_blocks=3)


def test_greedy_ties_prefer_smaller_block():
    table = {(): 0.1, (1,): 0.5, (2,): 0.5, (1, 2): 0.5}
    trace = greedy_subtune(None, epsilon=0.0, evaluator=LookupEvaluator(table), n_blocks=2)
    assert trace.final == (1,)


def test_greedy_budget(pre):
    table = {(): 0.0}
    for r in range(1, 9):
        for s in itertools.combinations(range(1, 9), r):
            table[s] = 0.1 * len(s) + 0.001 * sum(s)
    per_block = pre.param_count([1])
    trace = greedy_subtune(pre, None, 0.0, None, 3 * per_block, evaluator=LookupEvaluator(table))
    assert len(trace.final) == 3 and trace.final_param_count <= 3 * per_block
    assert not trace.steps[-1].accepted
    trace = greedy_subtune(pre, None, 0.0, 2, None, evaluator=LookupEvaluator(table))
    assert trace.final == (8, 7)


def _random_table(n, seed):
    r = np.random.default_rng(seed)
    table = {}
    for k in range(n + 1):
        for s in itertools.combinations(range(1, n + 1), k):
            table[s] = float(r.integers(0, 1000)) / 1000
    return table


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 5), seed=st.integers(0, 10 ** 6), eps=st.sampled_from([0.0, 0.002, 0.05, 0.2]))
def test_greedy_trace_properties(n, seed, eps):
    table = _random_table(n, seed)
    ev = LookupEvaluator(table)
    trace = greedy_subtune(None, epsilon=eps, evaluator=ev, n_blocks=n)
    acc = [trace.baseline] + trace.accepted_scores
    assert all(b > a + eps for a, b in zip(acc, acc[1:]))
    assert ev.calls - 1 <= n * (len(trace.final) + 1)
    again = greedy_subtune(None, epsilon=eps, evaluator=LookupEvaluator(table), n_blocks=n)
    assert again.final == trace.final
    # each accepted block was the best candidate of its round
    for step in trace.steps:
        best = max(s for _, s in step.candidates)
        assert step.best_score == best
        assert step.best_block == min(b for b, s in step.candidates if s == best)


def test_profile_entry_counts(pre, blobs, quick):
    small = blobs.take(np.arange(40))
    res = finetune_profile(pre, small, 1, "holdout", quick, seeds=(0,))
    assert len(res.entries) == 8
    assert len(set(res.snapshot_digests)) == 1 and res.snapshot_digests[0] == pre.snapshot_digest()
    assert len(finetune_profile(pre, small, 3, "holdout", quick).entries) == 6
    full = finetune_profile(pre, small, 8, "holdout", quick)
    assert len(full.entries) == 1
    fit, held = holdout_split(small, 0.2, 0)
    net, _ = finetune(pre, tuple(range(1, 9)), fit, quick)
    assert full.entries[0].mean == evaluate(net, held).accuracy


def test_pairwise_profile_symmetric(blobs, quick):
    pre = build_network(6, 3, 4, seed=1)
    pre.mark_pretrained()
    mat = pairwise_profile(pre, blobs.take(np.arange(40)), quick)
    assert mat.shape == (3, 3)
    assert np.array_equal(mat, mat.T)
    assert len([(i, j) for i in range(3) for j in range(i + 1, 3)]) == 3


def test_project_to_ball():
    r = np.random.default_rng(0)
    init = [r.normal(size=(3, 3)), r.normal(size=3)]
    arrs = [a + 5 * r.normal(size=a.shape) for a in init]
    norm = project_to_ball(arrs, init, 0.7)
    assert norm <= 0.7 + 1e-9
    inside = [a + 1e-3 for a in init]
    copy = [a.copy() for a in inside]
    project_to_ball(inside, init, 0.7)
    assert all(np.array_equal(a, b) for a, b in zip(inside, copy))


def test_linearized_respects_ball(pre, blobs):
    res = linearized_evaluate(pre, (1, 2), blobs, 0.05, TrainConfig(epochs=3, lr=1e-1))
    assert res.displacement <= 0.05 + 1e-9


def test_linearized_tiny_delta_matches_linear_probe(pre, blobs):
    cfg = TrainConfig(epochs=3, lr=1e-2)
    res = linearized_evaluate(pre, (1, 2), blobs, 1e-12, cfg)
    _, lp = finetune(pre, (), blobs, cfg)
    assert res.train_loss == pytest.approx(lp.loss, abs=1e-6)


def test_linearized_loss_nonincreasing_in_delta():
    r = np.random.default_rng(0)
    ds = Dataset(r.normal(size=(60, 6)), r.integers(0, 3, 60), 3)
    pre = build_network(6, 3, 3, seed=2)
    pre.mark_pretrained()
    means = []
    for delta in (0.1, 0.5, 2.0):
        losses = [linearized_evaluate(pre, (1, 2, 3), ds, delta, TrainConfig(epochs=30, lr=1e-2, seed=s)).train_loss
                  for s in range(5)]
        means.append(np.mean(losses))
    assert means[0] >= means[1] >= means[2]


def test_gap_experiment_shapes(blobs):
    pre = build_network(6, 3, 4, seed=3)
    pre.mark_pretrained()
    cfg = GapExperimentConfig((0, 1, 3), 0.5, 40, (0, 1), TrainConfig(epochs=3))
    recs = gap_experiment(pre, blobs, blobs, cfg)
    assert len(recs) == 6
    assert {r.r_prime for r in recs} == {0, pre.param_count([1]), pre.param_count([1, 2, 3])}
    assert all(r.gap == r.train_acc - r.test_acc for r in recs)


def test_gap_trend():
    recs = [GapRecord(r, (), 1.0, 10, s, 0.5 + 0.01 * r + 0.001 * s, 0.5, ) for r in (0, 4, 9, 16) for s in range(3)]
    assert gap_trend(recs) == pytest.approx(1.0)
