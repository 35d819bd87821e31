import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subtune.netcore import (DenseLayer, DimensionError, ResidualBlock, StaleTapeError, backward, forward,
                             loss_and_grad, named_parameters, numerical_grad_check)


def make_net(width, n_blocks, classes, seed):
    rng = np.random.default_rng(seed)
    blocks = [ResidualBlock.init_uniform(width, i + 1, rng) for i in range(n_blocks)]
    head = DenseLayer.init_uniform(width, classes, rng)
    return blocks, head


def test_zero_network_gives_zero_logits(rng):
    blocks = [ResidualBlock(DenseLayer.zeros(4, 4), DenseLayer.zeros(4, 4), 1)]
    head = DenseLayer.zeros(4, 3)
    logits, _ = forward(blocks, head, rng.normal(size=(5, 4)))
    assert np.array_equal(logits, np.zeros((5, 3)))


def test_zero_block_is_pure_skip(rng):
    block = ResidualBlock(DenseLayer.zeros(4, 4), DenseLayer.zeros(4, 4), 1)
    x = rng.normal(size=(3, 4))
    assert np.array_equal(block(x), x)


def test_logit_shape():
    blocks, head = make_net(4, 2, 5, 0)
    logits, _ = forward(blocks, head, np.ones((3, 4)))
    assert logits.shape == (3, 5)


def test_width_mismatch_raises():
    blocks, head = make_net(4, 2, 5, 0)
    with pytest.raises(DimensionError):
        forward(blocks, head, np.ones((3, 5)))


def test_loss_uniform_logits():
    loss, _ = loss_and_grad(np.zeros((4, 10)), np.array([0, 3, 5, 9]))
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_loss_saturated_correct():
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 1e6
    loss, _ = loss_and_grad(logits, np.array([1, 2]))
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_loss_hand_value():
    loss, d = loss_and_grad(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 1]))
    assert loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert loss == pytest.approx(0.31326, abs=1e-5)
    assert np.allclose(d.sum(axis=1), 0.0)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        loss_and_grad(np.zeros((2, 3)), np.array([0, 3]))


def test_frozen_blocks_only_head_grads(rng):
    blocks, head = make_net(4, 2, 3, 1)
    for b in blocks:
        b.frozen = True
    logits, tape = forward(blocks, head, rng.normal(size=(5, 4)))
    grads = backward(tape, loss_and_grad(logits, np.array([0, 1, 2, 0, 1]))[1])
    assert set(grads) == {"head.weight", "head.bias"}


def test_all_unfrozen_gradient_count(rng):
    blocks, head = make_net(4, 3, 3, 2)
    logits, tape = forward(blocks, head, rng.normal(size=(5, 4)))
    grads = backward(tape, loss_and_grad(logits, np.array([0, 1, 2, 0, 1]))[1])
    assert len(grads) == len(list(named_parameters(blocks, head))) == 3 * 4 + 2


def test_stale_tape_rejected(rng):
    blocks, head = make_net(4, 1, 3, 3)
    logits, tape = forward(blocks, head, rng.normal(size=(2, 4)))
    blocks[0].lin1.touch()
    with pytest.raises(StaleTapeError):
        backward(tape, np.zeros_like(logits))


def test_grad_check_fresh_net(rng):
    blocks, head = make_net(5, 3, 4, 4)
    rep = numerical_grad_check(blocks, head, rng.normal(size=(6, 5)), rng.integers(0, 4, 6), 1e-5, 1e-4)
    assert rep.passed, rep


def test_grad_check_skips_frozen(rng):
    blocks, head = make_net(4, 2, 3, 5)
    blocks[0].frozen = True
    rep = numerical_grad_check(blocks, head, rng.normal(size=(4, 4)), rng.integers(0, 3, 4), n_samples=10 ** 6)
    n_free = sum(a.size for name, l, attr in named_parameters(blocks, head, trainable_only=True)
                 for a in [getattr(l, attr)])
    assert rep.n_checked + rep.n_skipped_kinks == n_free
    assert rep.passed


def test_zero_batch_gives_zero_lin1_weight_grad():
    blocks, head = make_net(4, 1, 3, 6)
    logits, tape = forward(blocks, head, np.zeros((3, 4)))
    grads = backward(tape, loss_and_grad(logits, np.array([0, 1, 2]))[1])
    assert np.array_equal(grads["block1.lin1.weight"], np.zeros((4, 4)))


def test_grad_with_siamese_prefix(rng):
    blocks, head = make_net(4, 2, 3, 8)
    head = DenseLayer.init_uniform(8, 3, rng)
    prefix = rng.normal(size=(5, 4))
    rep = numerical_grad_check(blocks, head, rng.normal(size=(5, 4)), rng.integers(0, 3, 5), prefix=prefix)
    assert rep.passed


def test_deterministic_forward_backward(rng):
    x = rng.normal(size=(4, 4))
    outs = []
    for _ in range(2):
        blocks, head = make_net(4, 2, 3, 9)
        logits, tape = forward(blocks, head, x)
        outs.append((logits, backward(tape, loss_and_grad(logits, np.array([0, 1, 2, 0]))[1])))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert all(np.array_equal(outs[0][1][k], outs[1][1][k]) for k in outs[0][1])


@settings(max_examples=25, deadline=None)
@given(width=st.integers(2, 6), n_blocks=st.integers(1, 3), classes=st.integers(2, 4),
       batch=st.integers(1, 5), seed=st.integers(0, 10 ** 6))
def test_backprop_matches_finite_differences(width, n_blocks, classes, batch, seed):
    r = np.random.default_rng(seed)
    blocks, head = make_net(width, n_blocks, classes, seed)
    for b in blocks:
        b.frozen = bool(r.random() < 0.3)
    rep = numerical_grad_check(blocks, head, r.normal(size=(batch, width)), r.integers(0, classes, batch),
                               n_samples=40, seed=seed)
    assert rep.max_rel_error <= 1e-4
