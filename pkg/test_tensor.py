#!/usr/bin/env python3
"""Tests for the reverse-mode tensor engine and the partition-aware optimizer."""

import numpy as np
import pytest

from maskplan import tensor as T
from maskplan.models import EngineError
from maskplan.tensor import AdamW, AdamWConfig, ParameterLabel, ParameterPartition


def _numeric_grad(f, p, eps=1e-6):
    grad = np.zeros_like(p.data)
    for idx in np.ndindex(p.data.shape):
        orig = p.data[idx]
        p.data[idx] = orig + eps
        up = f().item()
        p.data[idx] = orig - eps
        down = f().item()
        p.data[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def _random_graph(rng, variant):
    n, d, v = rng.integers(2, 5), rng.integers(3, 6), rng.integers(3, 7)
    x = T.parameter(rng.normal(size=(n, d)), "x")
    w = T.parameter(rng.normal(size=(d, v)) * 0.5, "w")
    b = T.parameter(rng.normal(size=(v,)), "b")
    gamma = T.parameter(1.0 + 0.1 * rng.normal(size=(v,)), "gamma")
    beta = T.parameter(0.1 * rng.normal(size=(v,)), "beta")
    c = rng.normal(size=(n, v))
    c_wide = rng.normal(size=(n, v + 2))
    c_x = rng.normal(size=(3, d))
    targets = rng.integers(0, v, size=n)
    weights = rng.uniform(0.1, 2.0, size=n)
    ids = rng.integers(0, n, size=3)
    rows = rng.integers(0, n, size=4)
    cols = rng.integers(0, v, size=4)

    def f():
        h = T.layer_norm(T.gelu(T.add(x @ w, b)), gamma, beta)
        if variant == 0:
            return T.reduce_sum(T.mul(T.log_softmax(h), T.constant(c)))
        if variant == 1:
            return T.cross_entropy_with_logits(h, targets, weights)
        if variant == 2:
            return T.add(T.reduce_mean(T.mul(T.softmax(h), T.constant(c))),
                         T.reduce_sum(T.exp(T.scale(h, 0.1))))
        picked = T.reduce_sum(T.pick(T.log(T.softmax(h)), rows, cols))
        looked_up = T.reduce_sum(T.mul(T.embedding_lookup(x, ids), T.constant(c_x)))
        wide = T.reduce_sum(T.mul(T.concat([T.slice_cols(h, 0, 2), h], axis=1), T.constant(c_wide)))
        selected = T.reduce_sum(T.transpose(T.index_select(h, ids)))
        return T.add_n([picked, looked_up, wide, T.sub(selected, T.reduce_mean(h))])

    return f, [x, w, b, gamma, beta]


def test_gradients_match_central_differences():
    rng = np.random.default_rng(1234)
    for trial in range(100):
        f, params = _random_graph(rng, trial % 4)
        T.backward(f())
        for p in params:
            analytic = p.grad
            numeric = _numeric_grad(f, p)
            denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-8)
            assert np.linalg.norm(analytic - numeric) / denom <= 1e-4, (trial, p.name)


def test_gradient_accumulates_over_shared_uses():
    a = T.parameter([1.0, 2.0, 3.0])
    loss = T.reduce_sum(T.mul(a, a))
    T.backward(loss)
    np.testing.assert_allclose(a.grad, [2.0, 4.0, 6.0])


def test_stop_gradient_blocks_upstream():
    a = T.parameter([1.0, -1.0])
    b = T.parameter([0.5, 0.5])
    loss = T.reduce_sum(T.mul(T.stop_gradient(T.scale(a, 3.0)), b))
    T.backward(loss)
    assert a.grad is None
    np.testing.assert_allclose(b.grad, [3.0, -3.0])


def test_stop_gradient_branch_adds_no_gradient_term():
    x = T.parameter([0.5, -2.0, 1.5])
    a, b = np.array([2.0, -1.0, 0.25]), np.array([7.0, 3.0, -4.0])
    loss = T.reduce_sum(T.add(T.mul(T.constant(a), x), T.mul(T.constant(b), T.stop_gradient(x))))
    assert loss.item() == pytest.approx(float(np.dot(a + b, x.data)))
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, a)


def test_no_grad_records_nothing():
    a = T.parameter([1.0, 2.0])
    with T.no_grad():
        out = T.reduce_sum(T.mul(a, a))
    assert not out.requires_grad
    T.backward(out)
    assert a.grad is None
    assert T.is_grad_enabled()


def test_engine_errors():
    with pytest.raises(EngineError):
        T.backward(T.scale(T.parameter([1.0, 2.0]), 2.0))
    with pytest.raises(EngineError):
        T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))
    with pytest.raises(EngineError):
        T.add(T.constant(np.ones((2, 3))), T.constant(np.ones((3, 2))))
    with pytest.raises(EngineError):
        T.cross_entropy_with_logits(T.constant(np.zeros((2, 3))), [0, 5])
    with pytest.raises(EngineError):
        T.add_n([])


def test_cross_entropy_matches_manual_value():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    loss = T.cross_entropy_with_logits(T.constant(logits), [1, 2], weights=[2.0, 1.0]).item()
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert loss == pytest.approx(-(2.0 * logp[0, 1] + logp[1, 2]))


def test_clip_and_minimum_route_gradients():
    a = T.parameter([0.5, 2.0])
    b = T.parameter([1.0, 1.0])
    loss = T.reduce_sum(T.minimum(T.clip(a, 0.0, 1.5), b))
    T.backward(loss)
    np.testing.assert_allclose(a.grad, [1.0, 0.0])
    np.testing.assert_allclose(b.grad, [0.0, 1.0])


def _two_params():
    params = {"a": T.parameter([1.0, -2.0]), "b": T.parameter([3.0])}
    partition = ParameterPartition({"a": ParameterLabel.SHARED, "b": ParameterLabel.REFINEMENT_EXPERT})
    return params, partition


def test_optimizer_step_touches_only_active_labels():
    params, partition = _two_params()
    before_b = params["b"].data.copy()
    loss = T.add(T.reduce_sum(T.mul(params["a"], params["a"])), T.reduce_sum(T.mul(params["b"], params["b"])))
    T.backward(loss)
    updated = AdamW().optimizer_step(params, partition, [ParameterLabel.SHARED], lr=0.1)
    assert updated == 1
    assert np.array_equal(params["b"].data, before_b)
    np.testing.assert_allclose(params["a"].data, [0.9, -1.9], atol=1e-6)
    assert params["a"].grad is None and params["b"].grad is None


def test_optimizer_step_requires_gradients_for_active_params():
    params, partition = _two_params()
    T.backward(T.reduce_sum(params["a"]))
    with pytest.raises(EngineError):
        AdamW().optimizer_step(params, partition, [ParameterLabel.SHARED, ParameterLabel.REFINEMENT_EXPERT], 0.1)


def test_weight_decay_and_sgd_variants():
    params, partition = _two_params()
    T.backward(T.reduce_sum(params["a"]))
    AdamW(AdamWConfig(sgd=True)).optimizer_step(params, partition, [ParameterLabel.SHARED], lr=0.5)
    np.testing.assert_allclose(params["a"].data, [0.5, -2.5])
    params, partition = _two_params()
    T.backward(T.scale(T.reduce_sum(params["a"]), 0.0))
    opt = AdamW(AdamWConfig(weight_decay=0.1))
    opt.optimizer_step(params, partition, [ParameterLabel.SHARED], lr=0.5)
    np.testing.assert_allclose(params["a"].data, [0.95, -1.9])
    assert opt.state["a"]["step"] == 1
