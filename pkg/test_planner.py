#!/usr/bin/env python3
"""Tests for the block-MoE planner: shapes, routing and gradient confinement."""

import copy

import numpy as np
import pytest

from maskplan import tensor as T
from maskplan.codec import MASK_ID
from maskplan.diffusion import refine_loss
from maskplan.models import ModelError, TokenSequence
from maskplan.planner import ExpertId, PlannerModel, patchify
from maskplan.rft import GENERATION_LABELS, REFINEMENT_LABELS
from maskplan.tensor import AdamW, ParameterLabel


def _sequence(cfg, codec, rng):
    response = np.array([codec.random_token(i, rng) for i in range(codec.response_len)])
    grid = rng.random((4, cfg.model.grid_size, cfg.model.grid_size))
    return TokenSequence(context=[1, 3, 2], response=response, grid=grid)


def _snapshot(model, label):
    partition = model.parameter_partition()
    return {name: model.params[name].data.copy() for name in partition.names(label)}


def test_logits_shape_and_mask_column(cfg, codec, model):
    seq = _sequence(cfg, codec, np.random.default_rng(0))
    logits = model.logits(seq, ExpertId.GENERATION)
    assert logits.shape == (codec.response_len, codec.vocab_size)
    assert np.all(logits.argmax(axis=1) != MASK_ID)
    assert np.all(T.softmax_array(logits)[:, MASK_ID] == 0.0)


def test_attention_is_bidirectional(cfg, codec, model):
    rng = np.random.default_rng(1)
    seq = _sequence(cfg, codec, rng)
    base = model.logits(seq)
    changed = seq.response.copy()
    bins = cfg.codec.heading_bins
    changed[-1] = codec.heading_offset + (changed[-1] - codec.heading_offset + 1) % bins
    later = model.logits(seq.with_response(changed))
    assert not np.allclose(base[0], later[0])


def test_partition_is_total_and_disjoint(model):
    partition = model.parameter_partition()
    assert set(partition.labels) == set(model.params)
    counts = partition.counts()
    assert counts[ParameterLabel.GENERATION_EXPERT] == counts[ParameterLabel.REFINEMENT_EXPERT] > 0
    total = sum(model.num_parameters(label) for label in ParameterLabel)
    assert total == model.num_parameters()


def test_refinement_starts_as_generation_replica(cfg, codec, model):
    seq = _sequence(cfg, codec, np.random.default_rng(2))
    np.testing.assert_array_equal(model.logits(seq, ExpertId.GENERATION), model.logits(seq, ExpertId.REFINEMENT))


def test_refinement_init_adds_exactly_the_cloned_blocks(cfg):
    model_cfg = copy.deepcopy(cfg.model)
    model_cfg.n_expert_blocks = 2
    fresh = PlannerModel(model_cfg, seed=0)
    before = fresh.num_parameters()
    block = sum(p.data.size for name, p in fresh.params.items() if name.startswith("generation.0."))
    assert fresh.num_parameters(ParameterLabel.REFINEMENT_EXPERT) == 0
    fresh.init_refinement_from_generation()
    added = fresh.num_parameters() - before
    assert added == model_cfg.n_expert_blocks * block
    assert added == fresh.num_parameters(ParameterLabel.GENERATION_EXPERT)
    assert added == fresh.num_parameters(ParameterLabel.REFINEMENT_EXPERT)


def test_refinement_before_init_is_an_error(cfg, codec):
    fresh = PlannerModel(cfg.model, seed=0)
    assert not fresh.has_refinement
    with pytest.raises(ModelError):
        fresh.forward(_sequence(cfg, codec, np.random.default_rng(3)), ExpertId.REFINEMENT)


def test_refinement_update_leaves_shared_and_generation_bit_identical(cfg, codec, model):
    rng = np.random.default_rng(4)
    seq = _sequence(cfg, codec, rng)
    frozen = {**_snapshot(model, ParameterLabel.SHARED), **_snapshot(model, ParameterLabel.GENERATION_EXPERT)}
    before = _snapshot(model, ParameterLabel.REFINEMENT_EXPERT)
    loss = refine_loss(model.forward(seq, ExpertId.REFINEMENT), seq.response)
    T.backward(loss)
    for name in frozen:
        assert model.params[name].grad is None, name
    AdamW().optimizer_step(model.params, model.parameter_partition(), REFINEMENT_LABELS, lr=1e-2)
    for name, data in frozen.items():
        assert np.array_equal(model.params[name].data, data), name
    assert any(not np.array_equal(model.params[n].data, d) for n, d in before.items())


def test_generation_update_leaves_refinement_bit_identical(cfg, codec, model):
    seq = _sequence(cfg, codec, np.random.default_rng(5))
    before = _snapshot(model, ParameterLabel.REFINEMENT_EXPERT)
    loss = refine_loss(model.forward(seq, ExpertId.GENERATION), seq.response)
    T.backward(loss)
    for name in before:
        assert model.params[name].grad is None
    AdamW().optimizer_step(model.params, model.parameter_partition(), GENERATION_LABELS, lr=1e-2)
    for name, data in before.items():
        assert np.array_equal(model.params[name].data, data)


def test_no_expert_blocks_means_no_refinement(cfg, codec):
    config = copy.deepcopy(cfg.model)
    config.n_expert_blocks = 0
    model = PlannerModel(config, seed=0)
    assert not model.has_refinement
    counts = model.parameter_partition().counts()
    assert counts[ParameterLabel.GENERATION_EXPERT] == 0 and counts[ParameterLabel.REFINEMENT_EXPERT] == 0
    assert model.logits(_sequence(cfg, codec, np.random.default_rng(6))).shape == (codec.response_len,
                                                                                    codec.vocab_size)


def test_clone_and_state_dict_reproduce_outputs(cfg, codec, model):
    seq = _sequence(cfg, codec, np.random.default_rng(7))
    twin = model.clone(frozen=True)
    assert not any(p.requires_grad for p in twin.params.values())
    np.testing.assert_array_equal(model.logits(seq, ExpertId.REFINEMENT), twin.logits(seq, ExpertId.REFINEMENT))
    restored = PlannerModel(cfg.model, seed=99)
    restored.load_state_dict(model.state_dict())
    assert restored.has_refinement
    np.testing.assert_array_equal(model.logits(seq), restored.logits(seq))


def test_input_validation(cfg, codec, model):
    rng = np.random.default_rng(8)
    seq = _sequence(cfg, codec, rng)
    with pytest.raises(ModelError):
        model.forward(seq.with_response(seq.response[:-1]))
    with pytest.raises(ModelError):
        model.forward(TokenSequence(context=seq.context, response=seq.response, grid=np.zeros((4, 8, 8))))
    with pytest.raises(ModelError):
        model.forward(seq.with_response(np.full(codec.response_len, codec.vocab_size)))


def test_patchify_layout():
    grid = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)
    patches = patchify(grid, 2)
    assert patches.shape == (4, 8)
    np.testing.assert_array_equal(patches[1], [2, 3, 6, 7, 18, 19, 22, 23])
