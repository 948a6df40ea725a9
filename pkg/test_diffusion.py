#!/usr/bin/env python3
"""Tests for schedules, the masked-diffusion objective, the sampler and the refinement pass."""

import itertools

import numpy as np
import pytest

from maskplan import tensor as T
from maskplan.codec import MASK_ID
from maskplan.diffusion import (COSINE, UNIFORM, corrupt, cosine_counts, make_schedule, outlier_corruption,
                                refine, refine_sft_pair, refine_with_logprobs, sample, sft_loss, snapshot_steps,
                                uniform_counts)
from maskplan.models import DiffusionError
from maskplan.planner import ExpertId


@pytest.mark.parametrize("kind", [COSINE, UNIFORM])
def test_schedules_unmask_everything(kind):
    for steps, length in itertools.product([1, 2, 3, 4, 8, 12, 30], [1, 3, 12, 24]):
        counts = make_schedule(steps, length, kind).counts
        assert len(counts) == steps
        assert sum(counts) == length
        assert all(c >= 0 for c in counts)


def test_cosine_counts_front_load_less_than_back():
    assert cosine_counts(2, 24) == [7, 17]
    counts = cosine_counts(12, 24)
    assert counts[0] <= counts[-1]
    assert cosine_counts(1, 24) == [24]
    assert uniform_counts(5, 12) == [3, 3, 2, 2, 2]
    with pytest.raises(DiffusionError):
        make_schedule(4, 12, "linear")


def test_snapshot_steps():
    assert snapshot_steps(12, 4) == [4, 8, 12]
    assert snapshot_steps(10, 4) == [4, 10]
    assert snapshot_steps(5, 5) == [5]
    assert snapshot_steps(3, 1) == [1, 2, 3]
    with pytest.raises(DiffusionError):
        snapshot_steps(4, 5)


def test_corrupt_never_returns_unmasked_sequence():
    rng = np.random.default_rng(0)
    r0 = np.array([7, 8, 9])
    for _ in range(200):
        out = corrupt(r0, 0.05, rng)
        masked = out == MASK_ID
        assert masked.any()
        np.testing.assert_array_equal(out[~masked], r0[~masked])
    assert np.all(corrupt(r0, 1.0, rng) == MASK_ID)
    with pytest.raises(DiffusionError):
        corrupt(r0, 0.0, rng)


def test_sft_loss_matches_exhaustive_expectation():
    rng = np.random.default_rng(42)
    logits = T.constant(rng.normal(size=(3, 4)))
    r0 = np.array([1, 2, 3])
    t = 0.4
    ce = -T.log_softmax_array(logits.data)[np.arange(3), r0]

    expected = 0.0
    norm = 1.0 - (1.0 - t) ** 3
    for pattern in itertools.product([False, True], repeat=3):
        mask = np.array(pattern)
        if not mask.any():
            continue
        prob = t ** mask.sum() * (1.0 - t) ** (3 - mask.sum()) / norm
        expected += prob * ce[mask].sum() / t

    total = 0.0
    n = 100_000
    for _ in range(n):
        total += sft_loss(logits, r0, corrupt(r0, t, rng), t).item()
    assert abs(total / n - expected) / expected < 0.01


def test_sft_loss_errors():
    logits = T.constant(np.zeros((3, 4)))
    with pytest.raises(DiffusionError):
        sft_loss(logits, [1, 2, 3], [1, 2, 3], 0.5)
    with pytest.raises(DiffusionError):
        sft_loss(logits, [1, 2], [0, 0], 0.5)


def test_refine_sft_pair_substitutes_inside_sub_vocabularies(codec):
    rng = np.random.default_rng(3)
    target = np.array([codec.random_token(i, rng) for i in range(codec.response_len)])
    noisy, clean = refine_sft_pair(target, rng, 0.5, codec)
    np.testing.assert_array_equal(clean, target)
    assert not np.any(noisy == MASK_ID)
    for position, token in enumerate(noisy):
        lo, hi = codec.position_range(position)
        assert lo <= token < hi
    same, _ = refine_sft_pair(target, rng, 0.0, codec)
    np.testing.assert_array_equal(same, target)


def test_outlier_corruption_changes_exactly_one_position(codec):
    rng = np.random.default_rng(5)
    target = np.array([codec.random_token(i, rng) for i in range(codec.response_len)])
    for _ in range(20):
        corrupted, position = outlier_corruption(target, rng, codec)
        assert np.flatnonzero(corrupted != target).tolist() == [position]
        lo, hi = codec.position_range(position)
        assert lo <= corrupted[position] < hi
    with pytest.raises(DiffusionError):
        outlier_corruption([], rng, codec)


@pytest.mark.parametrize("kind", [COSINE, UNIFORM])
def test_sampler_path_invariants(cfg, scorer, model, easy_scenes, kind):
    context = scorer.context(easy_scenes[0])
    length = cfg.codec.response_len
    for steps, tau in [(1, 1), (2, 1), (4, 2), (5, 2), (12, 4), (16, 3)]:
        schedule = make_schedule(steps, length, kind)
        result = sample(context, model, schedule, 1.0, np.random.default_rng(steps), tau=tau, keep_history=True)
        assert not np.any(result.tokens == MASK_ID)
        assert len(result.history) == steps + 1
        for step, (before, after) in enumerate(zip(result.history, result.history[1:]), start=1):
            decoded = before != MASK_ID
            np.testing.assert_array_equal(after[decoded], before[decoded])
            assert int(np.sum(after == MASK_ID)) == schedule.remaining_after(step)

        path = result.path
        assert path.transitions == steps // tau
        assert np.all(path.snapshots[0] == MASK_ID)
        np.testing.assert_array_equal(path.snapshots[-1], result.tokens)
        eligible = [path.eligible(j) for j in range(path.transitions)]
        union = np.concatenate(eligible)
        assert sorted(union.tolist()) == list(range(length))
        for j, positions in enumerate(eligible):
            assert np.all(path.snapshots[j][positions] == MASK_ID)
            assert np.all(path.snapshots[j + 1][positions] != MASK_ID)


def test_greedy_sampling_ignores_rng(cfg, scorer, model, easy_scenes):
    context = scorer.context(easy_scenes[0])
    schedule = make_schedule(4, cfg.codec.response_len)
    a = sample(context, model, schedule, 0.0, np.random.default_rng(1)).tokens
    b = sample(context, model, schedule, 0.0, np.random.default_rng(2)).tokens
    np.testing.assert_array_equal(a, b)
    with pytest.raises(DiffusionError):
        sample(context, model, make_schedule(4, cfg.codec.response_len + 1), 0.0, np.random.default_rng(0))


def test_refine_pass(cfg, scorer, model, easy_scenes):
    context = scorer.context(easy_scenes[0])
    rng = np.random.default_rng(5)
    tokens = sample(context, model, make_schedule(4, cfg.codec.response_len), 1.0, rng).tokens
    revised, logp = refine_with_logprobs(tokens, context, model, mode="argmax")
    logits = model.logits(context.with_response(tokens), ExpertId.REFINEMENT)
    np.testing.assert_array_equal(revised, logits.argmax(axis=1))
    np.testing.assert_allclose(logp, T.log_softmax_array(logits)[np.arange(len(tokens)), revised])
    np.testing.assert_array_equal(refine(tokens, context, model), revised)

    sampled, sampled_logp = refine_with_logprobs(tokens, context, model, mode="sample", temperature=0.5, rng=rng)
    np.testing.assert_allclose(sampled_logp,
                               T.log_softmax_array(logits * 2.0)[np.arange(len(tokens)), sampled])
    assert np.all(sampled_logp <= 0.0)

    masked = tokens.copy()
    masked[0] = MASK_ID
    with pytest.raises(DiffusionError):
        refine(masked, context, model)
    with pytest.raises(DiffusionError):
        refine(tokens, context, model, mode="sample")
    with pytest.raises(DiffusionError):
        refine(tokens, context, model, mode="beam")
