import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csglab.denoiser import AttentionRecord
from csglab.errors import ConfigError, ContractError
from csglab.masks import (
    AttentionSummary,
    MaskBundle,
    accumulate_attention,
    background_mask,
    binary_schedule,
    precision_diag,
    regularize_mask,
    schedule_threshold,
)


def softmax(z, axis):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def random_record(rng, L=2, h=4, w=5):
    return AttentionRecord(softmax(rng.normal(size=(L, h, w)) * 2, 0), softmax(rng.normal(size=(h * w, h * w)) * 2, 1))


def brute_regularize(A, M, k):
    L, h, w = M.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            row = A[i * w + j].reshape(h, w)
            acc = 0.0
            for a in range(h):
                for b in range(w):
                    acc += row[a, b] * M[k, a, b]
            out[i, j] = acc
    return out


def test_accumulate_examples(rng):
    a, b = random_record(rng), random_record(rng)
    one = accumulate_attention([a])
    np.testing.assert_array_equal(one.cross_avg, a.cross)
    np.testing.assert_array_equal(one.self_avg, a.self_attn)
    two = accumulate_attention([a, b])
    np.testing.assert_allclose(two.cross_avg, (a.cross + b.cross) / 2, atol=1e-15)
    np.testing.assert_allclose(two.self_avg, (a.self_attn + b.self_attn) / 2, atol=1e-15)
    with pytest.raises(ContractError):
        accumulate_attention([])


def test_accumulate_keeps_normalisation(rng):
    s = accumulate_attention([random_record(rng, 3, 6, 6) for _ in range(50)])
    np.testing.assert_allclose(s.cross_avg.sum(0), 1, atol=1e-6)
    np.testing.assert_allclose(s.self_avg.sum(1), 1, atol=1e-6)


def test_regularize_identity_and_uniform(rng):
    rec = random_record(rng)
    n = rec.self_attn.shape[0]
    np.testing.assert_array_equal(regularize_mask(AttentionSummary(rec.cross, np.eye(n)), 1), rec.cross[1])
    flat = regularize_mask(AttentionSummary(rec.cross, np.full((n, n), 1 / n)), 0)
    np.testing.assert_allclose(flat, rec.cross[0].mean(), atol=1e-15)


def test_regularize_matches_double_loop(rng):
    for _ in range(10):
        rec = random_record(rng, L=3, h=6, w=6)
        for k in range(3):
            got = regularize_mask(AttentionSummary(rec.cross, rec.self_attn), k)
            np.testing.assert_allclose(got, brute_regularize(rec.self_attn, rec.cross, k), rtol=0, atol=1e-12)
            assert np.all((got > 0) & (got < 1))
    with pytest.raises(ContractError):
        regularize_mask(AttentionSummary(rec.cross, rec.self_attn), 3)


def test_background_mask():
    np.testing.assert_array_equal(background_mask(np.full((3, 3), 0.5)), 0.5)
    c = np.random.default_rng(0).random((4, 4))
    np.testing.assert_allclose(background_mask(background_mask(c)), c, atol=1e-15)
    m = MaskBundle.from_content(c, 2.0)
    assert np.array_equal(m.content + m.background, np.ones_like(c))
    assert np.array_equal(m.background, 1.0 - c)
    with pytest.raises(ContractError):
        background_mask(np.array([[1.2]]))


def test_binary_schedule_examples():
    P = np.random.default_rng(1).uniform(0, 1 - 1e-9, (8, 8))
    assert binary_schedule(P, 50, 50).all()
    assert schedule_threshold(0, 50, 1.5) == pytest.approx(1.5, abs=1e-15)
    assert not binary_schedule(P, 0, 50).any()
    assert schedule_threshold(25, 50, 1.5) == pytest.approx(0.5, abs=1e-15)
    np.testing.assert_array_equal(binary_schedule(P, 25, 50), P >= schedule_threshold(25, 50, 1.5))
    # ties resolve to true
    assert binary_schedule(np.array([[schedule_threshold(10, 50)]]), 10, 50).all()
    with pytest.raises(ConfigError):
        binary_schedule(P, 3, 50, 0.0)


@settings(max_examples=30, deadline=None)
@given(T=st.integers(1, 200), seed=st.integers(0, 10**6))
def test_anchored_set_shrinks_towards_data(T, seed):
    P = np.random.default_rng(seed).random((6, 6))
    prev = binary_schedule(P, T, T)
    for t in range(T - 1, -1, -1):
        assert schedule_threshold(t, T) > schedule_threshold(t + 1, T)
        cur = binary_schedule(P, t, T)
        assert not np.any(cur & ~prev)
        prev = cur


def test_precision_examples():
    np.testing.assert_array_equal(precision_diag(np.full((2, 2), 0.5), np.ones((2, 2), bool), 2.0), 1.0)
    np.testing.assert_array_equal(precision_diag(np.full((2, 2), 0.5), np.ones((2, 2), bool), 0.0), 0.0)
    P = np.array([[0.9, 0.2], [0.5, 0.7]])
    B = np.array([[1, 0], [1, 1]], bool)
    np.testing.assert_allclose(precision_diag(P, B, 10.0), [9.0, 0.0, 5.0, 7.0], atol=1e-14)
    with pytest.raises(ConfigError):
        precision_diag(P, B, -1.0)


def test_precision_bounds(rng):
    P = rng.random((5, 5))
    for t in range(0, 11):
        om = precision_diag(P, binary_schedule(P, t, 10), 7.0)
        assert om.shape == (25,) and np.all((om >= 0) & (om <= 7.0))
