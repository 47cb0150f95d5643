import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nestpipe.core import (Batch, Prf, Sample, TrainConfig, canonical_key_order, prf_uniform,
                           segment_sequential_sum, sequential_sum, sgd_update)


@pytest.mark.parametrize("keys, expected", [([5, 3, 5, 9], [3, 5, 9]), ([], []), ([7], [7])])
def test_canonical_key_order(keys, expected):
    assert canonical_key_order(keys) == expected


@given(st.lists(st.integers(0, 10**6)))
def test_canonical_order_idempotent(keys):
    once = canonical_key_order(keys)
    assert canonical_key_order(once) == once


def test_prf_deterministic_and_seed_sensitive():
    a = prf_uniform(Prf(1), "emb", (0, 0), -1.0, 1.0)
    assert a == prf_uniform(Prf(1), "emb", (0, 0), -1.0, 1.0)
    assert a != prf_uniform(Prf(2), "emb", (0, 0), -1.0, 1.0)
    assert prf_uniform(Prf(1), "other", (0, 0), -1.0, 1.0) != a


def test_prf_monte_carlo_mean():
    lo, hi, n = -2.0, 5.0, 10**5
    draws = Prf(7).uniform("mc", np.arange(n), lo=lo, hi=hi)
    sigma = (hi - lo) / np.sqrt(12) / np.sqrt(n)
    assert abs(draws.mean() - (lo + hi) / 2) < 3 * sigma
    assert draws.min() >= lo and draws.max() < hi


def test_prf_rejects_empty_range():
    with pytest.raises(ValueError):
        prf_uniform(Prf(0), "x", (1,), 1.0, 1.0)


def test_prf_vector_matches_scalar():
    vec = Prf(3).words("v", np.arange(5), 2)
    assert [int(Prf(3).words("v", i, 2)) for i in range(5)] == vec.tolist()


def test_sample_validation():
    with pytest.raises(ValueError):
        Sample(0, (), 1)
    with pytest.raises(ValueError):
        Sample(0, (3, 2), 1)
    with pytest.raises(ValueError):
        Sample(0, (1,), 2)
    with pytest.raises(ValueError):
        Sample.from_keys(0, [4, 4], 0)
    assert Sample.from_keys(0, [9, 2], 1).keys == (2, 9)


def test_batch_split_contiguous():
    samples = tuple(Sample(i, (i,), 0) for i in range(8))
    parts = Batch(1, samples).split(4)
    assert [[s.sample_id for s in p] for p in parts] == [[0, 1], [2, 3], [4, 5], [6, 7]]
    with pytest.raises(ValueError):
        Batch(1, samples).split(3)


@pytest.mark.parametrize("field, value", [("num_workers", 0), ("batch_size", 30), ("pipeline_depth", 6),
                                          ("learning_rate", 0.0), ("steps", -1)])
def test_train_config_names_field(field, value):
    with pytest.raises(ValueError, match=field):
        TrainConfig(**{field: value})


def test_micro_batch_size():
    assert TrainConfig(num_workers=4, batch_size=64, num_micro_batches=4).micro_batch_size == 4


@settings(max_examples=50)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=10), st.integers(0, 1000))
def test_segment_sum_matches_sequential(lengths, seed):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((sum(lengths), 3)).astype(np.float32)
    starts = np.cumsum([0] + lengths[:-1])
    seg = segment_sequential_sum(rows, starts)
    for i, (a, n) in enumerate(zip(starts, lengths)):
        assert np.array_equal(seg[i], sequential_sum(rows[a:a + n]))


def test_sequential_sum_empty():
    assert sequential_sum(np.zeros((0, 2), np.float32)).tolist() == [0.0, 0.0]


def test_sgd_update_dtype():
    out = sgd_update(np.ones(2, np.float32), np.array([2.0, -4.0]), 4, 0.1)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, [0.95, 1.1], rtol=1e-7)
