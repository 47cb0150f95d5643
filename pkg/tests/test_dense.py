import numpy as np
import pytest

from nestpipe.core import Prf, Sample
from nestpipe.dense import (DenseParams, backward, forward, pool, pool_batch, sample_grads,
                            scatter_embedding_grads, sgd_step)


def head_only(w=1.0, b=0.0, dtype=np.float64):
    return DenseParams([], [], np.array([w], dtype), np.array([b], dtype))


def test_pool_examples():
    rows = {1: np.array([1.0, 2.0]), 2: np.array([3.0, 4.0])}
    assert pool(Sample(0, (1, 2), 0), rows).tolist() == [4.0, 6.0]
    assert pool(Sample(0, (2,), 0), rows).tolist() == [3.0, 4.0]
    assert pool(Sample(0, (1,), 0), {1: np.zeros(3)}).tolist() == [0, 0, 0]


def test_pool_batch_matches_pool():
    rng = np.random.default_rng(0)
    rows = {k: rng.standard_normal(5).astype(np.float32) for k in range(20)}
    samples = [Sample.from_keys(i, rng.choice(20, int(rng.integers(1, 8)), replace=False), 0) for i in range(30)]
    batch = pool_batch(samples, rows)
    for s, p in zip(samples, batch):
        assert p.tobytes() == pool(s, rows).tobytes()


def test_forward_ln2():
    losses, _ = forward(head_only(), np.zeros((1, 1)), np.array([1]))
    assert losses[0] == pytest.approx(np.log(2), abs=1e-15)


def test_bce_monotone():
    losses = [forward(head_only(b=z), np.zeros((1, 1)), np.array([1]))[0][0] for z in (0.0, 2.0, 4.0)]
    assert losses[0] > losses[1] > losses[2] > 0


def test_forward_stable_extreme_logits():
    losses, _ = forward(head_only(b=800.0), np.zeros((2, 1)), np.array([0, 1]))
    assert np.all(np.isfinite(losses))


def test_forward_shape_errors():
    with pytest.raises(ValueError):
        forward(head_only(), np.zeros((2, 3)), np.array([0, 1]))
    with pytest.raises(ValueError):
        forward(head_only(), np.zeros((2, 1)), np.array([0]))


def _loss_sum(params, pooled, labels):
    return forward(params, pooled, labels)[0].sum()


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


@pytest.mark.parametrize("seed", range(24))
def test_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d, h, L, n = int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(0, 4)), 3
    params = DenseParams.init(Prf(seed), d, h, L, dtype=np.float64)
    params = params.with_flat(params.flat() + 0.1 * rng.standard_normal(params.size))
    pooled = rng.standard_normal((n, d))
    labels = rng.integers(0, 2, n)
    _, cache = forward(params, pooled, labels)
    dense, pooled_grad = backward(params, cache, labels)
    eps = 1e-4
    flat = params.flat()
    num = np.zeros_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += eps
        dn[i] -= eps
        num[i] = (_loss_sum(params.with_flat(up), pooled, labels)
                  - _loss_sum(params.with_flat(dn), pooled, labels)) / (2 * eps)
    assert _rel(dense.sum(axis=0), num) < 1e-6
    num_in = np.zeros_like(pooled)
    for idx in np.ndindex(*pooled.shape):
        up, dn = pooled.copy(), pooled.copy()
        up[idx] += eps
        dn[idx] -= eps
        num_in[idx] = (_loss_sum(params, up, labels) - _loss_sum(params, dn, labels)) / (2 * eps)
    assert _rel(pooled_grad, num_in) < 1e-6


def test_dead_relu_gradient_through_head_only():
    # zero input and zero biases: every hidden unit is inactive
    params = DenseParams.init(Prf(0), 3, 4, 2, dtype=np.float64)
    _, cache = forward(params, np.zeros((1, 3)), np.array([1]))
    dense, pooled_grad = backward(params, cache, np.array([1]))
    assert np.all(pooled_grad == 0)
    # only b_out receives a gradient
    assert np.count_nonzero(dense) == 1 and dense[0, -1] == pytest.approx(-0.5)


def test_duplicate_sample_doubles_contribution():
    params = DenseParams.init(Prf(1), 2, 3, 1)
    rows = {0: np.array([0.3, -0.2], np.float32), 1: np.array([0.1, 0.4], np.float32)}
    s = Sample(0, (0, 1), 1)
    _, one, _ = sample_grads(params, [s], rows)
    _, two, _ = sample_grads(params, [s, Sample(1, (0, 1), 1)], rows)
    assert np.array_equal(two.sum(axis=0), 2 * one.sum(axis=0))


def test_per_sample_results_independent_of_batch():
    rng = np.random.default_rng(2)
    params = DenseParams.init(Prf(2), 8, 8, 2)
    rows = {k: rng.standard_normal(8).astype(np.float32) for k in range(30)}
    samples = [Sample.from_keys(i, rng.choice(30, 5, replace=False), i % 2) for i in range(16)]
    _, full, pg_full = sample_grads(params, samples, rows)
    for i in range(0, 16, 4):
        _, part, pg = sample_grads(params, samples[i:i + 4], rows)
        assert full[i:i + 4].tobytes() == part.tobytes()
        assert pg_full[i:i + 4].tobytes() == pg.tobytes()


def test_scatter():
    g = np.array([1.0, 2.0])
    out = scatter_embedding_grads([Sample(7, (3, 5), 0)], g[None])
    assert [(r.key, r.contributor) for r in out] == [(3, 7), (5, 7)]
    two = scatter_embedding_grads([Sample(0, (3,), 0), Sample(1, (3,), 0)], np.ones((2, 2)))
    assert [r.key for r in two] == [3, 3]
    assert scatter_embedding_grads([], np.zeros((0, 2))) == []


def test_sgd_step_examples():
    p = DenseParams.init(Prf(0), 2, 2, 1)
    ones = np.full(p.size, 2.0)
    q = sgd_step(p, ones, 2, 0.5)
    np.testing.assert_allclose(q.flat(), p.flat() - 0.5, rtol=1e-6)
    assert sgd_step(p, np.zeros(p.size), 2, 0.5).flat().tobytes() == p.flat().tobytes()
    g = np.full(p.size, 0.25)
    twice = sgd_step(sgd_step(p, g, 1, 1.0), g, 1, 1.0)
    np.testing.assert_allclose(twice.flat(), p.flat() - 0.5, rtol=1e-6)
    with pytest.raises(ValueError):
        sgd_step(p, np.zeros(3), 2, 0.5)


def test_flat_round_trip():
    p = DenseParams.init(Prf(3), 4, 5, 3)
    q = p.with_flat(p.flat())
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.tensors(), q.tensors()))
    assert p.size == 4 * 5 + 5 + 2 * (5 * 5 + 5) + 5 + 1
