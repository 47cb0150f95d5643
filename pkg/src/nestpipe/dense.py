"""Replicated dense model: sum pooling, ReLU MLP, logistic head, BCE loss.

Every per-sample quantity is computed with elementwise products followed by
a reduction along the innermost axis, so a sample's result does not depend
on which other samples share its batch.  That property is what lets a
micro-batched, sharded run reproduce the single-context oracle bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from nestpipe.core import Prf, Sample, segment_sequential_sum, sgd_update, sgd_update_wide


@dataclass
class DenseParams:
    weights: list[np.ndarray]  # layer l: (h, fan_in)
    biases: list[np.ndarray]   # layer l: (h,)
    w_out: np.ndarray          # (h,) or (d,) when there are no hidden layers
    b_out: np.ndarray          # (1,)

    @classmethod
    def init(cls, prf: Prf, emb_dim: int, hidden_dim: int, layers: int,
             dtype=np.float32) -> "DenseParams":
        weights, biases = [], []
        fan_in = emb_dim
        for l in range(layers):
            bound = 1.0 / np.sqrt(fan_in)
            i, j = np.meshgrid(np.arange(hidden_dim), np.arange(fan_in), indexing="ij")
            weights.append(prf.uniform("dense", l, i, j, lo=-bound, hi=bound).astype(dtype))
            biases.append(np.zeros(hidden_dim, dtype=dtype))
            fan_in = hidden_dim
        bound = 1.0 / np.sqrt(fan_in)
        w_out = prf.uniform("dense", layers, 0, np.arange(fan_in), lo=-bound, hi=bound).astype(dtype)
        return cls(weights, biases, w_out, np.zeros(1, dtype=dtype))

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.w_out, self.b_out]

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def with_flat(self, flat: np.ndarray) -> "DenseParams":
        parts, pos = [], 0
        for t in self.tensors():
            parts.append(np.asarray(flat[pos:pos + t.size]).reshape(t.shape).copy())
            pos += t.size
        if pos != flat.size:
            raise ValueError(f"flat vector of {flat.size} values for {pos} parameters")
        n = len(self.weights)
        return DenseParams(parts[0:2 * n:2], parts[1:2 * n:2], parts[-2], parts[-1])

    def astype(self, dtype) -> "DenseParams":
        return self.with_flat(self.flat().astype(dtype))

    @property
    def size(self) -> int:
        return sum(t.size for t in self.tensors())

    def to_bytes(self) -> bytes:
        return self.flat().tobytes()


@dataclass
class ForwardCache:
    pooled: np.ndarray
    pre: list[np.ndarray]
    acts: list[np.ndarray]
    logits: np.ndarray
    probs: np.ndarray


def _rowdot(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # (n, k) x (m, k) -> (n, m), reduced per row along the contiguous last axis
    return (x[:, None, :] * np.ascontiguousarray(w)[None, :, :]).sum(axis=-1)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + ez), ez / (1 + ez)).astype(z.dtype)


def pool(sample: Sample, rows: Mapping[int, np.ndarray]) -> np.ndarray:
    """Element-wise sum of the sample's rows, in ascending key order."""
    missing = [k for k in sample.keys if k not in rows]
    if missing:
        raise KeyError(f"sample {sample.sample_id}: no rows for keys {missing}")
    acc = rows[sample.keys[0]].copy()
    for k in sample.keys[1:]:
        acc = acc + rows[k]
    return acc


def pool_batch(samples: Sequence[Sample], rows: Mapping[int, np.ndarray]) -> np.ndarray:
    """Vectorized :func:`pool` for many samples; identical per-sample results."""
    if not samples:
        d = next(iter(rows.values())).shape[0] if rows else 0
        return np.zeros((0, d), dtype=np.float32)
    flat_keys = [k for s in samples for k in s.keys]
    missing = [k for k in set(flat_keys) if k not in rows]
    if missing:
        raise KeyError(f"no rows for keys {sorted(missing)}")
    stacked = np.stack([rows[k] for k in flat_keys])
    starts = np.cumsum([0] + [len(s.keys) for s in samples[:-1]])
    return segment_sequential_sum(stacked, starts)


def forward(params: DenseParams, pooled: np.ndarray, labels: np.ndarray):
    """Per-sample BCE losses and the cache needed by :func:`backward`."""
    pooled = np.asarray(pooled)
    fan_in = params.weights[0].shape[1] if params.weights else params.w_out.shape[0]
    if pooled.ndim != 2 or pooled.shape[1] != fan_in:
        raise ValueError(f"pooled inputs of shape {pooled.shape}, expected (n, {fan_in})")
    labels = np.asarray(labels)
    if labels.shape != (pooled.shape[0],):
        raise ValueError("one label per sample required")
    pre, acts = [], []
    a = pooled
    for w, b in zip(params.weights, params.biases):
        z = _rowdot(a, w) + b
        a = np.maximum(z, 0)
        pre.append(z)
        acts.append(a)
    logits = _rowdot(a, params.w_out[None, :])[:, 0] + params.b_out[0]
    probs = _sigmoid(logits)
    y = labels.astype(logits.dtype)
    losses = np.maximum(logits, 0) - y * logits + np.log1p(np.exp(-np.abs(logits)))
    return losses, ForwardCache(pooled, pre, acts, logits, probs)


def backward(params: DenseParams, cache: ForwardCache, labels: np.ndarray):
    """Per-sample gradients of the (un-averaged) losses.

    Returns ``(dense, pooled_grad)`` where ``dense`` has shape ``(n, P)``
    laid out like :meth:`DenseParams.flat` and ``pooled_grad`` is ``(n, d)``.
    """
    n = cache.logits.shape[0]
    if len(cache.pre) != len(params.weights):
        raise ValueError("cache does not match parameters")
    y = np.asarray(labels).astype(cache.logits.dtype)
    dlogit = cache.probs - y
    last = cache.acts[-1] if cache.acts else cache.pooled
    g_wout = dlogit[:, None] * last
    g_bout = dlogit[:, None]
    delta_in = dlogit[:, None] * params.w_out[None, :]
    layer_grads: list[tuple[np.ndarray, np.ndarray]] = []
    for l in range(len(params.weights) - 1, -1, -1):
        delta = delta_in * (cache.pre[l] > 0)
        below = cache.acts[l - 1] if l > 0 else cache.pooled
        g_w = delta[:, :, None] * below[:, None, :]
        layer_grads.append((g_w, delta))
        delta_in = _rowdot(delta, params.weights[l].T)
    layer_grads.reverse()
    parts = []
    for g_w, g_b in layer_grads:
        parts += [g_w.reshape(n, -1), g_b]
    parts += [g_wout, g_bout]
    return np.concatenate(parts, axis=1), delta_in


def sample_grads(params: DenseParams, samples: Sequence[Sample], rows: Mapping[int, np.ndarray]):
    """Pool, forward and backward for ``samples`` against fixed ``rows``."""
    pooled = pool_batch(samples, rows)
    labels = np.array([s.label for s in samples])
    losses, cache = forward(params, pooled, labels)
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError("non-finite loss")
    dense, pooled_grad = backward(params, cache, labels)
    return losses, dense, pooled_grad


def scatter_embedding_grads(samples: Sequence[Sample], pooled_grads: np.ndarray):
    """One (key, grad, sample_id) record per (sample, key): sum pooling passes the gradient through."""
    from nestpipe.embedding import KeyGrad

    if len(samples) != len(pooled_grads):
        raise ValueError("one pooled gradient per sample required")
    return [KeyGrad(k, pooled_grads[i], s.sample_id) for i, s in enumerate(samples) for k in s.keys]


def sgd_step(params: DenseParams, grad_sum: np.ndarray, batch_size: int, lr: float,
             wide: bool = False) -> DenseParams:
    flat = params.flat()
    if np.shape(grad_sum) != flat.shape:
        raise ValueError(f"gradient of shape {np.shape(grad_sum)} for {flat.shape} parameters")
    update = sgd_update_wide if wide else sgd_update
    return params.with_flat(update(flat, grad_sum, batch_size, lr))
