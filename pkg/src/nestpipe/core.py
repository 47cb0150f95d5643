"""Shared value types, counter-based randomness and canonical ordering rules."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arrays wrap on overflow
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@lru_cache(maxsize=None)
def _tag_word(purpose: str) -> int:
    digest = hashlib.blake2b(purpose.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class Prf:
    """Keyed pseudo-random function ``(purpose, indices) -> uint64``.

    Output depends only on the seed, the purpose tag and the index tuple,
    never on call order, so every worker and the oracle draw identical values.
    Index arguments may be integers or integer arrays (broadcast together).
    """

    seed: int

    def words(self, purpose: str, *indices) -> np.ndarray:
        with np.errstate(over="ignore"):
            state = _mix(np.asarray([(self.seed ^ _tag_word(purpose)) & _MASK64], dtype=np.uint64))[0]
            state = np.asarray(state, dtype=np.uint64)
            for pos, idx in enumerate(indices, start=1):
                idx = np.asarray(idx).astype(np.uint64)
                state = _mix(state ^ _mix(idx + _GOLDEN * np.uint64(pos)))
        return state

    def unit(self, purpose: str, *indices) -> np.ndarray:
        """Uniform float64 draws in [0, 1) with 53 random bits."""
        w = self.words(purpose, *indices)
        return (w >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, purpose: str, *indices, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        if not lo < hi:
            raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
        out = lo + (hi - lo) * self.unit(purpose, *indices)
        # rounding can land exactly on hi
        return np.where(out >= hi, np.nextafter(hi, lo), out)


def prf_uniform(prf: Prf, purpose: str, indices: tuple, lo: float, hi: float) -> float:
    """Scalar deterministic uniform draw in ``[lo, hi)``."""
    return float(prf.uniform(purpose, *indices, lo=lo, hi=hi))


def canonical_key_order(keys: Iterable[int]) -> list[int]:
    return sorted(set(int(k) for k in keys))


@dataclass(frozen=True)
class Sample:
    sample_id: int
    keys: tuple[int, ...]
    label: int

    def __post_init__(self) -> None:
        if not self.keys:
            raise ValueError(f"sample {self.sample_id}: empty key list")
        if any(b <= a for a, b in zip(self.keys, self.keys[1:])):
            raise ValueError(f"sample {self.sample_id}: keys not strictly ascending / distinct")
        if self.label not in (0, 1):
            raise ValueError(f"sample {self.sample_id}: label must be 0 or 1")

    @classmethod
    def from_keys(cls, sample_id: int, keys: Iterable[int], label: int) -> "Sample":
        """Build a sample, sorting keys; duplicate keys are rejected."""
        ks = [int(k) for k in keys]
        canon = canonical_key_order(ks)
        if len(canon) != len(ks):
            raise ValueError(f"sample {sample_id}: duplicate keys")
        return cls(int(sample_id), tuple(canon), int(label))


@dataclass(frozen=True)
class MicroBatch:
    parent_step: int
    index: int
    samples: tuple[Sample, ...]

    def key_set(self) -> list[int]:
        return canonical_key_order(k for s in self.samples for k in s.keys)


@dataclass(frozen=True)
class Batch:
    step: int
    samples: tuple[Sample, ...]

    def __post_init__(self) -> None:
        ids = [s.sample_id for s in self.samples]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("batch samples must be in ascending sample_id")

    def key_set(self) -> list[int]:
        return canonical_key_order(k for s in self.samples for k in s.keys)

    def split(self, num_workers: int) -> list[tuple[Sample, ...]]:
        """Canonical assignment: W contiguous equal slices, slice w to worker w."""
        n = len(self.samples)
        if n % num_workers:
            raise ValueError(f"batch of {n} not divisible by {num_workers} workers")
        per = n // num_workers
        return [self.samples[w * per:(w + 1) * per] for w in range(num_workers)]


@dataclass(frozen=True)
class TrainConfig:
    num_workers: int = 4
    vocab_size: int = 1000
    emb_dim: int = 8
    dense_layers: int = 2
    hidden_dim: int = 8
    batch_size: int = 64
    num_micro_batches: int = 4
    learning_rate: float = 0.05
    steps: int = 100
    seed: int = 0
    clustering_enabled: bool = True
    exact_order_mode: bool = True
    unsafe_six_stage: bool = False
    pipeline_depth: int = 5

    def __post_init__(self) -> None:
        checks = [
            ("num_workers", lambda: self.num_workers >= 1),
            ("vocab_size", lambda: self.vocab_size >= 1),
            ("emb_dim", lambda: self.emb_dim >= 1),
            ("dense_layers", lambda: self.dense_layers >= 0),
            ("hidden_dim", lambda: self.hidden_dim >= 1),
            ("num_micro_batches", lambda: self.num_micro_batches >= 1),
            ("batch_size", lambda: self.batch_size > 0
             and self.batch_size % (self.num_workers * self.num_micro_batches) == 0),
            ("learning_rate", lambda: self.learning_rate > 0),
            ("steps", lambda: self.steps >= 0),
            ("pipeline_depth", lambda: 1 <= self.pipeline_depth <= 5),
        ]
        # evaluated in order so later checks may rely on earlier ones
        for name, ok in checks:
            if not ok():
                raise ValueError(f"invalid TrainConfig field {name!r}: {getattr(self, name)!r}")

    @property
    def micro_batch_size(self) -> int:
        """Samples per micro-batch on one worker."""
        return self.batch_size // (self.num_workers * self.num_micro_batches)


# Arithmetic shared by the oracle and the distributed engine.  Summation order
# is part of the contract: rows are added strictly first to last.

def sequential_sum(rows: np.ndarray) -> np.ndarray:
    """Left-to-right sum over axis 0, in the dtype of ``rows``."""
    rows = np.asarray(rows)
    if rows.shape[0] == 0:
        return np.zeros(rows.shape[1:], dtype=rows.dtype)
    acc = rows[0].copy()
    for r in rows[1:]:
        acc = acc + r
    return acc


def segment_sequential_sum(rows: np.ndarray, segment_starts: Sequence[int]) -> np.ndarray:
    """Sequential sum of each contiguous segment of ``rows``.

    ``segment_starts`` are the first row index of each segment (ascending,
    first must be 0).  Vectorized across segments, strictly ordered within.
    """
    rows = np.asarray(rows)
    starts = np.asarray(segment_starts, dtype=np.int64)
    if len(starts) == 0:
        return np.zeros((0,) + rows.shape[1:], dtype=rows.dtype)
    ends = np.append(starts[1:], rows.shape[0])
    lengths = ends - starts
    acc = rows[starts].copy()
    for j in range(1, int(lengths.max())):
        live = lengths > j
        acc[live] = acc[live] + rows[starts[live] + j]
    return acc


def sgd_update(values: np.ndarray, grad_sum: np.ndarray, batch_size: int, lr: float) -> np.ndarray:
    """``values - lr * (grad_sum / batch_size)``, evaluated in ``values.dtype``."""
    dt = values.dtype
    g = np.asarray(grad_sum).astype(dt, copy=False)
    return (values - dt.type(lr) * (g / dt.type(batch_size))).astype(dt, copy=False)


def sgd_update_wide(values: np.ndarray, grad_sum64: np.ndarray, batch_size: int, lr: float) -> np.ndarray:
    """Fast-mode update: 64-bit gradient sum, result cast back to ``values.dtype``."""
    out = values.astype(np.float64) - lr * (np.asarray(grad_sum64, dtype=np.float64) / batch_size)
    return out.astype(values.dtype)
