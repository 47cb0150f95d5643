"""Single-context synchronous reference trainer and trajectory comparison.

The oracle has no shards, no buffers and no collectives: each step pools,
differentiates and updates the whole batch against one parameter version.
Distributed runs are certified by comparing their per-step snapshots with it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from nestpipe.core import Batch, Prf, Sample, TrainConfig, segment_sequential_sum, sequential_sum, sgd_update
from nestpipe.dense import DenseParams, sample_grads, sgd_step
from nestpipe.embedding import init_row


def iter_batches(samples: Sequence[Sample], batch_size: int, steps: int | None = None) -> Iterator[Batch]:
    """Consecutive full batches in ascending sample id, numbered from 1."""
    ordered = sorted(samples, key=lambda s: s.sample_id)
    n_full = len(ordered) // batch_size
    if steps is not None:
        n_full = min(n_full, steps)
    for t in range(n_full):
        yield Batch(t + 1, tuple(ordered[t * batch_size:(t + 1) * batch_size]))


@dataclass
class StepSnapshot:
    step: int
    dense: np.ndarray
    rows: dict[int, np.ndarray]
    rows_used: dict[int, np.ndarray]


@dataclass
class Trajectory:
    signature: tuple
    seed: int
    emb_dim: int
    initial_dense: np.ndarray
    steps: list[StepSnapshot] = field(default_factory=list)

    def version_row(self, version: int, key: int) -> np.ndarray:
        """Row ``key`` after ``version`` steps (0 = initialization)."""
        if version > 0:
            row = self.steps[version - 1].rows.get(key)
            if row is not None:
                return row
            return self.version_row(version - 1, key) if version > 1 else init_row(Prf(self.seed), key, self.emb_dim)
        return init_row(Prf(self.seed), key, self.emb_dim)


def run_signature(cfg: TrainConfig, samples: Sequence[Sample]) -> tuple:
    ids = tuple(s.sample_id for s in samples[:4])
    return (cfg.vocab_size, cfg.emb_dim, cfg.dense_layers, cfg.hidden_dim, cfg.batch_size,
            cfg.learning_rate, cfg.seed, len(samples), ids)


@dataclass
class OracleState:
    params: DenseParams
    table: dict[int, np.ndarray]
    prf: Prf
    emb_dim: int
    step: int = 0

    @classmethod
    def initial(cls, cfg: TrainConfig) -> "OracleState":
        prf = Prf(cfg.seed)
        return cls(DenseParams.init(prf, cfg.emb_dim, cfg.hidden_dim, cfg.dense_layers), {}, prf, cfg.emb_dim)

    def row(self, key: int) -> np.ndarray:
        r = self.table.get(key)
        if r is None:
            r = init_row(self.prf, key, self.emb_dim)
            self.table[key] = r
        return r


def sync_step(state: OracleState, batch: Batch, cfg: TrainConfig) -> tuple[OracleState, dict[int, np.ndarray]]:
    """One synchronous SGD step over the whole batch.

    Gradients are summed in ascending sample id, dense and sparse alike.
    Returns the new state and the rows the step read.
    """
    samples = sorted(batch.samples, key=lambda s: s.sample_id)
    used = {k: state.row(k).copy() for k in batch.key_set()}
    _, dense, pooled_grad = sample_grads(state.params, samples, used)
    params = sgd_step(state.params, sequential_sum(dense), len(samples), cfg.learning_rate)

    pairs = sorted((k, i) for i, s in enumerate(samples) for k in s.keys)
    keys = np.array([k for k, _ in pairs], dtype=np.int64)
    contrib = pooled_grad[[i for _, i in pairs]]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    table = dict(state.table)
    for k, g in zip(keys[starts].tolist(), segment_sequential_sum(contrib, starts)):
        table[k] = sgd_update(used[k], g, len(samples), cfg.learning_rate)
    new = OracleState(params, table, state.prf, state.emb_dim, state.step + 1)
    return new, used


def run_oracle(samples: Sequence[Sample], cfg: TrainConfig) -> tuple[OracleState, Trajectory]:
    state = OracleState.initial(cfg)
    traj = Trajectory(run_signature(cfg, samples), cfg.seed, cfg.emb_dim, state.params.flat())
    for batch in iter_batches(samples, cfg.batch_size, cfg.steps):
        state, used = sync_step(state, batch, cfg)
        traj.steps.append(StepSnapshot(batch.step, state.params.flat(), dict(state.table), used))
    return state, traj


@dataclass
class ConsistencyReport:
    steps_compared: int
    max_abs_dense_diff: float
    max_abs_embedding_diff: float
    first_divergent_step: int | None
    estimated_staleness_lag: int | None
    per_step: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        return self.first_divergent_step is None

    def to_json(self) -> str:
        return json.dumps({
            "steps_compared": self.steps_compared,
            "max_abs_dense_diff": self.max_abs_dense_diff,
            "max_abs_embedding_diff": self.max_abs_embedding_diff,
            "first_divergent_step": self.first_divergent_step,
            "estimated_staleness_lag": self.estimated_staleness_lag,
            "per_step": [{"step": s, "dense_diff": d, "embedding_diff": e} for s, d, e in self.per_step],
        }, indent=1)

    def summary(self) -> str:
        verdict = "consistent" if self.consistent else f"diverged at step {self.first_divergent_step}"
        lag = "" if self.estimated_staleness_lag is None else f", staleness lag {self.estimated_staleness_lag}"
        return (f"{self.steps_compared} steps compared: {verdict}{lag}; "
                f"max |d dense| = {self.max_abs_dense_diff:.3e}, "
                f"max |d embedding| = {self.max_abs_embedding_diff:.3e}")


class ConfigMismatch(ValueError):
    pass


def _rows_diff(a: dict, b: dict, fallback) -> float:
    worst = 0.0
    for k in a.keys() | b.keys():
        ra = a.get(k)
        rb = b.get(k)
        if ra is None:
            ra = fallback(k)
        if rb is None:
            rb = fallback(k)
        worst = max(worst, float(np.max(np.abs(ra.astype(np.float64) - rb.astype(np.float64)))))
    return worst


def compare_trajectories(ref: Trajectory, other: Trajectory, tolerance: float = 0.0,
                         max_lag: int = 3) -> ConsistencyReport:
    """Per-step max-abs differences of ``other`` against ``ref``.

    At the first step exceeding ``tolerance``, the rows ``other`` read are
    matched against ``ref``'s versions from 1..``max_lag`` steps earlier to
    estimate the staleness lag.
    """
    if ref.signature != other.signature:
        raise ConfigMismatch(f"trajectories from different configs: {ref.signature} vs {other.signature}")
    n = min(len(ref.steps), len(other.steps))
    init = lambda k: init_row(Prf(ref.seed), k, ref.emb_dim)  # noqa: E731
    per_step = []
    first = None
    max_d = max_e = 0.0
    for i in range(n):
        a, b = ref.steps[i], other.steps[i]
        d = float(np.max(np.abs(a.dense.astype(np.float64) - b.dense.astype(np.float64)))) if a.dense.size else 0.0
        e = _rows_diff(a.rows, b.rows, init)
        per_step.append((a.step, d, e))
        max_d, max_e = max(max_d, d), max(max_e, e)
        if first is None and max(d, e) > tolerance:
            first = a.step
    lag = None
    if first is not None:
        lag = _estimate_lag(ref, other, first, max_lag)
    return ConsistencyReport(n, max_d, max_e, first, lag, per_step)


def _estimate_lag(ref: Trajectory, other: Trajectory, step: int, max_lag: int) -> int | None:
    used_ref = ref.steps[step - 1].rows_used
    used_other = other.steps[step - 1].rows_used
    stale = [k for k in used_other
             if k in used_ref and not np.array_equal(used_other[k], used_ref[k])]
    if not stale:
        return None
    for tau in range(1, max_lag + 1):
        version = step - 1 - tau
        if version < 0:
            break
        if all(np.array_equal(used_other[k], ref.version_row(version, k)) for k in stale):
            return tau
    return None
