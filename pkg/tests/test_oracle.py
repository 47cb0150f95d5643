from types import SimpleNamespace

import numpy as np
import pytest

from nestpipe.core import Batch, Sample, TrainConfig
from nestpipe.dbp import run
from nestpipe.dense import DenseParams
from nestpipe.oracle import ConfigMismatch, OracleState, compare_trajectories, iter_batches, run_oracle, sync_step
from nestpipe.workload import WorkloadConfig, gen_dataset


def _cfg(**kw):
    base = dict(num_workers=1, vocab_size=100, emb_dim=4, dense_layers=1, hidden_dim=4, batch_size=8,
                num_micro_batches=1, steps=5)
    base.update(kw)
    return TrainConfig(**base)


def test_closed_form_single_sample():
    cfg = _cfg(emb_dim=1, dense_layers=0, batch_size=1, learning_rate=0.1)
    state = OracleState.initial(cfg)
    state.params = DenseParams([], [], np.array([1.0], np.float32), np.array([0.0], np.float32))
    state.table[3] = np.array([0.0], np.float32)
    new, used = sync_step(state, Batch(1, (Sample(0, (3,), 1),)), cfg)
    assert used[3].tolist() == [0.0]
    assert new.table[3][0] == pytest.approx(0.5 * 0.1)
    # d/dw_out = dlogit * x = 0; d/db_out = -0.5
    assert new.params.w_out.tolist() == [1.0]
    assert new.params.b_out[0] == pytest.approx(0.05)


def test_zero_step_is_identity():
    # TrainConfig requires lr > 0; the oracle arithmetic itself accepts lr = 0
    cfg = _cfg()
    samples = gen_dataset(WorkloadConfig(vocab_size=100, num_samples=8, keys_per_sample=3))
    state = OracleState.initial(cfg)
    before = state.params.flat().copy()
    new, used = sync_step(state, next(iter_batches(samples, 8)), SimpleNamespace(learning_rate=0.0))
    assert new.params.flat().tobytes() == before.tobytes()
    assert all(new.table[k].tobytes() == used[k].tobytes() for k in used)


def test_order_independence():
    cfg = _cfg()
    samples = gen_dataset(WorkloadConfig(vocab_size=100, num_samples=8, keys_per_sample=3, seed=2))
    batch = next(iter_batches(samples, 8))
    a, _ = sync_step(OracleState.initial(cfg), batch, cfg)
    shuffled = Batch.__new__(Batch)
    object.__setattr__(shuffled, "step", 1)
    object.__setattr__(shuffled, "samples", tuple(reversed(batch.samples)))
    b, _ = sync_step(OracleState.initial(cfg), shuffled, cfg)
    assert a.params.flat().tobytes() == b.params.flat().tobytes()
    assert all(a.table[k].tobytes() == b.table[k].tobytes() for k in a.table)


def test_oracle_self_consistency():
    samples = gen_dataset(WorkloadConfig(vocab_size=100, num_samples=40, keys_per_sample=3))
    _, t1 = run_oracle(samples, _cfg())
    _, t2 = run_oracle(samples, _cfg())
    rep = compare_trajectories(t1, t2)
    assert rep.consistent and rep.max_abs_dense_diff == 0 and rep.steps_compared == 5


def test_iter_batches():
    samples = gen_dataset(WorkloadConfig(num_samples=20))
    batches = list(iter_batches(samples, 8))
    assert [b.step for b in batches] == [1, 2]
    assert list(iter_batches(samples, 8, steps=1))[0].step == 1


def test_config_mismatch():
    samples = gen_dataset(WorkloadConfig(vocab_size=100, num_samples=40, keys_per_sample=3))
    _, a = run_oracle(samples, _cfg())
    _, b = run_oracle(samples, _cfg(learning_rate=0.01))
    with pytest.raises(ConfigMismatch):
        compare_trajectories(a, b)


def test_report_json_and_summary():
    samples = gen_dataset(WorkloadConfig(vocab_size=100, num_samples=40, keys_per_sample=3))
    _, ref = run_oracle(samples, _cfg())
    rep = compare_trajectories(ref, run(samples, _cfg()).trajectory)
    assert '"first_divergent_step": null' in rep.to_json()
    assert "consistent" in rep.summary()


def test_tolerance_respected():
    samples = gen_dataset(WorkloadConfig(vocab_size=100, num_samples=40, keys_per_sample=3))
    cfg = _cfg(exact_order_mode=False, num_workers=2, num_micro_batches=2)
    _, ref = run_oracle(samples, cfg)
    rep = compare_trajectories(ref, run(samples, cfg).trajectory, tolerance=1e-6)
    assert rep.consistent
