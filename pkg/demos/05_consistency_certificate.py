"""
Bitwise agreement with the synchronous reference
================================================

The reference trainer has no shards, buffers or collectives.  A pipelined
run is certified by comparing every step's dense parameters and every
materialized embedding row with it.  Agreement is exact because per-sample
math does not depend on batch composition and every reduction adds its
terms in ascending sample id.
"""

import time

from nestpipe.core import TrainConfig
from nestpipe.dbp import config_for_mode, run
from nestpipe.oracle import compare_trajectories, run_oracle
from nestpipe.workload import WorkloadConfig, gen_dataset

samples = gen_dataset(WorkloadConfig())
cfg = TrainConfig()  # W=4, d=8, L=2, |B|=64, N=4, depth 5, 100 steps

t0 = time.perf_counter()
_, ref = run_oracle(samples, cfg)
print(f"reference: {time.perf_counter() - t0:.2f}s")

for mode in ("sync-baseline", "dbp-only", "fwp-only", "nestpipe"):
    t0 = time.perf_counter()
    res = run(samples, config_for_mode(cfg, mode))
    rep = compare_trajectories(ref, res.trajectory)
    print(f"{mode:14s} {time.perf_counter() - t0:5.2f}s  {rep.summary()}")

# %%
# Fast mode drops the canonical order and accumulates in 64 bits.  It is no
# longer bitwise equal, but stays within float32 noise.
fast = TrainConfig(exact_order_mode=False)
_, ref_fast = run_oracle(samples, fast)
print("fast mode:", compare_trajectories(ref_fast, run(samples, fast).trajectory, tolerance=1e-5).summary())
