"""
Five-stage pipeline with dual buffers
=====================================

Batches move through prefetch, H2D, key routing, retrieval and fwd/bwd,
one stage per tick, with up to five in flight.  Batch t reads its rows
while batch t-1 is still training, so a hot key read by both would be
stale.  The sync step copies the freshly updated rows from the active
buffer into the prefetch buffer before batch t uses them.
"""

from nestpipe.core import TrainConfig
from nestpipe.dbp import run
from nestpipe.oracle import compare_trajectories, run_oracle
from nestpipe.workload import hot_key_dataset

samples = hot_key_dataset(64 * 10, 8, 1000, hot_key=0, seed=0)
cfg = TrainConfig(num_workers=4, batch_size=64, num_micro_batches=1, steps=10, pipeline_depth=5)

res = run(samples, cfg)
print("stage records for batch 3:")
for r in res.records:
    if r.step == 3:
        print(f"  {r.stage:12s} seq {r.start:3d}..{r.end:3d}")

# %%
# Event order around one batch boundary: batch 3 reads before batch 2 has
# written back, and syncs only after batch 2 has applied its gradients.
seq = {(e.step, e.event): e.seq for e in res.events}
for key in [(3, "read"), (2, "apply"), (3, "sync"), (2, "write_back"), (3, "swap")]:
    print(f"  step {key[0]} {key[1]:10s} at seq {seq[key]}")

# %%
# With the sync, the pipelined run equals the synchronous reference.
# Without it (the unsafe six-stage variant) batch 2 trains on a stale hot row.
_, ref = run_oracle(samples, cfg)
print("safe:  ", compare_trajectories(ref, res.trajectory).summary())
unsafe = TrainConfig(**{**cfg.__dict__, "unsafe_six_stage": True})
print("unsafe:", compare_trajectories(ref, run(samples, unsafe).trajectory).summary())
