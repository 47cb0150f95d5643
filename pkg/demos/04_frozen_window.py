"""
Frozen-window micro-batching and key clustering
===============================================

Inside a batch the N micro-batches all read the same frozen parameters.
Gradients are held until the last micro-batch finishes and are then
applied once, so the result equals one synchronous step on the whole
batch.  Applying them per micro-batch instead changes the model.
"""

from nestpipe.core import Sample, TrainConfig
from nestpipe.dbp import run
from nestpipe.fwp import cluster_samples
from nestpipe.oracle import compare_trajectories, run_oracle
from nestpipe.workload import WorkloadConfig, gen_dataset, hot_key_dataset

samples = gen_dataset(WorkloadConfig(num_samples=64 * 8, seed=2))
cfg = TrainConfig(num_workers=2, batch_size=64, num_micro_batches=4, steps=8, pipeline_depth=1)
_, ref = run_oracle(samples, cfg)
print("frozen window:", compare_trajectories(ref, run(samples, cfg).trajectory).summary())

hot = hot_key_dataset(64 * 8, 8, 1000, seed=2)
_, ref_hot = run_oracle(hot, cfg)
naive = run(hot, cfg, naive_updates=True)
print("per-micro-batch updates:", compare_trajectories(ref_hot, naive.trajectory).summary())

# %%
# Dedup is scoped to a micro-batch, so a key shared by two micro-batches is
# sent twice.  Grouping samples that share keys shrinks the payload.
toy = [Sample.from_keys(i, ks, 0) for i, ks in enumerate([{1, 2}, {1, 3}, {4, 5}, {4, 6}])]
for mode in ("random", "clustered"):
    part = cluster_samples(toy, 2, mode, seed=1)
    print(f"{mode:9s}", [[s.sample_id for s in mb.samples] for mb in part.micro_batches],
          "keys sent:", part.payload_keys())

big = gen_dataset(WorkloadConfig(vocab_size=10**4, num_samples=512, zipf_skew=1.2, seed=5))
for mode in ("sequential", "random", "clustered"):
    print(f"{mode:10s} payload keys: {cluster_samples(big, 8, mode, seed=5).payload_keys()}")

# %%
# Clustering only regroups samples; the parameters do not change.
off = TrainConfig(**{**cfg.__dict__, "clustering_enabled": False})
print("clustering off:", compare_trajectories(ref, run(samples, off).trajectory).summary())
