"""
Synthetic Zipf workloads
========================

Each sample is a handful of sparse keys plus a binary label.  Keys follow a
Zipf law over the vocabulary, so a few hot keys show up in almost every
batch.  That overlap is what both pipelining layers have to live with.
"""

import tempfile
from pathlib import Path

import numpy as np

from nestpipe.workload import WorkloadConfig, gen_dataset, key_frequencies, rank_to_key, read_dataset, write_dataset

cfg = WorkloadConfig(vocab_size=1000, num_samples=6400, keys_per_sample=8, zipf_skew=1.0, seed=0)
samples = gen_dataset(cfg)
print(samples[0])

# %%
# Popularity by rank.  The rank-to-key map is a seeded permutation, so hot
# keys land on every shard instead of all on worker 0.
freq = key_frequencies(samples, cfg.vocab_size)
perm = rank_to_key(cfg.vocab_size, cfg.seed)
for rank in (0, 1, 9, 99, 999):
    print(f"rank {rank + 1:4d}: key {perm[rank]:4d} appears in {freq[perm[rank]]:5d} samples")

# %%
# Skew controls how concentrated the traffic is.
for s in (0.0, 0.6, 1.0, 1.4):
    f = key_frequencies(gen_dataset(WorkloadConfig(num_samples=2000, zipf_skew=s)), 1000)
    top10 = np.sort(f)[::-1][:10].sum() / f.sum()
    print(f"skew {s:.1f}: top-10 keys carry {top10:.1%} of lookups")

# %%
# The JSON Lines file round-trips exactly.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "dataset.jsonl"
    write_dataset(path, samples[:5])
    print(path.read_text().splitlines()[0])
    assert read_dataset(path) == samples[:5]
