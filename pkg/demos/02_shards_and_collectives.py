"""
Sharded embeddings and simulated collectives
============================================

Worker ``k % W`` owns key ``k``.  A batch's keys are deduplicated locally,
bucketed by owner and exchanged with an All2All; the owners deduplicate once
more and read the rows from host memory into a device buffer.
"""

import numpy as np

from nestpipe.core import Batch, Prf, Sample
from nestpipe.dbp import stage_key_routing
from nestpipe.embedding import HostShard, dedup, retrieve, shard_of
from nestpipe.fabric import all_reduce_sum, all_to_all

print(dedup([5, 3, 5, 9, 3]))
print([shard_of(k, 4) for k in (7, 0, 12)])

# %%
# Two workers: worker 0 holds a sample with keys {1, 2, 4}, worker 1 one with {2, 3}.
batch = Batch(1, (Sample(0, (1, 2, 4), 0), Sample(1, (2, 3), 1)))
requests = stage_key_routing(batch, 2)
print("owner requests:", requests)

# %%
# The owners fetch their rows.  Rows are created lazily from a keyed PRF,
# so the reference trainer draws the same initial values.
prf = Prf(0)
shards = [HostShard(o, 2, 4, prf) for o in range(2)]
buffers = [retrieve(shards[o], requests[o], step=1) for o in range(2)]
for o, buf in enumerate(buffers):
    print(f"worker {o} buffer:", {k: " ".join(f"{x:+.3f}" for x in v) for k, v in buf.rows.items()})

# %%
# All2All delivers ``payload[s][r]`` to receiver ``r`` in source order;
# AllReduce returns bit-identical sums on every worker.
print(all_to_all([[["B"], ["A"]], [["C"], []]]))
print(all_reduce_sum([np.array([1.0, 2.0]), np.array([3.0, 4.0])]))
