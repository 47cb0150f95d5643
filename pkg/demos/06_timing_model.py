"""
Where the time goes: a discrete-event model
===========================================

Events run on five lanes (CPU prep, H2D, interconnect, host retrieval,
compute).  The same per-event costs are scheduled four ways: fully
synchronous, with the inter-batch pipeline only, with the intra-batch
overlap only, and with both.
"""

from nestpipe.fwp import build_schedule_dag
from nestpipe.timing import (CostModel, compare_modes, compute_dominant_costs, exposed_ratio,
                             profile_from_samples, simulate_dag)
from nestpipe.workload import WorkloadConfig, gen_dataset

# %%
# Inside one batch only the first embedding exchange and the last gradient
# exchange stay exposed, as long as each micro-batch's compute covers the
# two exchanges running beside it.
no_ar = CostModel(allreduce_cost=0.0)
for n in (1, 2, 4, 8, 16):
    r = exposed_ratio(simulate_dag(build_schedule_dag([10] * n, 8), no_ar, comm_cost=0.5, compute_cost=1.0))
    print(f"N={n:2d}: exposed ratio {r:.4f}  (1/N = {1 / n:.4f})")

# %%
# When one exchange costs more than one micro-batch of compute, the overlap collapses.
for comm in (0.5, 1.0, 3.0):
    r = exposed_ratio(simulate_dag(build_schedule_dag([10] * 8, 8), no_ar, comm_cost=comm, compute_cost=1.0))
    print(f"exchange {comm:.1f} ms vs compute 1.0 ms: exposed ratio {r:.3f}")

# %%
# Scaling sweep under a compute-dominant calibration.
samples = gen_dataset(WorkloadConfig(vocab_size=100000, num_samples=512, keys_per_sample=32, seed=1))
prof = profile_from_samples(samples, 8)
rows = compare_modes(prof, compute_dominant_costs(), [128, 256, 512, 1024, 1536])
print(f"{'mode':14s} {'W':>5s} {'step ms':>8s} {'lookup':>7s} {'comm exp':>8s} {'util':>6s}")
for r in rows:
    print(f"{r.mode:14s} {r.workers:5d} {r.step_latency_ms:8.2f} {r.lookup_ms:7.2f} "
          f"{r.comm_exposed_ms:8.2f} {r.utilization:6.3f}")
