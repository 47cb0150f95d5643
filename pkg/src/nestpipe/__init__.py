"""Nested pipelining for decentralized sparse-embedding training.

A deterministic functional engine (dual-buffer inter-batch pipelining plus
frozen-window micro-batch execution), a synchronous reference trainer to
certify exact consistency, and a discrete-event timing model.
"""

from nestpipe.core import (
    Batch,
    MicroBatch,
    Prf,
    Sample,
    TrainConfig,
    canonical_key_order,
    prf_uniform,
)
from nestpipe.workload import WorkloadConfig, gen_dataset, read_dataset, write_dataset

__all__ = [
    "Batch",
    "MicroBatch",
    "Prf",
    "Sample",
    "TrainConfig",
    "WorkloadConfig",
    "canonical_key_order",
    "gen_dataset",
    "prf_uniform",
    "read_dataset",
    "write_dataset",
]

__version__ = "0.1.0"
