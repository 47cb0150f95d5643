"""Inter-batch five-stage pipeline with dual-buffer synchronization.

Stages: prefetch -> h2d -> key_routing -> retrieval -> fwd_bwd.  The engine
advances every in-flight batch one stage per tick (up to ``pipeline_depth``
batches in flight).  Within a tick the phases run in dependency order:

1. the batch entering fwd_bwd swaps its prefetch buffer to active,
2. the batch entering retrieval reads its rows from the host shards,
3. fwd_bwd runs the frozen window and applies its gradients,
4. the retrieving batch synchronizes its prefetch buffer against the active
   one (skipped in unsafe six-stage mode),
5. fwd_bwd writes its dirty rows back to the host.

The read in (2) may precede the write-back of the batch ahead; (4) is what
repairs the rows both batches touch.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from nestpipe.core import Batch, Prf, Sample, TrainConfig
from nestpipe.dense import DenseParams
from nestpipe.embedding import (
    WorkerStore,
    dedup,
    dual_buffer_sync,
    merged_rows,
    retrieve,
    shard_of,
    swap_buffers,
    write_back,
)
from nestpipe.fabric import all_to_all
from nestpipe.fwp import Partition, cluster_samples, run_frozen_window
from nestpipe.oracle import StepSnapshot, Trajectory, run_signature

log = logging.getLogger(__name__)

STAGES = ("prefetch", "h2d", "key_routing", "retrieval", "fwd_bwd")


class EndOfData(Exception):
    pass


@dataclass
class StageRecord:
    step: int
    stage: str
    start: int
    end: int = -1


@dataclass
class EventRecord:
    step: int
    event: str  # swap | read | apply | sync | write_back
    seq: int


class DatasetCursor:
    def __init__(self, samples: Sequence[Sample]):
        self.samples = sorted(samples, key=lambda s: s.sample_id)
        self.pos = 0

    def remaining(self) -> int:
        return len(self.samples) - self.pos


def stage_prefetch(cursor: DatasetCursor, batch_size: int, step: int) -> Batch:
    """Next ``batch_size`` samples; never a partial batch."""
    if cursor.remaining() < batch_size:
        raise EndOfData(f"{cursor.remaining()} samples left, batch needs {batch_size}")
    chunk = cursor.samples[cursor.pos:cursor.pos + batch_size]
    cursor.pos += batch_size
    return Batch(step, tuple(chunk))


def stage_h2d(batch: Batch) -> Batch:
    return batch


def stage_key_routing(batch: Batch, num_workers: int) -> list[list[int]]:
    """Ascending unique key requests per owner for the whole batch.

    Sources dedup their local keys and bucket them by owner; owners dedup the
    union of what they receive.
    """
    payloads = []
    for local in batch.split(num_workers):
        unique, _ = dedup([k for s in local for k in s.keys])
        buckets: list[list[int]] = [[] for _ in range(num_workers)]
        for k in unique:
            buckets[shard_of(k, num_workers)].append(k)
        payloads.append(buckets)
    received = all_to_all(payloads)
    return [dedup([k for src in received[o] for k in src])[0] for o in range(num_workers)]


def stage_retrieval(requests: Sequence[Sequence[int]], stores: Sequence[WorkerStore], step: int) -> None:
    """Load each owner's requested rows into its prefetch buffer."""
    for o, st in enumerate(stores):
        if st.prefetch.step != step:
            raise RuntimeError(f"worker {o}: prefetch buffer reserved for step {st.prefetch.step}, not {step}")
        retrieve(st.shard, requests[o], step, buffer=st.prefetch)


def stage_sync(stores: Sequence[WorkerStore], safe: bool = True) -> list[int]:
    """Dual-buffer sync on every worker; returns the keys flagged stale.

    In unsafe mode nothing is copied: rows the active batch updated are left
    at their pre-update values in the prefetch buffer and recorded as stale.
    """
    stale = []
    for st in stores:
        if safe:
            dual_buffer_sync(st.active, st.prefetch)
        else:
            for k in sorted(st.active.rows.keys() & st.prefetch.rows.keys()):
                if not np.array_equal(st.active.rows[k], st.prefetch.rows[k]):
                    st.prefetch.stale.add(k)
                    stale.append(k)
    return stale


def local_partitions(batch: Batch, cfg: TrainConfig, mode: str | None = None) -> list[Partition]:
    mode = mode or ("clustered" if cfg.clustering_enabled else "sequential")
    return [cluster_samples(local, cfg.num_micro_batches, mode, cfg.seed, batch.step)
            for local in batch.split(cfg.num_workers)]


def stage_fwd_bwd(batch: Batch, parts: Sequence[Partition], stores: Sequence[WorkerStore],
                  params: Sequence[DenseParams], cfg: TrainConfig, naive_updates: bool = False):
    """Frozen window then gradient application; write-back is a separate phase."""
    return run_frozen_window(batch.samples, parts, stores, params, cfg, naive_updates=naive_updates)


@dataclass
class _InFlight:
    step: int
    stage: int
    batch: Batch | None = None
    parts: list[Partition] | None = None
    requests: list[list[int]] | None = None


@dataclass
class RunResult:
    params: DenseParams
    replicas: list[DenseParams]
    stores: list[WorkerStore]
    records: list[StageRecord]
    events: list[EventRecord]
    trajectory: Trajectory
    steps_run: int
    emb_keys: dict[int, list[list[int]]] = field(default_factory=dict)
    stale_keys: dict[int, list[int]] = field(default_factory=dict)

    def rows(self) -> dict[int, np.ndarray]:
        return merged_rows(st.shard for st in self.stores)

    def write_records_csv(self, path: str | os.PathLike) -> None:
        """One row per (record, worker): step, stage, worker, start_seq, end_seq."""
        W = len(self.stores)
        with open(path, "w", newline="") as fh:
            fh.write("# schema=1\n")
            w = csv.writer(fh)
            w.writerow(["step", "stage", "worker", "start_seq", "end_seq"])
            for r in self.records:
                for worker in range(W):
                    w.writerow([r.step, r.stage, worker, r.start, r.end])


class Pipeline:
    """Functional DBP engine over ``num_workers`` logical workers."""

    def __init__(self, samples: Sequence[Sample], cfg: TrainConfig, naive_updates: bool = False):
        self.cfg = cfg
        self.samples = samples
        self.naive_updates = naive_updates
        prf = Prf(cfg.seed)
        self.stores = [WorkerStore.fresh(o, cfg.num_workers, cfg.emb_dim, prf) for o in range(cfg.num_workers)]
        init = DenseParams.init(prf, cfg.emb_dim, cfg.hidden_dim, cfg.dense_layers)
        self.params = [init.with_flat(init.flat()) for _ in range(cfg.num_workers)]
        self.records: list[StageRecord] = []
        self.events: list[EventRecord] = []
        self._open: dict[tuple[int, str], StageRecord] = {}
        self._seq = 0

    def _tick_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _start(self, step: int, stage: str) -> None:
        rec = StageRecord(step, stage, self._tick_seq())
        self._open[(step, stage)] = rec
        self.records.append(rec)

    def _end(self, step: int, stage: str) -> None:
        self._open.pop((step, stage)).end = self._tick_seq()

    def _event(self, step: int, event: str) -> None:
        self.events.append(EventRecord(step, event, self._tick_seq()))

    def run(self) -> RunResult:
        cfg = self.cfg
        W = cfg.num_workers
        cursor = DatasetCursor(self.samples)
        traj = Trajectory(run_signature(cfg, self.samples), cfg.seed, cfg.emb_dim, self.params[0].flat())
        emb_keys: dict[int, list[list[int]]] = {}
        stale_keys: dict[int, list[int]] = {}
        inflight: list[_InFlight] = []
        next_step = 1
        done = 0
        while True:
            for f in inflight:
                f.stage += 1
            can_admit = (next_step <= cfg.steps and len(inflight) < cfg.pipeline_depth
                         and cursor.remaining() >= cfg.batch_size)
            if can_admit:
                inflight.append(_InFlight(next_step, 0))
                next_step += 1
            if not inflight:
                break
            by_stage = {STAGES[f.stage]: f for f in inflight}
            fb = by_stage.get("fwd_bwd")
            rt = by_stage.get("retrieval")

            if fb is not None:
                for st in self.stores:
                    swap_buffers(st)
                self._event(fb.step, "swap")
                self._start(fb.step, "fwd_bwd")
            if rt is not None:
                self._start(rt.step, "retrieval")
                stage_retrieval(rt.requests, self.stores, rt.step)
                self._event(rt.step, "read")
            kr = by_stage.get("key_routing")
            if kr is not None:
                self._start(kr.step, "key_routing")
                kr.requests = stage_key_routing(kr.batch, W)
                self._end(kr.step, "key_routing")
            hd = by_stage.get("h2d")
            if hd is not None:
                self._start(hd.step, "h2d")
                hd.batch = stage_h2d(hd.batch)
                self._end(hd.step, "h2d")
            pf = by_stage.get("prefetch")
            if pf is not None:
                self._start(pf.step, "prefetch")
                pf.batch = stage_prefetch(cursor, cfg.batch_size, pf.step)
                # clustering is a CPU-side pre-pass of data preparation
                pf.parts = local_partitions(pf.batch, cfg)
                self._end(pf.step, "prefetch")
            if fb is not None:
                result = stage_fwd_bwd(fb.batch, fb.parts, self.stores, self.params, cfg, self.naive_updates)
                self.params = result.params
                emb_keys[fb.step] = result.emb_keys
                self._event(fb.step, "apply")
            if rt is not None:
                stale = stage_sync(self.stores, safe=not cfg.unsafe_six_stage)
                if stale:
                    stale_keys[rt.step] = stale
                    log.debug("step %d: %d stale rows", rt.step, len(stale))
                self._event(rt.step, "sync")
                self._end(rt.step, "retrieval")
            if fb is not None:
                for st in self.stores:
                    write_back(st.active, st.shard)
                self._event(fb.step, "write_back")
                self._end(fb.step, "fwd_bwd")
                traj.steps.append(StepSnapshot(fb.step, self.params[0].flat(),
                                               merged_rows(st.shard for st in self.stores),
                                               result.rows_used))
                inflight.remove(fb)
                done += 1
        return RunResult(self.params[0], self.params, self.stores, self.records, self.events,
                         traj, done, emb_keys, stale_keys)


def run(samples: Sequence[Sample], cfg: TrainConfig, naive_updates: bool = False) -> RunResult:
    return Pipeline(samples, cfg, naive_updates).run()


MODES = ("sync-baseline", "dbp-only", "fwp-only", "nestpipe", "unsafe-six-stage")


def config_for_mode(cfg: TrainConfig, mode: str) -> TrainConfig:
    """Functional settings for a named mode.

    ``fwp-only`` and ``nestpipe`` keep ``cfg.num_micro_batches``; the other
    modes run whole batches.  Pipelined modes keep ``cfg.pipeline_depth``.
    """
    if mode == "sync-baseline":
        return dataclasses.replace(cfg, pipeline_depth=1, num_micro_batches=1, unsafe_six_stage=False)
    if mode == "dbp-only":
        return dataclasses.replace(cfg, num_micro_batches=1, unsafe_six_stage=False)
    if mode == "fwp-only":
        return dataclasses.replace(cfg, pipeline_depth=1, unsafe_six_stage=False)
    if mode == "nestpipe":
        return dataclasses.replace(cfg, unsafe_six_stage=False)
    if mode == "unsafe-six-stage":
        return dataclasses.replace(cfg, unsafe_six_stage=True)
    raise ValueError(f"unknown mode {mode!r}")
