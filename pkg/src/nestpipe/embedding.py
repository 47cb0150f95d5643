"""Sharded hierarchical embedding store.

Each worker owns a host shard (rows with ``key % W == owner``) and two device
buffers that alternate between the *active* role (serves the batch being
trained, receives its gradients) and the *prefetch* role (preloads the next
batch).  Rows are float32 and materialize lazily from the PRF.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from nestpipe.core import Prf, segment_sequential_sum, sgd_update, sgd_update_wide


class ShardViolation(ValueError):
    """A key was routed to a worker that does not own it."""


class OrderingViolation(RuntimeError):
    """A pipeline dependency was not satisfied."""


def shard_of(key: int, num_workers: int) -> int:
    if num_workers < 1:
        raise ValueError("num_workers must be >= 1")
    return int(key) % num_workers


def dedup(keys: Sequence[int]) -> tuple[list[int], list[int]]:
    """Return ascending unique keys and, per input position, its index in them."""
    if len(keys) == 0:
        return [], []
    unique, inverse = np.unique(np.asarray(keys, dtype=np.int64), return_inverse=True)
    return unique.tolist(), inverse.ravel().tolist()


def init_row(prf: Prf, key: int, d: int) -> np.ndarray:
    if d < 1:
        raise ValueError("emb_dim must be >= 1")
    bound = 1.0 / np.sqrt(d)
    vals = prf.uniform("emb", key, np.arange(d), lo=-bound, hi=bound).astype(np.float32)
    # float32 rounding may reach the bound itself
    lim = np.float32(bound)
    return np.where(np.abs(vals) >= lim, np.nextafter(vals, np.float32(0)), vals).astype(np.float32)


@dataclass
class KeyGrad:
    key: int
    grad: np.ndarray
    contributor: int | None = None


@dataclass
class HostShard:
    owner: int
    num_workers: int
    emb_dim: int
    prf: Prf
    rows: dict[int, np.ndarray] = field(default_factory=dict)

    def check(self, key: int) -> None:
        if shard_of(key, self.num_workers) != self.owner:
            raise ShardViolation(f"key {key} belongs to worker {shard_of(key, self.num_workers)}, "
                                 f"not {self.owner}")

    def get(self, key: int) -> np.ndarray:
        self.check(key)
        row = self.rows.get(key)
        if row is None:
            row = init_row(self.prf, key, self.emb_dim)
            self.rows[key] = row
        return row


@dataclass
class HbmBuffer:
    role: str
    step: int
    owner: int
    rows: dict[int, np.ndarray] = field(default_factory=dict)
    dirty: set[int] = field(default_factory=set)
    applied: bool = False
    written_back: bool = False
    stale: set[int] = field(default_factory=set)

    def clear(self) -> None:
        self.rows = {}
        self.dirty = set()
        self.applied = False
        self.written_back = False
        self.stale = set()

    def matrix(self, keys: Sequence[int]) -> np.ndarray:
        """Stack the rows for ``keys`` (copies)."""
        if len(keys) == 0:
            d = next(iter(self.rows.values())).shape[0] if self.rows else 0
            return np.zeros((0, d), dtype=np.float32)
        return np.stack([self.rows[k] for k in keys])


def retrieve(shard: HostShard, keys: Sequence[int], step: int = 0,
             buffer: HbmBuffer | None = None) -> HbmBuffer:
    """Load ``keys`` from the host shard into a prefetch buffer.

    Rows never written are initialized (and recorded in the shard).  When
    ``buffer`` is given it is refilled in place.
    """
    for k in keys:
        shard.check(k)
    if buffer is None:
        buffer = HbmBuffer(role="prefetch", step=step, owner=shard.owner)
    else:
        buffer.clear()
        buffer.step = step
    for k in keys:
        buffer.rows[int(k)] = shard.get(int(k)).copy()
    return buffer


def dual_buffer_sync(active: HbmBuffer, prefetch: HbmBuffer) -> list[int]:
    """Copy rows shared by both buffers from active into prefetch.

    Returns the synchronized keys.
    """
    if active.step != prefetch.step - 1:
        raise OrderingViolation(f"sync of step {prefetch.step} against active step {active.step}")
    if not active.applied:
        raise OrderingViolation(f"sync of step {prefetch.step} before gradients of step "
                                f"{active.step} were applied")
    shared = sorted(active.rows.keys() & prefetch.rows.keys())
    for k in shared:
        prefetch.rows[k] = active.rows[k].copy()
    return shared


def apply_sparse_grads(buffer: HbmBuffer, grads: Sequence[KeyGrad], batch_size: int, lr: float,
                       exact_order: bool = True) -> None:
    """Apply ``e_k -= lr * sum(contributions) / batch_size`` once per key.

    Exact-order mode sums float32 contributions sorted by contributor
    sample id.  Otherwise contributions are summed in float64 in the order
    given (callers pass them in (micro-batch, source worker) order).
    """
    for g in grads:
        if g.key not in buffer.rows:
            raise KeyError(f"gradient for key {g.key} absent from buffer of worker {buffer.owner}")
    buffer.applied = True
    if not grads:
        return
    if exact_order:
        if any(g.contributor is None for g in grads):
            raise ValueError("exact-order mode needs contributor sample ids")
        order = sorted(range(len(grads)), key=lambda i: (grads[i].key, grads[i].contributor))
        keys = np.fromiter((grads[i].key for i in order), dtype=np.int64, count=len(order))
        rows = np.stack([np.asarray(grads[i].grad, dtype=np.float32) for i in order])
        starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
        sums = segment_sequential_sum(rows, starts)
        for key, g in zip(keys[starts].tolist(), sums):
            buffer.rows[key] = sgd_update(buffer.rows[key], g, batch_size, lr)
            buffer.dirty.add(key)
    else:
        acc: dict[int, np.ndarray] = {}
        for g in grads:
            cur = acc.get(g.key)
            gv = np.asarray(g.grad, dtype=np.float64)
            acc[g.key] = gv.copy() if cur is None else cur + gv
        for key in sorted(acc):
            buffer.rows[key] = sgd_update_wide(buffer.rows[key], acc[key], batch_size, lr)
            buffer.dirty.add(key)


def write_back(buffer: HbmBuffer, shard: HostShard) -> None:
    if buffer.owner != shard.owner:
        raise ShardViolation(f"buffer of worker {buffer.owner} written to shard {shard.owner}")
    for k in sorted(buffer.dirty):
        shard.check(k)
        shard.rows[k] = buffer.rows[k].copy()
    buffer.written_back = True


@dataclass
class WorkerStore:
    """One worker's host shard plus its two device buffers."""

    shard: HostShard
    active: HbmBuffer
    prefetch: HbmBuffer

    @classmethod
    def fresh(cls, owner: int, num_workers: int, emb_dim: int, prf: Prf, first_step: int = 1):
        shard = HostShard(owner, num_workers, emb_dim, prf)
        # placeholder active buffer: "step 0" with nothing to apply
        active = HbmBuffer("active", first_step - 1, owner, applied=True, written_back=True)
        prefetch = HbmBuffer("prefetch", first_step, owner)
        return cls(shard, active, prefetch)


def swap_buffers(store: WorkerStore) -> WorkerStore:
    """Promote prefetch to active; recycle the old active as an empty prefetch."""
    if not store.active.written_back:
        raise OrderingViolation(f"swap before write-back of step {store.active.step}")
    old_active, new_active = store.active, store.prefetch
    new_active.role = "active"
    old_active.clear()
    old_active.role = "prefetch"
    old_active.step = new_active.step + 1
    store.active, store.prefetch = new_active, old_active
    return store


_HEADER = struct.Struct("<4sIII")


def dump_shard(path: str | os.PathLike, shard: HostShard) -> None:
    """Binary dump: header, then ascending (uint64 key, float32[d] row) records, little-endian."""
    keys = sorted(shard.rows)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(b"NPSH", shard.owner, shard.emb_dim, len(keys)))
        for k in keys:
            fh.write(struct.pack("<Q", k))
            fh.write(shard.rows[k].astype("<f4").tobytes())


def load_shard_rows(path: str | os.PathLike) -> tuple[int, dict[int, np.ndarray]]:
    with open(path, "rb") as fh:
        magic, owner, d, n = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != b"NPSH":
            raise ValueError(f"{path}: not a shard dump")
        rows = {}
        for _ in range(n):
            (k,) = struct.unpack("<Q", fh.read(8))
            rows[k] = np.frombuffer(fh.read(4 * d), dtype="<f4").astype(np.float32)
    return owner, rows


def merged_rows(shards: Iterable[HostShard]) -> dict[int, np.ndarray]:
    out: dict[int, np.ndarray] = {}
    for sh in shards:
        out.update(sh.rows)
    return out
