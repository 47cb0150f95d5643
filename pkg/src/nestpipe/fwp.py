"""Intra-batch frozen-window execution.

A batch is split into N micro-batches.  For each micro-batch the embedding
rows are fetched from the owners' frozen active buffers, dense compute runs
against the frozen parameters, and gradients travel back to the owners.
Nothing is updated until the last micro-batch closes the window, so the
result equals one synchronous step on the whole batch.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from nestpipe.core import MicroBatch, Prf, Sample, TrainConfig, canonical_key_order, sequential_sum
from nestpipe.dense import DenseParams, sample_grads, scatter_embedding_grads, sgd_step
from nestpipe.embedding import KeyGrad, WorkerStore, apply_sparse_grads, shard_of
from nestpipe.fabric import all_reduce_sum, all_to_all

MODES = ("sequential", "random", "clustered")


@dataclass(frozen=True)
class Partition:
    micro_batches: tuple[MicroBatch, ...]
    provenance: str

    def payload_keys(self) -> int:
        """Total keys transmitted when dedup is scoped to each micro-batch."""
        return sum(len(mb.key_set()) for mb in self.micro_batches)


def cluster_samples(samples: Sequence[Sample], n_micro: int, mode: str = "clustered",
                    seed: int = 0, step: int = 0) -> Partition:
    """Split ``samples`` into ``n_micro`` equal micro-batches.

    ``clustered`` runs greedy agglomeration: seed each group with the largest
    unassigned sample, then repeatedly add the sample sharing the most keys
    with the group (ties: fewer new keys, then lower sample id).
    """
    n = len(samples)
    if n_micro < 1 or n % n_micro:
        raise ValueError(f"{n} samples cannot be split into {n_micro} equal micro-batches")
    size = n // n_micro
    ordered = sorted(samples, key=lambda s: s.sample_id)
    if mode == "sequential":
        groups = [ordered[i * size:(i + 1) * size] for i in range(n_micro)]
    elif mode == "random":
        prf = Prf(seed)
        ids = np.array([s.sample_id for s in ordered])
        perm = np.argsort(prf.words("shuffle", step, ids), kind="stable")
        shuffled = [ordered[i] for i in perm]
        groups = [shuffled[i * size:(i + 1) * size] for i in range(n_micro)]
    elif mode == "clustered":
        groups = _greedy_clusters(ordered, n_micro, size)
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    mbs = tuple(
        MicroBatch(step, i + 1, tuple(sorted(g, key=lambda s: s.sample_id)))
        for i, g in enumerate(groups)
    )
    return Partition(mbs, mode)


def _greedy_clusters(ordered: list[Sample], n_micro: int, size: int) -> list[list[Sample]]:
    n = len(ordered)
    key_count = np.array([len(s.keys) for s in ordered])
    ids = np.array([s.sample_id for s in ordered])
    holders: dict[int, list[int]] = defaultdict(list)
    for i, s in enumerate(ordered):
        for k in s.keys:
            holders[k].append(i)
    # seeding order: descending key-set size, then ascending sample id
    seed_order = sorted(range(n), key=lambda i: (-key_count[i], ids[i]))
    assigned = np.zeros(n, dtype=bool)
    groups = []
    for _ in range(n_micro):
        first = next(i for i in seed_order if not assigned[i])
        members = [first]
        assigned[first] = True
        union: set[int] = set()
        overlap = np.zeros(n, dtype=np.int64)

        def absorb(i: int) -> None:
            for k in ordered[i].keys:
                if k not in union:
                    union.add(k)
                    overlap[holders[k]] += 1

        absorb(first)
        while len(members) < size:
            cand = np.flatnonzero(~assigned)
            growth = key_count[cand] - overlap[cand]
            # lexsort: last key is primary
            pick = cand[np.lexsort((ids[cand], growth, -overlap[cand]))[0]]
            members.append(int(pick))
            assigned[pick] = True
            absorb(int(pick))
        groups.append([ordered[i] for i in members])
    return groups


def microbatch_routing(micro_batch: MicroBatch, num_workers: int) -> list[list[int]]:
    """Per-owner key requests for one micro-batch; dedup is local to it."""
    buckets: list[list[int]] = [[] for _ in range(num_workers)]
    for k in micro_batch.key_set():
        buckets[shard_of(k, num_workers)].append(k)
    return buckets


class WindowViolation(AssertionError):
    """A parameter or buffer changed while the frozen window was open."""


def _digest(params: Sequence[DenseParams], stores: Sequence[WorkerStore]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for p in params:
        h.update(p.to_bytes())
    for st in stores:
        for k in sorted(st.active.rows):
            h.update(k.to_bytes(8, "little"))
            h.update(st.active.rows[k].tobytes())
    return h.hexdigest()


@dataclass
class FrozenAccumulator:
    """Gradient store for one window; parameters stay untouched until it closes."""

    num_workers: int
    exact_order: bool
    sparse: list[list[KeyGrad]] = field(default_factory=list)
    dense_rows: list[dict[int, np.ndarray]] = field(default_factory=list)
    dense_sums: list[np.ndarray | None] = field(default_factory=list)
    closed: bool = False

    def __post_init__(self) -> None:
        self.sparse = [[] for _ in range(self.num_workers)]
        self.dense_rows = [{} for _ in range(self.num_workers)]
        self.dense_sums = [None for _ in range(self.num_workers)]

    def add_dense(self, worker: int, sample_ids: Sequence[int], grads: np.ndarray) -> None:
        if self.closed:
            raise RuntimeError("accumulator already closed")
        if self.exact_order:
            for sid, g in zip(sample_ids, grads):
                self.dense_rows[worker][sid] = g
        else:
            part = grads.astype(np.float64).sum(axis=0)
            cur = self.dense_sums[worker]
            self.dense_sums[worker] = part if cur is None else cur + part

    def close(self) -> None:
        if self.closed:
            raise RuntimeError("accumulator closed twice")
        self.closed = True


@dataclass
class WindowResult:
    params: list[DenseParams]
    rows_used: dict[int, np.ndarray]
    emb_keys: list[list[int]]   # [micro-batch][worker] -> keys requested
    losses: dict[int, float]


def _local_key_grads(samples, pooled_grads, exact_order: bool) -> list[KeyGrad]:
    records = scatter_embedding_grads(samples, pooled_grads)
    if exact_order:
        return records
    sums: dict[int, np.ndarray] = {}
    for r in records:
        g = r.grad.astype(np.float64)
        sums[r.key] = g if r.key not in sums else sums[r.key] + g
    return [KeyGrad(k, sums[k]) for k in sorted(sums)]


def run_frozen_window(batch_samples: Sequence[Sample], parts: Sequence[Partition],
                      stores: Sequence[WorkerStore], params: Sequence[DenseParams],
                      cfg: TrainConfig, naive_updates: bool = False) -> WindowResult:
    """Execute one batch's frozen window across all workers.

    ``parts[w]`` is worker ``w``'s partition of its local samples into N
    micro-batches; ``stores[w].active`` holds the rows worker ``w`` owns for
    this batch.  Updates land in the active buffers and in fresh parameter
    replicas.  ``naive_updates`` applies each micro-batch's gradients
    immediately; it breaks equivalence and exists for contrast only.
    """
    W = cfg.num_workers
    n_micro = len(parts[0].micro_batches)
    batch_size = len(batch_samples)
    exact = cfg.exact_order_mode
    position = {s.sample_id: i for i, s in enumerate(sorted(batch_samples, key=lambda s: s.sample_id))}
    acc = FrozenAccumulator(W, exact)
    params = list(params)
    rows_used: dict[int, np.ndarray] = {}
    emb_keys: list[list[int]] = []
    losses: dict[int, float] = {}
    opened = None if naive_updates else _digest(params, stores)

    for i in range(n_micro):
        mbs = [parts[w].micro_batches[i] for w in range(W)]
        requests = [microbatch_routing(mb, W) for mb in mbs]
        emb_keys.append([sum(len(b) for b in req) for req in requests])
        incoming = all_to_all(requests)
        replies = [
            [stores[o].active.matrix(incoming[o][src]) for src in range(W)]
            for o in range(W)
        ]
        delivered = all_to_all([[[m] for m in replies[o]] for o in range(W)])
        grad_out: list[list[list[KeyGrad]]] = []
        for w in range(W):
            local_rows: dict[int, np.ndarray] = {}
            for o in range(W):
                (mat,) = delivered[w][o]
                for k, row in zip(requests[w][o], mat):
                    local_rows[k] = row
            rows_used.update(local_rows)
            samples = mbs[w].samples
            if samples:
                loss, dense, pooled_grad = sample_grads(params[w], samples, local_rows)
                losses.update({s.sample_id: float(l) for s, l in zip(samples, loss)})
                acc.add_dense(w, [s.sample_id for s in samples], dense)
                key_grads = _local_key_grads(samples, pooled_grad, exact)
            else:
                key_grads = []
            buckets: list[list[KeyGrad]] = [[] for _ in range(W)]
            for kg in key_grads:
                buckets[shard_of(kg.key, W)].append(kg)
            grad_out.append(buckets)
        received = all_to_all(grad_out)
        for o in range(W):
            for src in range(W):
                acc.sparse[o].extend(received[o][src])
        if naive_updates:
            params = _apply(acc, params, stores, position, batch_size, cfg)
            acc = FrozenAccumulator(W, exact)

    if naive_updates:
        return WindowResult(params, rows_used, emb_keys, losses)
    if _digest(params, stores) != opened:
        raise WindowViolation("parameters changed inside the frozen window")
    params = _apply(acc, params, stores, position, batch_size, cfg)
    return WindowResult(params, rows_used, emb_keys, losses)


def _apply(acc: FrozenAccumulator, params, stores, position, batch_size, cfg) -> list[DenseParams]:
    acc.close()
    W = cfg.num_workers
    n_params = params[0].size
    if acc.exact_order:
        # each worker fills its samples' slots; the reduction assembles all of them
        slots = []
        for w in range(W):
            m = np.zeros((batch_size, n_params), dtype=np.float32)
            for sid, g in acc.dense_rows[w].items():
                m[position[sid]] = g
            slots.append(m)
        gathered = all_reduce_sum(slots)
        new = [sgd_step(params[w], sequential_sum(gathered[w]), batch_size, cfg.learning_rate)
               for w in range(W)]
    else:
        sums = [s if s is not None else np.zeros(n_params) for s in acc.dense_sums]
        reduced = all_reduce_sum(sums)
        new = [sgd_step(params[w], reduced[w], batch_size, cfg.learning_rate, wide=True)
               for w in range(W)]
    for o in range(W):
        apply_sparse_grads(stores[o].active, acc.sparse[o], batch_size, cfg.learning_rate,
                           exact_order=acc.exact_order)
    return new


@dataclass(frozen=True)
class DagNode:
    name: str
    kind: str  # emb_a2a | compute | grad_a2a | allreduce | apply
    index: int
    payload_bytes: int = 0
    samples: int = 0


@dataclass
class ScheduleDag:
    nodes: list[DagNode]
    edges: list[tuple[str, str]]
    comm_chain: list[str]
    compute_chain: list[str]

    def node(self, name: str) -> DagNode:
        return next(n for n in self.nodes if n.name == name)

    def to_json(self) -> str:
        return json.dumps({
            "nodes": [{"id": n.name, "type": n.kind, "index": n.index,
                       "payload_bytes": n.payload_bytes, "samples": n.samples} for n in self.nodes],
            "edges": [list(e) for e in self.edges],
            "comm_chain": self.comm_chain,
            "compute_chain": self.compute_chain,
        }, indent=1)

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "ScheduleDag":
        obj = json.loads(text)
        nodes = [DagNode(n["id"], n["type"], n["index"], n["payload_bytes"], n["samples"])
                 for n in obj["nodes"]]
        return cls(nodes, [tuple(e) for e in obj["edges"]], obj["comm_chain"], obj["compute_chain"])


def comm_order(n_micro: int) -> list[str]:
    """Communication stream order: prefetch embeddings one micro-batch ahead.

    emb_1, emb_2, grad_1, emb_3, grad_2, ..., emb_N, grad_{N-1}, grad_N
    """
    order = ["emb_a2a_1"]
    for i in range(2, n_micro + 1):
        order += [f"emb_a2a_{i}", f"grad_a2a_{i - 1}"]
    order.append(f"grad_a2a_{n_micro}")
    return order


def build_schedule_dag(partition: Partition | Sequence[int], emb_dim: int,
                       samples_per_micro: Sequence[int] | None = None,
                       overlap_allreduce: bool = False) -> ScheduleDag:
    """Two-stream dependency DAG for one batch.

    ``partition`` is either a :class:`Partition` or the list of per
    micro-batch unique key counts.  Payloads are ``keys * emb_dim * 4`` bytes
    for both the embedding and the gradient All2All.
    """
    if isinstance(partition, Partition):
        key_counts = [len(mb.key_set()) for mb in partition.micro_batches]
        sample_counts = [len(mb.samples) for mb in partition.micro_batches]
    else:
        key_counts = list(partition)
        sample_counts = list(samples_per_micro) if samples_per_micro is not None else [0] * len(key_counts)
    n = len(key_counts)
    if n < 1:
        raise ValueError("need at least one micro-batch")
    nodes: list[DagNode] = []
    edges: list[tuple[str, str]] = []
    for i in range(1, n + 1):
        nbytes = key_counts[i - 1] * emb_dim * 4
        nodes += [DagNode(f"emb_a2a_{i}", "emb_a2a", i, nbytes, 0),
                  DagNode(f"compute_{i}", "compute", i, 0, sample_counts[i - 1]),
                  DagNode(f"grad_a2a_{i}", "grad_a2a", i, nbytes, 0)]
        edges += [(f"emb_a2a_{i}", f"compute_{i}"), (f"compute_{i}", f"grad_a2a_{i}")]
    nodes += [DagNode("allreduce", "allreduce", 0), DagNode("apply", "apply", 0)]
    chain = comm_order(n)
    if overlap_allreduce:
        chain = chain[:-1] + ["allreduce", chain[-1]]
        edges.append((f"compute_{n}", "allreduce"))
    else:
        chain = chain + ["allreduce"]
    compute_chain = [f"compute_{i}" for i in range(1, n + 1)]
    edges += list(zip(chain, chain[1:]))
    edges += list(zip(compute_chain, compute_chain[1:]))
    edges += [(f"grad_a2a_{i}", "apply") for i in range(1, n + 1)]
    edges.append(("allreduce", "apply"))
    # dedupe while keeping order
    seen, uniq = set(), []
    for e in edges:
        if e not in seen:
            seen.add(e)
            uniq.append(e)
    return ScheduleDag(nodes, uniq, chain, compute_chain)
