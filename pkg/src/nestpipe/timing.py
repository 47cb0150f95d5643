"""Discrete-event performance model for the pipelined schedules.

Events run on five resource lanes (CPU prep, H2D engine, interconnect,
host-memory retrieval, compute).  :func:`simulate` is a priority-ordered
list scheduler: events are placed in priority order, each at the earliest
gap on its lane that opens after all predecessors have finished.
"""

from __future__ import annotations

import csv
import dataclasses
import heapq
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from nestpipe.fwp import ScheduleDag, build_schedule_dag, cluster_samples

LANES = ("cpu", "h2d", "interconnect", "retrieval", "compute")
CATEGORIES = ("lookup", "comm", "compute", "other")


@dataclass(frozen=True)
class CostModel:
    a2a_base: float = 1.0
    a2a_per_worker: float = 0.002
    a2a_per_worker2: float = 0.0
    a2a_per_byte: float = 1e-5
    h2d_per_byte: float = 1e-6
    prep_per_sample: float = 0.02
    retrieval_per_key: float = 0.005
    sync_cost: float = 0.5
    compute_per_sample_per_layer: float = 0.01
    allreduce_cost: float = 1.0

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"CostModel.{f.name} must be non-negative")

    def scaled(self, **factors: float) -> "CostModel":
        return dataclasses.replace(self, **{k: getattr(self, k) * v for k, v in factors.items()})


def cost_a2a(payload_bytes: float, num_workers: int, cm: CostModel) -> float:
    """Affine All2All latency in workers and bytes (plus optional W^2 term)."""
    if num_workers < 1:
        raise ValueError("num_workers must be >= 1")
    return (cm.a2a_base + cm.a2a_per_worker * num_workers
            + cm.a2a_per_worker2 * num_workers ** 2 + cm.a2a_per_byte * payload_bytes)


@dataclass
class Event:
    name: str
    lane: str
    duration: float
    deps: tuple[str, ...] = ()
    category: str = "other"
    priority: tuple = ()
    step: int = 0


@dataclass(frozen=True)
class TimedEvent:
    name: str
    lane: str
    category: str
    step: int
    start: float
    end: float


class CyclicScheduleError(ValueError):
    pass


def _merge(iv: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for a, b in sorted(iv):
        if b <= a:
            continue
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def _clip(iv, lo: float, hi: float):
    return [(max(a, lo), min(b, hi)) for a, b in iv if min(b, hi) > max(a, lo)]


def _measure(iv) -> float:
    return sum(b - a for a, b in iv)


def _subtract(a_iv, b_iv):
    """Parts of merged intervals ``a_iv`` not covered by merged ``b_iv``."""
    out = []
    for a, b in a_iv:
        cur = a
        for c, d in b_iv:
            if d <= cur or c >= b:
                continue
            if c > cur:
                out.append((cur, c))
            cur = max(cur, d)
            if cur >= b:
                break
        if cur < b:
            out.append((cur, b))
    return out


@dataclass
class Timeline:
    events: list[TimedEvent]

    def by_name(self, name: str) -> TimedEvent:
        return next(e for e in self.events if e.name == name)

    @property
    def span(self) -> tuple[float, float]:
        return (min(e.start for e in self.events), max(e.end for e in self.events))

    def intervals(self, lane: str | None = None, category: str | None = None):
        return _merge((e.start, e.end) for e in self.events
                      if (lane is None or e.lane == lane) and (category is None or e.category == category))

    def breakdown(self, window: tuple[float, float] | None = None) -> dict[str, float]:
        """Time decomposition of a window.

        compute: compute work; comm_exposed: communication while the compute
        lane is idle; lookup: lookup work while neither compute nor
        communication is active.
        """
        lo, hi = window or self.span
        compute_lane = _clip(self.intervals(lane="compute"), lo, hi)
        compute = _clip(self.intervals(lane="compute", category="compute"), lo, hi)
        comm = _clip(self.intervals(category="comm"), lo, hi)
        lookup = _clip(self.intervals(category="lookup"), lo, hi)
        comm_total = sum(max(0.0, min(e.end, hi) - max(e.start, lo))
                         for e in self.events if e.category == "comm")
        return {
            "span_ms": hi - lo,
            "compute_ms": _measure(compute),
            "compute_lane_ms": _measure(compute_lane),
            "comm_total_ms": comm_total,
            "comm_exposed_ms": _measure(_subtract(comm, compute_lane)),
            "lookup_ms": _measure(_subtract(lookup, _merge(compute + comm))),
        }

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# schema=1\n")
            w = csv.writer(fh)
            w.writerow(["lane", "event", "start_ms", "end_ms"])
            for e in sorted(self.events, key=lambda e: (e.start, LANES.index(e.lane) if e.lane in LANES else 99, e.name)):
                w.writerow([e.lane, e.name, f"{e.start:.6f}", f"{e.end:.6f}"])


def simulate(events: Sequence[Event]) -> Timeline:
    """Priority-ordered list scheduling with gap insertion on each lane.

    Among events whose predecessors are all placed, the one with the
    smallest ``(priority, name)`` goes next; it starts at the earliest time
    that is after every predecessor's end and fits in a free gap of its lane.
    """
    by_name = {e.name: e for e in events}
    if len(by_name) != len(events):
        raise ValueError("duplicate event names")
    succ: dict[str, list[str]] = {e.name: [] for e in events}
    missing = {e.name: 0 for e in events}
    for e in events:
        for d in e.deps:
            if d not in by_name:
                raise ValueError(f"{e.name} depends on unknown event {d}")
            succ[d].append(e.name)
            missing[e.name] += 1
    ready = [(e.priority, e.name) for e in events if missing[e.name] == 0]
    heapq.heapify(ready)
    busy: dict[str, list[tuple[float, float]]] = {}
    placed: dict[str, TimedEvent] = {}
    while ready:
        _, name = heapq.heappop(ready)
        e = by_name[name]
        t = max((placed[d].end for d in e.deps), default=0.0)
        lane = busy.setdefault(e.lane, [])
        start = t
        # zero-length markers occupy nothing and wait for nothing but their deps
        if e.duration > 0:
            for bs, be in lane:
                if start + e.duration <= bs:
                    break
                if be > start:
                    start = be
        end = start + e.duration
        if e.duration > 0:
            lane.append((start, end))
            lane.sort()
        placed[name] = TimedEvent(name, e.lane, e.category, e.step, start, end)
        for s in succ[name]:
            missing[s] -= 1
            if missing[s] == 0:
                heapq.heappush(ready, (by_name[s].priority, s))
    if len(placed) != len(events):
        raise CyclicScheduleError("schedule has a dependency cycle")
    return Timeline([placed[e.name] for e in events])


def exposed_ratio(timeline: Timeline, window: tuple[float, float] | None = None) -> float:
    """Share of communication time not concurrent with compute-lane activity."""
    b = timeline.breakdown(window)
    if b["comm_total_ms"] == 0:
        return 0.0
    return b["comm_exposed_ms"] / b["comm_total_ms"]


def utilization(timeline: Timeline, window: tuple[float, float] | None = None) -> float:
    if not timeline.events:
        raise ValueError("empty timeline")
    b = timeline.breakdown(window)
    if b["span_ms"] == 0:
        raise ValueError("timeline spans zero time")
    return b["compute_lane_ms"] / b["span_ms"]


# -- plans -----------------------------------------------------------------

_KIND_RANK = {"emb_a2a": 0, "compute": 1, "grad_a2a": 2, "allreduce": 3, "apply": 4}


def _topo_positions(dag: ScheduleDag) -> dict[str, int]:
    preds: dict[str, set[str]] = {n.name: set() for n in dag.nodes}
    for u, v in dag.edges:
        preds[v].add(u)
    kind = {n.name: (_KIND_RANK[n.kind], n.index) for n in dag.nodes}
    done: dict[str, int] = {}
    heap = [(kind[n], n) for n, p in preds.items() if not p]
    heapq.heapify(heap)
    while heap:
        _, n = heapq.heappop(heap)
        done[n] = len(done)
        for v, p in preds.items():
            if n in p:
                p.discard(n)
                if not p and v not in done and all(v != h[1] for h in heap):
                    heapq.heappush(heap, (kind[v], v))
    if len(done) != len(preds):
        raise CyclicScheduleError("schedule DAG has a cycle")
    return done


def dag_events(dag: ScheduleDag, cm: CostModel, num_workers: int, dense_layers: int,
               prefix: str = "", step: int = 0, priority: tuple = (), after: Sequence[str] = (),
               comm_cost: float | None = None, compute_cost: float | None = None) -> list[Event]:
    """Events for one batch's frozen window.

    ``comm_cost``/``compute_cost`` override the cost model with uniform
    per-event costs (used for closed-form checks).
    """
    pos = _topo_positions(dag)
    preds: dict[str, list[str]] = {n.name: [] for n in dag.nodes}
    for u, v in dag.edges:
        preds[v].append(prefix + u)
    roots = [n.name for n in dag.nodes if not preds[n.name]]
    for r in roots:
        preds[r] = list(after)
    out = []
    for n in dag.nodes:
        if n.kind in ("emb_a2a", "grad_a2a"):
            lane, cat = "interconnect", "comm"
            dur = comm_cost if comm_cost is not None else cost_a2a(n.payload_bytes, num_workers, cm)
        elif n.kind == "allreduce":
            lane, cat, dur = "interconnect", "comm", cm.allreduce_cost
        elif n.kind == "compute":
            lane, cat = "compute", "compute"
            dur = (compute_cost if compute_cost is not None
                   else cm.compute_per_sample_per_layer * n.samples * (dense_layers + 1))
        else:
            lane, cat, dur = "compute", "other", 0.0
        out.append(Event(prefix + n.name, lane, dur, tuple(preds[n.name]), cat,
                         priority + (pos[n.name],), step))
    return out


def simulate_dag(dag: ScheduleDag, cm: CostModel | None = None, num_workers: int = 1, dense_layers: int = 1,
                 comm_cost: float | None = None, compute_cost: float | None = None) -> Timeline:
    return simulate(dag_events(dag, cm or CostModel(), num_workers, dense_layers,
                               comm_cost=comm_cost, compute_cost=compute_cost))


@dataclass(frozen=True)
class BatchProfile:
    """Per-worker workload shape of one batch, as the cost model sees it."""

    local_samples: int
    keys_per_sample: float
    local_unique_keys: int
    owner_keys: int
    micro_keys: tuple[int, ...]
    micro_samples: tuple[int, ...]

    @property
    def n_micro(self) -> int:
        return len(self.micro_keys)


def profile_from_samples(local_samples, n_micro: int, mode: str = "clustered", seed: int = 0) -> BatchProfile:
    part = cluster_samples(local_samples, n_micro, mode, seed)
    keys = {k for s in local_samples for k in s.keys}
    return BatchProfile(
        local_samples=len(local_samples),
        keys_per_sample=float(np.mean([len(s.keys) for s in local_samples])),
        local_unique_keys=len(keys),
        owner_keys=len(keys),
        micro_keys=tuple(len(mb.key_set()) for mb in part.micro_batches),
        micro_samples=tuple(len(mb.samples) for mb in part.micro_batches),
    )


def admission_ticks(steps: int, depth: int) -> list[int]:
    """Tick at which each batch enters the prefetch stage (five one-tick stages)."""
    ticks: list[int] = []
    for t in range(steps):
        a = ticks[-1] + 1 if ticks else 1
        if t >= depth:
            a = max(a, ticks[t - depth] + 5)
        ticks.append(a)
    return ticks


# phase order inside one tick, mirrors the functional engine
_PHASE = {"swap": 0, "read": 1, "body": 2, "route": 3, "h2d": 4, "prep": 5, "sync": 6, "write_back": 7}


@dataclass(frozen=True)
class PlanSpec:
    num_workers: int
    steps: int = 16
    depth: int = 5
    fwp: bool = True
    emb_dim: int = 64
    dense_layers: int = 3
    overlap_allreduce: bool = False
    stage_costs: tuple[float, float, float, float, float] | None = None


def pipeline_events(profile: BatchProfile, cm: CostModel, spec: PlanSpec) -> list[Event]:
    """Five-stage DBP plan for ``spec.steps`` batches.

    With ``spec.fwp`` the fwd/bwd stage is the two-stream frozen-window DAG;
    otherwise micro-batches run strictly one after another on a single
    serialized chain.  ``spec.stage_costs`` replaces the derived per-stage
    costs (prep, h2d, routing, retrieval, fwd/bwd) with fixed numbers and
    collapses fwd/bwd into one compute event.
    """
    W = spec.num_workers
    ticks = admission_ticks(spec.steps, spec.depth)
    if spec.stage_costs is not None:
        prep, h2d, route, read, fb = spec.stage_costs
    else:
        prep = cm.prep_per_sample * profile.local_samples
        h2d = cm.h2d_per_byte * profile.local_samples * profile.keys_per_sample * 8
        route = cost_a2a(profile.local_unique_keys * 8, W, cm)
        read = cm.retrieval_per_key * profile.owner_keys
    dag = build_schedule_dag(list(profile.micro_keys), spec.emb_dim, list(profile.micro_samples),
                             overlap_allreduce=spec.overlap_allreduce)
    if not spec.fwp:
        dag = _serialize(dag)
    events: list[Event] = []
    for i in range(spec.steps):
        t = i + 1
        a = ticks[i]
        P = lambda tick, phase: (tick, _PHASE[phase])  # noqa: E731
        prep_deps = (f"b{t - spec.depth}.write_back",) if t > spec.depth else ()
        events.append(Event(f"b{t}.prep", "cpu", prep, prep_deps, "lookup", P(a, "prep"), t))
        events.append(Event(f"b{t}.h2d", "h2d", h2d, (f"b{t}.prep",), "lookup", P(a + 1, "h2d"), t))
        events.append(Event(f"b{t}.route", "interconnect", route, (f"b{t}.h2d",), "lookup", P(a + 2, "route"), t))
        read_deps = (f"b{t}.route",) + ((f"b{t - 1}.swap",) if t > 1 else ())
        events.append(Event(f"b{t}.read", "retrieval", read, read_deps, "lookup", P(a + 3, "read"), t))
        sync_deps = (f"b{t}.read",) + ((f"b{t - 1}.apply",) if t > 1 else ())
        events.append(Event(f"b{t}.sync", "compute", cm.sync_cost, sync_deps, "lookup", P(a + 3, "sync"), t))
        swap_deps = (f"b{t}.sync",) + ((f"b{t - 1}.write_back",) if t > 1 else ())
        events.append(Event(f"b{t}.swap", "compute", 0.0, swap_deps, "other", P(a + 4, "swap"), t))
        if spec.stage_costs is not None:
            events.append(Event(f"b{t}.fwd_bwd", "compute", fb, (f"b{t}.swap",), "compute", P(a + 4, "body"), t))
            events.append(Event(f"b{t}.apply", "compute", 0.0, (f"b{t}.fwd_bwd",), "other", P(a + 4, "body") + (1,), t))
        else:
            events += dag_events(dag, cm, W, spec.dense_layers, prefix=f"b{t}.", step=t,
                                 priority=P(a + 4, "body"), after=(f"b{t}.swap",))
        events.append(Event(f"b{t}.write_back", "retrieval", 0.0, (f"b{t}.apply",), "other",
                            P(a + 4, "write_back"), t))
    return events


def _serialize(dag: ScheduleDag) -> ScheduleDag:
    """Same events, one chain: emb_1, compute_1, grad_1, emb_2, ... (no overlap)."""
    n = len(dag.compute_chain)
    chain = []
    for i in range(1, n + 1):
        chain += [f"emb_a2a_{i}", f"compute_{i}", f"grad_a2a_{i}"]
    chain.append("allreduce")
    edges = list(zip(chain, chain[1:])) + [("allreduce", "apply")]
    edges += [(f"grad_a2a_{i}", "apply") for i in range(1, n + 1)]
    return ScheduleDag(list(dag.nodes), edges, [c for c in chain if not c.startswith("compute")],
                       list(dag.compute_chain))


@dataclass
class StepMetrics:
    step: int
    mode: str
    workers: int
    step_latency_ms: float
    lookup_ms: float
    comm_total_ms: float
    comm_exposed_ms: float
    compute_ms: float
    exposed_ratio: float
    utilization: float
    qps: float

    COLUMNS = ("step", "mode", "workers", "step_latency_ms", "lookup_ms", "comm_total_ms",
               "comm_exposed_ms", "compute_ms", "exposed_ratio", "utilization", "qps")

    def row(self) -> list:
        return [getattr(self, c) for c in self.COLUMNS]


def steady_state(timeline: Timeline, steps: int) -> tuple[tuple[float, float], int]:
    """Window between the write-backs of batch ``steps // 2`` and the last batch."""
    first = max(1, steps // 2)
    lo = timeline.by_name(f"b{first}.write_back").end
    hi = timeline.by_name(f"b{steps}.write_back").end
    if steps == 1 or hi <= lo:
        return timeline.span, 1
    return (lo, hi), steps - first


def step_metrics(timeline: Timeline, steps: int, mode: str, workers: int, global_batch: int) -> StepMetrics:
    window, n = steady_state(timeline, steps)
    b = timeline.breakdown(window)
    latency = b["span_ms"] / n
    return StepMetrics(
        step=steps, mode=mode, workers=workers,
        step_latency_ms=latency,
        lookup_ms=b["lookup_ms"] / n,
        comm_total_ms=b["comm_total_ms"] / n,
        comm_exposed_ms=b["comm_exposed_ms"] / n,
        compute_ms=b["compute_ms"] / n,
        exposed_ratio=b["comm_exposed_ms"] / b["comm_total_ms"] if b["comm_total_ms"] else 0.0,
        utilization=b["compute_lane_ms"] / b["span_ms"] if b["span_ms"] else 0.0,
        qps=global_batch / (latency / 1000.0) if latency > 0 else float("inf"),
    )


MODE_SETTINGS = {
    "sync-baseline": dict(depth=1, fwp=False),
    "dbp-only": dict(depth=5, fwp=False),
    "fwp-only": dict(depth=1, fwp=True),
    "nestpipe": dict(depth=5, fwp=True),
}


def simulate_mode(profile: BatchProfile, cm: CostModel, mode: str, workers: int, steps: int = 16,
                  emb_dim: int = 64, dense_layers: int = 3, depth: int | None = None,
                  overlap_allreduce: bool = False) -> tuple[StepMetrics, Timeline]:
    settings = dict(MODE_SETTINGS[mode])
    if depth is not None and settings["depth"] > 1:
        settings["depth"] = depth
    spec = PlanSpec(workers, steps, settings["depth"], settings["fwp"], emb_dim, dense_layers, overlap_allreduce)
    tl = simulate(pipeline_events(profile, cm, spec))
    return step_metrics(tl, steps, mode, workers, profile.local_samples * workers), tl


def compare_modes(profile: BatchProfile, cm: CostModel, workers: Sequence[int],
                  modes: Sequence[str] = tuple(MODE_SETTINGS), steps: int = 16, emb_dim: int = 64,
                  dense_layers: int = 3, depth: int | None = None) -> list[StepMetrics]:
    """One metrics row per (mode, W).

    All modes share the same per-event costs (the same micro-batches); they
    differ only in which segments may overlap.
    """
    rows = []
    for mode in modes:
        for w in workers:
            rows.append(simulate_mode(profile, cm, mode, w, steps, emb_dim, dense_layers, depth)[0])
    return rows


def write_metrics_csv(path: str | os.PathLike, rows: Sequence[StepMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema=1\n")
        w = csv.writer(fh)
        w.writerow(StepMetrics.COLUMNS)
        for r in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r.row()])


def compute_dominant_costs() -> CostModel:
    """Calibration where dense compute dwarfs every pipelined overhead.

    Lookup and full-batch communication are each substantial, so the
    synchronous baseline spends most of a step waiting, while nested
    pipelining can hide nearly all of it.
    """
    return CostModel(
        a2a_base=0.2,
        a2a_per_worker=0.004,
        a2a_per_byte=3e-6,
        h2d_per_byte=2e-6,
        prep_per_sample=0.1,
        retrieval_per_key=0.015,
        sync_cost=0.5,
        compute_per_sample_per_layer=0.1,
        allreduce_cost=1.0,
    )
