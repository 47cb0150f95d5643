"""Simulated collectives among W logical workers.

Collectives are synchronous rendezvous: every worker's contribution is passed
in at once and results are released together.  Delivery and reduction order
is ascending source worker id, which makes every reduction reproducible.
"""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np


class FabricError(ValueError):
    pass


def all_to_all(payloads: Sequence[Sequence[Sequence[Any]]]) -> list[list[list[Any]]]:
    """Exchange per-destination item lists.

    ``payloads[s][r]`` is what sender ``s`` addresses to receiver ``r``.
    Returns ``result[r][s]``: receiver ``r``'s view, indexed by source.
    """
    world = len(payloads)
    for s, p in enumerate(payloads):
        if len(p) != world:
            raise FabricError(f"worker {s} supplied {len(p)} destination lists, expected {world}")
    return [[list(payloads[s][r]) for s in range(world)] for r in range(world)]


def all_reduce_sum(vectors: Sequence[np.ndarray]) -> list[np.ndarray]:
    if not vectors:
        raise FabricError("all_reduce_sum needs at least one worker")
    shape = np.shape(vectors[0])
    for w, v in enumerate(vectors):
        if np.shape(v) != shape:
            raise FabricError(f"worker {w} vector shape {np.shape(v)} != {shape}")
    acc = np.array(vectors[0], copy=True)
    for v in vectors[1:]:
        acc = acc + v
    return [acc.copy() for _ in vectors]
