"""Synthetic Zipf-skewed datasets and their JSON Lines file format."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from nestpipe.core import Prf, Sample


@dataclass(frozen=True)
class WorkloadConfig:
    vocab_size: int = 1000
    num_samples: int = 6400
    keys_per_sample: int = 8
    zipf_skew: float = 1.0
    seed: int = 0
    kind: str = "zipf"  # zipf | hot_key (key 0 in every sample)

    def __post_init__(self) -> None:
        if self.kind not in ("zipf", "hot_key"):
            raise ValueError(f"invalid WorkloadConfig field 'kind': {self.kind!r}")
        if self.vocab_size < 1:
            raise ValueError(f"invalid WorkloadConfig field 'vocab_size': {self.vocab_size}")
        if self.num_samples <= 0:
            raise ValueError(f"invalid WorkloadConfig field 'num_samples': {self.num_samples}")
        if not 1 <= self.keys_per_sample <= self.vocab_size:
            raise ValueError(
                f"invalid WorkloadConfig field 'keys_per_sample': {self.keys_per_sample} "
                f"(must be in [1, vocab_size={self.vocab_size}])"
            )
        if self.zipf_skew < 0:
            raise ValueError(f"invalid WorkloadConfig field 'zipf_skew': {self.zipf_skew}")


def zipf_cdf(vocab_size: int, skew: float) -> np.ndarray:
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    weights = ranks ** -skew
    cdf = np.cumsum(weights)
    return cdf / cdf[-1]


def rank_to_key(vocab_size: int, seed: int) -> np.ndarray:
    """Permutation mapping popularity rank to key id.

    Spreads hot keys across shards instead of piling them on low ids.
    """
    order = np.argsort(Prf(seed).words("zipf-perm", np.arange(vocab_size)), kind="stable")
    return order.astype(np.int64)


def gen_dataset(cfg: WorkloadConfig) -> list[Sample]:
    """Generate ``cfg.num_samples`` samples, each a pure function of (seed, sample_id).

    Keys are drawn from Zipf(s) over the vocabulary without replacement by
    rejecting repeats; labels are Bernoulli(0.5).
    """
    if cfg.kind == "hot_key":
        return hot_key_dataset(cfg.num_samples, cfg.keys_per_sample, cfg.vocab_size, 0, cfg.seed)
    prf = Prf(cfg.seed)
    cdf = zipf_cdf(cfg.vocab_size, cfg.zipf_skew)
    perm = rank_to_key(cfg.vocab_size, cfg.seed)
    ids = np.arange(cfg.num_samples)
    k = cfg.keys_per_sample
    labels = (prf.unit("label", ids) < 0.5).astype(int)

    # draw a block of attempts per sample; extend the few that need more
    block = 2 * k + 4
    draws = _draw_ranks(prf, cdf, ids, 0, block)
    samples = []
    for sid in range(cfg.num_samples):
        chosen: list[int] = []
        seen = set()
        attempt = 0
        row = draws[sid]
        while len(chosen) < k:
            if attempt >= len(row):
                row = np.concatenate([row, _draw_ranks(prf, cdf, np.array([sid]), len(row), block)[0]])
            r = int(row[attempt])
            attempt += 1
            if r not in seen:
                seen.add(r)
                chosen.append(int(perm[r]))
        samples.append(Sample.from_keys(sid, chosen, int(labels[sid])))
    return samples


def _draw_ranks(prf: Prf, cdf: np.ndarray, ids: np.ndarray, first: int, count: int) -> np.ndarray:
    attempts = np.arange(first, first + count)
    u = prf.unit("sample", ids[:, None], attempts[None, :])
    ranks = np.searchsorted(cdf, u, side="right")
    return np.minimum(ranks, len(cdf) - 1)


class DatasetFormatError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


def write_dataset(path: str | os.PathLike, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"id": s.sample_id, "label": s.label, "keys": list(s.keys)},
                                separators=(",", ":")))
            fh.write("\n")


def read_dataset(path: str | os.PathLike) -> list[Sample]:
    samples = []
    seen: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, label, keys = rec["id"], rec["label"], rec["keys"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetFormatError(path, lineno, f"malformed record ({exc})") from None
            if not (isinstance(sid, int) and isinstance(keys, list)
                    and all(isinstance(k, int) and k >= 0 for k in keys)):
                raise DatasetFormatError(path, lineno, "bad field types")
            if sid in seen:
                raise DatasetFormatError(path, lineno, f"duplicate sample id {sid}")
            try:
                s = Sample(sid, tuple(keys), label)
            except ValueError as exc:
                raise DatasetFormatError(path, lineno, str(exc)) from None
            seen.add(sid)
            samples.append(s)
    return samples


def key_frequencies(samples, vocab_size: int) -> np.ndarray:
    counts = np.zeros(vocab_size, dtype=np.int64)
    for s in samples:
        counts[list(s.keys)] += 1
    return counts


def hot_key_dataset(num_samples: int, keys_per_sample: int, vocab_size: int, hot_key: int = 0,
                    seed: int = 0) -> list[Sample]:
    """Adversarial workload: ``hot_key`` appears in every sample.

    The remaining keys are uniform without replacement.  Consecutive batches
    therefore always share the hot key.
    """
    if keys_per_sample > vocab_size:
        raise ValueError("keys_per_sample > vocab_size")
    prf = Prf(seed)
    out = []
    for sid in range(num_samples):
        keys = {hot_key}
        attempt = 0
        while len(keys) < keys_per_sample:
            keys.add(int(prf.words("hot-fill", sid, attempt) % np.uint64(vocab_size)))
            attempt += 1
        label = int(prf.unit("label", sid) < 0.5)
        out.append(Sample.from_keys(sid, keys, label))
    return out
