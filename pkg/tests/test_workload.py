import json

import numpy as np
import pytest

from nestpipe.workload import (DatasetFormatError, WorkloadConfig, gen_dataset, hot_key_dataset,
                               key_frequencies, read_dataset, rank_to_key, write_dataset)


def test_uniform_when_skew_zero():
    cfg = WorkloadConfig(vocab_size=100, num_samples=10**5, keys_per_sample=1, zipf_skew=0.0, seed=1)
    f = key_frequencies(gen_dataset(cfg), 100)
    assert f.min() > 0
    assert f.max() / f.min() < 1.2


def test_skew_orders_popularity():
    V = 10**4
    cfg = WorkloadConfig(vocab_size=V, num_samples=20000, keys_per_sample=4, zipf_skew=1.2, seed=2)
    f = key_frequencies(gen_dataset(cfg), V)
    perm = rank_to_key(V, cfg.seed)
    assert f[perm[0]] > f[perm[99]]


def test_keys_canonical_and_in_range():
    cfg = WorkloadConfig(vocab_size=50, num_samples=500, keys_per_sample=10, zipf_skew=1.5)
    for s in gen_dataset(cfg):
        assert len(s.keys) == 10
        assert list(s.keys) == sorted(set(s.keys))
        assert 0 <= s.keys[0] and s.keys[-1] < 50


def test_deterministic_bytes(tmp_path):
    cfg = WorkloadConfig(num_samples=300)
    write_dataset(tmp_path / "a.jsonl", gen_dataset(cfg))
    write_dataset(tmp_path / "b.jsonl", gen_dataset(cfg))
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_sample_is_function_of_id():
    # a sample does not depend on how many others were generated
    a = gen_dataset(WorkloadConfig(num_samples=50))
    b = gen_dataset(WorkloadConfig(num_samples=10))
    assert a[:10] == b


def test_round_trip(tmp_path):
    samples = gen_dataset(WorkloadConfig(num_samples=200, seed=4))
    write_dataset(tmp_path / "d.jsonl", samples)
    assert read_dataset(tmp_path / "d.jsonl") == samples


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert read_dataset(tmp_path / "e.jsonl") == []


@pytest.mark.parametrize("line", [
    {"id": 0, "label": 1, "keys": [3, 3]},
    {"id": 0, "label": 1, "keys": [5, 2]},
    {"id": 0, "label": 2, "keys": [1]},
    {"id": 0, "keys": [1]},
])
def test_rejects_bad_lines(tmp_path, line):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps({"id": 9, "label": 0, "keys": [1]}) + "\n" + json.dumps(line) + "\n")
    with pytest.raises(DatasetFormatError) as exc:
        read_dataset(p)
    assert exc.value.lineno == 2


def test_rejects_duplicate_ids(tmp_path):
    p = tmp_path / "dup.jsonl"
    p.write_text('{"id": 1, "label": 0, "keys": [1]}\n{"id": 1, "label": 0, "keys": [2]}\n')
    with pytest.raises(DatasetFormatError):
        read_dataset(p)


@pytest.mark.parametrize("field, kwargs", [
    ("keys_per_sample", dict(vocab_size=10, keys_per_sample=11)),
    ("zipf_skew", dict(zipf_skew=-0.5)),
    ("num_samples", dict(num_samples=0)),
    ("kind", dict(kind="other")),
])
def test_config_validation(field, kwargs):
    with pytest.raises(ValueError, match=field):
        WorkloadConfig(**kwargs)


def test_hot_key_everywhere():
    samples = hot_key_dataset(100, 6, 300, hot_key=7, seed=1)
    assert all(7 in s.keys and len(s.keys) == 6 for s in samples)
    assert gen_dataset(WorkloadConfig(kind="hot_key", num_samples=100, keys_per_sample=6,
                                      vocab_size=300, seed=1)) == hot_key_dataset(100, 6, 300, 0, 1)


def test_labels_balanced():
    labels = np.array([s.label for s in gen_dataset(WorkloadConfig(num_samples=4000))])
    assert 0.45 < labels.mean() < 0.55
