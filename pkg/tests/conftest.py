import pytest

from nestpipe.core import Sample, TrainConfig
from nestpipe.workload import WorkloadConfig, gen_dataset


def make_samples(key_sets, labels=None):
    labels = labels or [i % 2 for i in range(len(key_sets))]
    return [Sample.from_keys(i, ks, lab) for i, (ks, lab) in enumerate(zip(key_sets, labels))]


@pytest.fixture(scope="session")
def default_samples():
    return gen_dataset(WorkloadConfig())


@pytest.fixture(scope="session")
def small_cfg():
    return TrainConfig(num_workers=2, vocab_size=200, emb_dim=4, dense_layers=2, hidden_dim=4,
                       batch_size=16, num_micro_batches=2, steps=12, pipeline_depth=5)


@pytest.fixture(scope="session")
def small_samples():
    return gen_dataset(WorkloadConfig(vocab_size=200, num_samples=16 * 12, keys_per_sample=5, seed=3))


# acceptance verdicts, printed as one line per criterion at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
