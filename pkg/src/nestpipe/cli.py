"""Experiment runner: ``gen``, ``train``, ``simulate`` and ``compare``.

Configuration is one JSON file with sections ``workload``, ``train``,
``cost`` and ``run``; unknown keys are rejected.  Exit codes: 0 success,
1 verification failure, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from nestpipe.core import TrainConfig
from nestpipe.dbp import MODES, config_for_mode, run
from nestpipe.fwp import build_schedule_dag
from nestpipe.oracle import compare_trajectories, iter_batches, run_oracle
from nestpipe.timing import (
    MODE_SETTINGS,
    CostModel,
    StepMetrics,
    compare_modes,
    profile_from_samples,
    simulate_mode,
    write_metrics_csv,
)
from nestpipe.workload import WorkloadConfig, gen_dataset, key_frequencies, read_dataset, write_dataset

log = logging.getLogger("nestpipe")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class RunSection:
    mode: str = "nestpipe"
    out: str = "out"
    dataset: str = ""
    verify: bool = False
    sweep_workers: tuple[int, ...] = (128, 256, 512, 1024, 1536)
    sim_steps: int = 16
    sim_local_batch: int = 0  # 0: batch_size // num_workers


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    workload: WorkloadConfig
    train: TrainConfig
    cost: CostModel
    run: RunSection

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out)

    @property
    def dataset_path(self) -> Path:
        return Path(self.run.dataset) if self.run.dataset else self.out_dir / "dataset.jsonl"


_SECTIONS = {"workload": WorkloadConfig, "train": TrainConfig, "cost": CostModel, "run": RunSection}


def _build(cls, values: dict, section: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigError(f"unknown field(s) in [{section}]: {', '.join(unknown)}")
    if "sweep_workers" in values:
        values = dict(values, sweep_workers=tuple(values["sweep_workers"]))
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def load_config(path: str | None, overrides: dict[str, dict] | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        values = dict(raw.get(name, {}))
        values.update((overrides or {}).get(name, {}))
        sections[name] = _build(cls, values, name)
    cfg = ExperimentConfig(**sections)
    if cfg.workload.vocab_size != cfg.train.vocab_size:
        raise ConfigError(f"field vocab_size differs between [workload] ({cfg.workload.vocab_size}) "
                          f"and [train] ({cfg.train.vocab_size})")
    if cfg.run.mode not in MODES:
        raise ConfigError(f"field mode: {cfg.run.mode!r} not one of {', '.join(MODES)}")
    return cfg


def _overrides(args) -> dict[str, dict]:
    ov: dict[str, dict] = {"workload": {}, "train": {}, "run": {}}
    if getattr(args, "seed", None) is not None:
        ov["workload"]["seed"] = args.seed
        ov["train"]["seed"] = args.seed
    if getattr(args, "mode", None):
        ov["run"]["mode"] = args.mode
    if getattr(args, "out", None):
        ov["run"]["out"] = args.out
    if getattr(args, "verify", False):
        ov["run"]["verify"] = True
    if getattr(args, "exact_order", False):
        ov["train"]["exact_order_mode"] = True
    if getattr(args, "sweep", None):
        ov["run"]["sweep_workers"] = parse_sweep(args.sweep)
    return ov


def parse_sweep(spec: str) -> tuple[int, ...]:
    name, _, values = spec.partition("=")
    if name.strip() != "workers" or not values:
        raise ConfigError(f"bad sweep spec {spec!r}; expected workers=a,b,c")
    try:
        ws = tuple(int(v) for v in values.split(","))
    except ValueError:
        raise ConfigError(f"bad sweep spec {spec!r}; worker counts must be integers") from None
    if any(w < 1 for w in ws):
        raise ConfigError("worker counts must be >= 1")
    return ws


def _ensure_out(cfg: ExperimentConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(cfg: ExperimentConfig) -> int:
    _ensure_out(cfg)
    samples = gen_dataset(cfg.workload)
    path = cfg.dataset_path
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(path, samples)
    freq = key_frequencies(samples, cfg.workload.vocab_size)
    top = freq.argsort(kind="stable")[::-1][:5]
    print(f"wrote {len(samples)} samples to {path}")
    print("hottest keys: " + ", ".join(f"{int(k)}x{int(freq[k])}" for k in top))
    return EXIT_OK


def _profile(cfg: ExperimentConfig, samples=None):
    local = cfg.run.sim_local_batch or cfg.train.batch_size // cfg.train.num_workers
    if local % cfg.train.num_micro_batches:
        raise ConfigError(f"sim_local_batch {local} not divisible by num_micro_batches")
    if samples is None:
        samples = gen_dataset(dataclasses.replace(cfg.workload, num_samples=local))
    return profile_from_samples(list(samples)[:local], cfg.train.num_micro_batches, "clustered"
                                if cfg.train.clustering_enabled else "sequential", cfg.train.seed)


def cmd_train(cfg: ExperimentConfig) -> int:
    out = _ensure_out(cfg)
    samples = read_dataset(cfg.dataset_path)
    log.info("read %d samples from %s", len(samples), cfg.dataset_path)
    mode = cfg.run.mode
    tcfg = config_for_mode(cfg.train, mode)
    result = run(samples, tcfg)
    result.write_records_csv(out / "stages.csv")
    timing_mode = mode if mode in MODE_SETTINGS else "nestpipe"
    rows: list[StepMetrics] = []
    for batch in iter_batches(samples, tcfg.batch_size, result.steps_run):
        local = batch.split(tcfg.num_workers)[0]
        prof = profile_from_samples(local, tcfg.num_micro_batches,
                                    "clustered" if tcfg.clustering_enabled else "sequential", tcfg.seed)
        m, _ = simulate_mode(prof, cfg.cost, timing_mode, tcfg.num_workers, cfg.run.sim_steps,
                             tcfg.emb_dim, tcfg.dense_layers, tcfg.pipeline_depth)
        rows.append(dataclasses.replace(m, step=batch.step, mode=mode))
    write_metrics_csv(out / "metrics.csv", rows)
    print(f"{mode}: {result.steps_run} steps on {tcfg.num_workers} workers")
    if not cfg.run.verify:
        return EXIT_OK
    log.info("running reference trainer for %d steps", result.steps_run)
    _, ref = run_oracle(samples, tcfg)
    report = compare_trajectories(ref, result.trajectory, tolerance=0.0 if tcfg.exact_order_mode else 1e-5)
    (out / "consistency.json").write_text(report.to_json())
    print(report.summary())
    return EXIT_OK if report.consistent else EXIT_VERIFY


def cmd_simulate(cfg: ExperimentConfig) -> int:
    out = _ensure_out(cfg)
    prof = _profile(cfg)
    t = cfg.train
    log.info("simulating %d modes x %d worker counts", len(MODE_SETTINGS), len(cfg.run.sweep_workers))
    rows = compare_modes(prof, cfg.cost, cfg.run.sweep_workers, steps=cfg.run.sim_steps,
                         emb_dim=t.emb_dim, dense_layers=t.dense_layers, depth=t.pipeline_depth)
    write_metrics_csv(out / "metrics.csv", rows)
    biggest = max(cfg.run.sweep_workers)
    _, tl = simulate_mode(prof, cfg.cost, "nestpipe", biggest, cfg.run.sim_steps, t.emb_dim,
                          t.dense_layers, t.pipeline_depth)
    tl.write_csv(out / "timeline.csv")
    build_schedule_dag(list(prof.micro_keys), t.emb_dim, list(prof.micro_samples)).write(out / "schedule_dag.json")
    for r in rows:
        print(f"{r.mode:14s} W={r.workers:5d} step={r.step_latency_ms:9.3f} ms "
              f"exposed={r.exposed_ratio:.3f} util={r.utilization:.3f}")
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig) -> int:
    out = _ensure_out(cfg)
    path = cfg.dataset_path
    samples = read_dataset(path) if path.exists() else gen_dataset(cfg.workload)
    t = cfg.train
    _, ref = run_oracle(samples, t)
    prof = _profile(cfg, samples)
    table = []
    for mode in MODE_SETTINGS:
        tcfg = config_for_mode(t, mode)
        log.info("functional run: %s", mode)
        res = run(samples, tcfg)
        rep = compare_trajectories(ref, res.trajectory, tolerance=0.0 if tcfg.exact_order_mode else 1e-5)
        m, _ = simulate_mode(prof, cfg.cost, mode, t.num_workers, cfg.run.sim_steps, t.emb_dim,
                             t.dense_layers, t.pipeline_depth)
        table.append((mode, m.step_latency_ms, m.lookup_ms, m.comm_exposed_ms, rep.consistent))
    lines = ["mode,step_latency_ms,lookup_ms,comm_exposed_ms,oracle_equal"]
    lines += [f"{m},{lat:.6f},{lk:.6f},{ce:.6f},{'yes' if eq else 'no'}" for m, lat, lk, ce, eq in table]
    (out / "compare.csv").write_text("# schema=1\n" + "\n".join(lines) + "\n")
    print(f"{'mode':14s} {'step_ms':>10s} {'lookup_ms':>10s} {'comm_exp_ms':>12s}  oracle-equal")
    for m, lat, lk, ce, eq in table:
        print(f"{m:14s} {lat:10.3f} {lk:10.3f} {ce:12.3f}  {'yes' if eq else 'NO'}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "simulate": cmd_simulate, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nestpipe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="seed for workload and model")
        if name in ("train", "compare"):
            sp.add_argument("--mode", choices=MODES)
            sp.add_argument("--verify", action="store_true", help="compare against the synchronous oracle")
            sp.add_argument("--exact-order", action="store_true", help="canonical summation order")
        if name == "simulate":
            sp.add_argument("--sweep", help="workers=a,b,c")
    return p


def main(argv=None) -> int:
    level = os.environ.get("NESTPIPE_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
