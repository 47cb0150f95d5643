"""
The experiment runner
=====================

The same pieces are available as ``python -m nestpipe`` (or the ``nestpipe``
script) with four subcommands driven by one JSON config.  Here they are
called in-process.
"""

import json
import tempfile
from pathlib import Path

from nestpipe.cli import main

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    cfg = {
        "workload": {"kind": "hot_key", "vocab_size": 1000, "num_samples": 640, "seed": 0},
        "train": {"vocab_size": 1000, "steps": 10},
        "run": {"sim_steps": 8},
    }
    (tmp / "cfg.json").write_text(json.dumps(cfg))
    args = ["--config", str(tmp / "cfg.json"), "--out", str(tmp / "out")]

    print("gen ->", main(["gen", *args]))
    print("train nestpipe ->", main(["train", *args, "--mode", "nestpipe", "--verify", "--exact-order"]))
    # exit code 1: the unsafe variant fails verification on a hot key
    print("train unsafe ->", main(["train", *args, "--mode", "unsafe-six-stage", "--verify"]))
    print("compare ->", main(["compare", *args]))
    print("simulate ->", main(["simulate", *args, "--sweep", "workers=128,512,1536"]))
    print(sorted(p.name for p in (tmp / "out").iterdir()))
