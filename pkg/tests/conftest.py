import json

import pytest

from reflab.harness.cli import main

# small enough to run the whole pipeline in a few seconds
TINY_CONFIG = {
    "data": {"n_train": 300, "n_dev": 100, "n_test": 600, "n_qa_train": 300, "n_qa_dev": 100},
    "train": {"epochs": 3},
    "runs": [
        {"name": "bow-ce", "encoder": "bow", "regime": "ce"},
        {"name": "seq-ce", "encoder": "seq", "regime": "ce"},
        {"name": "seq-max_h", "encoder": "seq", "regime": "contrastive", "aggregation": "max_h"},
        {"name": "seq-mtl", "encoder": "seq", "regime": "mtl"},
    ],
}

STAGES = ("generate", "diagnose", "adversarial", "train", "eval", "report")


def run_tiny_pipeline(root, seed=5):
    """Every CLI stage in order into ``root/out``; returns the output dir."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY_CONFIG, indent=2))
    out = root / "out"
    for stage in STAGES:
        code = main([stage, "--seed", str(seed), "--config", str(cfg), "--out", str(out)])
        assert code == 0, stage
    return out


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    return run_tiny_pipeline(tmp_path_factory.mktemp("tiny"))
