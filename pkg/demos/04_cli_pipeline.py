"""The whole experiment through the command line, at toy size.

Runs generate, diagnose, adversarial, train, eval and report into
``demo_run/`` (or the directory given as the first argument) and prints
the markdown report. Each stage also writes a manifest with the seed,
config hash and output hashes under ``manifests/``.
"""

import json
import sys
from pathlib import Path

from reflab.harness.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
out.mkdir(parents=True, exist_ok=True)
config = {
    "data": {"n_train": 1500, "n_dev": 300, "n_test": 2000, "n_qa_train": 1500, "n_qa_dev": 300},
    "train": {"epochs": 8},
}
(out / "config.json").write_text(json.dumps(config, indent=2) + "\n")

for stage in ("generate", "diagnose", "adversarial", "train", "eval", "report"):
    code = main([stage, "--seed", "1", "--config", str(out / "config.json"), "--out", str(out)])
    print(f"{stage:12s} exit {code}")
    if code:
        sys.exit(code)

print()
print((out / "report" / "report.md").read_text())
