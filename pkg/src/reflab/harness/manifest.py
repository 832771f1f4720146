"""Run manifests: what was run, with which config and seed, and what it wrote."""

from __future__ import annotations

import hashlib
import platform
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .. import __version__
from .config import ExperimentConfig, config_from_dict, config_hash
from .io import read_json, write_json


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    return {"reflab": __version__, "numpy": np.__version__, "python": platform.python_version()}


def write_manifest(
    out_dir,
    command: str,
    argv: Sequence[str],
    cfg: ExperimentConfig,
    seed: int,
    outputs: Iterable,
) -> Path:
    out_dir = Path(out_dir)
    files = {}
    for p in sorted({Path(p) for p in outputs}):
        files[p.relative_to(out_dir).as_posix()] = sha256_file(p)
    path = out_dir / "manifests" / f"{command}.json"
    write_json(
        path,
        {
            "command": command,
            "argv": list(argv),
            "seed": seed,
            "config_hash": config_hash(cfg),
            "config": cfg.to_dict(),
            "versions": versions(),
            "outputs": files,
        },
    )
    return path


def read_manifest(path) -> tuple[dict, ExperimentConfig]:
    m = read_json(path)
    return m, config_from_dict(m["config"], path)


def verify_outputs(manifest: dict, out_dir) -> list[str]:
    """Relative paths whose current contents differ from the recorded hashes."""
    out_dir = Path(out_dir)
    bad = []
    for rel, digest in sorted(manifest["outputs"].items()):
        p = out_dir / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(rel)
    return bad
