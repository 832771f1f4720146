"""Experiment configuration: one JSON document, one section per component.

Schema (every section and key is optional; omitted keys take defaults)::

    {
      "generator":   {GenConfig fields},
      "panel":       {"stage1": {panel fields}, "stage3": {panel fields}},
      "model":       {ModelConfig fields},
      "train":       {TrainConfig fields},
      "contrastive": {ContrastiveConfig fields},
      "mtl":         {MTLConfig fields},
      "data":        {DataConfig fields},
      "runs":        [{"name": str, "encoder": "bow"|"seq", "regime": str,
                       "aggregation": "sum_h"|"max_h"}, ...]
    }

Panel fields are ``n_annotators``, ``agree_threshold``, ``noise_rate``,
``iou_threshold`` and ``margin``. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Mapping, Optional

from ..diagnostics import AnnotatorPanel
from ..training import REGIMES, ContrastiveConfig, MTLConfig, ModelConfig, TrainConfig
from ..worldgen import GenConfig
from .io import FormatError

SEED_ENV = "REFLAB_SEED"
U64_MAX = (1 << 64) - 1


@dataclass(frozen=True)
class PanelSpec:
    n_annotators: int
    agree_threshold: int
    noise_rate: float = 0.03
    iou_threshold: float = 0.5
    margin: float = 0.05

    def build(self, kind: str, seed: int) -> AnnotatorPanel:
        return AnnotatorPanel(
            kind=kind,
            n_annotators=self.n_annotators,
            agree_threshold=self.agree_threshold,
            iou_threshold=self.iou_threshold,
            noise_rate=self.noise_rate,
            seed=seed,
            margin=self.margin,
        )


@dataclass(frozen=True)
class PanelConfig:
    stage1: PanelSpec = PanelSpec(5, 3)
    stage3: PanelSpec = PanelSpec(3, 2)


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 5000
    n_dev: int = 1000
    n_test: int = 5000
    n_qa_train: int = 5000
    n_qa_dev: int = 1000

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError("sizes must be non-negative")
        if self.n_train < 1:
            raise ValueError("n_train must be positive")


@dataclass(frozen=True)
class RunSpec:
    name: str
    encoder: str = "seq"
    regime: str = "ce"
    aggregation: str = "max_h"

    def __post_init__(self):
        if self.encoder not in ("bow", "seq"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.aggregation not in ("sum_h", "max_h"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")


DEFAULT_RUNS = (
    RunSpec("bow-ce", "bow", "ce"),
    RunSpec("seq-ce", "seq", "ce"),
    RunSpec("seq-sum_h", "seq", "contrastive", "sum_h"),
    RunSpec("seq-max_h", "seq", "contrastive", "max_h"),
    RunSpec("seq-mtl", "seq", "mtl"),
)


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GenConfig = GenConfig()
    panel: PanelConfig = PanelConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    contrastive: ContrastiveConfig = ContrastiveConfig()
    mtl: MTLConfig = MTLConfig()
    data: DataConfig = DataConfig()
    runs: tuple[RunSpec, ...] = DEFAULT_RUNS

    def run(self, name: str) -> RunSpec:
        for r in self.runs:
            if r.name == name:
                return r
        raise KeyError(f"no run named {name!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["runs"] = [asdict(r) for r in self.runs]
        return _jsonable(d)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# parsing


def _line_of(text: Optional[str], key: str) -> Optional[int]:
    if not text:
        return None
    needle = f'"{key}"'
    for n, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return n
    return None


class _Reader:
    def __init__(self, path, text):
        self.path, self.text = path, text

    def fail(self, dotted: str, msg: str):
        raise FormatError(self.path, _line_of(self.text, dotted.rsplit(".", 1)[-1].split("[")[0]), dotted, msg)

    def section(self, cls, raw, name: str):
        if raw is None:
            return cls()
        if not isinstance(raw, dict):
            self.fail(name, "expected an object")
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, val in raw.items():
            if key not in known:
                self.fail(f"{name}.{key}", "unknown key")
            kwargs[key] = self._coerce(known[key], val, f"{name}.{key}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            self.fail(name, str(exc))

    def _coerce(self, f: dataclasses.Field, val, dotted: str):
        default = f.default
        if default is dataclasses.MISSING and f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        if isinstance(default, bool):
            if not isinstance(val, bool):
                self.fail(dotted, f"expected true/false, got {val!r}")
        elif isinstance(default, int):
            if isinstance(val, bool) or not isinstance(val, int):
                self.fail(dotted, f"expected an integer, got {val!r}")
        elif isinstance(default, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                self.fail(dotted, f"expected a number, got {val!r}")
            val = float(val)
        elif isinstance(default, str):
            if not isinstance(val, str):
                self.fail(dotted, f"expected a string, got {val!r}")
        elif isinstance(default, tuple):
            if not isinstance(val, list) or len(val) != len(default):
                self.fail(dotted, f"expected a list of {len(default)} numbers")
            if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in val):
                self.fail(dotted, "expected numbers")
            val = tuple(type(d)(v) for d, v in zip(default, val))
        return val


def config_from_dict(raw: Mapping[str, Any], path="<memory>", text: Optional[str] = None) -> ExperimentConfig:
    r = _Reader(path, text)
    if not isinstance(raw, dict):
        r.fail("<document>", "expected a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in known:
            r.fail(key, "unknown section")

    panel_raw = raw.get("panel")
    if panel_raw is None:
        panel = PanelConfig()
    else:
        if not isinstance(panel_raw, dict):
            r.fail("panel", "expected an object")
        for key in panel_raw:
            if key not in ("stage1", "stage3"):
                r.fail(f"panel.{key}", "unknown key")
        base = PanelConfig()
        panel = PanelConfig(
            stage1=_panel_spec(r, panel_raw.get("stage1"), base.stage1, "panel.stage1"),
            stage3=_panel_spec(r, panel_raw.get("stage3"), base.stage3, "panel.stage3"),
        )

    runs = DEFAULT_RUNS
    if raw.get("runs") is not None:
        if not isinstance(raw["runs"], list) or not raw["runs"]:
            r.fail("runs", "expected a non-empty list")
        runs = tuple(r.section(RunSpec, item, f"runs[{i}]") for i, item in enumerate(raw["runs"]))
        names = [x.name for x in runs]
        if len(set(names)) != len(names):
            r.fail("runs", "run names must be unique")

    return ExperimentConfig(
        generator=r.section(GenConfig, raw.get("generator"), "generator"),
        panel=panel,
        model=r.section(ModelConfig, raw.get("model"), "model"),
        train=r.section(TrainConfig, raw.get("train"), "train"),
        contrastive=r.section(ContrastiveConfig, raw.get("contrastive"), "contrastive"),
        mtl=r.section(MTLConfig, raw.get("mtl"), "mtl"),
        data=r.section(DataConfig, raw.get("data"), "data"),
        runs=runs,
    )


def _panel_spec(r: _Reader, raw, base: PanelSpec, name: str) -> PanelSpec:
    if raw is None:
        return base
    spec = r.section(PanelSpec, {**asdict(base), **raw} if isinstance(raw, dict) else raw, name)
    try:
        spec.build("full_parse", 0)
    except ValueError as exc:
        r.fail(name, str(exc))
    return spec


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, "<document>", f"invalid JSON ({exc.msg})") from None
    return config_from_dict(raw, path, text)


def resolve_seed(cli_seed: Optional[int], environ: Mapping[str, str] = os.environ) -> int:
    """The run seed: ``$REFLAB_SEED`` if set, else ``--seed``, else 0."""
    env = environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            seed = int(env.strip(), 0)
        except ValueError:
            raise ValueError(f"{SEED_ENV}={env!r} is not an integer") from None
    else:
        seed = 0 if cli_seed is None else cli_seed
    if not 0 <= seed <= U64_MAX:
        raise ValueError(f"seed {seed} is outside the unsigned 64-bit range")
    return seed
