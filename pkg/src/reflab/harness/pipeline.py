"""The experiment as a sequence of stages sharing one output directory.

Layout under ``out``::

    dataset.jsonl         train / dev / test instances
    qa.jsonl              relational QA, train / dev
    easy.jsonl hard.jsonl votes.jsonl stage1_stats.json   stage 1 of the annotation pipeline
    adversarial.jsonl pipeline_stats.json                 stages 2 and 3
    dataset_stats.json
    runs/<name>/epoch_<k>/params.json, runs/<name>/params.json, runs/<name>/metrics.jsonl
    eval/<name>.json
    report/report.md and CSV tables
    manifests/<stage>.json

Each stage derives its randomness from the run seed and a fixed label, so
stages can be re-run independently and give the same bytes.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from ..diagnostics import PipelineStats, build_adversarial, stage1_split
from ..model import tensorize_qa
from ..rng import derive_seed
from ..training import qa_accuracy, train, train_qa_only
from ..worldgen import generate_instances, generate_qa_examples
from . import io
from .config import ExperimentConfig, RunSpec
from .evaluate import dataset_stats, evaluate, perturbation_report

STAGES = ("generate", "diagnose", "adversarial", "train", "eval", "report")


def _p(out, name) -> Path:
    return Path(out) / name


def stage_generate(cfg: ExperimentConfig, seed: int, out, n: Optional[int] = None, split: str = "train") -> list[Path]:
    """Write ``dataset.jsonl`` and ``qa.jsonl``.

    With ``n`` set, the dataset holds ``n`` instances all labelled ``split``;
    otherwise it holds the train / dev / test sizes from the config.
    """
    gseed = derive_seed(seed, "data")
    g = cfg.generator
    if n is not None:
        data = generate_instances(gseed, n, g, split=split)
    else:
        d = cfg.data
        data = (
            generate_instances(gseed, d.n_train, g, "train")
            + generate_instances(gseed, d.n_dev, g, "dev", start=d.n_train)
            + generate_instances(gseed, d.n_test, g, "test", start=d.n_train + d.n_dev)
        )
    qseed = derive_seed(seed, "qa")
    qa = generate_qa_examples(qseed, cfg.data.n_qa_train, g, "train") + generate_qa_examples(
        qseed, cfg.data.n_qa_dev, g, "dev", start=cfg.data.n_qa_train
    )
    io.save_dataset(_p(out, "dataset.jsonl"), data)
    io.save_qa(_p(out, "qa.jsonl"), qa)
    io.write_json(_p(out, "dataset_stats.json"), dataset_stats(data))
    return [_p(out, "dataset.jsonl"), _p(out, "qa.jsonl"), _p(out, "dataset_stats.json")]


def _panels(cfg: ExperimentConfig, seed: int):
    dseed = derive_seed(seed, "diagnose")
    bow = cfg.panel.stage1.build("bag_of_words", derive_seed(dseed, "panel-bow"))
    val = cfg.panel.stage3.build("full_parse", derive_seed(dseed, "panel-validate"))
    return dseed, bow, val


def stage_diagnose(cfg: ExperimentConfig, seed: int, out, data=None) -> list[Path]:
    """Stage 1 over the test split (or the whole file when it has no test split)."""
    data = io.load_dataset(data or _p(out, "dataset.jsonl"))
    pool = [i for i in data if i.split == "test"] or data
    _, bow, _ = _panels(cfg, seed)
    easy, hard, votes = stage1_split(pool, bow)
    stats = PipelineStats(n_input=len(pool), n_easy=len(easy), n_hard=len(hard))
    io.save_dataset(_p(out, "easy.jsonl"), easy)
    io.save_dataset(_p(out, "hard.jsonl"), hard)
    io.save_votes(_p(out, "votes.jsonl"), votes)
    io.write_json(_p(out, "stage1_stats.json"), stats.to_dict())
    return [_p(out, n) for n in ("easy.jsonl", "hard.jsonl", "votes.jsonl", "stage1_stats.json")]


def stage_adversarial(cfg: ExperimentConfig, seed: int, out) -> list[Path]:
    hard = io.load_dataset(_p(out, "hard.jsonl"))
    votes = {v.instance_id: v for v in io.load_votes(_p(out, "votes.jsonl"))}
    prev = io.read_json(_p(out, "stage1_stats.json"))
    stats = PipelineStats(n_input=prev["n_input"], n_easy=prev["n_easy"], n_hard=prev["n_hard"])
    dseed, _, val = _panels(cfg, seed)
    adv = build_adversarial(hard, votes, val, dseed, stats, cfg.panel.stage1.margin)
    io.save_dataset(_p(out, "adversarial.jsonl"), adv)
    io.write_json(_p(out, "pipeline_stats.json"), stats.to_dict())
    return [_p(out, "adversarial.jsonl"), _p(out, "pipeline_stats.json")]


def _runs(cfg: ExperimentConfig, names: Optional[Sequence[str]]) -> list[RunSpec]:
    return [cfg.run(n) for n in names] if names else list(cfg.runs)


def train_run(cfg: ExperimentConfig, run: RunSpec, seed: int, data, qa, run_dir=None):
    """Train one configured model; every run of an experiment shares the training seed."""
    model_cfg = replace(cfg.model, encoder=run.encoder)
    ccfg = replace(cfg.contrastive, aggregation=run.aggregation)
    tcfg = replace(cfg.train, checkpoint_dir=None if run_dir is None else str(run_dir))
    return train(data, qa, run.regime, model_cfg, tcfg, ccfg, cfg.mtl, seed=derive_seed(seed, "train"))


def stage_train(cfg: ExperimentConfig, seed: int, out, runs: Optional[Sequence[str]] = None) -> list[Path]:
    data = io.load_dataset(_p(out, "dataset.jsonl"))
    qa = io.load_qa(_p(out, "qa.jsonl"))
    written = []
    for run in _runs(cfg, runs):
        run_dir = _p(out, "runs") / run.name
        result = train_run(cfg, run, seed, data, qa, run_dir)
        io.save_log(run_dir / "metrics.jsonl", result.log)
        io.save_checkpoint(result.params, run_dir.parent, run.name)
        written += sorted(run_dir.rglob("*.json*"))
        if run.regime == "mtl":
            base = train_qa_only(
                qa, replace(cfg.model, encoder=run.encoder), cfg.train, seed=derive_seed(seed, "train")
            )
            summary = {
                "qa_dev_before": base.qa_only_dev_acc,
                "qa_dev_after": result.log[result.best_epoch - 1].get("qa_dev_acc"),
            }
            io.write_json(run_dir / "qa_summary.json", summary)
            written.append(run_dir / "qa_summary.json")
    return written


def eval_dataset(out) -> list:
    """Instances scored by ``eval``: dev and test plus whichever diagnostic splits exist."""
    data = [i for i in io.load_dataset(_p(out, "dataset.jsonl")) if i.split in ("dev", "test")]
    for name in ("easy.jsonl", "hard.jsonl", "adversarial.jsonl"):
        if _p(out, name).exists():
            data += io.load_dataset(_p(out, name))
    return data


def evaluate_params(params, data, qa_dev, seed: int, threshold: float, lmax: int) -> dict:
    res = {
        "accuracy": evaluate(params, data, threshold, lmax),
        "perturbation": perturbation_report(params, data, derive_seed(seed, "perturb"), threshold, lmax),
    }
    if qa_dev:
        res["qa_dev_accuracy"] = qa_accuracy(params, tensorize_qa(qa_dev, lmax))
    return res


def stage_eval(cfg: ExperimentConfig, seed: int, out, runs: Optional[Sequence[str]] = None) -> list[Path]:
    data = eval_dataset(out)
    qa_path = _p(out, "qa.jsonl")
    qa_dev = [q for q in io.load_qa(qa_path) if q.split == "dev"] if qa_path.exists() else []
    thr = cfg.panel.stage1.iou_threshold
    written = []
    for run in _runs(cfg, runs):
        params = io.load_checkpoint(_p(out, "runs") / run.name)
        res = {"run": run.name, "encoder": run.encoder, "regime": run.regime}
        res.update(evaluate_params(params, data, qa_dev, seed, thr, cfg.model.lmax))
        summary = _p(out, "runs") / run.name / "qa_summary.json"
        if summary.exists():
            res["qa_summary"] = io.read_json(summary)
        path = _p(out, "eval") / f"{run.name}.json"
        io.write_json(path, res)
        written.append(path)
    return written


def stage_report(cfg: ExperimentConfig, seed: int, out) -> list[Path]:
    from .report import build_report, write_report

    evals = {}
    for run in cfg.runs:
        path = _p(out, "eval") / f"{run.name}.json"
        if path.exists():
            evals[run.name] = io.read_json(path)
    stats = None
    if _p(out, "dataset_stats.json").exists():
        data = io.load_dataset(_p(out, "dataset.jsonl"))
        for name in ("easy.jsonl", "hard.jsonl", "adversarial.jsonl"):
            if _p(out, name).exists():
                data += io.load_dataset(_p(out, name))
        stats = dataset_stats(data)
    pipe = None
    for name in ("pipeline_stats.json", "stage1_stats.json"):
        if _p(out, name).exists():
            pipe = io.read_json(_p(out, name))
            break
    return write_report(_p(out, "report"), build_report(evals, stats, pipe))


def run_pipeline(cfg: ExperimentConfig, seed: int, out) -> dict[str, list[Path]]:
    """Every stage in order; returns the files each stage wrote."""
    return {
        "generate": stage_generate(cfg, seed, out),
        "diagnose": stage_diagnose(cfg, seed, out),
        "adversarial": stage_adversarial(cfg, seed, out),
        "train": stage_train(cfg, seed, out),
        "eval": stage_eval(cfg, seed, out),
        "report": stage_report(cfg, seed, out),
    }
