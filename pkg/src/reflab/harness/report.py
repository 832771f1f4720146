"""Markdown and CSV tables built from eval results and dataset statistics.

Everything printed here is read back from the JSON written by ``eval``,
``generate`` and ``diagnose``, so a report can be rebuilt from those files
alone.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Mapping, Optional

from .evaluate import PERTURBATION_SPLITS, PERTURBATIONS, SPLIT_COLUMNS

PERTURBATION_HEADINGS = {"original": "Original", "shuf": "Shuf", "nj": "N+J"}
STATS_SPLITS = ("train", "dev", "test", "easy", "hard", "adversarial")


def _fmt(x: Optional[float]) -> str:
    return "" if x is None else f"{100 * x:.2f}"


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def _md(header: list[str], rows: list[list]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(v) for v in r) + " |" for r in rows]
    return "\n".join(lines)


def accuracy_rows(evals: Mapping[str, dict]) -> list[list]:
    """One row per run; ``None`` where the split is absent."""
    rows = []
    for name in evals:
        splits = evals[name]["accuracy"]["splits"]
        rows.append([name] + [splits.get(s, {}).get("accuracy") for s in SPLIT_COLUMNS])
    return rows


def perturbation_rows(evals: Mapping[str, dict]) -> list[list]:
    rows = []
    for name in evals:
        table = evals[name].get("perturbation") or {}
        for split in PERTURBATION_SPLITS:
            if split not in table:
                continue
            r = table[split]
            rows.append(
                [name, SPLIT_COLUMNS[split], r["n"]]
                + [r.get(k) for k in PERTURBATIONS]
                + [r.get("nj_excluded", 0)]
            )
    return rows


def _stat_splits(stats: Mapping) -> list[str]:
    present = stats["splits"]
    return [s for s in STATS_SPLITS if s in present] + sorted(s for s in present if s not in STATS_SPLITS)


def length_rows(stats: Mapping) -> list[list]:
    rows = []
    for split in _stat_splits(stats):
        for length, count in stats["splits"][split]["length_histogram"].items():
            rows.append([split, int(length), count])
    return rows


def relation_rows(stats: Mapping) -> list[list]:
    rows = []
    for split in _stat_splits(stats):
        s = stats["splits"][split]
        for rel, count in s["relations"].items():
            rows.append([split, rel, count])
        rows.append([split, "negated", s["negated"]])
    return rows


def category_rows(stats: Mapping) -> list[list]:
    rows = []
    for split in _stat_splits(stats):
        for cat, count in stats["splits"][split]["categories"].items():
            rows.append([split, cat, count])
    return rows


def build_report(
    evals: Mapping[str, dict],
    stats: Optional[Mapping] = None,
    pipeline: Optional[Mapping] = None,
) -> dict[str, str]:
    """File name -> contents for the whole bundle (``report.md`` plus CSVs)."""
    files = {}
    acc_header = ["model"] + list(SPLIT_COLUMNS.values())
    acc = accuracy_rows(evals)
    files["accuracy.csv"] = _csv([acc_header] + acc)
    pert_header = ["model", "split", "n"] + [PERTURBATION_HEADINGS[k] for k in PERTURBATIONS] + ["nj_excluded"]
    pert = perturbation_rows(evals)
    files["perturbation.csv"] = _csv([pert_header] + pert)

    md = ["# Grounding report", "", "## Accuracy (%) by split", ""]
    md.append(_md(acc_header, [[r[0]] + [_fmt(v) for v in r[1:]] for r in acc]))
    if pert:
        md += ["", "## Perturbations (%)", ""]
        md.append(_md(pert_header, [r[:3] + [_fmt(v) for v in r[3:6]] + r[6:] for r in pert]))

    qa = [
        [name, e.get("qa_summary", {}).get("qa_dev_before"), e.get("qa_dev_accuracy")]
        for name, e in evals.items()
        if e.get("regime") == "mtl"
    ]
    if qa:
        files["qa.csv"] = _csv([["model", "qa_dev_single_task", "qa_dev_mtl"]] + qa)
        md += ["", "## Relational QA dev accuracy (%)", ""]
        md.append(_md(["model", "QA only", "after MTL"], [[r[0], _fmt(r[1]), _fmt(r[2])] for r in qa]))

    if stats is not None:
        files["lengths.csv"] = _csv([["split", "length", "count"]] + length_rows(stats))
        files["relations.csv"] = _csv([["split", "relation", "count"]] + relation_rows(stats))
        files["categories.csv"] = _csv([["split", "category", "count"]] + category_rows(stats))
        split_rows = [
            [s, stats["splits"][s]["count"], f"{stats['splits'][s]['mean_length']:.2f}"]
            for s in _stat_splits(stats)
        ]
        md += ["", "## Dataset", "", _md(["split", "count", "mean length"], split_rows)]
        rel_splits = _stat_splits(stats)
        rels = list(next(iter(stats["splits"].values()))["relations"]) if stats["splits"] else []
        md += ["", "## Relations", ""]
        md.append(
            _md(
                ["split"] + rels + ["negated"],
                [
                    [s] + [stats["splits"][s]["relations"][r] for r in rels] + [stats["splits"][s]["negated"]]
                    for s in rel_splits
                ],
            )
        )
        cats = list(next(iter(stats["splits"].values()))["categories"]) if stats["splits"] else []
        md += ["", "## Referent categories", ""]
        md.append(_md(["split"] + cats, [[s] + [stats["splits"][s]["categories"][c] for c in cats] for s in rel_splits]))
        md += ["", "## Expression lengths", ""]
        lengths = sorted({int(k) for s in rel_splits for k in stats["splits"][s]["length_histogram"]})
        md.append(
            _md(
                ["split"] + [str(n) for n in lengths],
                [[s] + [stats["splits"][s]["length_histogram"].get(str(n), 0) for n in lengths] for s in rel_splits],
            )
        )

    if pipeline is not None:
        keys = sorted(pipeline)
        files["pipeline.csv"] = _csv([["statistic", "value"]] + [[k, pipeline[k]] for k in keys])
        md += ["", "## Annotation pipeline", ""]
        md.append(_md(["statistic", "value"], [[k, f"{pipeline[k]:.4f}" if isinstance(pipeline[k], float) else pipeline[k]] for k in keys]))

    files["report.md"] = "\n".join(md) + "\n"
    return files


def write_report(out_dir, files: Mapping[str, str]) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in sorted(files):
        p = out_dir / name
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(files[name])
        paths.append(p)
    return paths
