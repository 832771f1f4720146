"""Accuracy per split, perturbation tables and dataset statistics."""

from __future__ import annotations

from collections import Counter
from typing import Callable, Sequence, Union

import numpy as np

from ..diagnostics import EmptyExpressionError, nj_filter, shuffle_tokens
from ..geometry import DEFAULT_IOU_THRESHOLD, correct_at_iou
from ..model import ModelParams, tensorize
from ..rng import derive_seed
from ..training import predict
from ..worldgen import CATEGORIES, RELATIONS, Instance

# split label -> column heading, in report order
SPLIT_COLUMNS = {"dev": "Dev", "test": "Test", "easy": "Easy", "hard": "Hard", "adversarial": "Adv"}
PERTURBATION_SPLITS = ("easy", "hard", "adversarial")
PERTURBATIONS = ("original", "shuf", "nj")

Scorer = Callable[[Instance], np.ndarray]


def predictions(model: Union[ModelParams, Scorer], instances: Sequence[Instance], lmax: int = 16) -> list[int]:
    """Predicted box id per instance (argmax of the scores, ties to the first box)."""
    if not instances:
        return []
    if isinstance(model, ModelParams):
        idx = predict(model, tensorize(instances, lmax))
        return [inst.scene.boxes[int(i)].id for inst, i in zip(instances, idx)]
    out = []
    for inst in instances:
        scores = np.asarray(model(inst), dtype=float)
        if scores.shape != (len(inst.scene.boxes),):
            raise ValueError(f"scorer returned shape {scores.shape} for instance {inst.instance_id}")
        out.append(inst.scene.boxes[int(np.argmax(scores))].id)
    return out


def _hits(instances, preds, threshold) -> list[bool]:
    return [
        correct_at_iou(inst.scene.box(p), inst.scene.box(inst.gold_box), threshold)
        for inst, p in zip(instances, preds)
    ]


def evaluate(
    model: Union[ModelParams, Scorer],
    dataset: Sequence[Instance],
    threshold: float = DEFAULT_IOU_THRESHOLD,
    lmax: int = 16,
) -> dict:
    """``{"overall": {...}, "splits": {split: {"accuracy", "correct", "n"}}}``.

    ``model`` is a parameter set or any callable mapping an instance to one
    score per box. Splits with no instances are left out rather than
    reported as zero.
    """
    preds = predictions(model, dataset, lmax)
    hits = _hits(dataset, preds, threshold)
    by_split: dict[str, list[bool]] = {}
    for inst, h in zip(dataset, hits):
        by_split.setdefault(inst.split, []).append(h)
    splits = {
        s: {"accuracy": sum(v) / len(v), "correct": sum(v), "n": len(v)}
        for s, v in sorted(by_split.items())
    }
    overall = None
    if hits:
        overall = {"accuracy": sum(hits) / len(hits), "correct": sum(hits), "n": len(hits)}
    return {"overall": overall, "splits": splits, "threshold": threshold}


def perturb(instances: Sequence[Instance], kind: str, seed: int) -> tuple[list[Instance], int]:
    """Apply a perturbation; returns the perturbed instances and how many were excluded."""
    if kind == "original":
        return list(instances), 0
    out, excluded = [], 0
    for inst in instances:
        if kind == "shuf":
            expr = shuffle_tokens(inst.expr, derive_seed(seed, "shuf", inst.instance_id))
        elif kind == "nj":
            try:
                expr = nj_filter(inst.expr)
            except EmptyExpressionError:
                excluded += 1
                continue
        else:
            raise ValueError(f"unknown perturbation {kind!r}")
        out.append(Instance(inst.instance_id, inst.scene, expr, inst.split, inst.provenance))
    return out, excluded


def perturbation_report(
    model: Union[ModelParams, Scorer],
    dataset: Sequence[Instance],
    seed: int = 0,
    threshold: float = DEFAULT_IOU_THRESHOLD,
    lmax: int = 16,
) -> dict:
    """Accuracy under original / shuffled / noun+adjective-only text, per split.

    Instances left with no nouns or adjectives are dropped from the N+J
    column and counted in ``nj_excluded``.
    """
    table = {}
    for split in PERTURBATION_SPLITS:
        items = [i for i in dataset if i.split == split]
        if not items:
            continue
        row = {"n": len(items)}
        for kind in PERTURBATIONS:
            pert, excluded = perturb(items, kind, seed)
            if kind == "nj":
                row["nj_excluded"] = excluded
            if pert:
                hits = _hits(pert, predictions(model, pert, lmax), threshold)
                row[kind] = sum(hits) / len(hits)
            else:
                row[kind] = None
        table[split] = row
    return table


def dataset_stats(dataset: Sequence[Instance]) -> dict:
    """Counts, mean length, length histogram, relation and category frequencies per split."""
    groups: dict[str, list[Instance]] = {}
    for inst in dataset:
        groups.setdefault(inst.split, []).append(inst)
    out = {"n": len(dataset), "splits": {}}
    for split, items in sorted(groups.items()):
        lengths = [len(i.expr.tokens) for i in items]
        relations = Counter(
            i.expr.parse.relation
            for i in items
            if i.expr.parse is not None and i.expr.parse.relation is not None
        )
        cats = Counter(i.scene.box(i.gold_box).category for i in items)
        out["splits"][split] = {
            "count": len(items),
            "mean_length": sum(lengths) / len(lengths),
            "length_histogram": {str(k): v for k, v in sorted(Counter(lengths).items())},
            "forms": dict(sorted(Counter(i.expr.form for i in items).items())),
            "relations": {r: relations.get(r, 0) for r in RELATIONS},
            "negated": sum(
                1 for i in items if i.expr.parse is not None and i.expr.parse.negated
            ),
            "categories": {c: cats.get(c, 0) for c in CATEGORIES},
        }
    return out
