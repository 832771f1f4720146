"""Perturbations, simulated annotators and the easy/hard/adversarial pipeline.

Annotators come in two idealized flavors. A ``full_parse`` annotator reads
the expression's structure and picks uniformly among the boxes it
denotes. A ``bag_of_words`` annotator sees only the multiset of words: any
box whose category word occurs is a candidate unless an attribute word of
the same kind is present that it does not carry.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from .geometry import DEFAULT_IOU_THRESHOLD, DEFAULT_MARGIN, INVERSE_RELATION, RELATIONS, correct_at_iou
from .rng import SplitMix64, derive_seed, fisher_yates
from .worldgen import (
    COLORS,
    NP,
    SIZES,
    TOKEN_CATEGORY,
    Expression,
    Instance,
    Parse,
    Scene,
    content_words,
    relabel,
    render,
    resolve_expression,
)

KINDS = ("full_parse", "bag_of_words")


class EmptyExpressionError(ValueError):
    """A perturbation left no tokens."""


class DroppedInstance(Exception):
    """Stage 2 could not build an adversarial rewrite for this instance."""


@dataclass(frozen=True)
class AnnotatorPanel:
    kind: str = "bag_of_words"
    n_annotators: int = 5
    agree_threshold: int = 3
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    noise_rate: float = 0.03
    seed: int = 0
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown annotator kind {self.kind!r}")
        if not 1 <= self.agree_threshold <= self.n_annotators:
            raise ValueError("need 1 <= agree_threshold <= n_annotators")
        if not 0 < self.iou_threshold < 1:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if not 0 <= self.noise_rate <= 1:
            raise ValueError("noise_rate must lie in [0, 1]")


@dataclass
class VoteRecord:
    instance_id: int
    choices: list[int]
    correct: list[bool]
    majority_correct: bool
    confusion_counts: dict[int, int] = field(default_factory=dict)

    @property
    def n_correct(self) -> int:
        return sum(self.correct)

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "choices": list(self.choices),
            "correct": list(self.correct),
            "majority_correct": self.majority_correct,
            # JSON object keys must be strings
            "confusion_counts": {str(k): v for k, v in sorted(self.confusion_counts.items())},
        }


# ---------------------------------------------------------------------------
# perturbations


def shuffle_tokens(expr: Expression, seed: int) -> Expression:
    """Random word order; tags travel with their tokens and the parse is dropped."""
    if not expr.tokens:
        raise EmptyExpressionError("cannot shuffle an empty expression")
    order = fisher_yates(len(expr.tokens), seed)
    return replace(
        expr,
        tokens=tuple(expr.tokens[i] for i in order),
        pos=tuple(expr.pos[i] for i in order),
        parse=None,
    )


def nj_filter(expr: Expression) -> Expression:
    """Keep only nouns and adjectives, in their original order."""
    keep = [i for i, p in enumerate(expr.pos) if p in ("NOUN", "ADJ")]
    if not keep:
        raise EmptyExpressionError(f"expression {expr.expr_id} has no nouns or adjectives")
    return replace(
        expr,
        tokens=tuple(expr.tokens[i] for i in keep),
        pos=tuple(expr.pos[i] for i in keep),
        parse=None,
    )


# ---------------------------------------------------------------------------
# annotators


def bag_of_words_candidates(scene: Scene, tokens: Iterable[str]) -> list[int]:
    bag = set(tokens)
    cats = {TOKEN_CATEGORY[t] for t in bag if t in TOKEN_CATEGORY}
    colors = bag & set(COLORS)
    sizes = bag & set(SIZES)
    return [
        b.id
        for b in scene.boxes
        if b.category in cats
        and (not colors or b.color in colors)
        and (not sizes or b.size in sizes)
    ]


def candidate_set(panel: AnnotatorPanel, scene: Scene, expr: Expression) -> list[int]:
    """Boxes an annotator of this kind considers; empty falls back to every box.

    A full-parse annotator handed an expression without a parse (after a
    perturbation) reads it as a bag of words.
    """
    if panel.kind == "full_parse" and expr.parse is not None:
        found = resolve_expression(scene, expr.parse, panel.margin)
        cands = [b.id for b in scene.boxes if b.id in found]
    else:
        cands = bag_of_words_candidates(scene, expr.tokens)
    return cands or [b.id for b in scene.boxes]


def annotate(
    panel: AnnotatorPanel,
    scene: Scene,
    expr: Expression,
    instance_id: Optional[int] = None,
    trial: int = 0,
) -> VoteRecord:
    """Simulate ``panel`` labelling one (scene, expression) pair.

    Annotator k draws from ``SplitMix64(derive_seed(panel.seed, instance_id, trial, k))``:
    with probability ``noise_rate`` it picks uniformly over all boxes,
    otherwise uniformly over its candidate set.
    """
    if instance_id is None:
        instance_id = expr.expr_id
    cands = candidate_set(panel, scene, expr)
    all_ids = [b.id for b in scene.boxes]
    gold = scene.box(expr.gold_box)
    choices, correct = [], []
    confusion: Counter = Counter()
    for k in range(panel.n_annotators):
        rng = SplitMix64(derive_seed(panel.seed, "annotate", instance_id, trial, k))
        pool = all_ids if rng.uniform() < panel.noise_rate else cands
        pick = pool[rng.below(len(pool))]
        ok = correct_at_iou(scene.box(pick), gold, panel.iou_threshold)
        choices.append(pick)
        correct.append(ok)
        if not ok:
            confusion[pick] += 1
    return VoteRecord(
        instance_id=instance_id,
        choices=choices,
        correct=correct,
        majority_correct=sum(correct) >= panel.agree_threshold,
        confusion_counts=dict(confusion),
    )


def majority_correct_rate(panel: AnnotatorPanel, instances: Sequence[Instance]) -> float:
    votes = [annotate(panel, i.scene, i.expr, i.instance_id) for i in instances]
    return sum(v.majority_correct for v in votes) / len(votes)


# ---------------------------------------------------------------------------
# stage 1: easy / hard


def stage1_split(
    instances: Sequence[Instance], panel_bow: AnnotatorPanel
) -> tuple[list[Instance], list[Instance], list[VoteRecord]]:
    """Shuffle every expression and let a bag-of-words panel try to ground it.

    An instance is hard when at least ``agree_threshold`` annotators miss
    the gold box. Vote records refer to the shuffled expressions.
    """
    if panel_bow.kind != "bag_of_words":
        raise ValueError("stage 1 expects a bag_of_words panel")
    easy, hard, votes = [], [], []
    for inst in instances:
        shuffled = shuffle_tokens(inst.expr, derive_seed(panel_bow.seed, "shuffle", inst.instance_id))
        rec = annotate(panel_bow, inst.scene, shuffled, inst.instance_id)
        votes.append(rec)
        n_wrong = panel_bow.n_annotators - rec.n_correct
        if n_wrong >= panel_bow.agree_threshold:
            hard.append(relabel(inst, "hard", "stage1_hard"))
        else:
            easy.append(relabel(inst, "easy", "stage1_easy"))
    return easy, hard, votes


# ---------------------------------------------------------------------------
# stage 2: adversarial rewrite


def most_confused(votes: VoteRecord) -> int:
    if not votes.confusion_counts:
        raise DroppedInstance(f"instance {votes.instance_id}: no confused region")
    top = max(votes.confusion_counts.values())
    return min(k for k, v in votes.confusion_counts.items() if v == top)


def _subject_for(target, original_tokens: set[str]) -> list[NP]:
    """Noun phrases for the new target that reuse the original's attribute words."""
    color = target.color if target.color in original_tokens else None
    size = target.size if target.size in original_tokens else None
    out = [NP(target.category, color, size)]
    if color is not None and size is not None:
        out += [NP(target.category, color, None), NP(target.category, None, size)]
    return out


def stage2_adversarialize(
    scene: Scene,
    expr: Expression,
    votes: VoteRecord,
    seed: int,
    margin: float = DEFAULT_MARGIN,
    min_shared: int = 3,
) -> Expression:
    """Rewrite a hard expression so it denotes the box annotators confused most.

    The rewrite swaps the roles of the two noun phrases: the new subject
    describes the confused box with attribute words taken from the original,
    the old subject becomes the object. The inverse relation is tried first,
    then the remaining relations in a seeded order, then negated variants.
    If the confused box is itself a subject match, relations are re-selected
    with the original phrase order. Raises :class:`DroppedInstance` when no
    candidate denotes the new target alone while sharing at least
    ``min_shared`` content words with the original.
    """
    if expr.parse is None or expr.parse.relation is None:
        raise ValueError("stage 2 needs a relational expression with its parse")
    parse = expr.parse
    target_id = most_confused(votes)
    target = scene.box(target_id)
    orig_tokens = set(expr.tokens)
    orig_content = Counter(content_words(expr.tokens, expr.pos))

    rng = SplitMix64(derive_seed(seed, "stage2", expr.expr_id))
    inverse = INVERSE_RELATION[parse.relation]
    others = [r for r in RELATIONS if r != inverse]
    # seeded Fisher-Yates over the non-inverse relations
    for i in range(len(others) - 1, 0, -1):
        j = rng.below(i + 1)
        others[i], others[j] = others[j], others[i]
    rel_order = [inverse] + others

    plans: list[tuple[NP, NP]] = []
    for subj in _subject_for(target, orig_tokens):
        plans.append((subj, parse.subject))
        if parse.object != parse.subject:
            plans.append((subj, parse.object))
    if parse.subject.matches(target):
        plans.append((parse.subject, parse.object))

    for negated in (False, True):
        for subj, obj in plans:
            for rel in rel_order:
                cand = Parse(subj, rel, negated, obj)
                if cand == parse:
                    continue
                if resolve_expression(scene, cand, margin) != {target_id}:
                    continue
                tokens, pos = render(cand)
                shared = sum((Counter(content_words(tokens, pos)) & orig_content).values())
                if shared < min_shared:
                    continue
                return Expression(
                    expr_id=expr.expr_id,
                    tokens=tokens,
                    pos=pos,
                    parse=cand,
                    gold_box=target_id,
                    form=cand.form,
                )
    raise DroppedInstance(f"instance {votes.instance_id}: no uniquely-resolving rewrite")


# ---------------------------------------------------------------------------
# stage 3: validation


def stage3_validate(
    scene: Scene,
    adv_expr: Expression,
    panel: AnnotatorPanel,
    instance_id: Optional[int] = None,
) -> bool:
    if panel.kind != "full_parse":
        raise ValueError("stage 3 expects a full_parse panel")
    return annotate(panel, scene, adv_expr, instance_id).majority_correct


@dataclass
class PipelineStats:
    n_input: int = 0
    n_easy: int = 0
    n_hard: int = 0
    n_hard_non_relational: int = 0
    n_dropped_no_rewrite: int = 0
    n_rejected_stage3: int = 0
    n_adversarial: int = 0

    @property
    def hard_fraction(self) -> float:
        return self.n_hard / self.n_input if self.n_input else 0.0

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["hard_fraction"] = self.hard_fraction
        return d


def build_adversarial(
    hard: Sequence[Instance],
    votes: dict[int, VoteRecord],
    panel_validate: AnnotatorPanel,
    seed: int,
    stats: Optional[PipelineStats] = None,
    margin: float = DEFAULT_MARGIN,
) -> list[Instance]:
    """Stages 2 and 3 over the hard split; failures are tallied in ``stats``."""
    stats = stats if stats is not None else PipelineStats()
    out = []
    for inst in hard:
        if inst.expr.parse is None or inst.expr.parse.relation is None:
            stats.n_hard_non_relational += 1
            continue
        try:
            adv = stage2_adversarialize(inst.scene, inst.expr, votes[inst.instance_id], seed, margin)
        except DroppedInstance:
            stats.n_dropped_no_rewrite += 1
            continue
        if not stage3_validate(inst.scene, adv, panel_validate, inst.instance_id):
            stats.n_rejected_stage3 += 1
            continue
        new = replace(inst, expr=adv)
        out.append(relabel(new, "adversarial", "stage3_validated"))
    stats.n_adversarial = len(out)
    return out


def diagnose(
    instances: Sequence[Instance],
    panel_bow: Optional[AnnotatorPanel] = None,
    panel_validate: Optional[AnnotatorPanel] = None,
    seed: int = 0,
) -> tuple[list[Instance], list[Instance], list[Instance], list[VoteRecord], PipelineStats]:
    """Run all three stages; returns (easy, hard, adversarial, stage-1 votes, stats)."""
    panel_bow = panel_bow or AnnotatorPanel(kind="bag_of_words", seed=derive_seed(seed, "panel-bow"))
    panel_validate = panel_validate or AnnotatorPanel(
        kind="full_parse", n_annotators=3, agree_threshold=2, seed=derive_seed(seed, "panel-validate")
    )
    easy, hard, votes = stage1_split(instances, panel_bow)
    stats = PipelineStats(n_input=len(instances), n_easy=len(easy), n_hard=len(hard))
    by_id = {v.instance_id: v for v in votes}
    adv = build_adversarial(hard, by_id, panel_validate, seed, stats)
    return easy, hard, adv, votes, stats
