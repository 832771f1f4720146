"""Synthetic scenes and compositional referring expressions.

A scene is a handful of labelled boxes; an expression is rendered from a
small latent parse ``subject [not] RELATION object`` by a fixed template,
with part-of-speech tags emitted alongside the tokens. Everything here is
a pure function of ``(seed, cfg)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .geometry import DEFAULT_MARGIN, RELATIONS, Box, iou_exceeds, relation_holds
from .rng import derive_seed

CATEGORIES = ("ball", "box_obj", "cup", "dog", "cat", "car", "bike", "tree")
COLORS = ("red", "blue", "green", "yellow", "white", "black")
SIZES = ("big", "small")
FORMS = ("attribute_only", "relational", "negated_relational")
POS_TAGS = ("DET", "ADJ", "NOUN", "ADP", "NEG")

CATEGORY_TOKEN = {c: ("box" if c == "box_obj" else c) for c in CATEGORIES}
TOKEN_CATEGORY = {t: c for c, t in CATEGORY_TOKEN.items()}
RELATION_TOKENS = {
    "left_of": ("left", "of"),
    "right_of": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
}
QA_ANSWERS = COLORS + ("yes", "no")

# closed vocabulary: expressions plus the two relational-QA prefixes
VOCAB = (
    ("the", "not", "left", "right", "of", "above", "below")
    + tuple(CATEGORY_TOKEN[c] for c in CATEGORIES)
    + COLORS
    + SIZES
    + ("is", "color")
)


class GenerationError(RuntimeError):
    """Rejection sampling ran out of attempts."""

    def __init__(self, what: str, seed: int):
        super().__init__(f"could not generate {what} (seed={seed})")
        self.seed = seed


@dataclass(frozen=True)
class GenConfig:
    mean_boxes: float = 8.2
    max_boxes: int = 16
    max_overlap: float = 0.3
    # (attribute_only, relational, negated_relational)
    form_mix: tuple[float, float, float] = (0.8, 0.15, 0.05)
    margin: float = DEFAULT_MARGIN
    max_attempts: int = 1000
    small_side: tuple[float, float] = (0.06, 0.14)
    big_side: tuple[float, float] = (0.16, 0.30)
    grid: int = 10_000
    min_content_words: int = 3

    def __post_init__(self):
        if self.mean_boxes < 2:
            raise ValueError("mean_boxes must be at least 2")
        if len(self.form_mix) != 3 or min(self.form_mix) < 0 or sum(self.form_mix) <= 0:
            raise ValueError("form_mix needs three non-negative weights")


@dataclass(frozen=True)
class Scene:
    scene_id: int
    boxes: tuple[Box, ...]

    def box(self, box_id: int) -> Box:
        for b in self.boxes:
            if b.id == box_id:
                return b
        raise KeyError(f"scene {self.scene_id} has no box {box_id}")

    def index_of(self, box_id: int) -> int:
        for i, b in enumerate(self.boxes):
            if b.id == box_id:
                return i
        raise KeyError(f"scene {self.scene_id} has no box {box_id}")


@dataclass(frozen=True)
class NP:
    category: str
    color: Optional[str] = None
    size: Optional[str] = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.color is not None and self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size is not None and self.size not in SIZES:
            raise ValueError(f"unknown size {self.size!r}")

    def matches(self, box: Box) -> bool:
        return (
            box.category == self.category
            and (self.color is None or box.color == self.color)
            and (self.size is None or box.size == self.size)
        )

    @property
    def n_content(self) -> int:
        return 1 + (self.color is not None) + (self.size is not None)


@dataclass(frozen=True)
class Parse:
    subject: NP
    relation: Optional[str] = None
    negated: bool = False
    object: Optional[NP] = None

    def __post_init__(self):
        if (self.relation is None) != (self.object is None):
            raise ValueError("relation and object must be given together")
        if self.negated and self.relation is None:
            raise ValueError("negation needs a relation")
        if self.relation is not None and self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")

    @property
    def form(self) -> str:
        if self.relation is None:
            return "attribute_only"
        return "negated_relational" if self.negated else "relational"


@dataclass(frozen=True)
class Expression:
    expr_id: int
    tokens: tuple[str, ...]
    pos: tuple[str, ...]
    parse: Optional[Parse]  # None once the surface form has been perturbed
    gold_box: int
    form: str

    def __post_init__(self):
        if len(self.tokens) != len(self.pos):
            raise ValueError("tokens and pos differ in length")


@dataclass(frozen=True)
class Instance:
    """A grounding triplet (scene, expression, gold box) plus bookkeeping."""

    instance_id: int
    scene: Scene
    expr: Expression
    split: str = "train"
    provenance: dict = field(default_factory=dict, compare=True)

    @property
    def gold_box(self) -> int:
        return self.expr.gold_box


@dataclass(frozen=True)
class QAExample:
    qa_id: int
    scene: Scene
    tokens: tuple[str, ...]
    pos: tuple[str, ...]
    answer: int  # index into QA_ANSWERS
    kind: str  # "exist" or "color"
    split: str = "train"


# ---------------------------------------------------------------------------
# rendering and resolution


def _render_np(np_: NP) -> tuple[list[str], list[str]]:
    tokens, pos = ["the"], ["DET"]
    if np_.color is not None:
        tokens.append(np_.color)
        pos.append("ADJ")
    if np_.size is not None:
        tokens.append(np_.size)
        pos.append("ADJ")
    tokens.append(CATEGORY_TOKEN[np_.category])
    pos.append("NOUN")
    return tokens, pos


def render(parse: Parse) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Template ``the [color] [size] CAT [not] REL the [color] [size] CAT``."""
    tokens, pos = _render_np(parse.subject)
    if parse.relation is not None:
        if parse.negated:
            tokens.append("not")
            pos.append("NEG")
        rel = RELATION_TOKENS[parse.relation]
        tokens.extend(rel)
        pos.extend(["ADP"] * len(rel))
        t, p = _render_np(parse.object)
        tokens.extend(t)
        pos.extend(p)
    return tuple(tokens), tuple(pos)


def resolve_expression(scene: Scene, parse: Parse, margin: float = DEFAULT_MARGIN) -> set[int]:
    """Ids of every box the parse can denote in ``scene``.

    A subject match survives a relational parse when the relation (or its
    complement, if negated) holds against at least one object match.
    """
    subjects = [b for b in scene.boxes if parse.subject.matches(b)]
    if parse.relation is None:
        return {b.id for b in subjects}
    objects = [b for b in scene.boxes if parse.object.matches(b)]
    return {
        s.id
        for s in subjects
        if any(relation_holds(parse.relation, s, o, margin, parse.negated) for o in objects)
    }


def content_words(tokens: Sequence[str], pos: Sequence[str]) -> list[str]:
    return [t for t, p in zip(tokens, pos) if p in ("NOUN", "ADJ")]


# ---------------------------------------------------------------------------
# scenes


def _side(rng: np.random.Generator, bounds: tuple[float, float], grid: int) -> int:
    lo, hi = round(bounds[0] * grid), round(bounds[1] * grid)
    return int(rng.integers(lo, hi + 1))


def generate_scene(seed: int, cfg: GenConfig = GenConfig(), scene_id: int = 0) -> Scene:
    """Random non-degenerate scene with at least one repeated category.

    Box count is ``2 + Poisson(mean_boxes - 2)`` capped at ``max_boxes``;
    coordinates sit on a ``1/grid`` lattice so the scene serializes exactly.
    """
    rng = np.random.default_rng(seed)
    n = min(2 + int(rng.poisson(cfg.mean_boxes - 2)), cfg.max_boxes)
    dup = int(rng.integers(len(CATEGORIES)))
    cats = np.concatenate([[dup, dup], rng.integers(len(CATEGORIES), size=n - 2)])
    cats = rng.permutation(cats)
    colors = rng.integers(len(COLORS), size=n)
    sizes = rng.integers(len(SIZES), size=n)

    g = cfg.grid
    boxes: list[Box] = []
    attempts = 0
    for i in range(n):
        bounds = cfg.big_side if SIZES[sizes[i]] == "big" else cfg.small_side
        while True:
            attempts += 1
            if attempts > cfg.max_attempts:
                raise GenerationError(f"scene {scene_id}", seed)
            w, h = _side(rng, bounds, g), _side(rng, bounds, g)
            x, y = int(rng.integers(0, g - w + 1)), int(rng.integers(0, g - h + 1))
            cand = Box(
                id=i, x=x / g, y=y / g, w=w / g, h=h / g,
                category=CATEGORIES[cats[i]],
                color=COLORS[colors[i]],
                size=SIZES[sizes[i]],
            )
            if not any(iou_exceeds(cand, b, cfg.max_overlap) for b in boxes):
                boxes.append(cand)
                break
    return Scene(scene_id=scene_id, boxes=tuple(boxes))


# ---------------------------------------------------------------------------
# expressions


def _bits(mask: int) -> Iterator[int]:
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask ^= low


def _np_variants(box: Box) -> tuple[NP, ...]:
    return (
        NP(box.category),
        NP(box.category, color=box.color),
        NP(box.category, size=box.size),
        NP(box.category, color=box.color, size=box.size),
    )


class _SceneIndex:
    """Bitmask tables for fast enumeration of referring expressions."""

    def __init__(self, scene: Scene, margin: float):
        self.scene = scene
        self.n = len(scene.boxes)
        self.full = (1 << self.n) - 1
        self._match_cache: dict[NP, int] = {}
        self.rel_rows = {}
        for rel in RELATIONS:
            rows = []
            for s in scene.boxes:
                row = 0
                for j, o in enumerate(scene.boxes):
                    if relation_holds(rel, s, o, margin):
                        row |= 1 << j
                rows.append(row)
            self.rel_rows[rel] = rows
        variants: dict[NP, None] = {}
        for b in scene.boxes:
            for v in _np_variants(b):
                variants[v] = None
        self.all_nps = tuple(variants)

    def mask(self, np_: NP) -> int:
        m = self._match_cache.get(np_)
        if m is None:
            m = 0
            for i, b in enumerate(self.scene.boxes):
                if np_.matches(b):
                    m |= 1 << i
            self._match_cache[np_] = m
        return m

    def resolve(self, parse: Parse) -> int:
        subj = self.mask(parse.subject)
        if parse.relation is None:
            return subj
        obj = self.mask(parse.object)
        rows = self.rel_rows[parse.relation]
        out = 0
        for s in _bits(subj):
            row = rows[s] ^ self.full if parse.negated else rows[s]
            if row & obj:
                out |= 1 << s
        return out

    def attribute_options(self, t: int) -> list[Parse]:
        box = self.scene.boxes[t]
        return [Parse(v) for v in _np_variants(box) if self.mask(v) == 1 << t]

    def relational_options(self, t: int, negated: bool, min_content: int) -> list[Parse]:
        box = self.scene.boxes[t]
        subjects = [v for v in _np_variants(box) if self.mask(v).bit_count() >= 2]
        out = []
        for subj in subjects:
            for obj in self.all_nps:
                if subj.n_content + obj.n_content < min_content:
                    continue
                for rel in RELATIONS:
                    p = Parse(subj, rel, negated, obj)
                    if self.resolve(p) == 1 << t:
                        out.append(p)
        return out

    def options(self, t: int, form: str, min_content: int) -> list[Parse]:
        if form == "attribute_only":
            return self.attribute_options(t)
        return self.relational_options(t, form == "negated_relational", min_content)


def _choose_form(rng: np.random.Generator, mix: Sequence[float]) -> str:
    p = np.asarray(mix, dtype=float)
    return FORMS[int(rng.choice(len(FORMS), p=p / p.sum()))]


def generate_expression(
    scene: Scene, seed: int, cfg: GenConfig = GenConfig(), expr_id: int = 0
) -> Expression:
    """Uniquely-referring expression for a random target in ``scene``.

    The form is drawn from ``cfg.form_mix``. Relational forms use a subject
    phrase matching at least two boxes, so the relation is what singles out
    the target. If the drawn form is impossible for every box, the remaining
    forms are tried in order.
    """
    rng = np.random.default_rng(seed)
    drawn = _choose_form(rng, cfg.form_mix)
    order = [drawn] + [f for f in FORMS if f != drawn]
    index = _SceneIndex(scene, cfg.margin)
    targets = [int(t) for t in rng.permutation(index.n)]
    for form in order:
        for t in targets:
            opts = index.options(t, form, cfg.min_content_words)
            if opts:
                parse = opts[int(rng.integers(len(opts)))]
                tokens, pos = render(parse)
                return Expression(
                    expr_id=expr_id,
                    tokens=tokens,
                    pos=pos,
                    parse=parse,
                    gold_box=scene.boxes[t].id,
                    form=parse.form,
                )
    raise GenerationError(f"expression for scene {scene.scene_id}", seed)


def generate_instances(
    seed: int,
    n: int,
    cfg: GenConfig = GenConfig(),
    split: str = "train",
    start: int = 0,
) -> list[Instance]:
    """``n`` instances with ids ``start .. start+n-1``; instance k depends only on (seed, k)."""
    out = []
    for k in range(start, start + n):
        scene_seed = derive_seed(seed, "scene", k)
        expr_seed = derive_seed(seed, "expr", k)
        scene = generate_scene(scene_seed, cfg, scene_id=k)
        expr = generate_expression(scene, expr_seed, cfg, expr_id=k)
        out.append(
            Instance(
                instance_id=k,
                scene=scene,
                expr=expr,
                split=split,
                provenance={"seed": seed, "stage_flags": ["generated"]},
            )
        )
    return out


def relabel(inst: Instance, split: str, flag: Optional[str] = None) -> Instance:
    prov = dict(inst.provenance)
    if flag is not None:
        prov["stage_flags"] = list(prov.get("stage_flags", [])) + [flag]
    return replace(inst, split=split, provenance=prov)


# ---------------------------------------------------------------------------
# relational QA


def _qa_exist(index: _SceneIndex, rng: np.random.Generator, want_yes: bool) -> Optional[Parse]:
    # "no" questions name a subject that is absent from the scene next to an
    # object that is present, so the answer never hinges on geometry alone
    nps = [v for v in index.all_nps if v.color is not None]
    present = set(nps)
    for _ in range(64):
        obj = nps[int(rng.integers(len(nps)))]
        rel = RELATIONS[int(rng.integers(len(RELATIONS)))]
        if want_yes:
            subj = nps[int(rng.integers(len(nps)))]
            if subj == obj:
                continue
            p = Parse(subj, rel, False, obj)
            if index.resolve(p):
                return p
        else:
            subj = NP(CATEGORIES[int(rng.integers(len(CATEGORIES)))], COLORS[int(rng.integers(len(COLORS)))])
            if subj not in present:
                return Parse(subj, rel, False, obj)
    return None


def _qa_color(index: _SceneIndex, rng: np.random.Generator) -> Optional[tuple[Parse, int]]:
    for t in rng.permutation(index.n):
        t = int(t)
        opts = [
            p for p in index.relational_options(t, False, 0)
            if p.subject.color is None
        ]
        if opts:
            return opts[int(rng.integers(len(opts)))], t
    return None


def generate_qa(scene: Scene, seed: int, cfg: GenConfig = GenConfig(), qa_id: int = 0) -> QAExample:
    """Relational question about ``scene``.

    Two kinds, drawn with equal probability (the other is used when the
    drawn kind is impossible in this scene): ``is <expression>`` answered
    yes/no by whether the relational parse denotes anything, and
    ``color of <expression>`` asking the color of the unique referent of a
    relational parse whose subject carries no color.
    """
    rng = np.random.default_rng(seed)
    index = _SceneIndex(scene, cfg.margin)
    kinds = ["exist", "color"] if rng.random() < 0.5 else ["color", "exist"]
    for kind in kinds:
        if kind == "exist":
            want_yes = bool(rng.random() < 0.5)
            parse = _qa_exist(index, rng, want_yes)
            if parse is None:
                continue
            tokens, pos = render(parse)
            answer = QA_ANSWERS.index("yes" if want_yes else "no")
            return QAExample(qa_id, scene, ("is",) + tokens, ("VERB",) + pos, answer, "exist")
        found = _qa_color(index, rng)
        if found is None:
            continue
        parse, t = found
        tokens, pos = render(parse)
        answer = QA_ANSWERS.index(scene.boxes[t].color)
        return QAExample(qa_id, scene, ("color", "of") + tokens, ("NOUN", "ADP") + pos, answer, "color")
    raise GenerationError(f"question for scene {scene.scene_id}", seed)


def generate_qa_examples(
    seed: int, n: int, cfg: GenConfig = GenConfig(), split: str = "train", start: int = 0
) -> list[QAExample]:
    out = []
    for k in range(start, start + n):
        scene = generate_scene(derive_seed(seed, "qa-scene", k), cfg, scene_id=k)
        qa = generate_qa(scene, derive_seed(seed, "qa", k), cfg, qa_id=k)
        out.append(replace(qa, split=split))
    return out
