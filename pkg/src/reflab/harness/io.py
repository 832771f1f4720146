"""JSONL datasets, vote records, metrics logs and checkpoints.

Every record is one line of JSON with sorted keys and compact separators.
Python's float repr is the shortest string that round-trips, so writing
then reading a dataset gives back equal values and rewriting it gives the
same bytes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Optional

from ..diagnostics import VoteRecord
from ..geometry import Box
from ..model import ModelParams, load_params, save_params
from ..worldgen import NP, QA_ANSWERS, Expression, Instance, Parse, QAExample, Scene

SCHEMA_VERSION = 1


class FormatError(ValueError):
    """A malformed input file; names the file, the 1-based line and the field."""

    def __init__(self, path, line: Optional[int], field: str, msg: str):
        self.path, self.line, self.field = str(path), line, field
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: field {field!r}: {msg}")


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def write_jsonl(path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps(rec))
            fh.write("\n")


def iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)``; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(path, n, "<record>", f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise FormatError(path, n, "<record>", "expected a JSON object")
            yield n, rec


def write_json(path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False))
        fh.write("\n")


def read_json(path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, "<document>", f"invalid JSON ({exc.msg})") from None


# ---------------------------------------------------------------------------
# field access with located errors


class _Ctx:
    def __init__(self, path, line):
        self.path, self.line = path, line

    def fail(self, field: str, msg: str):
        raise FormatError(self.path, self.line, field, msg)

    def get(self, rec, key: str, kind, prefix: str = "", optional: bool = False):
        name = f"{prefix}{key}"
        if not isinstance(rec, dict):
            self.fail(prefix.rstrip(".") or "<record>", "expected an object")
        if key not in rec:
            self.fail(name, "missing")
        val = rec[key]
        if val is None and optional:
            return None
        if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
            self.fail(name, f"expected an integer, got {val!r}")
        if kind is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                self.fail(name, f"expected a number, got {val!r}")
            return float(val)
        if kind not in (int, float) and not isinstance(val, kind):
            self.fail(name, f"expected {kind.__name__}, got {type(val).__name__}")
        return val

    def strings(self, rec, key: str, prefix: str = "") -> tuple[str, ...]:
        vals = self.get(rec, key, list, prefix)
        for i, v in enumerate(vals):
            if not isinstance(v, str):
                self.fail(f"{prefix}{key}[{i}]", "expected a string")
        return tuple(vals)

    def schema(self, rec) -> None:
        v = self.get(rec, "schema_version", int)
        if v != SCHEMA_VERSION:
            self.fail("schema_version", f"unsupported version {v}")


# ---------------------------------------------------------------------------
# scenes, parses, instances


def box_to_dict(b: Box) -> dict:
    return {
        "id": b.id, "x": b.x, "y": b.y, "w": b.w, "h": b.h,
        "category": b.category, "color": b.color, "size": b.size,
    }


def scene_to_dict(scene: Scene) -> dict:
    return {"scene_id": scene.scene_id, "boxes": [box_to_dict(b) for b in scene.boxes]}


def _np_to_dict(v: Optional[NP]) -> Optional[dict]:
    if v is None:
        return None
    return {"category": v.category, "color": v.color, "size": v.size}


def parse_to_dict(p: Optional[Parse]) -> Optional[dict]:
    if p is None:
        return None
    return {
        "subject": _np_to_dict(p.subject),
        "relation": p.relation,
        "negated": p.negated,
        "object": _np_to_dict(p.object),
    }


def instance_to_dict(inst: Instance) -> dict:
    e = inst.expr
    return {
        "schema_version": SCHEMA_VERSION,
        "instance_id": inst.instance_id,
        "scene": scene_to_dict(inst.scene),
        "expr_id": e.expr_id,
        "tokens": list(e.tokens),
        "pos": list(e.pos),
        "parse": parse_to_dict(e.parse),
        "form": e.form,
        "gold_box": e.gold_box,
        "split": inst.split,
        "provenance": inst.provenance,
    }


def _scene(ctx: _Ctx, rec: dict) -> Scene:
    s = ctx.get(rec, "scene", dict)
    sid = ctx.get(s, "scene_id", int, "scene.")
    boxes = []
    for i, b in enumerate(ctx.get(s, "boxes", list, "scene.")):
        pre = f"scene.boxes[{i}]."
        try:
            boxes.append(
                Box(
                    id=ctx.get(b, "id", int, pre),
                    x=ctx.get(b, "x", float, pre),
                    y=ctx.get(b, "y", float, pre),
                    w=ctx.get(b, "w", float, pre),
                    h=ctx.get(b, "h", float, pre),
                    category=ctx.get(b, "category", str, pre),
                    color=ctx.get(b, "color", str, pre),
                    size=ctx.get(b, "size", str, pre),
                )
            )
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            ctx.fail(pre.rstrip("."), str(exc))
    return Scene(sid, tuple(boxes))


def _np(ctx: _Ctx, d, prefix: str) -> Optional[NP]:
    if d is None:
        return None
    try:
        return NP(
            ctx.get(d, "category", str, prefix),
            ctx.get(d, "color", str, prefix, optional=True),
            ctx.get(d, "size", str, prefix, optional=True),
        )
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        ctx.fail(prefix.rstrip("."), str(exc))


def _parse(ctx: _Ctx, rec: dict) -> Optional[Parse]:
    p = ctx.get(rec, "parse", dict, optional=True)
    if p is None:
        return None
    try:
        return Parse(
            _np(ctx, ctx.get(p, "subject", dict, "parse."), "parse.subject."),
            ctx.get(p, "relation", str, "parse.", optional=True),
            ctx.get(p, "negated", bool, "parse."),
            _np(ctx, ctx.get(p, "object", dict, "parse.", optional=True), "parse.object."),
        )
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        ctx.fail("parse", str(exc))


def instance_from_dict(rec: dict, path="<memory>", line: Optional[int] = None) -> Instance:
    ctx = _Ctx(path, line)
    ctx.schema(rec)
    scene = _scene(ctx, rec)
    tokens = ctx.strings(rec, "tokens")
    pos = ctx.strings(rec, "pos")
    if len(tokens) != len(pos):
        ctx.fail("pos", "length differs from tokens")
    gold = ctx.get(rec, "gold_box", int)
    if gold not in {b.id for b in scene.boxes}:
        ctx.fail("gold_box", f"box {gold} is not in the scene")
    expr = Expression(
        expr_id=ctx.get(rec, "expr_id", int),
        tokens=tokens,
        pos=pos,
        parse=_parse(ctx, rec),
        gold_box=gold,
        form=ctx.get(rec, "form", str),
    )
    prov = ctx.get(rec, "provenance", dict)
    return Instance(ctx.get(rec, "instance_id", int), scene, expr, ctx.get(rec, "split", str), prov)


def save_dataset(path, instances: Iterable[Instance]) -> None:
    write_jsonl(path, (instance_to_dict(i) for i in instances))


def load_dataset(path) -> list[Instance]:
    return [instance_from_dict(rec, path, n) for n, rec in iter_jsonl(path)]


# ---------------------------------------------------------------------------
# QA examples


def qa_to_dict(qa: QAExample) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "qa_id": qa.qa_id,
        "scene": scene_to_dict(qa.scene),
        "tokens": list(qa.tokens),
        "pos": list(qa.pos),
        "answer": QA_ANSWERS[qa.answer],
        "kind": qa.kind,
        "split": qa.split,
    }


def qa_from_dict(rec: dict, path="<memory>", line: Optional[int] = None) -> QAExample:
    ctx = _Ctx(path, line)
    ctx.schema(rec)
    answer = ctx.get(rec, "answer", str)
    if answer not in QA_ANSWERS:
        ctx.fail("answer", f"unknown answer {answer!r}")
    tokens, pos = ctx.strings(rec, "tokens"), ctx.strings(rec, "pos")
    if len(tokens) != len(pos):
        ctx.fail("pos", "length differs from tokens")
    return QAExample(
        qa_id=ctx.get(rec, "qa_id", int),
        scene=_scene(ctx, rec),
        tokens=tokens,
        pos=pos,
        answer=QA_ANSWERS.index(answer),
        kind=ctx.get(rec, "kind", str),
        split=ctx.get(rec, "split", str),
    )


def save_qa(path, examples: Iterable[QAExample]) -> None:
    write_jsonl(path, (qa_to_dict(q) for q in examples))


def load_qa(path) -> list[QAExample]:
    return [qa_from_dict(rec, path, n) for n, rec in iter_jsonl(path)]


# ---------------------------------------------------------------------------
# votes, logs, checkpoints


def save_votes(path, votes: Iterable[VoteRecord]) -> None:
    write_jsonl(path, ({"schema_version": SCHEMA_VERSION, **v.to_dict()} for v in votes))


def load_votes(path) -> list[VoteRecord]:
    out = []
    for n, rec in iter_jsonl(path):
        ctx = _Ctx(path, n)
        ctx.schema(rec)
        counts = {}
        for k, v in ctx.get(rec, "confusion_counts", dict).items():
            try:
                counts[int(k)] = int(v)
            except (TypeError, ValueError):
                ctx.fail(f"confusion_counts.{k}", "expected integer box id and count")
        out.append(
            VoteRecord(
                instance_id=ctx.get(rec, "instance_id", int),
                choices=[int(c) for c in ctx.get(rec, "choices", list)],
                correct=[bool(c) for c in ctx.get(rec, "correct", list)],
                majority_correct=ctx.get(rec, "majority_correct", bool),
                confusion_counts=counts,
            )
        )
    return out


def save_log(path, entries: Iterable[dict]) -> None:
    write_jsonl(path, entries)


def load_log(path) -> list[dict]:
    return [rec for _, rec in iter_jsonl(path)]


def save_checkpoint(params: ModelParams, run_dir, name: str) -> Path:
    """Write ``<run_dir>/<name>/params.json`` and return its path."""
    out = Path(run_dir) / name / "params.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(params, out)
    return out


def load_checkpoint(path) -> ModelParams:
    """Accepts a ``params.json`` file or the directory holding one."""
    path = Path(path)
    if path.is_dir():
        path = path / "params.json"
    try:
        return load_params(path)
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.lineno, "<document>", f"invalid JSON ({exc.msg})") from None
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(path, None, "params", str(exc)) from None


def load_records(path, fn: Callable[[dict, Any, int], Any]) -> list:
    return [fn(rec, path, n) for n, rec in iter_jsonl(path)]


def file_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def listdir_sorted(path) -> list[str]:
    return sorted(os.listdir(path))
